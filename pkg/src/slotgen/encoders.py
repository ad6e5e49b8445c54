"""Encoder stacks: utterance BiGRU, image encoder, slot self-attention,
turn-level context GRU, knowledge-base encoder, and transformer blocks.

Public functions operate on single sequences and match the documented
contracts exactly; `_batch` variants process padded stacks of sequences
with masking and are used by the model for speed. Batched and single
paths are equivalence-tested against each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, InputError

MAX_IMAGES_PER_TURN = 5
TRANSFORMER_BLOCKS = 2
TRANSFORMER_HEADS = 4
_NEG_INF = -1e30


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------


@dataclass
class GruParams:
    """Update/reset/candidate weights for input dim d_in, hidden dim d_h."""

    Wz: Tensor
    Uz: Tensor
    bz: Tensor
    Wr: Tensor
    Ur: Tensor
    br: Tensor
    Wh: Tensor
    Uh: Tensor
    bh: Tensor

    @property
    def d_in(self) -> int:
        return self.Wz.shape[0]

    @property
    def d_h(self) -> int:
        return self.Wz.shape[1]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.{k}": getattr(self, k)
            for k in ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh")
        }


def init_gru(rng: np.random.Generator, d_in: int, d_h: int) -> GruParams:
    def w():
        return ad.parameter(uniform_init(rng, (d_in, d_h), d_in))

    def u():
        return ad.parameter(uniform_init(rng, (d_h, d_h), d_h))

    def b():
        return ad.parameter(np.zeros(d_h))

    return GruParams(w(), u(), b(), w(), u(), b(), w(), u(), b())


def gru_cell(x: Tensor, h_prev: Tensor, p: GruParams) -> Tensor:
    """One GRU step: z/r gates, candidate h~, output (1-z)*h + z*h~.

    Accepts a single vector or a (B, d) batch of rows.
    """
    single = x.ndim == 1
    if single:
        x = ad.reshape(x, (1, x.shape[0]))
        h_prev = ad.reshape(h_prev, (1, h_prev.shape[0]))
    if x.shape[1] != p.d_in or h_prev.shape[1] != p.d_h:
        raise DimensionError(
            f"gru_cell dims: x {x.shape}, h {h_prev.shape} vs params "
            f"({p.d_in} -> {p.d_h})"
        )
    z = ad.sigmoid(ad.add(ad.add(ad.matmul(x, p.Wz), ad.matmul(h_prev, p.Uz)), p.bz))
    r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, p.Wr), ad.matmul(h_prev, p.Ur)), p.br))
    cand = ad.tanh(
        ad.add(ad.add(ad.matmul(x, p.Wh), ad.matmul(ad.mul(r, h_prev), p.Uh)), p.bh)
    )
    h = ad.add(ad.sub(h_prev, ad.mul(z, h_prev)), ad.mul(z, cand))
    if single:
        h = ad.reshape(h, (h.shape[1],))
    return h


def gru_sequence_batch(
    embeds: Tensor, lengths: np.ndarray, p: GruParams
) -> tuple[Tensor, Tensor]:
    """Run a GRU over padded sequences (B, T, d_in).

    States at positions past a sequence's length hold the last real state.
    Returns (states (B, T, d_h), final (B, d_h)); final is the state at each
    sequence's true last token.
    """
    B, T, d_in = embeds.shape
    d_h = p.d_h
    flat = ad.reshape(embeds, (B * T, d_in))
    xz = ad.reshape(ad.matmul(flat, p.Wz), (B, T, d_h))
    xr = ad.reshape(ad.matmul(flat, p.Wr), (B, T, d_h))
    xh = ad.reshape(ad.matmul(flat, p.Wh), (B, T, d_h))
    h = ad.constant(np.zeros((B, d_h)))
    valid = np.arange(T)[None, :] < np.asarray(lengths)[:, None]
    states = []
    for t in range(T):
        z = ad.sigmoid(ad.add(ad.add(ad.take_index(xz, 1, t), ad.matmul(h, p.Uz)), p.bz))
        r = ad.sigmoid(ad.add(ad.add(ad.take_index(xr, 1, t), ad.matmul(h, p.Ur)), p.br))
        cand = ad.tanh(
            ad.add(ad.add(ad.take_index(xh, 1, t), ad.matmul(ad.mul(r, h), p.Uh)), p.bh)
        )
        h_new = ad.add(ad.sub(h, ad.mul(z, h)), ad.mul(z, cand))
        col = valid[:, t]
        if col.all():
            h = h_new
        else:
            keep = np.repeat(col[:, None].astype(float), d_h, axis=1)
            h = ad.add(
                ad.mul(h_new, ad.constant(keep)),
                ad.mul(h, ad.constant(1.0 - keep)),
            )
        states.append(h)
    return ad.stack(states, axis=1), h


def _reverse_index(lengths: np.ndarray, T: int) -> np.ndarray:
    """Flat (B*T,) gather map that reverses each sequence within its length."""
    B = len(lengths)
    idx = np.empty((B, T), dtype=np.intp)
    for b, L in enumerate(lengths):
        pos = np.arange(T)
        rev = np.where(pos < L, L - 1 - pos, pos)
        idx[b] = b * T + rev
    return idx.reshape(-1)


def encode_utterances_batch(
    embeds: Tensor, lengths: np.ndarray, fwd: GruParams, bwd: GruParams
) -> tuple[Tensor, Tensor]:
    """Bidirectional encoding of padded utterances (B, T, d_e).

    Returns per-token states (B, T, 2*d_h) and finals (B, 2*d_h) =
    [forward state at the last token; backward state at the first token].
    """
    B, T, d_e = embeds.shape
    lengths = np.asarray(lengths)
    fwd_states, fwd_final = gru_sequence_batch(embeds, lengths, fwd)
    rev = _reverse_index(lengths, T)
    flat = ad.reshape(embeds, (B * T, d_e))
    embeds_rev = ad.reshape(ad.take_rows(flat, rev), (B, T, d_e))
    bwd_states_rev, bwd_final = gru_sequence_batch(embeds_rev, lengths, bwd)
    d_h = fwd.d_h
    bwd_states = ad.reshape(
        ad.take_rows(ad.reshape(bwd_states_rev, (B * T, d_h)), rev), (B, T, d_h)
    )
    token_states = ad.concat([fwd_states, bwd_states], axis=2)
    final = ad.concat([fwd_final, bwd_final], axis=1)
    return token_states, final


def encode_utterance(embeds: Tensor, fwd: GruParams, bwd: GruParams) -> tuple[Tensor, Tensor]:
    """BiGRU over one utterance (T, d_e) -> (token states (T, 2*d_h), final)."""
    if embeds.ndim != 2 or embeds.shape[0] < 1:
        raise InputError(f"encode_utterance requires a (T>=1, d_e) matrix, got {embeds.shape}")
    T = embeds.shape[0]
    tok3, final2 = encode_utterances_batch(
        ad.reshape(embeds, (1, T, embeds.shape[1])), np.array([T]), fwd, bwd
    )
    return ad.take_index(tok3, 0, 0), ad.take_index(final2, 0, 0)


# ---------------------------------------------------------------------------
# Slot self-attention
# ---------------------------------------------------------------------------


def slot_attention(
    H: Tensor,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product self-attention with K = Q = V = H (T, d).

    Returns (weights (T, T), output (T, d)); every weight row sums to 1.
    Dropout, when enabled, applies to the output at train time only.
    """
    if H.ndim != 2 or H.shape[0] < 1:
        raise InputError(f"slot_attention requires a (T>=1, d) matrix, got {H.shape}")
    d_k = H.shape[1]
    scores = ad.scale(ad.matmul(H, ad.transpose_last(H)), 1.0 / math.sqrt(d_k))
    weights = ad.softmax(scores, axis=-1)
    out = ad.matmul(weights, H)
    if training and dropout_rate > 0.0:
        out = ad.dropout(out, dropout_rate, rng, training=True)
    return weights, out


def slot_attention_batch(
    H: Tensor,
    lengths: np.ndarray,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> tuple[Tensor, Tensor]:
    """Batched self-attention over padded rows (B, T, d) with column masking."""
    B, T, d_k = H.shape
    scores = ad.scale(ad.matmul(H, ad.transpose_last(H)), 1.0 / math.sqrt(d_k))
    valid = np.arange(T)[None, :] < np.asarray(lengths)[:, None]
    if not valid.all():
        mask = np.where(valid, 0.0, _NEG_INF)[:, None, :]
        scores = ad.add(scores, ad.constant(np.broadcast_to(mask, (B, T, T)).copy()))
    weights = ad.softmax(scores, axis=-1)
    out = ad.matmul(weights, H)
    if training and dropout_rate > 0.0:
        out = ad.dropout(out, dropout_rate, rng, training=True)
    return weights, out


def masked_mean_rows(x: Tensor, lengths: np.ndarray) -> Tensor:
    """Mean over the first `lengths[b]` rows of each (B, T, D) slice."""
    B, T, D = x.shape
    lengths = np.asarray(lengths)
    valid = (np.arange(T)[None, :] < lengths[:, None]).astype(float)
    masked = ad.mul(x, ad.constant(np.repeat(valid[:, :, None], D, axis=2)))
    summed = ad.sum_axis(masked, axis=1)
    return ad.scale_rows(summed, ad.constant(1.0 / lengths.astype(float)))


# ---------------------------------------------------------------------------
# Image encoder
# ---------------------------------------------------------------------------


def pack_image_features(features: list[np.ndarray], d_img: int) -> np.ndarray:
    """Zero-pad to exactly MAX_IMAGES_PER_TURN features and concatenate."""
    if len(features) > MAX_IMAGES_PER_TURN:
        raise InputError(
            f"a turn may carry at most {MAX_IMAGES_PER_TURN} images, got {len(features)}"
        )
    out = np.zeros(MAX_IMAGES_PER_TURN * d_img)
    for i, f in enumerate(features):
        if f.shape != (d_img,):
            raise DimensionError(f"image feature shape {f.shape} != ({d_img},)")
        out[i * d_img : (i + 1) * d_img] = f
    return out


def encode_images(features: list[np.ndarray], W_I: Tensor, b_I: Tensor) -> Tensor:
    """ReLU(W_I . concat(features padded to 5) + b_I) -> (d_h,).

    An empty list encodes to ReLU(b_I), the all-zero vector when b_I = 0.
    """
    d_img = W_I.shape[0] // MAX_IMAGES_PER_TURN
    packed = ad.constant(pack_image_features(features, d_img)[None, :])
    out = ad.relu(ad.add(ad.matmul(packed, W_I), b_I))
    return ad.take_index(out, 0, 0)


def encode_images_batch(packed: Tensor, W_I: Tensor, b_I: Tensor) -> Tensor:
    """Batched linear image encoder over pre-packed rows (B, 5*d_img)."""
    return ad.relu(ad.add(ad.matmul(packed, W_I), b_I))


# ---------------------------------------------------------------------------
# Context encoder
# ---------------------------------------------------------------------------


def encode_context(turns: list[tuple[Tensor, Tensor]], p: GruParams) -> list[Tensor]:
    """Turn-level GRU over [text_vec; image_vec] inputs, zero initial state.

    Returns the full state sequence; the decoder attends over all of it.
    """
    if not turns:
        raise InputError("encode_context requires at least one turn")
    h = ad.constant(np.zeros(p.d_h))
    states = []
    for text_vec, image_vec in turns:
        x = ad.concat([text_vec, image_vec], axis=0)
        h = gru_cell(x, h, p)
        states.append(h)
    return states


def encode_context_batch(inputs: Tensor, n_turns: np.ndarray, p: GruParams) -> Tensor:
    """Batched context GRU over padded per-turn inputs (B, N, d_in)."""
    states, _ = gru_sequence_batch(inputs, n_turns, p)
    return states


# ---------------------------------------------------------------------------
# Knowledge-base encoder
# ---------------------------------------------------------------------------


@dataclass
class KBEncoding:
    """Final states of the query/entity GRUs plus the self-attended summary."""

    query_final: Tensor
    entity_final: Tensor
    joint: Tensor
    attended: Tensor


def empty_kb_encoding(d_h: int) -> KBEncoding:
    z = ad.constant(np.zeros(d_h))
    z2 = ad.constant(np.zeros(2 * d_h))
    return KBEncoding(z, z, z2, z2)


def encode_kb(
    query_embeds: Tensor, entity_embeds: Tensor, q_gru: GruParams, e_gru: GruParams
) -> KBEncoding:
    """Encode KB query/entity token sequences and fuse them.

    Two unidirectional GRUs produce final states; joint is their
    concatenation, and self-attention over the two-row stack
    [query_final; entity_final] yields the attended 2*d_h summary fed to
    the decoder.
    """
    if query_embeds.shape[0] < 1 or entity_embeds.shape[0] < 1:
        raise InputError("encode_kb requires non-empty query and entity sequences")
    d_h = q_gru.d_h
    Lq, Le = query_embeds.shape[0], entity_embeds.shape[0]
    _, qf = gru_sequence_batch(
        ad.reshape(query_embeds, (1, Lq, query_embeds.shape[1])), np.array([Lq]), q_gru
    )
    _, ef = gru_sequence_batch(
        ad.reshape(entity_embeds, (1, Le, entity_embeds.shape[1])), np.array([Le]), e_gru
    )
    qf = ad.take_index(qf, 0, 0)
    ef = ad.take_index(ef, 0, 0)
    joint = ad.concat([qf, ef], axis=0)
    H = ad.stack([qf, ef], axis=0)
    _, out = slot_attention(H)
    attended = ad.reshape(out, (2 * d_h,))
    return KBEncoding(qf, ef, joint, attended)


def encode_kb_batch(
    q_embeds: Tensor,
    q_lens: np.ndarray,
    e_embeds: Tensor,
    e_lens: np.ndarray,
    q_gru: GruParams,
    e_gru: GruParams,
) -> Tensor:
    """Batched KB encoding -> attended rows (K, 2*d_h)."""
    K = q_embeds.shape[0]
    d_h = q_gru.d_h
    _, qf = gru_sequence_batch(q_embeds, q_lens, q_gru)
    _, ef = gru_sequence_batch(e_embeds, e_lens, e_gru)
    H = ad.stack([qf, ef], axis=1)
    _, out = slot_attention_batch(H, np.full(K, 2))
    return ad.reshape(out, (K, 2 * d_h))


# ---------------------------------------------------------------------------
# Transformer block
# ---------------------------------------------------------------------------


@dataclass
class TransformerBlockParams:
    """Pre-LN block: multi-head self-attention + position-wise FFN."""

    heads: int
    ln1_g: Tensor
    ln1_b: Tensor
    Wq: Tensor
    Wk: Tensor
    Wv: Tensor
    Wo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    ff_W1: Tensor
    ff_b1: Tensor
    ff_W2: Tensor
    ff_b2: Tensor

    @property
    def d(self) -> int:
        return self.Wq.shape[0]

    def named(self, prefix: str) -> dict[str, Tensor]:
        keys = (
            "ln1_g", "ln1_b", "Wq", "Wk", "Wv", "Wo",
            "ln2_g", "ln2_b", "ff_W1", "ff_b1", "ff_W2", "ff_b2",
        )
        return {f"{prefix}.{k}": getattr(self, k) for k in keys}


def init_transformer_block(
    rng: np.random.Generator, d: int, heads: int = TRANSFORMER_HEADS, d_ff: int | None = None
) -> TransformerBlockParams:
    if d % heads != 0:
        raise ConfigError(f"model dim {d} is not divisible by {heads} heads")
    d_ff = d_ff if d_ff is not None else 4 * d

    def proj():
        return ad.parameter(uniform_init(rng, (d, d), d))

    return TransformerBlockParams(
        heads=heads,
        ln1_g=ad.parameter(np.ones(d)),
        ln1_b=ad.parameter(np.zeros(d)),
        Wq=proj(),
        Wk=proj(),
        Wv=proj(),
        Wo=proj(),
        ln2_g=ad.parameter(np.ones(d)),
        ln2_b=ad.parameter(np.zeros(d)),
        ff_W1=ad.parameter(uniform_init(rng, (d, d_ff), d)),
        ff_b1=ad.parameter(np.zeros(d_ff)),
        ff_W2=ad.parameter(uniform_init(rng, (d_ff, d), d_ff)),
        ff_b2=ad.parameter(np.zeros(d)),
    )


def sinusoidal_positions(T: int, d: int) -> np.ndarray:
    """Standard sine/cosine position encodings (T, d)."""
    pos = np.arange(T)[:, None]
    i = np.arange(d)[None, :]
    angles = pos / np.power(10000.0, (2 * (i // 2)) / d)
    enc = np.empty((T, d))
    enc[:, 0::2] = np.sin(angles[:, 0::2])
    enc[:, 1::2] = np.cos(angles[:, 1::2])
    return enc


def transformer_block_batch(
    x: Tensor,
    p: TransformerBlockParams,
    col_mask: np.ndarray | None = None,
    return_weights: bool = False,
):
    """Apply one pre-LN transformer block to padded rows (B, T, d).

    `col_mask` (B, T) marks valid key positions; padded keys receive no
    attention mass. Returns the output, plus per-head attention weights
    (B, heads, T, T) when requested.
    """
    B, T, d = x.shape
    h = p.heads
    if d % h != 0:
        raise ConfigError(f"model dim {d} is not divisible by {h} heads")
    hd = d // h
    normed = ad.layer_norm(x, p.ln1_g, p.ln1_b)
    flat = ad.reshape(normed, (B * T, d))

    def heads_of(W):
        y = ad.reshape(ad.matmul(flat, W), (B, T, h, hd))
        return ad.reshape(ad.permute(y, (0, 2, 1, 3)), (B * h, T, hd))

    q, k, v = heads_of(p.Wq), heads_of(p.Wk), heads_of(p.Wv)
    scores = ad.scale(ad.matmul(q, ad.transpose_last(k)), 1.0 / math.sqrt(hd))
    if col_mask is not None and not col_mask.all():
        add_mask = np.where(col_mask, 0.0, _NEG_INF)[:, None, None, :]
        add_mask = np.broadcast_to(add_mask, (B, h, T, T)).reshape(B * h, T, T)
        scores = ad.add(scores, ad.constant(add_mask.copy()))
    weights = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(weights, v)
    ctx = ad.reshape(
        ad.permute(ad.reshape(ctx, (B, h, T, hd)), (0, 2, 1, 3)), (B * T, d)
    )
    attn_out = ad.reshape(ad.matmul(ctx, p.Wo), (B, T, d))
    mid = ad.add(x, attn_out)
    normed2 = ad.layer_norm(mid, p.ln2_g, p.ln2_b)
    flat2 = ad.reshape(normed2, (B * T, d))
    ff = ad.add(
        ad.matmul(ad.relu(ad.add(ad.matmul(flat2, p.ff_W1), p.ff_b1)), p.ff_W2),
        p.ff_b2,
    )
    out = ad.add(mid, ad.reshape(ff, (B, T, d)))
    if return_weights:
        return out, ad.reshape(weights, (B, h, T, T))
    return out


def transformer_block(H: Tensor, p: TransformerBlockParams, return_weights: bool = False):
    """Single-sequence block application (T, d) -> (T, d)."""
    T, d = H.shape
    x = ad.reshape(H, (1, T, d))
    if return_weights:
        out, w = transformer_block_batch(x, p, return_weights=True)
        return ad.take_index(out, 0, 0), ad.take_index(w, 0, 0)
    return ad.take_index(transformer_block_batch(x, p), 0, 0)
