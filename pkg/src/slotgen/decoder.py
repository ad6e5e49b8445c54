"""Attention decoder with input feeding, plus greedy and beam search.

Search routines are written against a tiny stepper protocol (`start()` and
`step(y_prev, state) -> (probs, state)`) so they can be exercised on
hand-built toy models as well as the full dialogue model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import GruParams, gru_cell
from .errors import InputError
from .text import BOS, EOS


@dataclass
class GenerationConfig:
    max_len: int = 20
    beam_width: int = 1
    length_norm_alpha: float = 0.7

    def __post_init__(self):
        if self.max_len < 1:
            raise InputError(f"max_len must be >= 1, got {self.max_len}")
        if self.beam_width < 1:
            raise InputError(f"beam_width must be >= 1, got {self.beam_width}")
        if not 0.0 <= self.length_norm_alpha <= 1.0:
            raise InputError(
                f"length_norm_alpha must be in [0, 1], got {self.length_norm_alpha}"
            )


@dataclass
class DecoderState:
    hidden: Tensor
    input_feed: Tensor
    step: int = 0


@dataclass
class DecoderParams:
    """Everything one decoding step needs, bundled."""

    embed_table: Tensor
    gru: GruParams
    W_f: Tensor
    W_htilde: Tensor
    W_S: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.embed": self.embed_table}
        out.update(self.gru.named(f"{prefix}.gru"))
        out[f"{prefix}.W_f"] = self.W_f
        out[f"{prefix}.W_htilde"] = self.W_htilde
        out[f"{prefix}.W_S"] = self.W_S
        return out


@dataclass
class Hypothesis:
    tokens: list[int] = field(default_factory=lambda: [BOS])
    log_prob: float = 0.0
    finished: bool = False
    state: Any = None

    def content(self) -> list[int]:
        toks = self.tokens[1:]
        if toks and toks[-1] == EOS:
            toks = toks[:-1]
        return toks


def luong_attention(query: Tensor, context_states: Tensor, W_f: Tensor) -> tuple[Tensor, Tensor]:
    """General (bilinear) attention: alpha_m = softmax(ctx_m^T W_f q).

    query (d_h,), context_states (N, d_h) -> (alphas (N,), c (d_h,)).
    """
    if context_states.ndim != 2 or context_states.shape[0] < 1:
        raise InputError(f"attention needs (N>=1, d_h) context, got {context_states.shape}")
    d_h = query.shape[0]
    scores = ad.matmul(ad.matmul(context_states, W_f), ad.reshape(query, (d_h, 1)))
    alphas = ad.softmax(ad.reshape(scores, (context_states.shape[0],)), axis=0)
    c = ad.matmul(ad.reshape(alphas, (1, context_states.shape[0])), context_states)
    return alphas, ad.reshape(c, (d_h,))


def project_context(context_states: Tensor, W_f: Tensor) -> Tensor:
    """Precompute ctx @ W_f (B, N, d_h); loop-invariant across decode steps."""
    B, N, d_h = context_states.shape
    return ad.reshape(
        ad.matmul(ad.reshape(context_states, (B * N, d_h)), W_f), (B, N, d_h)
    )


def luong_attention_batch(
    query: Tensor, context_states: Tensor, ctxW: Tensor
) -> tuple[Tensor, Tensor]:
    """Batched attention: query (B, d_h), context_states/ctxW (B, N, d_h)."""
    B, N, d_h = context_states.shape
    scores = ad.matmul(ctxW, ad.reshape(query, (B, d_h, 1)))
    alphas = ad.softmax(ad.reshape(scores, (B, N)), axis=1)
    c = ad.matmul(ad.reshape(alphas, (B, 1, N)), context_states)
    return alphas, ad.reshape(c, (B, d_h))


def decode_step_batch(
    y_prev: np.ndarray,
    hidden: Tensor,
    input_feed: Tensor,
    context_states: Tensor,
    ctxW: Tensor,
    kb_attended: Tensor,
    params: DecoderParams,
) -> tuple[Tensor, Tensor, Tensor]:
    """One teacher-forced/decoding step over a batch.

    y_prev (B,) int ids; hidden/input_feed (B, d_h); context_states and
    ctxW (= project_context output) (B, N, d_h); kb_attended (B, 2*d_h).
    Returns (logits (B, V), new_hidden, new_input_feed).
    """
    emb = ad.take_rows(params.embed_table, np.asarray(y_prev, dtype=np.intp))
    x = ad.concat([emb, input_feed, kb_attended], axis=1)
    h = gru_cell(x, hidden, params.gru)
    _, c = luong_attention_batch(h, context_states, ctxW)
    htilde = ad.tanh(ad.matmul(ad.concat([h, c], axis=1), params.W_htilde))
    logits = ad.matmul(htilde, params.W_S)
    return logits, h, htilde


def decode_step(
    y_prev: int,
    state: DecoderState,
    context_states: Tensor,
    kb_attended: Tensor,
    params: DecoderParams,
) -> tuple[Tensor, DecoderState]:
    """Single decoding step -> (distribution over the vocabulary, new state)."""
    V = params.embed_table.shape[0]
    if not 0 <= int(y_prev) < V:
        raise InputError(f"token id {y_prev} outside vocabulary of size {V}")
    d_h = params.gru.d_h
    N = context_states.shape[0]
    ctx3 = ad.reshape(context_states, (1, N, d_h))
    logits, h, htilde = decode_step_batch(
        np.array([int(y_prev)]),
        ad.reshape(state.hidden, (1, d_h)),
        ad.reshape(state.input_feed, (1, d_h)),
        ctx3,
        project_context(ctx3, params.W_f),
        ad.reshape(kb_attended, (1, kb_attended.shape[0])),
        params,
    )
    dist = ad.softmax(ad.take_index(logits, 0, 0), axis=0)
    new_state = DecoderState(
        hidden=ad.take_index(h, 0, 0),
        input_feed=ad.take_index(htilde, 0, 0),
        step=state.step + 1,
    )
    return dist, new_state


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------


def _log_probs(probs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(probs)


def _norm_score(hyp: Hypothesis, alpha: float) -> float:
    length = max(len(hyp.tokens) - 1, 1)
    return hyp.log_prob / (length**alpha) if alpha > 0.0 else hyp.log_prob


def greedy_decode(stepper, gencfg: GenerationConfig) -> list[int]:
    """Argmax decoding; ties break toward the lowest token id.

    Returns at most max_len content tokens with BOS/EOS stripped.
    """
    state = stepper.start()
    y = BOS
    out: list[int] = []
    with ad.no_grad():
        for _ in range(gencfg.max_len):
            probs, state = stepper.step(y, state)
            y = int(np.argmax(probs))
            if y == EOS:
                break
            out.append(y)
    return out


def _greedy_hypothesis(stepper, gencfg: GenerationConfig) -> Hypothesis:
    state = stepper.start()
    hyp = Hypothesis()
    for _ in range(gencfg.max_len):
        probs, state = stepper.step(hyp.tokens[-1], state)
        y = int(np.argmax(probs))
        hyp.tokens.append(y)
        hyp.log_prob += float(_log_probs(probs)[y])
        if y == EOS:
            break
    hyp.finished = True
    return hyp


def beam_decode(stepper, gencfg: GenerationConfig) -> list[int]:
    """Beam search over summed log-probs with length normalization.

    Finished hypotheses retire to a pool ranked by log_prob / length^alpha.
    The result never scores below the greedy hypothesis under that same
    ranking (the greedy path seeds the pool), so beam_width=1 is exactly
    greedy decoding.
    """
    W = gencfg.beam_width
    alpha = gencfg.length_norm_alpha
    with ad.no_grad():
        pool: list[Hypothesis] = [_greedy_hypothesis(stepper, gencfg)]
        active = [Hypothesis(state=stepper.start())]
        for _ in range(gencfg.max_len):
            candidates: list[Hypothesis] = []
            for hyp in active:
                probs, new_state = stepper.step(hyp.tokens[-1], hyp.state)
                logp = _log_probs(probs)
                order = np.argsort(-logp, kind="stable")[:W]
                for tok in order:
                    candidates.append(
                        Hypothesis(
                            tokens=hyp.tokens + [int(tok)],
                            log_prob=hyp.log_prob + float(logp[tok]),
                            state=new_state,
                        )
                    )
            candidates.sort(key=lambda h: (-h.log_prob, h.tokens))
            active = []
            for cand in candidates[:W]:
                if cand.tokens[-1] == EOS or len(cand.tokens) - 1 >= gencfg.max_len:
                    cand.finished = True
                    cand.state = None
                    pool.append(cand)
                else:
                    active.append(cand)
            if not active:
                break
        for cand in active:
            cand.finished = True
            cand.state = None
            pool.append(cand)
    best = max(pool, key=lambda h: (_norm_score(h, alpha), [-t for t in h.tokens]))
    return best.content()
