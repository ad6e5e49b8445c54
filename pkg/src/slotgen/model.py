"""The joint slot-extraction + response-generation dialogue model.

One class assembles the configured variant (hred / mhred / mtrans /
multrans, with optional slot attention, KB conditioning, and the frozen
contextual provider) from the kernel primitives. Training and evaluation
run batched over padded turn/token grids; single-sequence entry points
(chat, beam search) reuse the same code with batch size 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import encoders as enc
from .autodiff import Tensor
from .config import RunConfig
from .corpus import CatalogItem, DialogueRecord, KBStore, Turn, image_feature, kb_tokens
from .decoder import (
    DecoderParams,
    GenerationConfig,
    beam_decode,
    decode_step_batch,
    project_context,
)
from .errors import InputError, NumericError, ValidationError
from .slots import N_TAGS, SlotHeadParams, SlotPrediction, predict_slots, repair_tags, tag_id, TAGS
from .text import BOS, EOS, PAD, ContextualEmbedding, Vocabulary, encode

_EVAL_CHUNK = 64


@dataclass
class _Prepared:
    """A dialogue converted to id arrays and frozen feature matrices."""

    rec: DialogueRecord
    tok_ids: list[np.ndarray]
    ctx_mats: list[np.ndarray] | None
    img_packed: np.ndarray | None
    img_seqs: list[np.ndarray] | None
    tag_ids: list[np.ndarray | None]
    kb_qe: list[tuple | None]

    @property
    def n_turns(self) -> int:
        return len(self.tok_ids)

    @property
    def n_pairs(self) -> int:
        return len(self.tok_ids) // 2


@dataclass
class _EncodedBatch:
    B: int
    N: int
    Tmax: int
    lengths: np.ndarray  # (B*N,) per-utterance token counts
    n_turns: np.ndarray  # (B,)
    tok_states: Tensor  # (B*N, Tmax, 2*d_h)
    sa_weights: Tensor | None
    sa_output: Tensor  # slot-head input (tok_states when SA is off)
    ctx_states: Tensor  # (B, N, d_h)
    kb_rows: Tensor | None  # (K, 2*d_h) encoded KB references
    kb_index: dict[tuple[int, int], int]  # (dialogue, turn) -> row in kb_rows


class DialogueModel:
    def __init__(
        self,
        cfg: RunConfig,
        vocab: Vocabulary,
        catalog: list[CatalogItem],
        kb: KBStore,
    ):
        self.cfg = cfg
        self.vocab = vocab
        self.catalog = {it.id: it for it in catalog}
        self.kb = kb
        self.provider = ContextualEmbedding(seed=cfg.seed) if cfg.use_pgpt else None
        self._dropout_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
        self.params: dict[str, Tensor] = {}
        self._build_params()

    # ------------------------------------------------------------------
    # Parameters
    # ------------------------------------------------------------------

    def _build_params(self) -> None:
        cfg = self.cfg
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
        V = len(self.vocab)
        d_h, d_e, d_enc = cfg.d_h, cfg.d_e, cfg.enc_dim

        def par(name: str, shape, fan_in) -> Tensor:
            t = ad.parameter(enc.uniform_init(rng, shape, fan_in), name=name)
            self.params[name] = t
            return t

        def zeros_par(name: str, n: int) -> Tensor:
            t = ad.parameter(np.zeros(n), name=name)
            self.params[name] = t
            return t

        def register(named: dict[str, Tensor]) -> None:
            for k, v in named.items():
                v.name = k
                self.params[k] = v

        self.embed_table = par("embed.table", (V, d_e), d_e)

        if cfg.variant in ("hred", "mhred"):
            self.utt_fwd = enc.init_gru(rng, d_enc, d_h)
            self.utt_bwd = enc.init_gru(rng, d_enc, d_h)
            register(self.utt_fwd.named("utt.fwd"))
            register(self.utt_bwd.named("utt.bwd"))
        else:
            self.trf_proj_W = par("trf.proj.W", (d_enc, 2 * d_h), d_enc)
            self.trf_proj_b = zeros_par("trf.proj.b", 2 * d_h)
            self.trf_blocks = []
            for i in range(enc.TRANSFORMER_BLOCKS):
                block = enc.init_transformer_block(rng, 2 * d_h)
                register(block.named(f"trf.b{i}"))
                self.trf_blocks.append(block)

        if cfg.variant in ("mhred", "mtrans"):
            self.img_W = par("img.W", (enc.MAX_IMAGES_PER_TURN * cfg.d_img, d_h), cfg.d_img)
            self.img_b = zeros_par("img.b", d_h)
        elif cfg.variant == "multrans":
            self.imgtrf_proj_W = par("imgtrf.proj.W", (cfg.d_img, d_h), cfg.d_img)
            self.imgtrf_proj_b = zeros_par("imgtrf.proj.b", d_h)
            self.imgtrf_blocks = []
            for i in range(enc.TRANSFORMER_BLOCKS):
                block = enc.init_transformer_block(rng, d_h)
                register(block.named(f"imgtrf.b{i}"))
                self.imgtrf_blocks.append(block)

        self.ctx_gru = enc.init_gru(rng, 3 * d_h, d_h)
        register(self.ctx_gru.named("ctx"))

        if cfg.use_kb:
            self.kb_q_gru = enc.init_gru(rng, d_enc, d_h)
            self.kb_e_gru = enc.init_gru(rng, d_enc, d_h)
            register(self.kb_q_gru.named("kb.query"))
            register(self.kb_e_gru.named("kb.entity"))

        dec_gru = enc.init_gru(rng, d_e + d_h + 2 * d_h, d_h)
        register(dec_gru.named("dec.gru"))
        self.dec = DecoderParams(
            embed_table=self.embed_table,
            gru=dec_gru,
            W_f=par("dec.W_f", (d_h, d_h), d_h),
            W_htilde=par("dec.W_htilde", (2 * d_h, d_h), 2 * d_h),
            W_S=par("dec.W_S", (d_h, V), d_h),
        )
        self.slot_head = SlotHeadParams(
            W=par("slot.W", (2 * d_h, N_TAGS), 2 * d_h),
            b=zeros_par("slot.b", N_TAGS),
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def canonicalize_f32(self) -> None:
        """Round parameters onto the 32-bit float grid used by checkpoints."""
        for p in self.params.values():
            p.data = p.data.astype(np.float32).astype(np.float64)

    def param_snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.astype(np.float32) for k, p in self.params.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        if set(snap) != set(self.params):
            raise ValidationError("parameter snapshot does not match this model")
        for k, p in self.params.items():
            p.data = snap[k].astype(np.float64)

    # ------------------------------------------------------------------
    # Data preparation
    # ------------------------------------------------------------------

    def prepare(self, records: list[DialogueRecord]) -> list[_Prepared]:
        cfg = self.cfg
        out = []
        for rec in records:
            tok_ids = [np.asarray(encode(t.tokens, self.vocab), dtype=np.intp) for t in rec.turns]
            ctx_mats = None
            if self.provider is not None:
                ctx_mats = []
                for i, t in enumerate(rec.turns):
                    prev = tok_ids[i - 1] if i > 0 else []
                    ctx_mats.append(self.provider.vectors(list(prev), list(tok_ids[i])))
            img_packed = None
            img_seqs = None
            if cfg.variant in ("mhred", "mtrans"):
                img_packed = np.zeros((len(rec.turns), enc.MAX_IMAGES_PER_TURN * cfg.d_img))
                for i, t in enumerate(rec.turns):
                    feats = self._turn_features(t)
                    img_packed[i] = enc.pack_image_features(feats, cfg.d_img)
            elif cfg.variant == "multrans":
                img_seqs = []
                for t in rec.turns:
                    feats = self._turn_features(t)
                    img_seqs.append(np.stack(feats) if feats else np.zeros((0, cfg.d_img)))
            tag_ids = []
            for t in rec.turns:
                if t.role == "user" and t.tags is not None:
                    tag_ids.append(np.asarray([tag_id(x) for x in t.tags], dtype=np.intp))
                else:
                    tag_ids.append(None)
            kb_qe = [self._prepare_kb(t) for t in rec.turns]
            out.append(_Prepared(rec, tok_ids, ctx_mats, img_packed, img_seqs, tag_ids, kb_qe))
        return out

    def _turn_features(self, turn: Turn) -> list[np.ndarray]:
        feats = []
        for iid in turn.image_ids:
            item = self.catalog.get(iid)
            if item is None:
                raise ValidationError(f"image id {iid} does not resolve to a catalog item")
            feats.append(image_feature(item, self.cfg.d_img))
        return feats

    def _prepare_kb(self, turn: Turn):
        if not self.cfg.use_kb or turn.kb_ref is None:
            return None
        q_toks, e_toks = kb_tokens(self.kb, turn.kb_ref)
        q_ids = np.asarray(encode(q_toks, self.vocab), dtype=np.intp)
        e_ids = np.asarray(encode(e_toks, self.vocab), dtype=np.intp)
        q_ctx = e_ctx = None
        if self.provider is not None:
            q_ctx = self.provider.vectors([], list(q_ids))
            e_ctx = self.provider.vectors([], list(e_ids))
        return q_ids, e_ids, q_ctx, e_ctx

    # ------------------------------------------------------------------
    # Batched encoding
    # ------------------------------------------------------------------

    def _embed_utterances(self, id_rows: list[np.ndarray], ctx_rows: list[np.ndarray] | None):
        Tmax = max(len(r) for r in id_rows)
        U = len(id_rows)
        lengths = np.asarray([len(r) for r in id_rows])
        if self.provider is not None:
            mats = np.zeros((U, Tmax, self.cfg.enc_dim))
            for i, m in enumerate(ctx_rows):
                mats[i, : len(m)] = m
            return ad.constant(mats), lengths, Tmax
        ids = np.full((U, Tmax), PAD, dtype=np.intp)
        for i, r in enumerate(id_rows):
            ids[i, : len(r)] = r
        emb = ad.take_rows(self.embed_table, ids.reshape(-1))
        return ad.reshape(emb, (U, Tmax, self.cfg.d_e)), lengths, Tmax

    def _encode_tokens(self, embeds: Tensor, lengths: np.ndarray):
        """Variant-dependent token encoder -> (token_states, finals)."""
        cfg = self.cfg
        U, Tmax, _ = embeds.shape
        if cfg.variant in ("hred", "mhred"):
            return enc.encode_utterances_batch(embeds, lengths, self.utt_fwd, self.utt_bwd)
        d = 2 * cfg.d_h
        flat = ad.reshape(embeds, (U * Tmax, cfg.enc_dim))
        x = ad.reshape(
            ad.add(ad.matmul(flat, self.trf_proj_W), self.trf_proj_b), (U, Tmax, d)
        )
        pe = enc.sinusoidal_positions(Tmax, d)
        x = ad.add(x, ad.constant(np.broadcast_to(pe, (U, Tmax, d)).copy()))
        valid = np.arange(Tmax)[None, :] < lengths[:, None]
        for block in self.trf_blocks:
            x = enc.transformer_block_batch(x, block, col_mask=valid)
        finals = enc.masked_mean_rows(x, lengths)
        return x, finals

    def _encode_images_hrm(self, prep: list[_Prepared], slot_map: list[tuple[int, int] | None]):
        """Image vectors (U, d_h) for the linear (mhred/mtrans) path."""
        cfg = self.cfg
        U = len(slot_map)
        packed = np.zeros((U, enc.MAX_IMAGES_PER_TURN * cfg.d_img))
        for u, bt in enumerate(slot_map):
            if bt is not None:
                b, t = bt
                packed[u] = prep[b].img_packed[t]
        return enc.encode_images_batch(ad.constant(packed), self.img_W, self.img_b)

    def _encode_images_trf(self, prep: list[_Prepared], slot_map: list[tuple[int, int] | None]):
        """Image vectors (U, d_h) via the image transformer (multrans)."""
        cfg = self.cfg
        U = len(slot_map)
        seqs = []
        rows = []
        for u, bt in enumerate(slot_map):
            if bt is None:
                continue
            b, t = bt
            s = prep[b].img_seqs[t]
            if len(s):
                seqs.append(s)
                rows.append(u)
        if not seqs:
            return ad.constant(np.zeros((U, cfg.d_h)))
        K = len(seqs)
        Lmax = max(len(s) for s in seqs)
        mats = np.zeros((K, Lmax, cfg.d_img))
        lens = np.zeros(K, dtype=int)
        for i, s in enumerate(seqs):
            mats[i, : len(s)] = s
            lens[i] = len(s)
        flat = ad.reshape(ad.constant(mats), (K * Lmax, cfg.d_img))
        x = ad.reshape(
            ad.add(ad.matmul(flat, self.imgtrf_proj_W), self.imgtrf_proj_b),
            (K, Lmax, cfg.d_h),
        )
        pe = enc.sinusoidal_positions(Lmax, cfg.d_h)
        x = ad.add(x, ad.constant(np.broadcast_to(pe, (K, Lmax, cfg.d_h)).copy()))
        valid = np.arange(Lmax)[None, :] < lens[:, None]
        for block in self.imgtrf_blocks:
            x = enc.transformer_block_batch(x, block, col_mask=valid)
        pooled = enc.masked_mean_rows(x, lens)
        scatter = np.zeros((U, K))
        for i, u in enumerate(rows):
            scatter[u, i] = 1.0
        return ad.matmul(ad.constant(scatter), pooled)

    def _encode_kb_rows(self, prep: list[_Prepared], training: bool):
        refs = []
        index: dict[tuple[int, int], int] = {}
        for b, d in enumerate(prep):
            for t, qe in enumerate(d.kb_qe):
                if qe is not None:
                    index[(b, t)] = len(refs)
                    refs.append(qe)
        if not refs:
            return None, index
        q_emb, q_lens, _ = self._embed_utterances(
            [r[0] for r in refs], [r[2] for r in refs] if self.provider else None
        )
        e_emb, e_lens, _ = self._embed_utterances(
            [r[1] for r in refs], [r[3] for r in refs] if self.provider else None
        )
        rows = enc.encode_kb_batch(q_emb, q_lens, e_emb, e_lens, self.kb_q_gru, self.kb_e_gru)
        return rows, index

    def encode_batch(self, prep: list[_Prepared], training: bool) -> _EncodedBatch:
        cfg = self.cfg
        B = len(prep)
        N = max(d.n_turns for d in prep)
        # Flatten to B*N utterance slots; absent turns become 1-token PAD stubs.
        id_rows: list[np.ndarray] = []
        ctx_rows: list[np.ndarray] | None = [] if self.provider else None
        slot_map: list[tuple[int, int] | None] = []
        pad_stub = np.asarray([PAD], dtype=np.intp)
        pad_ctx = np.zeros((1, cfg.enc_dim))
        for b, d in enumerate(prep):
            for t in range(N):
                if t < d.n_turns:
                    id_rows.append(d.tok_ids[t])
                    slot_map.append((b, t))
                    if ctx_rows is not None:
                        ctx_rows.append(d.ctx_mats[t])
                else:
                    id_rows.append(pad_stub)
                    slot_map.append(None)
                    if ctx_rows is not None:
                        ctx_rows.append(pad_ctx)
        embeds, lengths, Tmax = self._embed_utterances(id_rows, ctx_rows)
        tok_states, finals = self._encode_tokens(embeds, lengths)

        if cfg.use_sa:
            sa_weights, sa_output = enc.slot_attention_batch(
                tok_states,
                lengths,
                dropout_rate=cfg.dropout_sa,
                rng=self._dropout_rng,
                training=training,
            )
            if cfg.sa_pool == "mean":
                text_vec = enc.masked_mean_rows(sa_output, lengths)
            else:
                U = len(id_rows)
                flat = ad.reshape(sa_output, (U * Tmax, 2 * cfg.d_h))
                idx = np.arange(U) * Tmax + (lengths - 1)
                text_vec = ad.take_rows(flat, idx)
        else:
            # SA ablated: the slot readout keeps only the uninformed uniform
            # mixture the attention would start from, so per-token slot
            # information is gone; the context encoder falls back to the
            # utterance final state.
            sa_weights = None
            U = len(id_rows)
            mean = enc.masked_mean_rows(tok_states, lengths)
            sa_output = ad.tile_axis(
                ad.reshape(mean, (U, 1, 2 * cfg.d_h)), 1, Tmax
            )
            text_vec = finals

        if cfg.variant in ("mhred", "mtrans"):
            img_vec = self._encode_images_hrm(prep, slot_map)
        elif cfg.variant == "multrans":
            img_vec = self._encode_images_trf(prep, slot_map)
        else:
            img_vec = ad.constant(np.zeros((B * N, cfg.d_h)))

        ctx_inputs = ad.reshape(
            ad.concat([text_vec, img_vec], axis=1), (B, N, 3 * cfg.d_h)
        )
        n_turns = np.asarray([d.n_turns for d in prep])
        ctx_states = enc.encode_context_batch(ctx_inputs, n_turns, self.ctx_gru)

        kb_rows, kb_index = (None, {})
        if cfg.use_kb:
            kb_rows, kb_index = self._encode_kb_rows(prep, training)

        return _EncodedBatch(
            B=B,
            N=N,
            Tmax=Tmax,
            lengths=lengths,
            n_turns=n_turns,
            tok_states=tok_states,
            sa_weights=sa_weights,
            sa_output=sa_output,
            ctx_states=ctx_states,
            kb_rows=kb_rows,
            kb_index=kb_index,
        )

    def _kb_vectors_for(self, eb: _EncodedBatch, members: list[int], turn_idx: int) -> Tensor:
        """(len(members), 2*d_h) KB summaries for the given user-turn index."""
        d2 = 2 * self.cfg.d_h
        if eb.kb_rows is None:
            return ad.constant(np.zeros((len(members), d2)))
        K = eb.kb_rows.shape[0]
        sel = np.zeros((len(members), K))
        hit = False
        for i, b in enumerate(members):
            row = eb.kb_index.get((b, turn_idx))
            if row is not None:
                sel[i, row] = 1.0
                hit = True
        if not hit:
            return ad.constant(np.zeros((len(members), d2)))
        return ad.matmul(ad.constant(sel), eb.kb_rows)

    def _context_slice(self, eb: _EncodedBatch, members: list[int], upto: int) -> Tensor:
        """Context states rows (len(members), upto, d_h) for turns [0, upto)."""
        d_h = self.cfg.d_h
        flat = ad.reshape(eb.ctx_states, (eb.B * eb.N, d_h))
        idx = np.concatenate([np.arange(upto) + b * eb.N for b in members])
        return ad.reshape(ad.take_rows(flat, idx), (len(members), upto, d_h))

    # ------------------------------------------------------------------
    # Losses
    # ------------------------------------------------------------------

    def _generation_logits(self, prep: list[_Prepared], eb: _EncodedBatch):
        """Teacher-forced logits for every system turn, grouped by pair index.

        Returns (logit blocks, flat targets, flat pad weights).
        """
        cfg = self.cfg
        max_pairs = max(d.n_pairs for d in prep)
        blocks = []
        targets = []
        weights = []
        for g in range(max_pairs):
            members = [b for b, d in enumerate(prep) if d.n_pairs > g]
            resp = [prep[b].tok_ids[2 * g + 1] for b in members]
            L = max(len(r) for r in resp) + 1
            Bg = len(members)
            inp = np.full((Bg, L), PAD, dtype=np.intp)
            tgt = np.full((Bg, L), PAD, dtype=np.intp)
            w = np.zeros((Bg, L))
            for i, r in enumerate(resp):
                inp[i, 0] = BOS
                inp[i, 1 : len(r) + 1] = r
                tgt[i, : len(r)] = r
                tgt[i, len(r)] = EOS
                w[i, : len(r) + 1] = 1.0
            ctx = self._context_slice(eb, members, 2 * g + 1)
            ctxW = project_context(ctx, self.dec.W_f)
            kb_vec = self._kb_vectors_for(eb, members, 2 * g)
            hidden = ad.take_rows(
                ad.reshape(eb.ctx_states, (eb.B * eb.N, cfg.d_h)),
                np.asarray([b * eb.N + 2 * g for b in members]),
            )
            feed = ad.constant(np.zeros((Bg, cfg.d_h)))
            for t in range(L):
                logits, hidden, feed = decode_step_batch(
                    inp[:, t], hidden, feed, ctx, ctxW, kb_vec, self.dec
                )
                blocks.append(logits)
                targets.append(tgt[:, t])
                weights.append(w[:, t])
        return blocks, np.concatenate(targets), np.concatenate(weights)

    def generation_loss(self, prep: list[_Prepared], eb: _EncodedBatch) -> tuple[Tensor, int]:
        blocks, targets, weights = self._generation_logits(prep, eb)
        logits = ad.concat(blocks, axis=0)
        n_tokens = int(weights.sum())
        return ad.cross_entropy_rows(logits, targets, weights), n_tokens

    def _slot_rows(self, prep: list[_Prepared], eb: _EncodedBatch):
        """Indices and gold tags of every tagged user-turn token."""
        rows = []
        tags = []
        turn_rows: list[tuple[int, int]] = []  # (slot u, length) per tagged turn
        for b, d in enumerate(prep):
            for t in range(d.n_turns):
                gold = d.tag_ids[t]
                if gold is None:
                    continue
                u = b * eb.N + t
                L = len(d.tok_ids[t])
                turn_rows.append((u, L))
                rows.extend(u * eb.Tmax + pos for pos in range(L))
                tags.extend(gold)
        return np.asarray(rows, dtype=np.intp), np.asarray(tags, dtype=np.intp), turn_rows

    def _slot_logits_flat(self, eb: _EncodedBatch, rows: np.ndarray) -> Tensor:
        """Tag logits for the selected token rows, salience-scaled."""
        cfg = self.cfg
        U = eb.B * eb.N
        flat = ad.reshape(eb.sa_output, (U * eb.Tmax, 2 * cfg.d_h))
        feats = ad.take_rows(flat, rows)
        base = ad.add(ad.matmul(feats, self.slot_head.W), self.slot_head.b)
        if eb.sa_weights is not None:
            valid = (np.arange(eb.Tmax)[None, :] < eb.lengths[:, None]).astype(float)
            mask = np.repeat(valid[:, :, None], eb.Tmax, axis=2)
            masked = ad.mul(eb.sa_weights, ad.constant(mask))
            sal = ad.scale_rows(
                ad.sum_axis(masked, axis=1), ad.constant(1.0 / eb.lengths.astype(float))
            )
            sal_rows = ad.take_rows(ad.reshape(sal, (U * eb.Tmax,)), rows)
        else:
            sal_rows = ad.constant(1.0 / eb.lengths[rows // eb.Tmax].astype(float))
        return ad.scale_rows(base, ad.add_scalar(sal_rows, 1.0))

    def slot_loss(self, prep: list[_Prepared], eb: _EncodedBatch) -> tuple[Tensor, int]:
        rows, tags, _ = self._slot_rows(prep, eb)
        if len(rows) == 0:
            return ad.constant(np.asarray(0.0)), 0
        logits = self._slot_logits_flat(eb, rows)
        return ad.cross_entropy_rows(logits, tags, np.ones(len(rows))), len(rows)

    def loss_on_batch(self, prep: list[_Prepared], training: bool):
        """Joint loss: generation NLL + slot_loss_weight * tag NLL."""
        if not prep:
            raise InputError("empty batch")
        eb = self.encode_batch(prep, training=training)
        gen, n_gen = self.generation_loss(prep, eb)
        slot, n_slot = self.slot_loss(prep, eb)
        if n_slot:
            total = ad.add(gen, ad.scale(slot, self.cfg.slot_loss_weight))
        else:
            total = gen
        stats = {
            "gen_loss": float(gen.data),
            "slot_loss": float(slot.data) if n_slot else 0.0,
            "loss": float(total.data),
            "n_gen_tokens": n_gen,
            "n_slot_tokens": n_slot,
        }
        if not np.isfinite(stats["loss"]):
            raise NumericError("non-finite loss")
        return total, stats

    # ------------------------------------------------------------------
    # Decoding / evaluation
    # ------------------------------------------------------------------

    def _greedy_batch(
        self, eb: _EncodedBatch, members: list[int], turn_idx: int, max_len: int
    ) -> list[list[int]]:
        """Lock-step greedy decode of the system turn at `turn_idx`."""
        cfg = self.cfg
        Bg = len(members)
        ctx = self._context_slice(eb, members, turn_idx)
        ctxW = project_context(ctx, self.dec.W_f)
        kb_vec = self._kb_vectors_for(eb, members, turn_idx - 1)
        hidden = ad.take_rows(
            ad.reshape(eb.ctx_states, (eb.B * eb.N, cfg.d_h)),
            np.asarray([b * eb.N + turn_idx - 1 for b in members]),
        )
        feed = ad.constant(np.zeros((Bg, cfg.d_h)))
        y = np.full(Bg, BOS, dtype=np.intp)
        done = np.zeros(Bg, dtype=bool)
        outs: list[list[int]] = [[] for _ in range(Bg)]
        for _ in range(max_len):
            logits, hidden, feed = decode_step_batch(
                y, hidden, feed, ctx, ctxW, kb_vec, self.dec
            )
            y = logits.data.argmax(axis=1)
            hit_eos = y == EOS
            for i in range(Bg):
                if not done[i] and not hit_eos[i]:
                    outs[i].append(int(y[i]))
            done |= hit_eos
            if done.all():
                break
        return outs

    def _beam_single(
        self, eb: _EncodedBatch, b: int, turn_idx: int, gencfg: GenerationConfig
    ) -> list[int]:
        cfg = self.cfg
        ctx = self._context_slice(eb, [b], turn_idx)
        ctxW = project_context(ctx, self.dec.W_f)
        kb_vec = self._kb_vectors_for(eb, [b], turn_idx - 1)
        h0 = ad.take_rows(
            ad.reshape(eb.ctx_states, (eb.B * eb.N, cfg.d_h)),
            np.asarray([b * eb.N + turn_idx - 1]),
        )
        model = self

        class _Stepper:
            def start(self):
                return h0, ad.constant(np.zeros((1, cfg.d_h)))

            def step(self, y_prev, state):
                hidden, feed = state
                logits, h, f = decode_step_batch(
                    np.asarray([y_prev]), hidden, feed, ctx, ctxW, kb_vec, model.dec
                )
                probs = ad.softmax(ad.take_index(logits, 0, 0), axis=0)
                return probs.data, (h, f)

        return beam_decode(_Stepper(), gencfg)

    def generate_responses(self, records: list[DialogueRecord], gencfg: GenerationConfig):
        """Greedy/beam hypotheses for every system turn given gold history."""
        hyps: list[list[str]] = []
        refs: list[list[str]] = []
        with ad.no_grad():
            for start in range(0, len(records), _EVAL_CHUNK):
                chunk = records[start : start + _EVAL_CHUNK]
                prep = self.prepare(chunk)
                eb = self.encode_batch(prep, training=False)
                per_dialogue: dict[int, dict[int, list[int]]] = {b: {} for b in range(len(prep))}
                max_pairs = max(d.n_pairs for d in prep)
                for g in range(max_pairs):
                    members = [b for b, d in enumerate(prep) if d.n_pairs > g]
                    if gencfg.beam_width == 1:
                        outs = self._greedy_batch(eb, members, 2 * g + 1, gencfg.max_len)
                    else:
                        outs = [
                            self._beam_single(eb, b, 2 * g + 1, gencfg) for b in members
                        ]
                    for b, ids in zip(members, outs):
                        per_dialogue[b][g] = ids
                for b, d in enumerate(prep):
                    for g in range(d.n_pairs):
                        hyps.append([self.vocab.token_of(i) for i in per_dialogue[b][g]])
                        refs.append(list(d.rec.turns[2 * g + 1].tokens))
        return hyps, refs

    def predict_corpus_tags(self, records: list[DialogueRecord]):
        """Predicted vs gold tag sequences over every tagged user turn."""
        pred: list[list[str]] = []
        gold: list[list[str]] = []
        with ad.no_grad():
            for start in range(0, len(records), _EVAL_CHUNK):
                chunk = records[start : start + _EVAL_CHUNK]
                prep = self.prepare(chunk)
                eb = self.encode_batch(prep, training=False)
                rows, tags, turn_rows = self._slot_rows(prep, eb)
                if len(rows) == 0:
                    continue
                logits = self._slot_logits_flat(eb, rows)
                picks = logits.data.argmax(axis=1)
                pos = 0
                for _, L in turn_rows:
                    seq = [TAGS[int(i)] for i in picks[pos : pos + L]]
                    pred.append(repair_tags(seq))
                    gold.append([TAGS[int(i)] for i in tags[pos : pos + L]])
                    pos += L
        return pred, gold

    def predict_turn_slots(self, record: DialogueRecord, turn_idx: int) -> SlotPrediction:
        """Slot prediction for one user turn of a dialogue."""
        turn = record.turns[turn_idx]
        if turn.role != "user":
            raise InputError("slot prediction applies to user turns")
        with ad.no_grad():
            prep = self.prepare([record])[0]
            ids = [prep.tok_ids[turn_idx]]
            ctx = [prep.ctx_mats[turn_idx]] if prep.ctx_mats else None
            embeds, lengths, _ = self._embed_utterances(ids, ctx)
            tok_states, _ = self._encode_tokens(embeds, lengths)
            H = ad.take_index(tok_states, 0, 0)
            if self.cfg.use_sa:
                weights, out = enc.slot_attention(H)
            else:
                T = H.shape[0]
                weights = ad.constant(np.full((T, T), 1.0 / T))
                out = ad.matmul(weights, H)
            return predict_slots(out, weights, self.slot_head)

    def respond(self, record: DialogueRecord, gencfg: GenerationConfig) -> list[str]:
        """Generate the system reply to the final (user) turn of `record`."""
        if record.turns[-1].role != "user":
            raise InputError("respond expects a history ending in a user turn")
        with ad.no_grad():
            prep = self.prepare([record])
            eb = self.encode_batch(prep, training=False)
            turn_idx = len(record.turns)
            if gencfg.beam_width == 1:
                ids = self._greedy_batch(eb, [0], turn_idx, gencfg.max_len)[0]
            else:
                ids = self._beam_single(eb, 0, turn_idx, gencfg)
        return [self.vocab.token_of(i) for i in ids]


def teacher_forced_loss(records: list[DialogueRecord], model: DialogueModel) -> Tensor:
    """Generation NLL (mean over non-PAD gold tokens) for a dialogue batch."""
    prep = model.prepare(records)
    eb = model.encode_batch(prep, training=False)
    loss, _ = model.generation_loss(prep, eb)
    return loss
