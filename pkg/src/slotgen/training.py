"""Training loop, joint optimisation, and the ablation grid runner."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .corpus import CatalogItem, DialogueRecord, KBStore
from .decoder import GenerationConfig
from .errors import InputError, NumericError
from .metrics import EvalReport, bleu, evaluate
from .model import DialogueModel
from .slots import slot_metrics
from .text import build_vocab


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    valid_loss: float
    valid_bleu4: float
    valid_slot_f1: float
    seconds: float


@dataclass
class TrainResult:
    model: DialogueModel
    history: list[EpochStats]
    best_epoch: int


def _corpus_tokens(records: list[DialogueRecord]):
    for rec in records:
        for turn in rec.turns:
            yield turn.tokens


def _batches(order: np.ndarray, batch: int):
    for i in range(0, len(order), batch):
        yield order[i : i + batch]


def train(
    cfg: RunConfig,
    train_records: list[DialogueRecord],
    valid_records: list[DialogueRecord],
    catalog: list[CatalogItem],
    kb: KBStore,
    log=None,
) -> TrainResult:
    """Train a model on the given corpus, keeping the best-validation weights.

    The returned model's parameters are canonicalized to the 32-bit grid so
    checkpoint round-trips reproduce inference bit-exactly.
    """
    if not train_records:
        raise InputError("training corpus is empty")
    if not valid_records:
        raise InputError("validation corpus is empty")
    vocab = build_vocab(_corpus_tokens(train_records), min_count=cfg.min_count)
    model = DialogueModel(cfg, vocab, catalog, kb)
    prepared = model.prepare(train_records)
    prepared_valid = model.prepare(valid_records)
    state = ad.AdamWState(model.params)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    gencfg = GenerationConfig(max_len=cfg.max_len, beam_width=1)

    history: list[EpochStats] = []
    best_loss = float("inf")
    best_epoch = 0
    best_snapshot = model.param_snapshot()

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.time()
        order = shuffle_rng.permutation(len(prepared))
        losses = []
        for batch_no, idx in enumerate(_batches(order, cfg.batch)):
            batch = [prepared[i] for i in idx]
            model.zero_grad()
            try:
                loss, stats = model.loss_on_batch(batch, training=True)
            except NumericError as e:
                raise NumericError(f"epoch {epoch} batch {batch_no}: {e}") from e
            ad.backward(loss)
            ad.clip_global_norm(model.params, cfg.clip_norm)
            ad.adamw_step(
                model.params, state, lr=cfg.lr, weight_decay=cfg.weight_decay
            )
            losses.append(stats["loss"])
        train_loss = float(np.mean(losses))

        with ad.no_grad():
            vstats = _valid_loss(model, prepared_valid, cfg.batch)
        hyps, refs = model.generate_responses(valid_records, gencfg)
        vbleu = bleu(hyps, refs, 4)
        pred, gold = model.predict_corpus_tags(valid_records)
        _, vf1 = slot_metrics(pred, gold)
        row = EpochStats(epoch, train_loss, vstats, vbleu, vf1, time.time() - t0)
        history.append(row)
        if log:
            log(
                f"epoch {epoch:3d}  train_loss {train_loss:.4f}  "
                f"valid_loss {vstats:.4f}  valid_bleu4 {vbleu:.4f}  "
                f"valid_slot_f1 {vf1:.4f}  ({row.seconds:.1f}s)"
            )
        if vstats < best_loss:
            best_loss = vstats
            best_epoch = epoch
            best_snapshot = model.param_snapshot()

    model.load_snapshot(best_snapshot)
    model.canonicalize_f32()
    return TrainResult(model=model, history=history, best_epoch=best_epoch)


def _valid_loss(model: DialogueModel, prepared_valid, batch: int) -> float:
    total = 0.0
    weight = 0.0
    for i in range(0, len(prepared_valid), batch):
        chunk = prepared_valid[i : i + batch]
        _, stats = model.loss_on_batch(chunk, training=False)
        total += stats["loss"] * len(chunk)
        weight += len(chunk)
    return total / weight


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

GRID = [
    (use_sa, use_kb, use_pgpt)
    for use_sa in (True, False)
    for use_kb in (True, False)
    for use_pgpt in (True, False)
]


@dataclass
class AblationCell:
    variant: str
    use_sa: bool
    use_kb: bool
    use_pgpt: bool
    seeds: list[int]
    bleu4: list[float]
    rouge_l: list[float]
    slot_accuracy: list[float]
    slot_f1: list[float]

    def label(self) -> str:
        bits = [self.variant.upper()]
        bits.append("+SA" if self.use_sa else "-SA")
        bits.append("+KB" if self.use_kb else "-KB")
        bits.append("+PGPT" if self.use_pgpt else "-PGPT")
        return " ".join(bits)

    def mean_std(self, metric: str) -> tuple[float, float]:
        vals = np.asarray(getattr(self, metric))
        return float(vals.mean()), float(vals.std())


def run_ablation(
    base_cfg: RunConfig,
    train_records: list[DialogueRecord],
    valid_records: list[DialogueRecord],
    test_records: list[DialogueRecord],
    catalog: list[CatalogItem],
    kb: KBStore,
    seeds: list[int],
    log=None,
    cells=None,
) -> list[AblationCell]:
    """Train and evaluate the 2x2x2 (SA, KB, P-GPT) grid for each seed."""
    if not seeds:
        raise InputError("ablation requires at least one seed")
    results = []
    grid = cells if cells is not None else GRID
    for use_sa, use_kb, use_pgpt in grid:
        cell = AblationCell(
            variant=base_cfg.variant,
            use_sa=use_sa,
            use_kb=use_kb,
            use_pgpt=use_pgpt,
            seeds=list(seeds),
            bleu4=[],
            rouge_l=[],
            slot_accuracy=[],
            slot_f1=[],
        )
        for seed in seeds:
            cfg = replace(
                base_cfg, use_sa=use_sa, use_kb=use_kb, use_pgpt=use_pgpt, seed=seed
            )
            result = train(cfg, train_records, valid_records, catalog, kb)
            report = evaluate(result.model, test_records, cfg.gencfg())
            cell.bleu4.append(report.bleu4)
            cell.rouge_l.append(report.rouge_l)
            cell.slot_accuracy.append(report.slot_accuracy)
            cell.slot_f1.append(report.slot_f1)
            if log:
                log(
                    f"{cell.label()} seed {seed}: bleu4 {report.bleu4:.4f} "
                    f"rouge_l {report.rouge_l:.4f} slot_f1 {report.slot_f1:.4f}"
                )
        results.append(cell)
    return results
