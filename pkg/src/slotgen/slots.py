"""Slot tagging head, BIO span handling, and slot-level evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InputError

SLOT_TYPES = ("color", "material", "item_type", "size", "position", "brand")

# Tag inventory: O = 0, then B-/I- per type in declaration order.
TAGS = ("O",) + tuple(f"{p}-{s}" for s in SLOT_TYPES for p in ("B", "I"))
TAG_IDS = {t: i for i, t in enumerate(TAGS)}
N_TAGS = len(TAGS)
O_TAG = 0


def tag_id(tag: str) -> int:
    return TAG_IDS[tag]


@dataclass
class SlotHeadParams:
    W: Tensor
    b: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.W": self.W, f"{prefix}.b": self.b}


@dataclass
class SlotPrediction:
    """Per-token tag distributions plus the decoded, repaired tag sequence."""

    distributions: np.ndarray  # (T, N_TAGS)
    tags: list[str]
    spans: dict[str, list[tuple[int, int]]]  # slot type -> [start, end) spans
    salience: np.ndarray  # (T,) raw attention-salience scores


def repair_tags(tags: list[str]) -> list[str]:
    """Fix dangling I- tags: an I-s without a preceding B-s/I-s becomes B-s."""
    fixed: list[str] = []
    for i, t in enumerate(tags):
        if t.startswith("I-"):
            prev = fixed[i - 1] if i > 0 else "O"
            if prev != f"B-{t[2:]}" and prev != t:
                t = "B-" + t[2:]
        fixed.append(t)
    return fixed


def spans_of(tags: list[str]) -> dict[str, list[tuple[int, int]]]:
    """Contiguous B-s (I-s)* spans as half-open index ranges, in order."""
    out: dict[str, list[tuple[int, int]]] = {}
    i = 0
    while i < len(tags):
        t = tags[i]
        if t.startswith("B-"):
            s = t[2:]
            j = i + 1
            while j < len(tags) and tags[j] == f"I-{s}":
                j += 1
            out.setdefault(s, []).append((i, j))
            i = j
        else:
            i += 1
    return out


def slot_logits(
    sa_output: Tensor, sa_weights: Tensor, head: SlotHeadParams
) -> tuple[Tensor, Tensor]:
    """Token tag logits (W . sa_output_t + b) scaled by (1 + salience_t).

    salience_t is the column mean of the attention weights at t: the mass
    every token places on t. The scaling keeps gradients flowing from the
    tag loss into the attention map. Returns (logits (T, n_tags),
    salience (T,)).
    """
    base = ad.add(ad.matmul(sa_output, head.W), head.b)
    salience = ad.mean_axis(sa_weights, axis=0)
    logits = ad.scale_rows(base, ad.add_scalar(salience, 1.0))
    return logits, salience


def predict_slots(sa_output: Tensor, sa_weights: Tensor, head: SlotHeadParams) -> SlotPrediction:
    """Decode per-token slot tags for one utterance.

    Rows of the returned distribution matrix are softmax-normalised; the tag
    sequence is per-token argmax followed by BIO repair.
    """
    if sa_output.shape[0] != sa_weights.shape[0]:
        raise InputError(
            f"sa_output rows {sa_output.shape[0]} != sa_weights rows {sa_weights.shape[0]}"
        )
    with ad.no_grad():
        logits, salience = slot_logits(sa_output, sa_weights, head)
        dists = ad.softmax(logits, axis=1)
    raw = [TAGS[int(i)] for i in dists.data.argmax(axis=1)]
    tags = repair_tags(raw)
    return SlotPrediction(
        distributions=dists.data,
        tags=tags,
        spans=spans_of(tags),
        salience=salience.data,
    )


def extract_slot_values(tags: list[str], tokens: list[str]) -> dict[str, list[str]]:
    """Join tagged spans into value strings, keyed by slot type.

    Multiple spans of one type are preserved in order of appearance.
    """
    if len(tags) != len(tokens):
        raise InputError(f"{len(tags)} tags for {len(tokens)} tokens")
    out: dict[str, list[str]] = {}
    for s, ranges in spans_of(tags).items():
        out[s] = [" ".join(tokens[a:b]) for a, b in ranges]
    return out


def slot_metrics(
    predicted: list[list[str]], gold: list[list[str]]
) -> tuple[float, float]:
    """Token-level tag accuracy and span-level micro F1.

    A span counts as correct only if its type and both boundaries match.
    """
    if len(predicted) != len(gold):
        raise InputError(f"{len(predicted)} predictions for {len(gold)} gold sequences")
    correct_tokens = 0
    total_tokens = 0
    tp = 0
    n_pred = 0
    n_gold = 0
    for p_tags, g_tags in zip(predicted, gold):
        if len(p_tags) != len(g_tags):
            raise InputError(
                f"sequence length mismatch: {len(p_tags)} predicted vs {len(g_tags)} gold"
            )
        total_tokens += len(g_tags)
        correct_tokens += sum(1 for a, b in zip(p_tags, g_tags) if a == b)
        p_spans = {(s, a, b) for s, rs in spans_of(p_tags).items() for a, b in rs}
        g_spans = {(s, a, b) for s, rs in spans_of(g_tags).items() for a, b in rs}
        tp += len(p_spans & g_spans)
        n_pred += len(p_spans)
        n_gold += len(g_spans)
    accuracy = correct_tokens / total_tokens if total_tokens else 0.0
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return accuracy, f1
