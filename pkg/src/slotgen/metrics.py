"""Corpus-level text generation metrics: BLEU-1..4, ROUGE-L, NIST.

Single reference per hypothesis. BLEU uses no smoothing: a zero modified
precision at any order zeroes the score.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, fields

from .errors import InputError

ROUGE_BETA = 1.2
NIST_MAX_N = 5
# NIST brevity penalty coefficient: BP = 0.5 when the length ratio is 2/3.
_NIST_BETA = math.log(0.5) / math.log(2.0 / 3.0) ** 2


def _check_aligned(hypotheses, references) -> None:
    if len(hypotheses) != len(references):
        raise InputError(
            f"{len(hypotheses)} hypotheses vs {len(references)} references"
        )
    if not hypotheses:
        raise InputError("empty evaluation corpus")


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses, references, max_n: int) -> float:
    """Corpus BLEU: geometric mean of clipped n-gram precisions times the
    brevity penalty exp(1 - r/c) when c < r."""
    _check_aligned(hypotheses, references)
    if not 1 <= max_n <= 4:
        raise InputError(f"max_n must be in 1..4, got {max_n}")
    matched = [0] * max_n
    total = [0] * max_n
    c = 0
    r = 0
    for hyp, ref in zip(hypotheses, references):
        c += len(hyp)
        r += len(ref)
        for n in range(1, max_n + 1):
            h_counts = _ngrams(hyp, n)
            r_counts = _ngrams(ref, n)
            total[n - 1] += max(len(hyp) - n + 1, 0)
            matched[n - 1] += sum(min(k, r_counts[g]) for g, k in h_counts.items())
    if any(t == 0 or m == 0 for m, t in zip(matched, total)):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / max_n
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


def _lcs_length(a, b) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(hypotheses, references) -> float:
    """Mean per-pair LCS F-measure with beta = 1.2."""
    _check_aligned(hypotheses, references)
    b2 = ROUGE_BETA**2
    scores = []
    for hyp, ref in zip(hypotheses, references):
        lcs = _lcs_length(hyp, ref)
        if lcs == 0 or not hyp or not ref:
            scores.append(0.0)
            continue
        p = lcs / len(hyp)
        r = lcs / len(ref)
        scores.append((1 + b2) * r * p / (r + b2 * p))
    return sum(scores) / len(scores)


def nist(hypotheses, references, max_n: int = NIST_MAX_N) -> float:
    """Information-weighted n-gram precision with the NIST brevity penalty.

    Information weights come from the reference corpus:
    info(g1..gn) = log2(count(g1..gn-1) / count(g1..gn)), with the total
    reference word count as the order-1 numerator. Matched n-gram
    occurrences are clipped per segment to the reference count.
    """
    _check_aligned(hypotheses, references)
    ref_counts: list[Counter] = [Counter() for _ in range(max_n + 1)]
    for ref in references:
        for n in range(1, max_n + 1):
            ref_counts[n].update(_ngrams(ref, n))
    total_words = sum(ref_counts[1].values())

    def info(gram: tuple) -> float:
        n = len(gram)
        denom = ref_counts[n][gram]
        numer = total_words if n == 1 else ref_counts[n - 1][gram[:-1]]
        return math.log2(numer / denom)

    num = [0.0] * (max_n + 1)
    den = [0] * (max_n + 1)
    c = 0
    r = 0
    for hyp, ref in zip(hypotheses, references):
        c += len(hyp)
        r += len(ref)
        for n in range(1, max_n + 1):
            h_counts = _ngrams(hyp, n)
            seg_ref = _ngrams(ref, n)
            den[n] += max(len(hyp) - n + 1, 0)
            for g, k in h_counts.items():
                hits = min(k, seg_ref[g])
                if hits:
                    num[n] += hits * info(g)
    score = sum(num[n] / den[n] for n in range(1, max_n + 1) if den[n] > 0)
    if c == 0 or r == 0:
        return 0.0
    ratio = min(c / r, 1.0)
    bp = math.exp(_NIST_BETA * math.log(ratio) ** 2)
    return score * bp


@dataclass
class EvalReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    nist: float
    slot_accuracy: float
    slot_f1: float
    n_dialogues: int
    n_pairs: int
    n_user_turns: int

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def check(self) -> None:
        for k, v in self.as_dict().items():
            if not math.isfinite(v):
                raise InputError(f"report field {k} is not finite: {v}")
        for k in ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "slot_accuracy", "slot_f1"):
            v = getattr(self, k)
            if not 0.0 <= v <= 1.0:
                raise InputError(f"report field {k} out of [0,1]: {v}")
        if self.nist < 0:
            raise InputError(f"NIST must be >= 0, got {self.nist}")


def evaluate(model, records, gencfg) -> EvalReport:
    """Decode every system turn given the gold history and score the corpus.

    `model` supplies `generate_responses(records, gencfg)` returning aligned
    (hypothesis, reference) token lists and `predict_corpus_tags(records)`
    returning aligned (predicted, gold) tag sequences.
    """
    if not records:
        raise InputError("evaluate requires a non-empty test corpus")
    hyps, refs = model.generate_responses(records, gencfg)
    pred_tags, gold_tags = model.predict_corpus_tags(records)
    from .slots import slot_metrics

    acc, f1 = slot_metrics(pred_tags, gold_tags)
    report = EvalReport(
        bleu1=bleu(hyps, refs, 1),
        bleu2=bleu(hyps, refs, 2),
        bleu3=bleu(hyps, refs, 3),
        bleu4=bleu(hyps, refs, 4),
        rouge_l=rouge_l(hyps, refs),
        nist=nist(hyps, refs),
        slot_accuracy=acc,
        slot_f1=f1,
        n_dialogues=len(records),
        n_pairs=len(hyps),
        n_user_turns=len(pred_tags),
    )
    report.check()
    return report
