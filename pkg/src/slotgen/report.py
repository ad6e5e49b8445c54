"""Report rendering: aligned text, machine-readable key=value and TSV
blocks, and matplotlib figures written next to them."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ParseError
from .metrics import EvalReport
from .training import AblationCell, EpochStats

_METRIC_KEYS = ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "nist", "slot_accuracy", "slot_f1")


def report_text(report: EvalReport) -> str:
    rows = list(report.as_dict().items())
    width = max(len(k) for k, _ in rows)
    lines = ["metric".ljust(width) + "  value", "-" * (width + 10)]
    for k, v in rows:
        if isinstance(v, float):
            lines.append(f"{k.ljust(width)}  {v:.6f}")
        else:
            lines.append(f"{k.ljust(width)}  {v}")
    return "\n".join(lines) + "\n"


def report_kv(report: EvalReport) -> str:
    return "".join(f"{k}={v!r}\n" for k, v in report.as_dict().items())


def parse_kv(text: str) -> dict[str, float]:
    out: dict[str, float] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ParseError(f"expected key=value, got {line!r}", lineno)
        out[key.strip()] = float(value)
    return out


def write_eval_report(out_dir, report: EvalReport) -> None:
    (out_dir / "report.txt").write_text(report_text(report), encoding="utf-8")
    (out_dir / "report.kv").write_text(report_kv(report), encoding="utf-8")
    eval_figure(report, out_dir / "report.png")


def eval_figure(report: EvalReport, path) -> None:
    fig, (left, right) = plt.subplots(1, 2, figsize=(9, 3.5))
    keys = ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "slot_accuracy", "slot_f1")
    vals = [getattr(report, k) for k in keys]
    left.bar(range(len(keys)), vals, color="steelblue")
    left.set_xticks(range(len(keys)))
    left.set_xticklabels(keys, rotation=45, ha="right", fontsize=8)
    left.set_ylim(0, 1.05)
    left.set_title("unit-interval metrics")
    right.bar([0], [report.nist], color="darkorange")
    right.set_xticks([0])
    right.set_xticklabels(["nist"])
    right.set_title("NIST")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_train_log(path, history: list[EpochStats]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch\ttrain_loss\tvalid_loss\tvalid_bleu4\tvalid_slot_f1\tseconds\n")
        for row in history:
            fh.write(
                f"{row.epoch}\t{row.train_loss!r}\t{row.valid_loss!r}"
                f"\t{row.valid_bleu4!r}\t{row.valid_slot_f1!r}\t{row.seconds:.2f}\n"
            )


def training_figure(history: list[EpochStats], path) -> None:
    epochs = [r.epoch for r in history]
    fig, (left, right) = plt.subplots(1, 2, figsize=(9, 3.5))
    left.plot(epochs, [r.train_loss for r in history], label="train loss")
    left.plot(epochs, [r.valid_loss for r in history], label="valid loss")
    left.set_xlabel("epoch")
    left.legend()
    left.set_title("loss")
    right.plot(epochs, [r.valid_bleu4 for r in history], label="valid BLEU-4")
    right.plot(epochs, [r.valid_slot_f1 for r in history], label="valid slot F1")
    right.set_xlabel("epoch")
    right.set_ylim(0, 1.05)
    right.legend()
    right.set_title("validation quality")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


_ABLATION_METRICS = ("bleu4", "rouge_l", "slot_accuracy", "slot_f1")


def ablation_text(cells: list[AblationCell]) -> str:
    label_w = max(len(c.label()) for c in cells)
    header = "cell".ljust(label_w) + "".join(f"  {m:>22}" for m in _ABLATION_METRICS)
    lines = [header, "-" * len(header)]
    for c in cells:
        row = c.label().ljust(label_w)
        for m in _ABLATION_METRICS:
            mean, std = c.mean_std(m)
            row += f"  {mean:>13.4f} ± {std:.4f}"
        lines.append(row)
    return "\n".join(lines) + "\n"


def ablation_tsv(cells: list[AblationCell]) -> str:
    cols = ["variant", "use_sa", "use_kb", "use_pgpt", "seeds"]
    for m in _ABLATION_METRICS:
        cols += [f"{m}_mean", f"{m}_std"]
    lines = ["\t".join(cols)]
    for c in cells:
        row = [
            c.variant,
            str(c.use_sa).lower(),
            str(c.use_kb).lower(),
            str(c.use_pgpt).lower(),
            ",".join(str(s) for s in c.seeds),
        ]
        for m in _ABLATION_METRICS:
            mean, std = c.mean_std(m)
            row += [repr(mean), repr(std)]
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def ablation_figure(cells: list[AblationCell], path) -> None:
    fig, axes = plt.subplots(1, len(_ABLATION_METRICS), figsize=(16, 4), sharey=False)
    labels = [c.label().replace(" ", "\n") for c in cells]
    x = np.arange(len(cells))
    for ax, metric in zip(axes, _ABLATION_METRICS):
        means = [c.mean_std(metric)[0] for c in cells]
        stds = [c.mean_std(metric)[1] for c in cells]
        ax.bar(x, means, yerr=stds, capsize=3, color="slategray")
        ax.set_xticks(x)
        ax.set_xticklabels(labels, fontsize=6)
        ax.set_title(metric)
        ax.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_ablation_report(out_dir, cells: list[AblationCell]) -> None:
    (out_dir / "ablation.txt").write_text(ablation_text(cells), encoding="utf-8")
    (out_dir / "ablation.tsv").write_text(ablation_tsv(cells), encoding="utf-8")
    ablation_figure(cells, out_dir / "ablation.png")
