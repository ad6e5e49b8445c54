"""Command-line interface.

Subcommands: gen-corpus, train, eval, predict-slots, chat, ablate.
Exit codes: 0 success, 1 usage, 2 validation/parse, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import re
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, read_config
from .corpus import (
    MAX_IMAGES,
    DialogueRecord,
    Turn,
    generate_catalog,
    generate_corpus,
    generate_kb,
    read_catalog,
    read_corpus,
    read_kb,
    write_catalog,
    write_corpus,
    write_kb,
)
from .decoder import GenerationConfig
from .errors import InputError, NumericError, SlotgenError
from .metrics import evaluate
from .model import DialogueModel
from .report import (
    report_text,
    training_figure,
    write_ablation_report,
    write_eval_report,
    write_train_log,
)
from .slots import extract_slot_values, slot_metrics
from .text import tokenize
from .training import run_ablation, train

TRAIN_FILE = "train.dlg"
VALID_FILE = "valid.dlg"
TEST_FILE = "test.dlg"
CATALOG_FILE = "catalog.tsv"
KB_FILE = "kb.tsv"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="slotgen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-corpus", help="generate a synthetic corpus")
    gen.add_argument("--out", type=Path, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--n-train", type=int, default=500)
    gen.add_argument("--n-valid", type=int, default=100)
    gen.add_argument("--n-test", type=int, default=100)
    gen.add_argument("--catalog-size", type=int, default=200)
    gen.add_argument("--turn-pairs", type=int, default=4)
    gen.add_argument("--kb-rate", type=float, default=0.2)
    gen.set_defaults(func=cmd_gen_corpus)

    tr = sub.add_parser("train", help="train a model")
    tr.add_argument("--config", type=Path)
    tr.add_argument("--data", type=Path, required=True)
    tr.add_argument("--out", type=Path, required=True)
    tr.add_argument("--seed", type=int)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--data", type=Path, required=True)
    ev.add_argument("--out", type=Path)
    ev.add_argument("--beam", type=int)
    ev.add_argument("--max-len", type=int)
    ev.set_defaults(func=cmd_eval)

    ps = sub.add_parser("predict-slots", help="tag the user turns of a corpus file")
    ps.add_argument("--checkpoint", type=Path, required=True)
    ps.add_argument("--data", type=Path, required=True, help="corpus file to tag")
    ps.add_argument("--catalog", type=Path, help="catalog file (defaults next to data)")
    ps.add_argument("--kb", type=Path, help="KB file (defaults next to data)")
    ps.add_argument("--out", type=Path, required=True)
    ps.set_defaults(func=cmd_predict_slots)

    ch = sub.add_parser("chat", help="interactive dialogue with a checkpoint")
    ch.add_argument("--checkpoint", type=Path, required=True)
    ch.add_argument("--data", type=Path, help="data dir holding catalog.tsv / kb.tsv")
    ch.add_argument("--beam", type=int)
    ch.add_argument("--max-len", type=int)
    ch.set_defaults(func=cmd_chat)

    ab = sub.add_parser("ablate", help="train/evaluate the SA x KB x P-GPT grid")
    ab.add_argument("--config", type=Path)
    ab.add_argument("--data", type=Path, required=True)
    ab.add_argument("--out", type=Path, required=True)
    ab.add_argument("--seeds", type=str, default="0")
    ab.set_defaults(func=cmd_ablate)

    return parser


def _load_data_dir(data: Path):
    catalog = read_catalog(data / CATALOG_FILE)
    kb = read_kb(data / KB_FILE)
    return catalog, kb


def _load_config(path: Path | None, seed: int | None) -> RunConfig:
    cfg = read_config(path) if path else RunConfig()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def cmd_gen_corpus(args) -> int:
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    catalog = generate_catalog(args.catalog_size, args.seed)
    kb = generate_kb(args.seed)
    total = args.n_train + args.n_valid + args.n_test
    records = generate_corpus(
        catalog, kb, total, args.seed, n_turn_pairs=args.turn_pairs, kb_rate=args.kb_rate
    )
    splits = {
        TRAIN_FILE: records[: args.n_train],
        VALID_FILE: records[args.n_train : args.n_train + args.n_valid],
        TEST_FILE: records[args.n_train + args.n_valid :],
    }
    for name, recs in splits.items():
        write_corpus(out / name, recs)
    write_catalog(out / CATALOG_FILE, catalog)
    write_kb(out / KB_FILE, kb)
    print(
        f"wrote {args.n_train}/{args.n_valid}/{args.n_test} dialogues, "
        f"{len(catalog)} catalog items to {out}"
    )
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.seed)
    catalog, kb = _load_data_dir(args.data)
    train_records = read_corpus(args.data / TRAIN_FILE)
    valid_records = read_corpus(args.data / VALID_FILE)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    result = train(cfg, train_records, valid_records, catalog, kb, log=print)
    save_checkpoint(out / "checkpoint.bin", result.model)
    write_train_log(out / "train_log.tsv", result.history)
    training_figure(result.history, out / "train_curves.png")
    print(f"best epoch {result.best_epoch}; checkpoint written to {out / 'checkpoint.bin'}")
    return 0


def _gencfg_from(model: DialogueModel, beam, max_len) -> GenerationConfig:
    cfg = model.cfg
    return GenerationConfig(
        max_len=max_len if max_len is not None else cfg.max_len,
        beam_width=beam if beam is not None else cfg.beam_width,
        length_norm_alpha=cfg.length_norm_alpha,
    )


def cmd_eval(args) -> int:
    catalog, kb = _load_data_dir(args.data)
    model = load_checkpoint(args.checkpoint, catalog, kb)
    records = read_corpus(args.data / TEST_FILE)
    report = evaluate(model, records, _gencfg_from(model, args.beam, args.max_len))
    print(report_text(report), end="")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        write_eval_report(args.out, report)
        print(f"report written to {args.out}")
    return 0


def cmd_predict_slots(args) -> int:
    data: Path = args.data
    catalog = read_catalog(args.catalog if args.catalog else data.parent / CATALOG_FILE)
    kb = read_kb(args.kb if args.kb else data.parent / KB_FILE)
    model = load_checkpoint(args.checkpoint, catalog, kb)
    records = read_corpus(data)
    if not records:
        raise InputError(f"no dialogues in {data}")
    args.out.mkdir(parents=True, exist_ok=True)
    pred, gold = model.predict_corpus_tags(records)
    lines = []
    i = 0
    for rec in records:
        for turn in rec.turns:
            if turn.role == "user" and turn.tags is not None:
                lines.append(
                    " ".join(f"{tok}/{tag}" for tok, tag in zip(turn.tokens, pred[i]))
                )
                i += 1
    (args.out / "slots.tags").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if gold:
        acc, f1 = slot_metrics(pred, gold)
        print(f"slot_accuracy={acc!r}")
        print(f"slot_f1={f1!r}")
    print(f"tagged {len(lines)} user turns -> {args.out / 'slots.tags'}")
    return 0


_IMG_RE = re.compile(r"\[img:([0-9,\s]+)\]\s*$")


def cmd_chat(args) -> int:
    if args.data:
        catalog, kb = _load_data_dir(args.data)
    else:
        catalog, kb = [], generate_kb(0)
    model = load_checkpoint(args.checkpoint, catalog, kb)
    gencfg = _gencfg_from(model, args.beam, args.max_len)
    turns: list[Turn] = []
    print("slotgen chat. '/reset' clears history, '/quit' exits.")
    print("attach images with a trailing [img:ID,ID] block.")
    while True:
        try:
            line = input("> ")
        except EOFError:
            print()
            return 0
        line = line.strip()
        if not line:
            continue
        if line == "/quit":
            return 0
        if line == "/reset":
            turns = []
            print("history cleared.")
            continue
        image_ids: list[int] = []
        m = _IMG_RE.search(line)
        if m:
            line = line[: m.start()].strip()
            raw_ids = [int(x) for x in m.group(1).replace(" ", "").split(",") if x]
            if len(raw_ids) > MAX_IMAGES:
                print(
                    f"error: at most {MAX_IMAGES} images per turn "
                    f"({len(raw_ids)} given); turn rejected."
                )
                continue
            for iid in raw_ids:
                if iid in model.catalog:
                    image_ids.append(iid)
                else:
                    print(f"warning: unknown image id {iid}; continuing without it.")
        tokens = tokenize(line)
        if not tokens:
            continue
        user_turn = Turn("user", tokens, image_ids, None, None)
        record = DialogueRecord(id="chat", turns=turns + [user_turn])
        pred = model.predict_turn_slots(record, len(record.turns) - 1)
        values = extract_slot_values(pred.tags, tokens)
        if values:
            slot_str = " ".join(f"{k}={'|'.join(v)}" for k, v in sorted(values.items()))
        else:
            slot_str = "(none)"
        print(f"slots: {slot_str}")
        reply = model.respond(record, gencfg)
        print(f"system: {' '.join(reply)}")
        turns = record.turns + [Turn("system", reply or ["..."], [], None, None)]


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config, None)
    catalog, kb = _load_data_dir(args.data)
    train_records = read_corpus(args.data / TRAIN_FILE)
    valid_records = read_corpus(args.data / VALID_FILE)
    test_records = read_corpus(args.data / TEST_FILE)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise InputError(f"no seeds in {args.seeds!r}")
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    cells = run_ablation(
        cfg, train_records, valid_records, test_records, catalog, kb, seeds, log=print
    )
    write_ablation_report(out, cells)
    print(f"ablation matrix ({len(cells)} cells x {len(seeds)} seeds) written to {out}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except SlotgenError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 1


if __name__ == "__main__":
    sys.exit(main())
