"""``slt`` command line: toygen, run, eval, report, metrics.

Exit codes::

    0  success
    2  configuration error (names the offending key)
    3  training or model error (divergence, checkpoint shape/group mismatch)
    4  I/O error (missing manifest, frames, checkpoint or input file)
    5  incomplete run directory given to ``report``
    6  data validation error (malformed manifest, mismatched metric inputs, ...)
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path

from . import plotting
from .config import RUNS_ENV, dump_resolved, load_experiment
from .corpus import SLTData, gen_toy_corpus, load_manifest
from .errors import (
    CheckpointFormatError,
    ConfigError,
    DivergenceAbort,
    IncompleteRun,
    MissingFrames,
    MissingGroup,
    ShapeMismatch,
    SLTError,
)
from .metrics import PROFILES, audit, score
from .model import ModelConfig, build_model, load_checkpoint, read_checkpoint_meta
from .trainer import METRIC_KEYS, RunRecord, model_config_for, run_seed, select_best, translate

log = logging.getLogger("sltbench")

EXIT_OK, EXIT_CONFIG, EXIT_TRAIN, EXIT_IO, EXIT_INCOMPLETE, EXIT_DATA = 0, 2, 3, 4, 5, 6
METRIC_TITLES = {"bleu1": "BLEU-1", "bleu2": "BLEU-2", "bleu3": "BLEU-3", "bleu4": "BLEU-4",
                 "rouge_l": "ROUGE-L"}


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def fmt2(x: float) -> str:
    """Two decimals, rounding half to even on the exact binary value."""
    return str(Decimal(x).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN))


def format_cell(agg) -> str:
    cell = f"{fmt2(agg.mean)} ± {fmt2(agg.std)}"
    return cell + "*" if agg.single else cell


# ---------------------------------------------------------------------------
# subcommands

def cmd_toygen(args) -> int:
    manifest = gen_toy_corpus(args.out, num_signs=args.signs, num_sentences=args.sentences,
                              min_len=args.min_len, max_len=args.max_len, seed=args.seed,
                              frames_per_sign=args.frames_per_sign, image_size=args.image_size)
    sizes = manifest.split_sizes()
    print(f"wrote {Path(args.out) / 'manifest.tsv'}: "
          + ", ".join(f"{k}={v}" for k, v in sizes.items()))
    return EXIT_OK


def cmd_run(args) -> int:
    seeds = [int(s) for s in args.seed_list.split(",")] if args.seed_list else None
    cfg = load_experiment(args.config, seed_list=seeds)
    if args.runs_dir:
        cfg.output = Path(args.runs_dir).resolve()
        cfg.raw["output"] = str(cfg.output)
    data = SLTData(load_manifest(cfg.manifest), cfg.sampling, cfg.segmentation)
    resolved = dump_resolved(cfg)
    out = cfg.output / cfg.preset
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(resolved, encoding="utf-8")
    records = [run_seed(cfg.preset, data, seed, cfg.model, cfg.plans, cfg.output, cfg.profile,
                        cfg.eval_beam, cfg.max_len, resolved, cfg.plots)
               for seed in cfg.seeds]
    for r in records:
        print(f"{cfg.preset} seed={r.seed} best_epoch={r.best_epoch} "
              + " ".join(f"{k}={r.final_test[k]:.2f}" for k in METRIC_KEYS))
    print(f"run directory: {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    meta = read_checkpoint_meta(args.checkpoint)
    manifest = load_manifest(args.manifest)
    segmentation = meta.get("tokenizer", {}).get("segmentation", "word")
    data = SLTData(manifest, segmentation=segmentation)
    config = model_config_for(data, ModelConfig.from_dict(meta["model_config"]))
    model = build_model(config)
    load_checkpoint(model, args.checkpoint)
    profile = args.profile or meta.get("metric_profile", "word")
    which = args.decoder or meta.get("decoder", "shallow")
    hyps, refs, ids = translate(model, data, args.split, args.beam, args.max_len, which)
    report = score(hyps, refs, profile)
    row = report.as_row()
    print(f"{args.split} ({len(hyps)} sentences, profile {report.profile}): "
          + "  ".join(f"{METRIC_TITLES.get(k, k)}={v:.2f}" for k, v in row.items()))
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval.csv"
    write_csv(out, ["split", "profile", "beam", *row],
              [[args.split, report.profile, args.beam, *(repr(v) for v in row.values())]])
    if args.hyps:
        write_csv(args.hyps, ["id", "hypothesis", "reference"], zip(ids, hyps, refs))
    return EXIT_OK


def load_records(run_dir) -> list[RunRecord]:
    run_dir = Path(run_dir)
    paths = sorted(run_dir.glob("*/record.json"), key=lambda p: p.parent.name)
    if not paths:
        raise IncompleteRun(f"{run_dir}: no completed run records")
    records = []
    for p in paths:
        rec = RunRecord.load(p)
        if not rec.final_test:
            raise IncompleteRun(f"{p.parent}: run record has no final test scores")
        records.append(rec)
    return records


def build_report(run_dirs, names=None):
    """Rows of (method, {metric: Aggregate}) in input order."""
    rows = []
    for i, d in enumerate(run_dirs):
        name = names[i] if names else Path(d).name
        rows.append((name, select_best(load_records(d))))
    return rows


def render_report(rows):
    """(csv header, csv rows, markdown text); per-column maxima are bold in the text."""
    metrics = [m for m in METRIC_KEYS if all(m in agg for _, agg in rows)]
    best = {m: max(agg[m].mean for _, agg in rows) for m in metrics}
    header = ["method", "seeds"]
    for m in metrics:
        header += [m, f"{m}_mean", f"{m}_std", f"{m}_best"]
    csv_rows, lines = [], []
    lines.append("| Method | Seeds | " + " | ".join(METRIC_TITLES[m] for m in metrics) + " |")
    lines.append("|---|---|" + "---|" * len(metrics))
    for name, agg in rows:
        n = agg[metrics[0]].n if metrics else 0
        row, cells = [name, n], []
        for m in metrics:
            a = agg[m]
            cell = format_cell(a)
            is_best = a.mean == best[m]
            row += [cell, repr(a.mean), repr(a.std), int(is_best)]
            cells.append(f"**{cell}**" if is_best and len(rows) > 1 else cell)
        csv_rows.append(row)
        lines.append(f"| {name} | {n} | " + " | ".join(cells) + " |")
    if any(a.single for _, agg in rows for a in agg.values()):
        lines.append("")
        lines.append("* single seed: std not estimable, reported as 0")
    return header, csv_rows, "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    names = args.names.split(",") if args.names else None
    if names and len(names) != len(args.run_dirs):
        raise ConfigError("--names needs one name per run directory")
    rows = build_report(args.run_dirs, names)
    header, csv_rows, text = render_report(rows)
    out = Path(args.out)
    write_csv(out / "report.csv", header, csv_rows)
    (out / "report.txt").write_text(text, encoding="utf-8")
    if not args.no_plots:
        plotting.plot_report(rows, out / "report_bleu4.png", "bleu4")
    sys.stdout.write(text)
    return EXIT_OK


def _read_lines(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def cmd_metrics(args) -> int:
    cands, refs = _read_lines(args.cands), _read_lines(args.refs)
    if args.audit:
        result = audit(cands, refs, args.audit.split(","), args.threshold)
        for line in result.lines():
            print(line)
        reports = result.reports
    else:
        rep = score(cands, refs, args.profile)
        print(f"{rep.profile}: " + "  ".join(f"{METRIC_TITLES.get(k, k)}={v:.2f}"
                                            for k, v in rep.as_row().items()))
        reports = {rep.profile: rep}
    if args.out:
        header = ["profile", *next(iter(reports.values())).as_row()]
        write_csv(args.out, header, [[name, *(repr(v) for v in rep.as_row().values())]
                                     for name, rep in reports.items()])
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slt", description="Sign language translation "
                                     "benchmark: toy corpora, two-stage training, evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toygen", help="generate a synthetic sign corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--signs", type=int, default=10)
    p.add_argument("--sentences", type=int, default=200)
    p.add_argument("--min-len", type=int, default=2)
    p.add_argument("--max-len", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames-per-sign", type=int, default=4)
    p.add_argument("--image-size", type=int, default=16)
    p.set_defaults(func=cmd_toygen)

    p = sub.add_parser("run", help="train a method preset for every seed")
    p.add_argument("config", help="experiment YAML (or a config.resolved)")
    p.add_argument("--seed-list", help="comma-separated seeds, e.g. 0,42,100")
    p.add_argument("--runs-dir", help=f"output root (default: config, or ${RUNS_ENV})")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="translate a split with a checkpoint and score it")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--profile", choices=sorted(PROFILES), help="default: the training profile")
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--decoder", choices=("shallow", "deep"))
    p.add_argument("--out", help="CSV path (default: eval.csv next to the checkpoint)")
    p.add_argument("--hyps", help="also write id,hypothesis,reference CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="mean ± std table over seeds, one row per run dir")
    p.add_argument("run_dirs", nargs="+", help="runs/<preset> directories")
    p.add_argument("--out", default=".", help="directory for report.csv/report.txt/plot")
    p.add_argument("--names", help="comma-separated row names (default: directory names)")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("metrics", help="score candidate/reference files or audit profiles")
    p.add_argument("--cands", required=True, help="one candidate per line")
    p.add_argument("--refs", required=True, help="one reference per line, aligned")
    p.add_argument("--profile", default="word", choices=sorted(PROFILES))
    p.add_argument("--audit", metavar="NAME,NAME,...",
                   help="score under several profiles and report pairwise deltas")
    p.add_argument("--threshold", type=float, default=0.5, help="BLEU-4 gap that is flagged")
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_metrics)
    return parser


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (DivergenceAbort, ShapeMismatch, MissingGroup, CheckpointFormatError)):
        return EXIT_TRAIN
    if isinstance(exc, IncompleteRun):
        return EXIT_INCOMPLETE
    if isinstance(exc, (MissingFrames, OSError)):
        return EXIT_IO
    if isinstance(exc, SLTError):
        return EXIT_DATA
    raise exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SLTError, OSError) as exc:
        code = exit_code(exc)
        print(f"slt {args.command}: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
