"""Command line front-end: ``gen-data``, ``partition``, ``run``, ``report``.

Failures print one line ``error[<kind>]: <message>`` on stderr and exit with
status 2 (configuration) or 1 (anything else).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import yaml

from fedzsl.config import ConfigError, apply_overrides, config_from_dict, load_config, read_config_file
from fedzsl.data import (
    DataError,
    SyntheticSpec,
    generate_synthetic,
    write_attribute_table,
    write_feature_set,
    write_split,
)
from fedzsl.evaluation import read_metrics_csv
from fedzsl.glasso import GlassoError

DATA_FILES = {
    "attributes": "attributes.csv",
    "split": "split.csv",
    "train": "train.csv",
    "test_seen": "test_seen.csv",
    "test_unseen": "test_unseen.csv",
}


def cmd_gen_data(args: argparse.Namespace) -> int:
    raw = read_config_file(args.spec) if args.spec else {}
    if "dataset" in raw or "config" in raw:
        cfg = config_from_dict(apply_overrides(raw, []))
        if cfg.dataset.synthetic is None:
            raise ConfigError("dataset: gen-data needs a synthetic block")
        base = {k: v for k, v in vars(cfg.dataset.synthetic).items()}
    else:
        base = dict(raw)
    fields = apply_overrides(base, args.set)
    try:
        spec = SyntheticSpec(**fields)
    except TypeError as exc:
        raise ConfigError(f"synthetic spec: {exc}") from None
    ds = generate_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_attribute_table(ds.table, out / DATA_FILES["attributes"])
    write_split(ds.split, out / DATA_FILES["split"])
    write_feature_set(ds.train, out / DATA_FILES["train"])
    write_feature_set(ds.test_seen, out / DATA_FILES["test_seen"])
    write_feature_set(ds.test_unseen, out / DATA_FILES["test_unseen"])
    snippet = {"dataset": {"files": dict(DATA_FILES)}}
    (out / "dataset.yaml").write_text(yaml.safe_dump(snippet, sort_keys=False), encoding="utf-8")
    print(f"wrote {len(ds.train)} train / {len(ds.test_seen)} + {len(ds.test_unseen)} test samples to {out}")
    return 0


def cmd_partition(args: argparse.Namespace) -> int:
    from fedzsl.experiment import build_partition, load_dataset

    cfg = load_config(args.config, args.set)
    table, split, train, _, _ = load_dataset(cfg)
    split.check(table)
    plan = build_partition(cfg, train, split)
    for k, a in enumerate(plan.assignments):
        print(f"{k}: {' '.join(str(c) for c in a.classes)}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    from fedzsl.experiment import run_experiment

    cfg = load_config(args.config, args.set)
    res = run_experiment(cfg, output_dir=args.out, threads=args.threads)
    final = res.global_reports()[-1] if res.global_reports() else None
    if final is not None:
        print(f"round {final.round}: acc_zsl={final.acc_zsl:.4f} acc_h={final.acc_h:.4f}")
    print(f"outputs in {res.output_dir}")
    return 0


def _summary(path: str) -> list[str]:
    rows = [r for r in read_metrics_csv(path) if r["scope"] == "global"]
    if not rows:
        raise ValueError(f"{path}: no rows")
    last = rows[-1]
    cells = [path, str(last["round"])]
    for col in ("acc_zsl", "acc_h"):
        v = last[col]
        cells.append("-" if v is None else f"{v:.4f}")
        scored = [r for r in rows if r[col] is not None]
        if scored:
            best = max(scored, key=lambda r: (r[col], -r["round"]))
            cells.append(f"{best[col]:.4f}@{best['round']}")
        else:
            cells.append("-")
    return cells


def _plot(paths: Sequence[str], out: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for p in paths:
        rows = [r for r in read_metrics_csv(p) if r["scope"] == "global"]
        for col, style in (("acc_zsl", "-"), ("acc_h", "--")):
            pts = [(r["round"], r[col]) for r in rows if r[col] is not None]
            if pts:
                ax.plot(*zip(*pts), style, label=f"{Path(p).parent.name or p} {col}")
    ax.set_xlabel("round")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)


def cmd_report(args: argparse.Namespace) -> int:
    header = ["run", "round", "acc_zsl", "best_zsl", "acc_h", "best_h"]
    table = [header] + [_summary(p) for p in args.csv]
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    for row in table:
        print("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    if args.plot:
        _plot(args.csv, args.plot)
        print(f"plot written to {args.plot}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedzsl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def overrides(p: argparse.ArgumentParser) -> None:
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a scalar field")

    p = sub.add_parser("gen-data", help="write a synthetic dataset as CSV files")
    p.add_argument("spec", nargs="?", help="YAML with synthetic spec fields (or a run config)")
    p.add_argument("--out", required=True, help="output directory")
    overrides(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("partition", help="preview client class assignments")
    p.add_argument("config", nargs="?", help="run config (defaults if omitted)")
    overrides(p)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("run", help="run a federated experiment")
    p.add_argument("config", nargs="?", help="run config or manifest (defaults if omitted)")
    p.add_argument("--out", help="output directory (beats FEDZSL_OUTPUT_DIR and the config)")
    p.add_argument("--threads", type=int, default=1, help="parallel clients per round")
    overrides(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="summarise metrics CSVs")
    p.add_argument("csv", nargs="+", help="metrics.csv files")
    p.add_argument("--plot", help="write a learning-curve image to this path")
    p.set_defaults(func=cmd_report)
    return parser


def _kind(exc: BaseException) -> tuple[str, int]:
    if isinstance(exc, ConfigError):
        return "config", 2
    if isinstance(exc, GlassoError):
        return "solver", 1
    if isinstance(exc, DataError):
        return "data", 1
    if isinstance(exc, OSError):
        return "io", 1
    return "run", 1


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be at least 1")
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError, FloatingPointError) as exc:
        kind, code = _kind(exc)
        msg = " ".join(str(exc).split()) or type(exc).__name__
        if isinstance(exc, OSError) and exc.filename is not None and str(exc.filename) not in msg:
            msg = f"{exc.filename}: {msg}"
        print(f"error[{kind}]: {msg}", file=sys.stderr)
        return code
