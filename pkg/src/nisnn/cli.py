"""``nisnn`` command line.

Exit codes: 0 success, 1 property failure, 2 configuration error (including a
missing checkpoint or dataset), 3 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig, build_config, load_config, parse_override
from .data import Dataset, load_dataset, loso_splits, save_dataset, segment, synth_generate, import_csv
from .errors import CheckpointError, ConfigError, ContractError, IngestError, NisnnError
from .model import build_cnn, build_snn, load_model
from .profiler import measure_spike_rates, profile_static, render_report
from .tensor import Tensor
from .train import evaluate, run_loso
from .verify import SUITES, render_checks, run_suites

EXIT_OK, EXIT_PROPERTY, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3

log = logging.getLogger("nisnn")


# -- helpers ----------------------------------------------------------------------


def _run_config(args) -> RunConfig:
    overrides = dict(parse_override(o) for o in (getattr(args, "set", None) or []))
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = args.seed
    if getattr(args, "out", None) is not None:
        overrides["out"] = str(Path(args.out).resolve())
    if getattr(args, "dataset", None) is not None:
        overrides["dataset"] = str(Path(args.dataset).resolve())
    if args.config is None:
        return build_config({}, overrides)
    return load_config(args.config, overrides)


def _dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset is None:
        raise ConfigError("dataset: no dataset path given (config key 'dataset' or --dataset)")
    if not (cfg.dataset / "manifest.json").is_file():
        raise ConfigError(f"dataset: no manifest.json under {cfg.dataset}")
    return load_dataset(cfg.dataset)


def _checkpoint(path):
    if path is None:
        raise ConfigError("--checkpoint is required")
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return load_model(path)


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(v) -> str:
    return repr(float(np.float32(v)))


# -- verbs ------------------------------------------------------------------------


def cmd_verify(args) -> int:
    names = args.suite or None
    for name in names or []:
        if name not in SUITES:
            raise ConfigError(f"--suite: unknown suite {name!r}; choose from {sorted(SUITES)}")
    checks = run_suites(names, args.dataset)
    sys.stdout.write(render_checks(checks))
    return EXIT_OK if all(c.passed for c in checks) else EXIT_PROPERTY


def cmd_train(args) -> int:
    cfg = _run_config(args)
    ds = _dataset(cfg)
    subjects = None if args.split in (None, "all") else [args.split]
    if subjects and subjects[0] not in ds.manifest.subjects:
        raise ConfigError(f"--split: unknown subject {args.split!r}; dataset has {ds.manifest.subjects}")
    summary = run_loso(cfg.network, ds, cfg.train, cfg.out, subjects, args.workers)
    for subject, acc in summary["accuracy"].items():
        print(f"{subject}  accuracy {acc:.4f}")
    print(f"mean accuracy {summary['mean_accuracy']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _, _ = _checkpoint(args.checkpoint)
    cfg = _run_config(args)
    ds = _dataset(cfg)
    if args.split in (None, "all"):
        idx = list(range(len(ds.manifest.trials)))
    else:
        plans = {p.held_out: p for p in loso_splits(ds.manifest)}
        if args.split not in plans:
            raise ConfigError(f"--split: unknown subject {args.split!r}")
        idx = list(plans[args.split].test)
    result = evaluate(model, ds, idx, cfg.train.batch_size)
    print(json.dumps({"accuracy": result.accuracy, "confusion": result.confusion, "trials": result.total}, sort_keys=True))
    return EXIT_OK


def cmd_profile(args) -> int:
    cfg = _run_config(args)
    if args.checkpoint is not None:
        model, _, _ = _checkpoint(args.checkpoint)
    else:
        model = build_snn(cfg.network) if cfg.network.family == "snn" else build_cnn(cfg.network)
    report = profile_static(model)
    if args.checkpoint is not None and cfg.dataset is not None and model.family == "snn":
        ds = _dataset(cfg)
        bs = cfg.train.batch_size
        batches = (segment(ds.signals[i : i + bs], model.spec.pieces, model.spec.steps) for i in range(0, len(ds.labels), bs))
        report = measure_spike_rates(model, batches)
    sys.stdout.write(render_report(report, "table"))
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "profile.jsonl").write_text(render_report(report, "json-lines"), encoding="utf-8")
        (out / "profile.txt").write_text(render_report(report, "table"), encoding="utf-8")
    return EXIT_OK


ATTENTION_AXES = {
    "linear-seq": ("head", "query_piece", "key_piece"),
    "conv-seq": ("query_piece", "key_piece"),
    "linear-chanseq": ("channel", "head", "query_piece", "key_piece"),
    "conv-chanseq": ("channel", "query_piece", "key_piece"),
    "global": ("channel", "piece", "step"),
}


def export_attention(model, dataset: Dataset, index: int, out: Path) -> dict[str, Path]:
    """Write the four CSV files for one trial; returns their paths."""
    if model.attention is None:
        raise ConfigError("checkpoint has no attention module to export")
    spec = model.spec
    out.mkdir(parents=True, exist_ok=True)
    signal = dataset.signals[index]
    x = segment(signal[None], spec.pieces, spec.steps)
    model.eval()
    with T.no_grad():
        model(Tensor(x), keep_trace=True)
    paths = {name: out / f"{name}.csv" for name in ("signal", "raster", "attention", "channel_mean")}

    C, D = signal.shape
    _write_csv(paths["signal"], [f"s{j}" for j in range(D)], ([_fmt(v) for v in row] for row in signal))

    enc = model.trace["encoder"][0]  # C, S, T after the first neuron (or ReLU) layer
    _write_csv(
        paths["raster"],
        ("channel", "piece", "step", "value"),
        ((c, s, t, _fmt(enc[c, s, t])) for c in range(enc.shape[0]) for s in range(enc.shape[1]) for t in range(enc.shape[2])),
    )

    scores = model.trace["attention"][0]
    if scores.min() < 0 or scores.max() > 1:
        raise ContractError("attention scores left [0, 1]")
    axes = ATTENTION_AXES[spec.attention]
    _write_csv(paths["attention"], axes + ("score",), (tuple(map(int, ix)) + (_fmt(scores[ix]),) for ix in np.ndindex(scores.shape)))

    _write_csv(paths["channel_mean"], ("sample", "value"), ((j, _fmt(v)) for j, v in enumerate(signal.mean(axis=0))))
    return paths


def cmd_export_attention(args) -> int:
    model, _, _ = _checkpoint(args.checkpoint)
    cfg = _run_config(args)
    ds = _dataset(cfg)
    if args.trial is None:
        raise ConfigError("--trial is required")
    try:
        index = ds.index_of(args.trial)
    except ContractError as exc:
        raise ConfigError(f"--trial: {exc}") from None
    out = Path(args.out) if args.out else cfg.out / "attention" / ds.manifest.trials[index].key
    paths = export_attention(model, ds, index, out)
    for p in paths.values():
        print(p)
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.out is None:
        raise ConfigError("--out is required")
    ds = synth_generate(
        args.seed if args.seed is not None else 0,
        n_subjects=args.subjects,
        trials_per_subject=args.trials,
        channels=args.channels,
        samples=args.samples,
        difficulty=args.difficulty,
    )
    root = save_dataset(args.out, ds)
    m = ds.manifest
    print(f"wrote {len(m.trials)} trials ({len(m.subjects)} subjects, C={m.channels}, D={m.samples}) to {root}")
    print(f"window {m.extra['window']}, active channels {m.extra['active_channels']}")
    return EXIT_OK


def cmd_import(args) -> int:
    if args.src is None or args.out is None:
        raise ConfigError("--src and --out are required")
    m = import_csv(args.src, args.out)
    print(f"imported {len(m.trials)} trials ({len(m.subjects)} subjects, C={m.channels}, D={m.samples}) into {args.out}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nisnn", description="Non-iterative spiking networks with attention.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="YAML run configuration")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. network.attention=global")
            p.add_argument("--dataset", help="dataset directory (overrides the config)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")

    p = sub.add_parser("verify", help="run the invariant suites")
    p.add_argument("--suite", action="append", help=f"one of {', '.join(SUITES)}; repeatable")
    p.add_argument("--dataset", help="dataset directory checked by the data suite")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("train", help="leave-one-subject-out training")
    common(p)
    p.add_argument("--split", default="all", help="held-out subject id or 'all'")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="all")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", help="FLOPs and energy report")
    common(p)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("export-attention", help="CSV export of one trial's attention")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--trial", help="trial id or <subject>_<trial> key")
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    common(p, config=False)
    p.add_argument("--subjects", type=int, default=3)
    p.add_argument("--trials", type=int, default=60)
    p.add_argument("--channels", type=int, default=20)
    p.add_argument("--samples", type=int, default=400)
    p.add_argument("--difficulty", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("import", help="import a CSV dataset")
    p.add_argument("--src")
    p.add_argument("--out")
    p.set_defaults(func=cmd_import)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NisnnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROPERTY


if __name__ == "__main__":
    sys.exit(main())
