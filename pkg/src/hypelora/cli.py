"""Command-line entry point: ``hypelora {train,eval,metrics,compare,make-data}``.

Exit codes: 0 success, 2 configuration or validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
from pathlib import Path

import numpy as np

from . import calib, checkpoint, hypernet
from . import config as cfgmod
from .calib import PredictionError
from .checkpoint import CheckpointError
from .data import DatasetError, load_dataset, make_synthetic_task, write_dataset
from .encoder import EncoderParams, encoder_param_names, init_random
from .lora import ConfigurationError, LoraAdapter
from .ndgrad import NumericError, Tensor
from .train import evaluate, read_history, run_training

log = logging.getLogger("hypelora")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

RESOLVED_CONFIG = "config.resolved.txt"
HISTORY_FILE = "history.jsonl"
REPORT_FILE = "report.json"
PREDICTIONS_FILE = "predictions.jsonl"
CHECKPOINT_DIR = "checkpoint"
COMPARE_METRICS = ("score", "ece", "cece", "mce", "ace", "tace", "brier")


# -- model assembly ----------------------------------------------------

def build_adapter(rc: cfgmod.RunConfig, rng: np.random.Generator):
    m = rc.model
    if rc.run.adapter == "baseline-lora":
        return LoraAdapter(m.n_layers, m.d_model, m.lora_rank, rng)
    return hypernet.init(rc.hyper, m.n_layers, m.d_model, m.lora_rank, rng)


def checkpoint_groups(encoder: EncoderParams, adapter) -> dict[str, dict[str, np.ndarray]]:
    arrays = encoder.arrays()
    groups = {
        "encoder": {k: arrays[k] for k in encoder.backbone_names()},
        "head": {k: arrays[k] for k in ("head.w", "head.b")},
        "adapter": adapter.state_arrays(),
    }
    if getattr(adapter, "fixed_a", None):
        groups["fixed_a"] = adapter.fixed_arrays()
    return groups


def save_run_checkpoint(path, rc: cfgmod.RunConfig, encoder: EncoderParams, adapter) -> Path:
    meta = {k: v for k, v in rc.flat().items() if k not in cfgmod.VOLATILE_KEYS}
    meta["adapter_mode"] = rc.adapter_mode
    return checkpoint.save_checkpoint(path, meta, checkpoint_groups(encoder, adapter))


def load_run_checkpoint(path) -> tuple[cfgmod.RunConfig, EncoderParams, object]:
    path = Path(path)
    if (path / CHECKPOINT_DIR).is_dir():
        path = path / CHECKPOINT_DIR
    meta, groups = checkpoint.load_checkpoint(path)
    meta.pop("adapter_mode", None)
    rc = cfgmod.build(meta)
    m = rc.model
    arrays = {**groups.get("encoder", {}), **groups.get("head", {})}
    missing = [k for k in encoder_param_names(m) if k not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint lacks encoder tensors: {', '.join(missing[:5])}")
    encoder = EncoderParams(m, {k: Tensor(arrays[k]) for k in encoder_param_names(m)}).freeze()
    if rc.run.adapter == "baseline-lora":
        adapter = LoraAdapter(m.n_layers, m.d_model, m.lora_rank, 0)
        adapter.load_arrays(groups.get("adapter", {}))
    else:
        adapter = hypernet.from_arrays(rc.hyper, m.n_layers, m.d_model, m.lora_rank,
                                       groups.get("adapter", {}), groups.get("fixed_a"))
    return rc, encoder, adapter


def _load_split(rc: cfgmod.RunConfig, key: str, name: str, path=None):
    path = path or getattr(rc.run, key)
    if not path:
        raise ConfigurationError(f"missing dataset path: set '{key}'")
    if not Path(path).exists():
        raise ConfigurationError(f"{key}: file not found: {path}")
    m = rc.model
    return load_dataset(path, m.n_classes, m.vocab_size, m.max_seq_len, name=name)


# -- commands ----------------------------------------------------------

def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    for flag, key in (("seed", "seed"), ("out", "out"), ("bins", "bins"), ("tace_eps", "tace_eps")):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = str(value)
    return out


def cmd_train(args) -> int:
    rc = cfgmod.resolve(args.config, _overrides(args))
    if not rc.run.out:
        raise ConfigurationError("missing output directory: set 'out' or pass --out")
    train_split = _load_split(rc, "train_data", "train")
    valid_split = _load_split(rc, "valid_data", "validation")
    out = Path(rc.run.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_CONFIG).write_text(rc.to_text())

    init_rng, train_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(rc.train.seed).spawn(2))
    encoder = init_random(rc.model, rc.run.backbone_seed)
    adapter = build_adapter(rc, init_rng)
    result = run_training(encoder, adapter, train_split, valid_split, rc.train,
                          bins=rc.run.bins, tace_eps=rc.run.tace_eps,
                          task_metric=rc.run.task_metric, history_path=out / HISTORY_FILE,
                          rng=train_rng, positive_class=rc.run.positive_class,
                          ace_top_label=rc.run.ace_top_label)
    save_run_checkpoint(out / CHECKPOINT_DIR, rc, encoder, adapter)
    result.report.save(out / REPORT_FILE)
    print(f"trained {rc.train.total_steps} steps; {rc.run.task_metric}={result.report.score:.4f} "
          f"ece={result.report.ece:.4f}; outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    rc, encoder, adapter = load_run_checkpoint(args.checkpoint)
    bins = rc.run.bins if args.bins is None else args.bins
    eps = rc.run.tace_eps if args.tace_eps is None else args.tace_eps
    split = _load_split(rc, "valid_data", "eval", args.data)
    report, preds = evaluate(encoder, adapter, split, bins, eps, rc.run.task_metric,
                             merged=not args.on_the_fly, positive_class=rc.run.positive_class,
                             ace_top_label=rc.run.ace_top_label)
    out = Path(args.out) if args.out else Path(args.checkpoint) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    calib.write_predictions(preds, out / PREDICTIONS_FILE)
    report.save(out / REPORT_FILE)
    print(f"{rc.run.task_metric}={report.score:.4f} ece={report.ece:.4f}; outputs in {out}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    preds = calib.read_predictions(args.predictions)
    bins = 10 if args.bins is None else args.bins
    eps = 0.01 if args.tace_eps is None else args.tace_eps
    if bins < 1:
        raise ConfigurationError("--bins must be at least 1")
    report = calib.full_report(preds, bins, eps, args.task_metric, args.positive_class,
                               args.ace_top_label)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        report.save(args.out)
    sys.stdout.write(report.to_json())
    return EXIT_OK


def _comparable(path: Path) -> dict[str, str]:
    cfg = path / RESOLVED_CONFIG
    if not cfg.exists():
        raise ConfigurationError(f"{path} is not a run directory (no {RESOLVED_CONFIG})")
    values = cfgmod.read_config_file(cfg)
    for key in cfgmod.VOLATILE_KEYS + ("seed",):
        values.pop(key, None)
    return values


def aggregate(runs: list[dict]) -> dict[str, dict[str, float]]:
    """Mean and sample standard deviation of each metric over final eval records."""
    out = {}
    for metric in COMPARE_METRICS:
        values = [float(r[metric]) for r in runs]
        sd = statistics.stdev(values) if len(values) > 1 else 0.0
        out[metric] = {"mean": statistics.mean(values), "std": sd}
    return out


def compare_runs(run_dirs, group_by_config: bool = False) -> list[dict]:
    groups: dict[tuple, dict] = {}
    for d in map(Path, run_dirs):
        key = tuple(sorted(_comparable(d).items()))
        hist = d / HISTORY_FILE
        if not hist.exists():
            raise ConfigurationError(f"{d}: no {HISTORY_FILE}")
        records = read_history(hist)
        if not records:
            raise ConfigurationError(f"{d}: empty eval history")
        groups.setdefault(key, {"dirs": [], "final": []})
        groups[key]["dirs"].append(str(d))
        groups[key]["final"].append(records[-1])
    if len(groups) > 1 and not group_by_config:
        raise ConfigurationError("run directories have different configurations "
                                 "(pass --group-by-config to compare them as separate rows)")
    rows = []
    for key, g in groups.items():
        values = dict(key)
        name = values.get("adapter", "?")
        if name != "baseline-lora":
            name += "/" + values.get("generation", "?")
        rows.append({"configuration": name, "task_metric": values.get("task_metric", "accuracy"),
                     "n_runs": len(g["dirs"]), "runs": g["dirs"], "metrics": aggregate(g["final"])})
    return rows


def format_table(rows: list[dict]) -> str:
    header = ["configuration", "n"] + list(COMPARE_METRICS)
    lines = [header]
    for row in rows:
        cells = [row["configuration"], str(row["n_runs"])]
        for metric in COMPARE_METRICS:
            s = row["metrics"][metric]
            cells.append(f"{s['mean']:.4f} ± {s['std']:.4f}")
        lines.append(cells)
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in lines) + "\n"


def cmd_compare(args) -> int:
    rows = compare_runs(args.run_dirs, args.group_by_config)
    sys.stdout.write(format_table(rows))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(rows, indent=2) + "\n")
    return EXIT_OK


def cmd_make_data(args) -> int:
    split = make_synthetic_task(args.task, args.n, args.seq_len, args.vocab, args.seed, name=args.split)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_dataset(split, args.out)
    print(f"wrote {len(split)} {args.task} examples to {args.out}")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hypelora", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p, train=True):
        if train:
            p.add_argument("--config", help="flat key = value config file")
            p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--bins", type=int, help="number of calibration bins (default 10)")
        p.add_argument("--tace-eps", dest="tace_eps", type=float, help="TACE threshold (default 0.01)")

    p = sub.add_parser("train", help="train an adapter and write checkpoint, history and report")
    shared(p)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    shared(p, train=False)
    p.add_argument("checkpoint", help="run directory or its checkpoint/ subdirectory")
    p.add_argument("--data", help="dataset file (default: the run's valid_data)")
    p.add_argument("--on-the-fly", action="store_true",
                   help="apply generated factors per batch instead of merging them once")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("metrics", help="calibration report for a prediction file")
    shared(p, train=False)
    p.add_argument("predictions")
    p.add_argument("--task-metric", dest="task_metric", default="accuracy", choices=calib.TASK_METRICS)
    p.add_argument("--positive-class", dest="positive_class", type=int, default=1)
    p.add_argument("--ace-top-label", dest="ace_top_label", action="store_true")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("compare", help="mean ± std of final metrics across seeded runs")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", help="also write the table as JSON")
    p.add_argument("--group-by-config", action="store_true",
                   help="one row per distinct configuration instead of requiring a single one")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("make-data", help="write a synthetic pre-tokenized dataset")
    p.add_argument("--task", default="majority", choices=("parity", "majority", "first_token"))
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seq-len", dest="seq_len", type=int, default=16)
    p.add_argument("--vocab", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, DatasetError, PredictionError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
