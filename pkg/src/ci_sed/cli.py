"""Command line: gen-data, train, eval, compare, validate-oracles, grad-check.

Options come from built-in defaults, then an optional INI file (``--config``,
sections ``[data]``, ``[train]``, ``[eval]``), then command-line flags.  Every
command prints the resolved options first.  Exit status: 0 success, 1 usage
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import synthdata as sd
from .metrics import MetricsConfig, append_metrics_csv, read_metrics_csv
from .model import CheckpointError
from .trainer import EVAL_SPLITS, VARIANTS, TrainConfig, evaluate_run, load_trained, run_experiment
from .validation import backdoor_report, end_to_end_gradient, operator_gradient_suite, random_frozen_model

EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# option tables: (section, key) -> (type, default)
DATA_DEFAULTS = {
    "k": (int, 6), "frames": (int, 240), "mel_bins": (int, 64),
    "n_train": (int, 2000), "n_eval_confounded": (int, 300), "n_eval_decorrelated": (int, 300),
    "rho": (float, 0.9), "rho_base": (float, 0.1), "confounded_pair": (str, "0,1"),
    "entangled_class": (int, 2), "bg_strength": (float, 0.9), "events_max": (int, 3), "seed": (int, 0),
}
_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}
TRAIN_DEFAULTS = {
    "lam": (float, None), "lr": (float, None), "epochs": (int, None), "batch_size": (int, None),
    "optimizer": (str, None), "channels": (int, None), "widths": (str, None), "pooling": (str, None),
    "norm": (str, None), "dtype": (str, None), "seeds": (str, "0,1,2"), "variant": (str, "both"),
}
EVAL_DEFAULTS = {
    "threshold": (float, 0.5), "median_win": (int, 5), "segment_len": (int, 25), "collar": (int, 5),
}


def parse_int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in str(text).replace(" ", "").split(",") if v != ""]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from None


def _coerce(kind, value, where):
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise UsageError(f"{where}: cannot read {value!r} as {kind.__name__}") from None


def resolve(args, section: str, table: dict) -> dict:
    """defaults < config file section < explicit flags."""
    out = {key: default for key, (_, default) in table.items()}
    if getattr(args, "config", None):
        cp = configparser.ConfigParser()
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} does not exist")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise UsageError(f"config file {path}: {exc}") from None
        if cp.has_section(section):
            for key, value in cp.items(section):
                if key not in table:
                    raise UsageError(f"config file {path}: unknown key {key!r} in [{section}]")
                out[key] = _coerce(table[key][0], value, f"{path} [{section}] {key}")
    for key in table:
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
    return out


def print_config(command: str, sections: dict[str, dict]) -> None:
    print(f"# ci-sed {command}: resolved options")
    for name, values in sections.items():
        print(f"[{name}]")
        for key in sorted(values):
            print(f"{key} = {values[key]}")
    print(flush=True)


def _train_config(opts: dict) -> TrainConfig:
    kw = {k: v for k, v in opts.items() if k in _TRAIN_FIELDS and k not in ("variant", "seed") and v is not None}
    if "widths" in kw:
        kw["widths"] = tuple(parse_int_list(kw["widths"]))
        if len(kw["widths"]) != 2:
            raise UsageError(f"widths needs two integers, got {opts['widths']!r}")
    try:
        return TrainConfig(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _variants(choice: str) -> tuple[str, ...]:
    if choice == "both":
        return VARIANTS
    if choice not in VARIANTS:
        raise UsageError(f"variant must be one of baseline, ci, both; got {choice!r}")
    return (choice,)


def _metrics_config(opts: dict) -> MetricsConfig:
    return MetricsConfig(threshold=opts["threshold"], median_win=opts["median_win"],
                         segment_len=opts["segment_len"], collar=opts["collar"])


def _dataset_digest(data_dir: Path) -> str:
    return hashlib.sha256((data_dir / "dataset.json").read_bytes()).hexdigest()[:12]


def run_id_for(cfg: TrainConfig, data_dir: Path) -> str:
    return f"{cfg.fingerprint(exclude=('variant', 'seed'))}-{_dataset_digest(data_dir)}"


# commands ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    opts = resolve(args, "data", DATA_DEFAULTS)
    print_config("gen-data", {"data": {**opts, "out": args.out}})
    k = opts["k"]
    pair = tuple(parse_int_list(opts["confounded_pair"]))
    if len(pair) != 2:
        raise UsageError(f"confounded_pair needs two class ids, got {opts['confounded_pair']!r}")
    rho = sd.default_rho(k, pair, opts["rho"], opts["rho_base"])
    ent = opts["entangled_class"]
    tex = tuple(0 if j == ent else -1 for j in range(k))
    strength = tuple(opts["bg_strength"] if j == ent else 0.0 for j in range(k))
    try:
        cfg = sd.GeneratorConfig(k=k, n=opts["frames"], mel_bins=opts["mel_bins"], rho=rho, bg_texture=tex,
                                 bg_strength=strength, events_per_clip=(1, min(opts["events_max"], k)),
                                 seed=opts["seed"], confounded_pair=pair, entangled_class=ent)
    except ValueError as exc:
        raise UsageError(f"invalid generator config: {exc}") from None
    records = sd.emit_dataset(cfg, opts["n_train"], opts["n_eval_confounded"], opts["n_eval_decorrelated"], args.out)
    counts = {s: sum(r["split"] == s for r in records) for s in sd.SPLITS}
    print(f"wrote {len(records)} clips to {args.out}: " + ", ".join(f"{s}={n}" for s, n in counts.items()))
    return 0


def _prepare_run(args, cfg: TrainConfig, opts: dict) -> Path:
    data_dir = Path(args.data)
    if not (data_dir / "dataset.json").exists():
        raise FileNotFoundError(f"no dataset under {data_dir} (expected dataset.json and manifest.jsonl)")
    run_dir = Path(args.run) if args.run else Path(args.runs_dir) / run_id_for(cfg, data_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    record = {"train": {k: v for k, v in asdict(cfg).items() if k not in ("variant", "seed")},
              "data": str(data_dir), "dataset_digest": _dataset_digest(data_dir)}
    text = json.dumps(record, sort_keys=True, indent=1, default=list) + "\n"
    cfg_path = run_dir / "config"
    if cfg_path.exists() and cfg_path.read_text() != text:
        raise RuntimeError(f"{run_dir} holds a run with a different configuration; choose another --run")
    cfg_path.write_text(text)
    return run_dir


def cmd_train(args) -> int:
    opts = resolve(args, "train", TRAIN_DEFAULTS)
    eopts = resolve(args, "eval", EVAL_DEFAULTS)
    cfg = _train_config(opts)
    variants, seeds = _variants(opts["variant"]), parse_int_list(opts["seeds"])
    print_config("train", {"train": {**asdict(cfg), "variant": opts["variant"], "seeds": seeds,
                                     "data": args.data}, "eval": eopts})
    run_dir = _prepare_run(args, cfg, opts)
    print(f"run directory: {run_dir}", flush=True)
    csv_path = run_experiment(cfg, args.data, seeds, run_dir, variants, _metrics_config(eopts), args.workers)
    for v in variants:
        for s in seeds:
            print(f"checkpoint: {run_dir / 'checkpoints' / f'{v}_seed{s}.ckpt'}")
    print(f"metrics: {csv_path}")
    return 0


def cmd_eval(args) -> int:
    opts = resolve(args, "train", TRAIN_DEFAULTS)
    eopts = resolve(args, "eval", EVAL_DEFAULTS)
    variants, seeds = _variants(opts["variant"]), parse_int_list(opts["seeds"])
    print_config("eval", {"eval": {**eopts, "run": args.run, "data": args.data, "variant": opts["variant"],
                                   "seeds": seeds}})
    rows = []
    for v in variants:
        for s in seeds:
            rows += evaluate_run(args.run, args.data, v, s, _metrics_config(eopts))
    for r in rows:
        print(f"{r['model']:<9} seed {r['seed']}  {r['split']:<18} {r['metric']:<14} {r['value']:.4f}")
    if args.out:
        append_metrics_csv(args.out, rows)
        print(f"rows appended to {args.out}")
    return 0


def compare_table(rows: list[dict]) -> list[dict]:
    """mean/std per (variant, split, metric) with a ci - baseline delta of means."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r["split"], r["metric"], r["model"]), []).append(r["value"])
    out = []
    for split, metric in sorted({(s, m) for s, m, _ in groups}):
        entry = {"split": split, "metric": metric}
        for v in VARIANTS:
            vals = groups.get((split, metric, v))
            entry[v] = (float(np.mean(vals)), float(np.std(vals)), len(vals)) if vals else None
        entry["delta"] = entry["ci"][0] - entry["baseline"][0] if entry["ci"] and entry["baseline"] else None
        out.append(entry)
    return out


def cmd_compare(args) -> int:
    path = Path(args.metrics) if args.metrics else Path(args.run) / "metrics.csv"
    print_config("compare", {"compare": {"metrics": str(path)}})
    if not path.exists():
        raise FileNotFoundError(f"no metrics file at {path}")
    table = compare_table(read_metrics_csv(path))

    def fmt(cell):
        return "n/a" if cell is None else f"{cell[0]:.4f}±{cell[1]:.4f} (n={cell[2]})"

    print(f"{'split':<18} {'metric':<14} {'baseline':>24} {'ci':>24} {'delta(ci-base)':>15}")
    for e in table:
        delta = "n/a" if e["delta"] is None else f"{e['delta']:+.4f}"
        print(f"{e['split']:<18} {e['metric']:<14} {fmt(e['baseline']):>24} {fmt(e['ci']):>24} {delta:>15}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["split", "metric", "baseline_mean", "baseline_std", "ci_mean", "ci_std", "delta"])
            for e in table:
                b, c = e["baseline"] or (None, None, 0), e["ci"] or (None, None, 0)
                w.writerow([e["split"], e["metric"], b[0], b[1], c[0], c[1], e["delta"]])
    return 0


def cmd_validate_oracles(args) -> int:
    data_dir = Path(args.data)
    meta = sd.read_dataset_meta(data_dir)
    clips = sd.load_strong_split(data_dir, args.split)
    if args.limit:
        clips = clips[:args.limit]
    specs = np.stack([c.spec for c in clips])
    k, mel_bins, n = meta["generator"]["k"], specs.shape[1], specs.shape[2]
    source = "random frozen network"
    if args.run:
        model, pool, _ = load_trained(args.run, "ci", args.seed)
        if pool is None:
            raise CheckpointError("ci checkpoint carries no context pool")
        source = f"checkpoint {args.run} (ci, seed {args.seed})"
    else:
        model, pool = random_frozen_model(k, mel_bins, n, seed=args.seed)
    if args.out:
        out = Path(args.out)
    elif args.run:
        out = Path(args.run) / "oracle_validation.csv"
    else:
        out = Path(args.runs_dir) / "oracles" / _dataset_digest(data_dir) / f"seed{args.seed}.csv"
    print_config("validate-oracles", {"validate-oracles": {
        "data": str(data_dir), "split": args.split, "clips": len(clips), "source": source, "seed": args.seed,
        "mask": args.mask, "out": str(out)}})
    rep = backdoor_report(model, pool, specs, mask=args.mask)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["clip", "mean_abs_dev", "max_abs_dev", "spearman"])
        for i in range(len(clips)):
            w.writerow([i, repr(float(rep.abs_dev[i])), repr(float(rep.max_dev[i])), repr(float(rep.spearman[i]))])
    for key, value in rep.summary().items():
        print(f"{key:<18} {value:.6g}")
    print(f"per-clip rows: {out}")
    return 0


def cmd_grad_check(args) -> int:
    print_config("grad-check", {"grad-check": {"instances": args.instances, "seed": args.seed,
                                               "tolerance": args.tolerance}})
    ok = True
    for name, err in operator_gradient_suite(args.instances, args.seed).items():
        status = "ok" if err < args.tolerance else "FAIL"
        ok &= status == "ok"
        print(f"{name:<28} max rel err {err:.3e}  {status}")
    for name, err in end_to_end_gradient(args.seed).items():
        status = "ok" if err < args.tolerance else "FAIL"
        ok &= status == "ok"
        print(f"end-to-end {name:<28} max rel err {err:.3e}  {status}")
    if not ok:
        print("gradient check failed", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


# parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ci-sed", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate the synthetic confounded benchmark")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    for key, (kind, _) in DATA_DEFAULTS.items():
        if key != "seed":
            g.add_argument(f"--{key.replace('_', '-')}", dest=key, type=kind)
    g.set_defaults(func=cmd_gen_data)

    def train_flags(sp):
        sp.add_argument("--config")
        sp.add_argument("--data", required=True)
        sp.add_argument("--variant", choices=("baseline", "ci", "both"))
        sp.add_argument("--seeds")
        for key in ("threshold",):
            sp.add_argument(f"--{key}", type=float)
        sp.add_argument("--median-win", dest="median_win", type=int)
        sp.add_argument("--segment-len", dest="segment_len", type=int)
        sp.add_argument("--collar", type=int)

    t = sub.add_parser("train", help="train and evaluate variants over seeds")
    train_flags(t)
    for key, (kind, _) in TRAIN_DEFAULTS.items():
        if key not in ("seeds", "variant"):
            t.add_argument(f"--{key.replace('_', '-')}", dest=key, type=kind)
    t.add_argument("--runs-dir", default="runs")
    t.add_argument("--run", help="explicit run directory (default runs/<run_id>)")
    t.add_argument("--workers", type=int, help="parallel training processes (default CI_SED_THREADS)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate stored checkpoints")
    train_flags(e)
    e.add_argument("--run", required=True)
    e.add_argument("--out", help="append rows to this CSV")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="mean/std table per variant with ci - baseline deltas")
    c.add_argument("--run")
    c.add_argument("--metrics")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("validate-oracles", help="exact k-pass backdoor vs single-pass approximation")
    v.add_argument("--data", required=True)
    v.add_argument("--run", help="use the ci checkpoint of this run instead of a random network")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--split", default="eval_decorrelated", choices=EVAL_SPLITS)
    v.add_argument("--mask", default="ones", choices=("ones", "scores"))
    v.add_argument("--limit", type=int)
    v.add_argument("--runs-dir", default="runs")
    v.add_argument("--out")
    v.set_defaults(func=cmd_validate_oracles)

    gc = sub.add_parser("grad-check", help="finite-difference gradient suite")
    gc.add_argument("--instances", type=int, default=20)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tolerance", type=float, default=1e-6)
    gc.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "compare" and not (args.run or args.metrics):
        parser.error("compare needs --run or --metrics")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ci-sed {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, KeyError, FloatingPointError) as exc:
        print(f"ci-sed {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
