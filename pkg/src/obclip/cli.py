"""Command-line entry point: ``obclip <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
OUT_ENV = "OBCLIP_OUT"


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config_path: Optional[str]
    seed: Optional[int]
    started: str
    finished: str = ""
    outputs: list = field(default_factory=list)
    version: str = ""
    argv: list = field(default_factory=list)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2) + "\n")
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def describe_version() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _out_dir(arg: Optional[str], command: str) -> Path:
    base = arg or os.environ.get(OUT_ENV)
    path = Path(base) if base else Path("obclip-runs") / command
    path.mkdir(parents=True, exist_ok=True)
    return path


def _read_json(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None


# --- subcommands ------------------------------------------------------------------

def cmd_gen_data(args, manifest: RunManifest, out: Path) -> int:
    from .synthdata import GeneratorConfig, dump, generate

    raw = _read_json(args.config)
    if not isinstance(raw, dict):
        raise UsageError("generator config must be a JSON object")
    count = raw.pop("count", 1024)
    try:
        config = GeneratorConfig.from_dict(raw)
        count = int(count)
        if count < 1:
            raise ValueError("count must be >= 1")
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{args.config}: {exc}") from None
    manifest.seed = config.seed
    csv_path, side = dump(generate(config, count, split=args.split), config, out / "dataset.csv")
    manifest.outputs += [str(csv_path), str(side)]
    print(f"wrote {count} pairs to {csv_path}")
    return EXIT_OK


def _load_experiment(path: str):
    from .trainer import ConfigError, config_from_dict

    raw = _read_json(path)
    try:
        return config_from_dict(raw)
    except ConfigError as exc:
        raise UsageError(f"{path}: {exc}") from None


def cmd_train(args, manifest: RunManifest, out: Path) -> int:
    from .trainer import dump_config, summarize, train

    config = _load_experiment(args.config)
    if args.steps is not None:
        if args.steps < 0:
            raise UsageError("--steps must be >= 0")
        config = config.replace(steps=args.steps)
    manifest.seed = config.seed
    t0 = time.perf_counter()
    result = train(config)
    log_path, ckpt, cfg_path, summary_path = (out / "train_log.csv", out / "checkpoint.npz",
                                              out / "config.json", out / "summary.json")
    result.log.to_csv(log_path)
    result.save_checkpoint(ckpt)
    dump_config(config, cfg_path)
    summary = summarize(result)
    print(f"{config.name}: {config.steps} steps in {time.perf_counter() - t0:.1f}s, "
          f"recall@1 i2t={summary['recall1_i2t']:.4f} t2i={summary['recall1_t2i']:.4f}, tau={summary['final_tau']:.4f}")
    summary = {k: None if isinstance(v, float) and math.isnan(v) else v for k, v in summary.items()}
    summary_path.write_text(json.dumps(summary, indent=2, default=_json_default) + "\n")
    manifest.outputs += [str(p) for p in (log_path, ckpt, cfg_path, summary_path)]
    return EXIT_OK


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(type(v).__name__)


def cmd_grid(args, manifest: RunManifest, out: Path) -> int:
    from .trainer import run_grid, write_grid_csv

    folder = Path(args.configs)
    if not folder.is_dir():
        raise UsageError(f"config directory not found: {folder}")
    paths = sorted(folder.glob("*.json"))
    if not paths:
        raise UsageError(f"no *.json configs in {folder}")
    configs = [_load_experiment(str(p)) for p in paths]
    rows = run_grid(configs, jobs=args.jobs)
    path = out / "grid.csv"
    write_grid_csv(rows, path)
    manifest.outputs.append(str(path))
    for r in rows:
        if r["status"] == "ok":
            print(f"{r['name']:<32} recall@1 {r['recall1_i2t']:.4f}/{r['recall1_t2i']:.4f}  tau {r['final_tau']:.3f}")
        else:
            print(f"{r['name']:<32} FAILED {r['error']}")
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_RUNTIME


def cmd_gradcheck(args, manifest: RunManifest, out: Path) -> int:
    from .props import gradcheck_suite

    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    manifest.seed = args.seed
    res = gradcheck_suite(seed=args.seed, trials=args.trials)
    print(res.summary())
    worst = max(c.value for c in res.checks)
    print(f"max relative error: {worst:.3e}")
    path = out / "gradcheck.txt"
    path.write_text(res.summary() + "\n")
    manifest.outputs.append(str(path))
    return EXIT_OK if res.passed else EXIT_RUNTIME


def cmd_bench(args, manifest: RunManifest, out: Path) -> int:
    from .bench import parse_sweep, report_table, sweep

    try:
        spec = parse_sweep(args.sweep or "")
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest.seed = 0
    csv_text, table = report_table(sweep(spec))
    csv_path, txt_path = out / "bench.csv", out / "bench.txt"
    csv_path.write_text(csv_text)
    txt_path.write_text(table)
    manifest.outputs += [str(csv_path), str(txt_path)]
    print(table, end="")
    return EXIT_OK


def cmd_props(args, manifest: RunManifest, out: Path) -> int:
    from .props import SUITES

    if args.suite not in SUITES:
        raise UsageError(f"unknown suite {args.suite!r}; valid suites: {', '.join(sorted(SUITES))}")
    manifest.seed = args.seed
    res = SUITES[args.suite](args.seed)
    print(res.summary())
    path = out / f"props-{args.suite}.txt"
    path.write_text(res.summary() + "\n")
    manifest.outputs.append(str(path))
    return EXIT_OK if res.passed else EXIT_RUNTIME


PLOT_KINDS = ("temperature", "histograms")


def cmd_plotdata(args, manifest: RunManifest, out: Path) -> int:
    from .trainer import TrainLog

    if args.what not in PLOT_KINDS:
        raise UsageError(f"unknown --what {args.what!r}; valid: {', '.join(PLOT_KINDS)}")
    log_path = Path(args.log)
    if not log_path.is_file():
        raise UsageError(f"log not found: {log_path}")
    if args.what == "temperature":
        try:
            log = TrainLog.from_csv(log_path)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        path = out / "temperature.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "tau"])
            for r in log.records:
                w.writerow([r["step"], f"{r['tau']:.17g}"])
    else:
        path = _histogram_csv(log_path.parent, out, args.bins)
    manifest.outputs.append(str(path))
    print(f"wrote {path}")
    return EXIT_OK


def _histogram_csv(run_dir: Path, out: Path, bins: int) -> Path:
    """Distance histograms of a finished run on in-domain and re-drawn (out-of-domain) eval data."""
    import dataclasses

    from .encoder import TwoTower, load_checkpoint
    from .synthdata import distance_histograms
    from .trainer import embed_batch, eval_set

    ckpt, cfg_path = run_dir / "checkpoint.npz", run_dir / "config.json"
    if not ckpt.is_file() or not cfg_path.is_file():
        raise UsageError(f"{run_dir} lacks checkpoint.npz/config.json from a train run")
    config = _load_experiment(str(cfg_path))
    params, _ = load_checkpoint(ckpt)
    params.pop("t", None)
    model = TwoTower(config.model)
    path = out / "histograms.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["domain", "series", "bin_lo", "bin_hi", "count", "mean", "std"])
        for domain, ood in (("in", False), ("out", True)):
            cfg = config.replace(data=dataclasses.replace(config.data, out_of_domain=ood))
            u, v = embed_batch(model, params, eval_set(cfg))
            size = config.eval_size
            pairs = [(u[s:s + size], v[s:s + size]) for s in range(0, len(u) - size + 1, size)]
            hist = distance_histograms(pairs, config.model.kind, bins=bins)
            for series, h in hist.items():
                for lo, hi, c in zip(h["edges"][:-1], h["edges"][1:], h["counts"]):
                    w.writerow([domain, series, f"{lo:.17g}", f"{hi:.17g}", int(c),
                                f"{h['mean']:.17g}", f"{h['std']:.17g}"])
    return path


# --- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="obclip", description="Oblique-manifold contrastive alignment toolkit.")
    p.add_argument("--version", action="version", version=f"obclip {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    out_help = f"output directory (default: ${OUT_ENV} or ./obclip-runs/<command>)"

    s = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    s.add_argument("--config", required=True, help="generator JSON (GeneratorConfig fields plus optional count)")
    s.add_argument("--split", default="train")
    s.add_argument("--out", help=out_help)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train one experiment")
    s.add_argument("--config", required=True)
    s.add_argument("--steps", type=int, help="override the configured step count")
    s.add_argument("--out", help=out_help)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("grid", help="train every *.json config in a directory")
    s.add_argument("--configs", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", help=out_help)
    s.set_defaults(func=cmd_grid)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--out", help=out_help)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("bench", help="backward storage and flop counts of the distance matrix")
    s.add_argument("--sweep", default="", help='e.g. "b=32 d=64,128,256,512 m=2,4,8,16"')
    s.add_argument("--out", help=out_help)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("props", help="run a property suite")
    s.add_argument("--suite", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help=out_help)
    s.set_defaults(func=cmd_props)

    s = sub.add_parser("plotdata", help="tidy CSV series for plotting")
    s.add_argument("--log", required=True, help="train_log.csv of a train run")
    s.add_argument("--what", required=True)
    s.add_argument("--bins", type=int, default=40)
    s.add_argument("--out", help=out_help)
    s.set_defaults(func=cmd_plotdata)
    return p


def main(argv: Optional[list] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    manifest = RunManifest(args.command, getattr(args, "config", None) or getattr(args, "configs", None),
                           None, _now(), version=describe_version(), argv=argv)
    try:
        out = _out_dir(args.out, args.command)
        code = args.func(args, manifest, out)
    except UsageError as exc:
        print(f"obclip {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # anything else is a runtime failure
        print(f"obclip {args.command}: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    manifest.finished = _now()
    manifest.write(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
