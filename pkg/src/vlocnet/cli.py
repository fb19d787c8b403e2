"""``vlocnet`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure (divergence or a failed gradient check).
"""

from __future__ import annotations

import argparse
import logging
import sys

import yaml

from . import __version__, experiments
from .data import DataError
from .model import ConfigError
from .optim import DivergenceError
from .tensor import NonFiniteError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("vlocnet")


def _parse_set(items: list[str]) -> dict:
    """Turn ``section.key=value`` strings into a nested override mapping."""
    out: dict = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse value in {item!r}: {e}") from None
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def _run_config(args, **extra) -> experiments.RunConfig:
    file_values = experiments.load_file(args.config) if args.config else {}
    overrides = _parse_set(args.set)
    for key in ("seed", "out", "preset"):
        v = getattr(args, key, None)
        if v is not None:
            overrides[key] = v
    for section, values in extra.items():
        if values:
            overrides.setdefault(section, {}).update(values)
    return experiments.resolve(file_values, overrides)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON run configuration file")
    p.add_argument("--seed", type=int, help="random seed (overrides the file)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--preset", help="comma-separated preset names, applied left to right")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlocnet", description="Desk-scale joint relocalization and odometry networks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--n-frames", type=int, help="frames per sequence")
    p.add_argument("--aliasing", action="store_true", help="render twin sequences in two identical-looking regions")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    p = sub.add_parser("train", help="train a model and write a checkpoint plus loss curves")
    _common(p)
    p.add_argument("--dataset", help="dataset root in the 7-Scenes layout")
    p.add_argument("--iterations", type=int)
    p.add_argument("--strategy", choices=("joint", "alternating", "global", "odometry"))
    p.add_argument("--init-global", help="checkpoint to initialize the localization stream from")
    p.add_argument("--init-odometry", help="checkpoint to initialize the odometry stream from")

    p = sub.add_parser("eval", help="evaluate a checkpoint and write report files")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--vo-mode", default="windowed", choices=("windowed", "per-pair"))

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive and loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=20, help="random points per check")

    p = sub.add_parser("sweep", help="run a named comparison grid")
    _common(p)
    p.add_argument("name", choices=experiments.SWEEPS)
    p.add_argument("--dataset")
    return parser


def _cmd_synth(args) -> int:
    synth = {}
    if args.n_frames is not None:
        synth["n_frames"] = args.n_frames
    if args.aliasing:
        synth["aliasing"] = True
    cfg = _run_config(args, synth=synth)
    if not cfg.out:
        raise ConfigError("synth needs --out")
    path = experiments.run_synth(cfg, cfg.out, force=args.force)
    print(f"wrote dataset {path} (seed {cfg.seed}, config {cfg.config_hash()})")
    return EXIT_OK


def _cmd_train(args) -> int:
    train = {}
    if args.iterations is not None:
        train["iterations"] = args.iterations
    if args.strategy:
        train["strategy"] = args.strategy
    init = {k: v for k, v in (("global", args.init_global), ("odometry", args.init_odometry)) if v}
    cfg = _run_config(args, train=train, init=init)
    if args.dataset:
        cfg.dataset = args.dataset
    out = cfg.out or "runs/train"

    def progress(step, row):
        if step % 100 == 0:
            log.info("step %d  L_total %.5f", step, row["L_total"])

    res = experiments.run_train(cfg, out, progress)
    print(f"wrote {res.checkpoint} and {res.curves}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    expected = None
    if args.config or args.preset or args.set:
        expected = _run_config(args)
    out = args.out or "runs/eval"
    report = experiments.run_eval(args.checkpoint, args.dataset, out, args.split, args.vo_mode, expected)
    for scene, e in report.scenes.items():
        print(f"{scene}: median {e['median_translation_m']:.4f} m, {e['median_orientation_deg']:.3f} deg")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from . import gradcheck

    table, ok = gradcheck.main_table(args.points, args.seed)
    print(table)
    return EXIT_OK if ok else EXIT_NUMERIC


def _cmd_sweep(args) -> int:
    cfg = _run_config(args)
    if args.dataset:
        cfg.dataset = args.dataset
    path = experiments.run_sweep(args.name, cfg, cfg.out or f"runs/sweep-{args.name}")
    rows = experiments.read_sweep(path)
    for r in rows:
        print(f"{r['point']:>10}  {r['median_translation_m'] or '-':>22}  {r['median_orientation_deg'] or '-':>22}")
    if args.name == "strategy":
        t = {r["point"]: float(r["median_translation_m"]) for r in rows}
        if t["joint"] > 0:
            print(f"alternating vs joint translation change: {100 * (t['joint'] - t['alternating']) / t['joint']:+.2f}%")
    print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {"synth": _cmd_synth, "train": _cmd_train, "eval": _cmd_eval, "gradcheck": _cmd_gradcheck, "sweep": _cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, NonFiniteError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
