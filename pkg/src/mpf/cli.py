"""Command line entry point ``mpf``.

Exit codes: 0 success, 1 configuration error, 2 weight collapse.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from mpf.errors import MpfError
from mpf.experiments.config import ConfigError, load_config
from mpf.experiments.runner import EXIT_COLLAPSE, EXIT_CONFIG, EXIT_OK

log = logging.getLogger("mpf")


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad delta list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpf", description="Manifold particle filters for low-noise observations.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate data and run one filter")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")

    s = sub.add_parser("sweep", help="median ESS and MSE over a list of deltas")
    s.add_argument("--config", required=True)
    s.add_argument("--deltas", type=_float_list)
    s.add_argument("--out")
    s.add_argument("--workers", type=int)

    q = sub.add_parser("prop1", help="L_r errors as the observation noise vanishes")
    q.add_argument("--config", required=True)
    q.add_argument("--out")

    g = sub.add_parser("plot", help="render SVG figures from CSV outputs")
    g.add_argument("csv", nargs="+")
    g.add_argument("--out")
    return p


def cmd_run(args) -> int:
    from mpf.experiments.runner import run_experiment

    cfg = load_config(args.config, seed=args.seed)
    record = run_experiment(cfg)
    out = record.write(args.out or cfg.output_dir)
    r = record.result
    print(f"wrote {out}; steps={r.n_steps} log_likelihood={r.log_likelihood:.6g}")
    if record.collapsed:
        print(f"weight collapse at step {r.collapsed_at}", file=sys.stderr)
        return EXIT_COLLAPSE
    return EXIT_OK


def cmd_sweep(args) -> int:
    from mpf.experiments.sweep import sweep_delta

    cfg = load_config(args.config)
    deltas = args.deltas if args.deltas is not None else (None if len(cfg.deltas) <= 1 else cfg.deltas)
    result = sweep_delta(cfg, deltas, workers=args.workers)
    path = result.write(Path(args.out or cfg.output_dir) / "sweep.csv")
    print(f"wrote {path} ({len(result.rows)} rows)")
    return EXIT_OK


def cmd_prop1(args) -> int:
    from mpf.experiments.config import Prop1Config
    from mpf.experiments.prop1 import prop1_gap_harness

    cfg = load_config(args.config)
    pc = cfg.prop1 or Prop1Config()
    table = prop1_gap_harness(
        n_particles=pc.n_particles, r=pc.r, deltas=pc.deltas, n_reps=pc.n_reps, seed=cfg.seed,
        n_steps=cfg.n_steps or 5, d_x=cfg.d_x or 2, component=pc.component, data_seed=cfg.data_seed,
    )
    path = table.write(Path(args.out or cfg.output_dir) / "prop1.csv")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from mpf.experiments.plots import emit_plots

    for p in emit_plots(args.csv, args.out):
        print(f"wrote {p}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "prop1": cmd_prop1, "plot": cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, MpfError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
