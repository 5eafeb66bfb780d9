"""Command line entry point.

::

    wilson run [--experiments E1,E5] [--out DIR] [--config FILE] [knob flags]
    wilson e5 --probes 8 --targets 4
    wilson score-blackbox transcript.csv
    wilson gate --out DIR [--previous DIR]

The output directory defaults to ``$WILSON_OUT`` or ``./wilson_out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from wilson import artifacts as art
from wilson.errors import WilsonError
from wilson.gate import Thresholds, ci_gate
from wilson.orbits import blackbox_scores
from wilson.suite import EXPERIMENTS, SuiteConfig, apply_overrides, read_config_file, run_suite

_FLAG_KEYS = {
    "seed": "seed",
    "probes": "r",
    "targets": "k",
    "neighbors": "m",
    "tau_kappa": "tau_kappa",
    "tau_delta": "tau_delta",
    "tol": "tol",
    "workers": "workers",
}


def _default_out() -> str:
    return os.environ.get("WILSON_OUT", "wilson_out")


def _add_run_flags(p: argparse.ArgumentParser, with_experiments: bool):
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--out", default=None, help="output directory (default $WILSON_OUT or ./wilson_out)")
    p.add_argument("--seed", type=int)
    p.add_argument("--probes", type=int, help="Hutchinson probes r per confirmed loop")
    p.add_argument("--targets", type=int, help="target positions k per layer")
    p.add_argument("--neighbors", type=int, help="neighbours m per target")
    p.add_argument("--tau-kappa", type=float)
    p.add_argument("--tau-delta", type=float)
    p.add_argument("--tol", type=float, help="orbit tolerance delta")
    p.add_argument("--workers", type=int)
    if with_experiments:
        p.add_argument("--experiments", help="comma-separated subset of E1..E7 (empty for manifest only)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wilson", description="Order-sensitivity diagnostics on a toy Transformer.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_flags(sub.add_parser("run", help="run the experiment suite"), True)
    for name in EXPERIMENTS:
        _add_run_flags(sub.add_parser(name.lower(), help=f"run {name} only"), False)
    bb = sub.add_parser("score-blackbox", help="IR / PDR / OD from a chat-transcript CSV")
    bb.add_argument("csv")
    g = sub.add_parser("gate", help="CI gate over an existing run directory")
    g.add_argument("--out", default=None)
    g.add_argument("--previous", help="earlier run directory to compare against")
    g.add_argument("--tau-kappa", type=float)
    g.add_argument("--tau-delta", type=float)
    return parser


def config_from_args(args: argparse.Namespace, experiments: tuple[str, ...] | None = None) -> SuiteConfig:
    """Defaults, then the config file, then flags."""
    values: dict[str, object] = {}
    if args.config:
        values.update(read_config_file(args.config))
    for flag, key in _FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    if experiments is None and getattr(args, "experiments", None) is not None:
        experiments = args.experiments
    if experiments is not None:
        values["experiments"] = experiments
    if isinstance(values.get("experiments"), str):
        values["experiments"] = tuple(e.strip().upper() for e in values["experiments"].split(",") if e.strip())
    values["out"] = args.out or values.get("out") or _default_out()
    return apply_overrides(SuiteConfig(), values)


def _cmd_run(args, experiments=None) -> int:
    cfg = config_from_args(args, experiments)
    report = run_suite(cfg)
    for name, res in report.results.items():
        print(f"{name}: ok ({res['elapsed_s']:.2f}s)")
    for name, err in report.errors.items():
        print(f"{name}: FAILED {err}", file=sys.stderr)
    print(f"artifacts in {cfg.out}")
    return 0 if report.ok else 1


def _cmd_blackbox(args) -> int:
    result = blackbox_scores(Path(args.csv))
    fmt = lambda v: "NA" if v is None else f"{v:.4g}"  # noqa: E731
    for (model, query), s in sorted(result["scores"].items()):
        tag = f"{model}/{query}" if model else query
        print(f"{tag}: IR={fmt(s.IR)} SI={fmt(s.SI)} PDR={fmt(s.PDR)} OD={fmt(s.OD)}")
    for query, d in sorted(result["cross_model_drift"].items()):
        print(f"{query}: cross_model_drift={d}")
    return 0


def _load_snapshot(run_dir: Path) -> dict:
    for schema in art.CONTRACT_SCHEMAS:
        path = run_dir / schema.name
        if path.exists():
            art.read_csv(path, schema)  # header check
    return json.loads((run_dir / "metrics.json").read_text())


def _cmd_gate(args) -> int:
    out = Path(args.out or _default_out())
    th = Thresholds(
        **{k: v for k, v in (("tau_kappa", args.tau_kappa), ("tau_delta", args.tau_delta)) if v is not None}
    )
    current = _load_snapshot(out)
    previous = _load_snapshot(Path(args.previous)) if args.previous else None
    report = ci_gate(current, previous, th)
    text = report.to_text()
    (out / "gate_report.txt").write_text(text)
    print(text, end="")
    return 0 if report.passed else 1


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command.upper() in EXPERIMENTS:
            return _cmd_run(args, (args.command.upper(),))
        if args.command == "score-blackbox":
            return _cmd_blackbox(args)
        if args.command == "gate":
            return _cmd_gate(args)
    except (WilsonError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
