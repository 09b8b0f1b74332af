"""Command-line experiment driver.

    fedlora single --config exp.cfg [--set key=value ...]
    fedlora sweep  --config exp.cfg --axis sigma --values 0.5,1,2 [--set ...]

Each run writes into its own output directory:

    config.echo   resolved configuration (re-parseable)
    metrics.csv   one row per round, fully deterministic given the seed
    timing.csv    wall-clock per round (not deterministic, kept separate)
    trace.bin     per-round broadcast state, only when trace = true

Exit codes: 0 success, 2 configuration error, 3 runtime or numerical error.
"""

from __future__ import annotations

import argparse
import struct
import sys
from dataclasses import replace
from pathlib import Path

from fedlora import config as config_mod
from fedlora import federation
from fedlora.config import SWEEP_AXES, ExperimentConfig
from fedlora.errors import ConfigError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics(rows: list[dict], path: Path) -> None:
    columns = list(rows[0].keys())
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in columns))
    path.write_text("\n".join(lines) + "\n")


def write_timings(timings: list[tuple[int, float]], path: Path) -> None:
    lines = ["round,wall_ms"]
    for rnd, wall in timings:
        lines.append(f"{rnd},{wall:.3f}")
    path.write_text("\n".join(lines) + "\n")


def write_trace(trace: list[bytes], path: Path) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<d", float(len(trace))))
        for chunk in trace:
            fh.write(struct.pack("<d", float(len(chunk))))
            fh.write(chunk)


def run_single(cfg: ExperimentConfig, out_dir: Path) -> dict:
    """Run one experiment, emit its artifacts, return the final row."""
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.echo").write_text(config_mod.echo_config(cfg))
    result = federation.run_experiment(cfg)
    write_metrics(result.metrics, out_dir / "metrics.csv")
    write_timings(result.timings, out_dir / "timing.csv")
    if cfg.trace:
        write_trace(result.trace, out_dir / "trace.bin")
    return result.final()


def _cmd_single(args) -> int:
    cfg = config_mod.parse_config(args.config, args.set)
    run_single(cfg, Path(cfg.output_dir))
    return EXIT_OK


def _sweep_values(axis: str, raw: str) -> list[str]:
    values = [tok.strip() for tok in raw.split(",") if tok.strip()]
    if not values:
        raise ConfigError("sweep needs at least one value")
    return values


def _cmd_sweep(args) -> int:
    if args.axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {args.axis!r}; choose from {sorted(SWEEP_AXES)}")
    key = SWEEP_AXES[args.axis]
    values = _sweep_values(args.axis, args.values)
    base_path = Path(args.config)
    if not base_path.exists():
        raise ConfigError(f"config file not found: {base_path}")
    base_pairs = config_mod.parse_pairs(base_path.read_text(), source=str(base_path))
    for item in args.set or []:
        base_pairs.append(config_mod.parse_override(item))
    base_cfg = config_mod.build_config(base_pairs)
    sweep_dir = Path(base_cfg.output_dir)
    sweep_dir.mkdir(parents=True, exist_ok=True)

    summary_rows = []
    failed = False
    for value in values:
        point_pairs = list(base_pairs)
        point_pairs.append((f"sweep {args.axis}={value}", key, value))
        if args.axis == "sigma":
            point_pairs.append((f"sweep {args.axis}={value}", "dp.enabled", "true"))
        point_dir = sweep_dir / f"{args.axis}={value}"
        row = {"axis": args.axis, "value": value, "status": "ok"}
        try:
            cfg = config_mod.build_config(point_pairs)
            cfg = replace(cfg, output_dir=str(point_dir))
            final = run_single(cfg, point_dir)
            row.update(
                round=final["round"],
                mean_acc=final["mean_acc"],
                client_std=final["client_std"],
                eff_rank=final["eff_rank"],
                epsilon=final["epsilon"],
                mean_acc_global=final["mean_acc_global"],
            )
        except Exception as exc:  # keep completed points on a failed sweep
            failed = True
            row["status"] = f"error: {exc}"
        summary_rows.append(row)

    columns = ["axis", "value", "status", "round", "mean_acc", "client_std", "eff_rank", "epsilon", "mean_acc_global"]
    lines = [",".join(columns)]
    for row in summary_rows:
        lines.append(",".join(_fmt(row.get(c, "")) for c in columns))
    (sweep_dir / "summary.csv").write_text("\n".join(lines) + "\n")
    return EXIT_RUNTIME if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedlora", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    single = sub.add_parser("single", help="run one experiment")
    single.add_argument("--config", required=True)
    single.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    single.set_defaults(func=_cmd_single)

    sweep = sub.add_parser("sweep", help="run one experiment per value of an axis")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    sweep.add_argument("--values", required=True, help="comma-separated axis values")
    sweep.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    sweep.set_defaults(func=_cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
