"""Command-line experiment runner.

``fedamole run --config cfg.json --mode fedamole --seeds 42,62,82 --out runs``
writes, per seed, a JSON-lines event log and, per invocation, a summary
CSV. ``fedamole report --summary runs/summary_fedamole.csv`` prints mean
and standard deviation of MTAL per mode.

Set ``FEDAMOLE_LOG_LEVEL`` (``DEBUG``, ``INFO``, ...) for progress logs.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import MODES, ExperimentConfig, config_to_dict, parse_config
from .errors import ConfigError
from .evalkit import MetricLog, mtal
from .fedsim import Federation

__all__ = ["SUMMARY_COLUMNS", "run", "report", "summary_rows", "format_report", "main"]

SUMMARY_COLUMNS = ("mode", "seed", "round", "client", "acc", "loss", "experts_assigned")

log = logging.getLogger("fedamole")


def _fmt(x: float) -> str:
    return repr(float(x))


def atomic_write(path: Path, text: str) -> None:
    """Write to a temporary file in the same directory, then rename over ``path``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def summary_rows(mode: str, seed: int, metric_log: MetricLog) -> list[dict]:
    """Per-round, per-client rows followed by one ``client="mtal"`` row."""
    rows = []
    for record in metric_log.records:
        losses = record.extras.get("loss", [float("nan")] * len(record.acc))
        sizes = record.extras.get("experts_assigned", [""] * len(record.acc))
        for client, acc in enumerate(record.acc):
            rows.append(
                {
                    "mode": mode,
                    "seed": seed,
                    "round": record.round,
                    "client": client,
                    "acc": _fmt(acc),
                    "loss": _fmt(losses[client]),
                    "experts_assigned": sizes[client],
                }
            )
    last = metric_log.records[-1]
    rows.append(
        {
            "mode": mode,
            "seed": seed,
            "round": last.round,
            "client": "mtal",
            "acc": _fmt(mtal(metric_log)),
            "loss": _fmt(np.mean(last.extras.get("loss", [float("nan")]))),
            "experts_assigned": sum(last.extras.get("experts_assigned", [])),
        }
    )
    return rows


def _csv_text(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def run(cfg: ExperimentConfig, mode: str, seeds: Sequence[int], out: str | Path) -> Path:
    """Train ``mode`` once per seed and write the logs and summary.

    Returns:
        Path of the summary CSV.
    """
    if mode not in MODES:
        raise ConfigError(f"must be one of {MODES}", key="federation.mode")
    out = Path(out)
    resolved = config_to_dict(cfg)
    resolved["federation"]["mode"] = mode
    resolved["seeds"] = list(seeds)
    rows = []
    for seed in seeds:
        events = [{"event": "config", "mode": mode, "seed": seed, "config": resolved}]
        fed = Federation(cfg, mode, seed, emit=events.append)
        metric_log = fed.run()
        text = "".join(json.dumps(e, sort_keys=True) + "\n" for e in events)
        atomic_write(out / f"events_{mode}_seed{seed}.jsonl", text)
        rows += summary_rows(mode, seed, metric_log)
        log.info("mode=%s seed=%d MTAL=%.4f", mode, seed, mtal(metric_log))
    path = out / f"summary_{mode}.csv"
    atomic_write(path, _csv_text(rows))
    return path


def report(paths: Sequence[str | Path]) -> dict[str, tuple[float, float, int]]:
    """``{mode: (mean MTAL, population std, n seeds)}`` from summary CSVs.

    Raises:
        ValueError: a file lacks one of the summary columns.
    """
    by_mode: dict[str, list[float]] = {}
    for path in paths:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in SUMMARY_COLUMNS if c not in (reader.fieldnames or [])]
            if missing:
                raise ValueError(f"{path}: missing columns {missing}")
            for row in reader:
                if row["client"] == "mtal":
                    by_mode.setdefault(row["mode"], []).append(float(row["acc"]))
    return {m: (float(np.mean(v)), float(np.std(v)), len(v)) for m, v in by_mode.items()}


def format_report(stats: dict[str, tuple[float, float, int]]) -> str:
    lines = ["# MTAL per mode: mean ± population std over seeds", f"{'mode':<10} {'mean':>8} {'std':>8} {'seeds':>5}"]
    for mode, (mean, std, n) in stats.items():
        lines.append(f"{mode:<10} {mean:>8.4f} {std:>8.4f} {n:>5d}")
    return "\n".join(lines)


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedamole", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="train one mode over several seeds")
    p_run.add_argument("--config", help="JSON config (defaults when omitted)")
    p_run.add_argument("--mode", choices=MODES, help="defaults to federation.mode")
    p_run.add_argument("--seeds", type=_seeds, help="comma-separated, defaults to the config's seeds")
    p_run.add_argument("--out", help="output directory, defaults to output.dir")
    p_rep = sub.add_parser("report", help="compare modes from summary CSVs")
    p_rep.add_argument("--summary", nargs="+", required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("FEDAMOLE_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = parse_config(args.config)
            mode = args.mode or cfg.federation.mode
            path = run(cfg, mode, args.seeds or list(cfg.seeds), args.out or cfg.output.dir)
            print(path)
        else:
            print(format_report(report(args.summary)))
    except (ConfigError, ValueError, OSError) as exc:
        print(f"fedamole: error: {exc}", file=sys.stderr)
        return 1
    return 0
