"""Command-line harness: single runs, baseline comparison, ablation grid and Non-IID sweep.

Every subcommand writes ``report.json``, ``table.csv``, ``seeds.csv``,
``traces.jsonl`` and ``manifest.json`` into its run directory. Outputs are a
pure function of (config, seeds), so re-running overwrites them with the same
bytes.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import re
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np

from .config import MECHANISMS, ExperimentConfig, Mechanisms, load_config
from .errors import ConfigError, NumericalError
from .orchestrator import (
    ABLATION_GRID,
    BASELINES,
    JOINT,
    NONIID_ALPHAS,
    joint_config,
    load_data,
    run_experiment,
)

log = logging.getLogger("fedcil")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

OUTPUT_FILES = {
    "report": "report.json",
    "table": "table.csv",
    "seeds": "seeds.csv",
    "traces": "traces.jsonl",
    "manifest": "manifest.json",
}


# --------------------------------------------------------------------------
# running batches of experiments


def _execute(job: tuple[str, ExperimentConfig]) -> tuple[dict, list[dict]]:
    label, config = job
    result = run_experiment(config, _cached_data(config))
    traces = [{"method": label, "seed": config.seed, **rec} for rec in result.traces]
    return result.report.to_json(), traces


_DATA_CACHE: dict[tuple, Any] = {}


def _cached_data(config: ExperimentConfig):
    key = (config.seed, config.num_classes, config.per_class, config.input_dim, config.cluster_spread,
           config.class_separation, config.train_file, config.test_file)
    if key not in _DATA_CACHE:
        _DATA_CACHE.clear()
        _DATA_CACHE[key] = load_data(config)
    return _DATA_CACHE[key]


def run_jobs(jobs: list[tuple[str, ExperimentConfig]], workers: int = 1) -> list[tuple[dict, list[dict]]]:
    """Run labelled configs, returning results in job order whatever the worker count."""
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_execute, jobs))
    return [_execute(job) for job in jobs]


# --------------------------------------------------------------------------
# output helpers


def _json_default(obj: Any) -> Any:
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n"


def _csv_text(header: list[str], rows: list[list[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(["" if v is None else (f"{v:.6f}" if isinstance(v, float) else v) for v in row])
    return buf.getvalue()


def _mean(values: list[float]) -> float:
    return float(np.mean(values))


def _summary(reports: list[dict], num_tasks: int) -> dict:
    """Per-task means plus Ā and PD means, aligned to ``num_tasks`` columns."""
    acc = np.array([_pad(r["A"], num_tasks) for r in reports], dtype=float)
    return {
        "A": [float(np.mean(acc[:, k])) if not np.isnan(acc[:, k]).any() else None for k in range(num_tasks)],
        "A_T": _mean([r["A_T"] for r in reports]),
        "A_avg": _mean([r["A_avg"] for r in reports]),
        "PD": _mean([r["PD"] for r in reports]),
    }


def _pad(acc: list[float], num_tasks: int) -> list[float]:
    """Right-align a shorter accuracy list (the single-task Joint run) to the last column."""
    return [float("nan")] * (num_tasks - len(acc)) + list(acc)


def _git_version() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], cwd=here,
                             capture_output=True, text=True, timeout=10, check=True)
        return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        from importlib.metadata import PackageNotFoundError, version

        try:
            return version("fedcil")
        except PackageNotFoundError:
            return "unknown"


def _timestamp() -> str:
    """Reproducible build time: SOURCE_DATE_EPOCH, else the HEAD commit time, else the epoch."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is None:
        try:
            out = subprocess.run(["git", "log", "-1", "--format=%ct"], cwd=Path(__file__).resolve().parent,
                                 capture_output=True, text=True, timeout=10, check=True)
            epoch = out.stdout.strip() or "0"
        except (OSError, subprocess.SubprocessError):
            epoch = "0"
    try:
        seconds = int(epoch)
    except ValueError:
        raise ConfigError(f"SOURCE_DATE_EPOCH: expected integer seconds, got {epoch!r}") from None
    return datetime.fromtimestamp(seconds, tz=timezone.utc).isoformat()


def write_outputs(out_dir: Path, command: str, config: ExperimentConfig, seeds: list[int], report: dict,
                  table: str, seed_table: str, traces: list[dict]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {
        OUTPUT_FILES["report"]: _dumps(report),
        OUTPUT_FILES["table"]: table,
        OUTPUT_FILES["seeds"]: seed_table,
        OUTPUT_FILES["traces"]: "".join(json.dumps(r, sort_keys=True, default=_json_default) + "\n"
                                        for r in traces),
    }
    manifest = {
        "command": command,
        "config": config.to_dict(),
        "config_digest": config.digest(),
        "version": _git_version(),
        "created": _timestamp(),
        "seeds": seeds,
        "outputs": {k: v for k, v in OUTPUT_FILES.items() if k != "manifest"},
    }
    files[OUTPUT_FILES["manifest"]] = _dumps(manifest)
    for name, text in files.items():
        (out_dir / name).write_text(text, encoding="utf-8")


# --------------------------------------------------------------------------
# subcommands


def _acc_header(T: int) -> list[str]:
    return [f"A_{k}" for k in range(1, T + 1)] + ["A_avg", "PD"]


def _acc_cells(summary: dict) -> list[Any]:
    return list(summary["A"]) + [summary["A_avg"], summary["PD"]]


def cmd_run(config: ExperimentConfig, seeds: list[int], out_dir: Path, workers: int = 1) -> int:
    jobs = [("run", config.replace(seed=s)) for s in seeds]
    results = run_jobs(jobs, workers)
    T = config.num_tasks
    reports = [r for r, _ in results]
    summary = _summary(reports, T)
    report = {"command": "run", "runs": [{"seed": s, **r} for s, r in zip(seeds, reports)], "mean": summary}
    table = _csv_text(["seed"] + _acc_header(T) + ["comm_cost_bytes"],
                      [[s] + _acc_cells(_summary([r], T)) + [r["comm_cost_bytes"]] for s, r in zip(seeds, reports)]
                      + [["mean"] + _acc_cells(summary) + [None]])
    seed_table = _csv_text(["seed", "A_T"], [[s, r["A_T"]] for s, r in zip(seeds, reports)])
    traces = [rec for _, tr in results for rec in tr]
    write_outputs(out_dir, "run", config, seeds, report, table, seed_table, traces)
    log.info("run: mean A_T=%.4f over %d seed(s)", summary["A_T"], len(seeds))
    return EXIT_OK


def _grid(command: str, rows: list[tuple[str, ExperimentConfig]], config: ExperimentConfig, seeds: list[int],
          workers: int) -> tuple[dict[str, list[dict]], list[dict]]:
    jobs = [(label, cfg.replace(seed=s)) for label, cfg in rows for s in seeds]
    results = run_jobs(jobs, workers)
    per_row: dict[str, list[dict]] = {label: [] for label, _ in rows}
    traces: list[dict] = []
    for (label, _), (rep, tr) in zip(jobs, results):
        per_row[label].append(rep)
        traces.extend(tr)
    log.info("%s: %d runs finished", command, len(jobs))
    return per_row, traces


def _seed_rows(per_row: dict[str, list[dict]], seeds: list[int], T: int) -> str:
    rows = []
    for label, reps in per_row.items():
        for s, r in zip(seeds, reps):
            rows.append([label, s] + _acc_cells(_summary([r], T)))
    return _csv_text(["method", "seed"] + _acc_header(T), rows)


def cmd_compare(config: ExperimentConfig, seeds: list[int], out_dir: Path, workers: int = 1) -> int:
    rows = [(name, config.replace(methods=m)) for name, m in BASELINES.items()]
    rows.append((JOINT, joint_config(config)))
    per_row, traces = _grid("compare", rows, config, seeds, workers)
    T = config.num_tasks
    summaries = {label: _summary(reps, T) for label, reps in per_row.items()}
    table = _csv_text(["method"] + _acc_header(T), [[label] + _acc_cells(s) for label, s in summaries.items()])
    report = {
        "command": "compare",
        "methods": {label: {"mean": summaries[label], "runs": [{"seed": s, **r} for s, r in zip(seeds, reps)]}
                    for label, reps in per_row.items()},
    }
    write_outputs(out_dir, "compare", config, seeds, report, table, _seed_rows(per_row, seeds, T), traces)
    return EXIT_OK


def cmd_ablate(config: ExperimentConfig, seeds: list[int], out_dir: Path, workers: int = 1) -> int:
    rows = [(label, config.replace(methods=m)) for label, m in ABLATION_GRID]
    per_row, traces = _grid("ablate", rows, config, seeds, workers)
    T = config.num_tasks
    flags = {label: m for label, m in ABLATION_GRID}
    summaries = {label: _summary(reps, T) for label, reps in per_row.items()}
    table = _csv_text(
        ["configuration"] + [m.upper() for m in MECHANISMS] + _acc_header(T),
        [[label] + [int(getattr(flags[label], m)) for m in MECHANISMS] + _acc_cells(s) for label, s in summaries.items()],
    )
    report = {
        "command": "ablate",
        "configurations": {
            label: {"flags": flags[label].enabled(), "mean": summaries[label],
                    "runs": [{"seed": s, **r} for s, r in zip(seeds, reps)]}
            for label, reps in per_row.items()
        },
    }
    write_outputs(out_dir, "ablate", config, seeds, report, table, _seed_rows(per_row, seeds, T), traces)
    return EXIT_OK


SWEEP_METHODS: dict[str, Mechanisms] = {"MLFCIL": BASELINES["MLFCIL"], "FedAvg": BASELINES["FedAvg"]}


def _alpha_label(alpha: float) -> str:
    return f"alpha={alpha:g}"


def cmd_sweep_noniid(config: ExperimentConfig, seeds: list[int], out_dir: Path, workers: int = 1) -> int:
    rows = [(f"{name}@{_alpha_label(a)}", config.replace(methods=m, dirichlet_alpha=a))
            for name, m in SWEEP_METHODS.items() for a in NONIID_ALPHAS]
    per_row, traces = _grid("sweep-noniid", rows, config, seeds, workers)
    cells: dict[str, dict[str, float]] = {name: {} for name in SWEEP_METHODS}
    for name in SWEEP_METHODS:
        for a in NONIID_ALPHAS:
            cells[name][_alpha_label(a)] = _mean([r["A_T"] for r in per_row[f"{name}@{_alpha_label(a)}"]])
    lo, hi = _alpha_label(min(NONIID_ALPHAS)), _alpha_label(max(NONIID_ALPHAS))
    delta = {name: cells[name][hi] - cells[name][lo] for name in SWEEP_METHODS}
    header = ["method"] + [_alpha_label(a) for a in NONIID_ALPHAS] + ["delta"]
    table = _csv_text(header, [[name] + [cells[name][_alpha_label(a)] for a in NONIID_ALPHAS] + [delta[name]]
                               for name in SWEEP_METHODS])
    seed_rows = []
    for name in SWEEP_METHODS:
        for k, s in enumerate(seeds):
            vals = [per_row[f"{name}@{_alpha_label(a)}"][k]["A_T"] for a in NONIID_ALPHAS]
            seed_rows.append([name, s] + vals + [vals[-1] - vals[0]])
    report = {
        "command": "sweep-noniid",
        "alphas": list(NONIID_ALPHAS),
        "A_T": cells,
        "delta": delta,
        "runs": {label: [{"seed": s, **r} for s, r in zip(seeds, reps)] for label, reps in per_row.items()},
    }
    write_outputs(out_dir, "sweep-noniid", config, seeds, report, table,
                  _csv_text(["method", "seed"] + header[1:], seed_rows), traces)
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "compare": cmd_compare,
    "ablate": cmd_ablate,
    "sweep-noniid": cmd_sweep_noniid,
}


# --------------------------------------------------------------------------
# argument parsing


def parse_seeds(text: str) -> list[int]:
    """``"0,1,2"`` or ``"0-4"`` (inclusive) or a mix of both."""
    seeds: list[int] = []
    for part in (p.strip() for p in text.split(",")):
        if not part:
            continue
        m = re.fullmatch(r"(\d+)(?:-(\d+))?", part)
        if m is None:
            raise ConfigError(f"--seeds: cannot parse {part!r}; use e.g. 0,1,2 or 0-4")
        lo = int(m.group(1))
        seeds.extend(range(lo, int(m.group(2) or lo) + 1))
    if not seeds:
        raise ConfigError("--seeds: empty seed list")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedcil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="TOML config file (defaults apply if omitted)")
        p.add_argument("--out", type=Path, default=None, help="run directory (default runs/<command>-<digest>)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VAL",
                       help="override a config key, e.g. --set methods.gp=false (repeatable)")
        p.add_argument("--seeds", default=None,
                       help="seed list, e.g. 0,1,2 or 0-4 (run: config seed; others: config seeds)")
        p.add_argument("--workers", type=int, default=1, help="parallel processes for independent runs")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config, args.overrides)
        if args.seeds is not None:
            seeds = parse_seeds(args.seeds)
        else:
            seeds = [config.seed] if args.command == "run" else list(config.seeds)
        if args.command == "run" and len(seeds) == 1:
            config = config.replace(seed=seeds[0])
        if args.workers < 1:
            raise ConfigError("--workers: must be at least 1")
        out_dir = args.out if args.out is not None else Path("runs") / f"{args.command}-{config.digest()}"
        code = COMMANDS[args.command](config, seeds, out_dir, args.workers)
    except ConfigError as exc:
        print(f"fedcil: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"fedcil: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(out_dir)
    return code


if __name__ == "__main__":
    sys.exit(main())
