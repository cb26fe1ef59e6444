"""Experiment runner: drops x SE targets x methods, written as CSV rows plus
per-SE aggregates.

Each drop gets its own child seed derived from the base seed and the drop
id, so drops can run in any order (or in parallel) and still produce the
same rows.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .channel import StatisticsProvider, covariance_matrices
from . import __version__
from .conic import DEFAULT_TOL
from .problems import (InfeasibleError, SolverError, branch_and_bound_p1, max_min_sinr, se_to_sinr,
                       sinr, total_power)
from .scenario import ScenarioConfig, generate_geometry
from .switching import run_proposed

log = logging.getLogger(__name__)

__all__ = ["ExperimentPlan", "ResultRow", "COLUMNS", "AGGREGATE_COLUMNS", "total_power",
           "energy_efficiency", "run_drop", "run_experiment", "aggregate", "main"]

DEFAULT_SE_GRID = tuple(0.25 * i for i in range(1, 10))
METHODS = ("proposed", "mbsocp")


@dataclass(frozen=True)
class ExperimentPlan:
    config: ScenarioConfig = dataclasses.field(default_factory=ScenarioConfig)
    se_grid: tuple[float, ...] = DEFAULT_SE_GRID
    num_drops: int = 50
    methods: str = "both"
    output: Path | None = None
    tol: float = DEFAULT_TOL
    workers: int = 1
    timing: bool = True
    emit_aggregates: bool = True
    cache_dir: Path | None = None

    def __post_init__(self):
        if not self.se_grid or any(not (se > 0 and math.isfinite(se)) for se in self.se_grid):
            raise ValueError("SE grid values must be positive and finite")
        if self.num_drops < 1:
            raise ValueError("num_drops must be >= 1")
        if self.methods not in ("proposed", "mbsocp", "both"):
            raise ValueError(f"methods must be proposed, mbsocp or both, got {self.methods!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def method_list(self) -> tuple[str, ...]:
        return METHODS if self.methods == "both" else (self.methods,)

    def fingerprint(self) -> str:
        """Hash of everything that determines the rows (not where they are written)."""
        key = {"config": json.loads(self.config.to_json()), "se_grid": list(self.se_grid),
               "methods": self.method_list, "tol": self.tol, "timing": self.timing,
               "version": __version__}
        return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ResultRow:
    drop_id: int
    seed: int
    target_se: float
    method: str
    measuring_aps: int | None = None
    serving_aps: int | None = None
    transmit_power: float | None = None
    scaled_transmit_power: float | None = None
    total_power: float | None = None
    achieved_min_se: float | None = None
    energy_efficiency: float | None = None
    conic_solves: int | None = None
    wall_time: float | None = None
    skipped: bool = False
    status: str = "ok"
    bnb_nodes: int | None = None
    max_min_se: float | None = None

    def as_record(self) -> dict:
        return dataclasses.asdict(self)


COLUMNS = tuple(f.name for f in dataclasses.fields(ResultRow))
AGGREGATE_METRICS = ("measuring_aps", "serving_aps", "transmit_power", "scaled_transmit_power",
                     "total_power", "energy_efficiency", "conic_solves", "wall_time")
AGGREGATE_COLUMNS = ("target_se", "method", "count") + tuple(
    c for m in AGGREGATE_METRICS for c in (f"{m}_mean", f"{m}_stderr"))


def energy_efficiency(target_se, bandwidth: float, power: float, num_users: int | None = None) -> float:
    """Requested sum rate over consumed power, in Mbit/Joule.

    ``target_se`` is either one value per user or a common value, in which
    case ``num_users`` gives the user count.
    """
    if not power > 0:
        raise ValueError("energy efficiency needs a positive total power")
    se = np.asarray(target_se, dtype=float)
    if se.ndim == 0:
        if num_users is None:
            raise ValueError("num_users is required for a scalar target SE")
        se = np.full(num_users, float(se))
    return float(bandwidth * se.sum() / power / 1e6)


def drop_seed(base_seed: int, drop_id: int) -> int:
    """Deterministic 63-bit child seed of ``base_seed`` for one drop."""
    state = np.random.SeedSequence(base_seed, spawn_key=(drop_id,)).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else ""
    return str(value)


def _solution_row(base: dict, config: ScenarioConfig, full_stats, se: float, active, allocation,
                  solves: int, measuring: int, elapsed: float, nodes: int | None = None) -> ResultRow:
    transmit = float(allocation.rho[list(active)].sum())
    power = total_power(active, allocation, config.fixed_ap_power, config.pa_inefficiency)
    achieved = float(np.log2(1.0 + np.min(sinr(full_stats, allocation, active=active))))
    return ResultRow(
        **base,
        measuring_aps=measuring,
        serving_aps=len(active),
        transmit_power=transmit,
        scaled_transmit_power=config.pa_inefficiency * transmit,
        total_power=power,
        achieved_min_se=achieved,
        energy_efficiency=energy_efficiency(se, config.bandwidth, power, config.num_users),
        conic_solves=solves,
        wall_time=elapsed,
        bnb_nodes=nodes,
    )


def run_drop(plan: ExperimentPlan, drop_id: int) -> list[ResultRow]:
    """Every (SE, method) row of one drop."""
    config = plan.config
    seed = drop_seed(config.rng_seed, drop_id)
    rng = np.random.default_rng(seed)
    geometry = generate_geometry(config, rng)
    covs = covariance_matrices(geometry, config)
    provider = StatisticsProvider(covs, config, seed)
    full = provider.full()
    gamma_max = max_min_sinr(full, config.max_tx_power, solver_tol=plan.tol)
    max_se = float(np.log2(1.0 + gamma_max))
    clock = time.perf_counter if plan.timing else (lambda: 0.0)

    rows = []
    for se in plan.se_grid:
        gamma = float(se_to_sinr(se))
        for method in plan.method_list:
            base = dict(drop_id=drop_id, seed=seed, target_se=float(se), method=method, max_min_se=max_se)
            if gamma > gamma_max:
                rows.append(ResultRow(**base, skipped=True, status="skipped"))
                continue
            start = clock()
            try:
                if method == "proposed":
                    trace = run_proposed(geometry, provider, gamma, config.max_tx_power,
                                         config.fixed_ap_power, config.pa_inefficiency, tol=plan.tol)
                    sol = trace.solution
                    row = _solution_row(base, config, full, se, sol.active, sol.allocation, sol.solves,
                                        sol.measuring_aps, clock() - start)
                else:
                    sol = branch_and_bound_p1(full, gamma, config, tol=plan.tol)
                    row = _solution_row(base, config, full, se, sol.active, sol.allocation, sol.solves,
                                        config.num_aps, clock() - start, nodes=sol.details["nodes"])
            except InfeasibleError as exc:
                log.warning("drop %d, SE %s, %s: %s", drop_id, se, method, exc)
                row = ResultRow(**base, status="infeasible", wall_time=clock() - start)
            except SolverError as exc:
                log.warning("drop %d, SE %s, %s: %s", drop_id, se, method, exc)
                row = ResultRow(**base, status="solver_error", wall_time=clock() - start)
            rows.append(row)
            log.info("drop %d SE %.2f %s: %s", drop_id, se, method, row.status)
    return rows


def _cached_drop(plan: ExperimentPlan, drop_id: int) -> list[ResultRow]:
    if plan.cache_dir is None:
        return run_drop(plan, drop_id)
    path = Path(plan.cache_dir) / f"{plan.fingerprint()}_drop{drop_id:04d}.json"
    if path.exists():
        return [ResultRow(**r) for r in json.loads(path.read_text(encoding="utf-8"))]
    rows = run_drop(plan, drop_id)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps([r.as_record() for r in rows]), encoding="utf-8")
    tmp.replace(path)
    return rows


def write_rows(rows: Sequence[ResultRow], stream) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(COLUMNS)
    for row in rows:
        writer.writerow([_fmt(getattr(row, c)) for c in COLUMNS])


def read_rows(path: str | Path) -> list[dict]:
    """Load a results CSV; empty cells become None, numbers are parsed."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            parsed = {}
            for key, text in rec.items():
                if text == "":
                    parsed[key] = None
                elif key in ("method", "status"):
                    parsed[key] = text
                else:
                    number = float(text)
                    parsed[key] = int(number) if key in ("drop_id", "seed", "measuring_aps", "serving_aps",
                                                         "conic_solves", "bnb_nodes", "skipped") else number
            out.append(parsed)
    return out


def aggregate(rows: Sequence[ResultRow]) -> list[dict]:
    """Per-(SE, method) means and standard errors.

    Only (drop, SE) pairs where every method succeeded enter the averages,
    so the methods are compared on the same drops.
    """
    by_pair: dict[tuple[int, float], list[ResultRow]] = {}
    for row in rows:
        by_pair.setdefault((row.drop_id, row.target_se), []).append(row)
    complete = [group for group in by_pair.values() if all(r.status == "ok" for r in group)]
    methods = sorted({r.method for r in rows}, key=lambda m: METHODS.index(m) if m in METHODS else 99)
    out = []
    for se in sorted({r.target_se for r in rows}):
        for method in methods:
            sample = [r for group in complete for r in group if r.target_se == se and r.method == method]
            record = {"target_se": se, "method": method, "count": len(sample)}
            for metric in AGGREGATE_METRICS:
                values = np.array([getattr(r, metric) for r in sample], dtype=float)
                if values.size:
                    record[f"{metric}_mean"] = float(values.mean())
                    record[f"{metric}_stderr"] = (float(values.std(ddof=1) / np.sqrt(values.size))
                                                  if values.size > 1 else 0.0)
                else:
                    record[f"{metric}_mean"] = record[f"{metric}_stderr"] = None
            out.append(record)
    return out


def write_aggregates(records: Sequence[dict], stream) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(AGGREGATE_COLUMNS)
    for rec in records:
        writer.writerow([_fmt(rec[c]) for c in AGGREGATE_COLUMNS])


def aggregates_path(output: str | Path) -> Path:
    output = Path(output)
    return output.with_name(f"{output.stem}_aggregates{output.suffix or '.csv'}")


def run_experiment(plan: ExperimentPlan) -> list[ResultRow]:
    """Run every drop and write the CSV (and aggregates) if ``plan.output`` is set.

    Rows come back in drop-id order whatever the worker count.
    """
    drop_ids = range(plan.num_drops)
    if plan.workers > 1:
        with ProcessPoolExecutor(max_workers=plan.workers) as pool:
            per_drop = list(pool.map(_cached_drop, [plan] * plan.num_drops, drop_ids))
    else:
        per_drop = [_cached_drop(plan, d) for d in drop_ids]
    rows = [row for drop_rows in per_drop for row in drop_rows]
    if plan.output is not None:
        output = Path(plan.output)
        output.parent.mkdir(parents=True, exist_ok=True)
        with open(output, "w", newline="", encoding="utf-8") as fh:
            write_rows(rows, fh)
        if plan.emit_aggregates:
            with open(aggregates_path(output), "w", newline="", encoding="utf-8") as fh:
                write_aggregates(aggregate(rows), fh)
    return rows


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _parse_grid(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="apswitch-experiment",
        description="Compare greedy AP switching with branch-and-bound over random drops.")
    parser.add_argument("--config", type=Path, help="YAML/JSON file of scenario parameters")
    parser.add_argument("--seed", type=int, help="base seed (overrides rng_seed from the config)")
    parser.add_argument("--se-grid", type=_parse_grid, default=DEFAULT_SE_GRID,
                        help="comma-separated target SEs in bit/s/Hz (default 0.25,...,2.25)")
    parser.add_argument("--drops", type=int, default=50)
    parser.add_argument("--methods", choices=("proposed", "mbsocp", "both"), default="both")
    parser.add_argument("--realizations", type=int, help="Monte Carlo channel realizations per link")
    parser.add_argument("--out", type=Path, default=Path("results.csv"))
    parser.add_argument("--tol", type=float, default=DEFAULT_TOL, help="conic solver tolerance")
    parser.add_argument("--emit-aggregates", type=_parse_bool, default=True)
    parser.add_argument("--workers", type=int, default=1, help="drops solved in parallel")
    parser.add_argument("--timing", type=_parse_bool, default=True,
                        help="record wall times; 'off' writes zeros so reruns are byte-identical")
    parser.add_argument("--cache-dir", type=Path, help="keep per-drop results here and reuse them")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    changes = {}
    if args.seed is not None:
        changes["rng_seed"] = args.seed
    if args.realizations is not None:
        changes["num_channel_realizations"] = args.realizations
    try:
        config = ScenarioConfig.from_file(args.config) if args.config else ScenarioConfig()
        config = config.replace(**changes)
        plan = ExperimentPlan(config=config, se_grid=args.se_grid, num_drops=args.drops,
                              methods=args.methods, output=args.out, tol=args.tol, workers=args.workers,
                              timing=args.timing, emit_aggregates=args.emit_aggregates,
                              cache_dir=args.cache_dir)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    rows = run_experiment(plan)
    buf = io.StringIO()
    write_aggregates(aggregate(rows), buf)
    log.info("aggregates:\n%s", buf.getvalue())
    print(f"wrote {len(rows)} rows to {plan.output}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
