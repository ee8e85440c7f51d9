"""Experiment harness: configures problems, runs the scenario battery
(reference / failure-free resilient / failure), computes overhead and drift
metrics, and writes JSON + CSV reports.

Wall-clock numbers are reported for completeness but the meaningful
desk-scale metrics are the deterministic ones: iteration counts, wasted
iterations, and per-tag byte counters.
"""
from __future__ import annotations

import csv
import json
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cluster import FailureEvent, UnrecoverableFailureError
from .solver import (
    SolveResult,
    SolverBreakdownError,
    SolverConfig,
    solve,
)
from .sparse import (
    BlockJacobiPreconditioner,
    Partition,
    SparseMatrix,
    build_block_jacobi,
    generate_poisson2d,
    generate_random_banded,
    load_matrix_market,
    make_block_row_partition,
    matvec,
)

SCHEMA_VERSION = 1
DEFAULT_PRECONDITIONER_BLOCK = 32

CSV_COLUMNS = [
    "scenario",
    "mode",
    "period",
    "nredu",
    "n_fail",
    "location",
    "repetition",
    "C",
    "iterations",
    "wasted_iterations",
    "converged",
    "relres",
    "t",
    "t0",
    "relative_overhead",
    "reconstruction_overhead",
    "residual_drift",
    "failure_iteration",
    "rollback_target",
    "bytes_spmv",
    "bytes_redundant",
    "bytes_gather",
    "bytes_checkpoint",
    "bytes_scalar",
    "bytes_total",
    "error",
]


@dataclass(frozen=True)
class ExperimentSpec:
    """One experiment: a problem, a resilience configuration, and a failure
    plan. ``failures`` is the number of simultaneously failing nodes (0 for
    none); they form a contiguous rank block anchored at ``location`` unless
    ``explicit_ranks`` pins them. ``failure_iteration`` of None places the
    failure by the worst-case rule (two iterations before the end of the
    storage/checkpoint interval containing half the reference count)."""

    matrix: str = "poisson2d"
    n: int = 16
    nodes: int = 4
    mode: str = "plain"
    period: int = 0
    nredu: int = 1
    failures: int = 0
    location: str = "center"
    failure_iteration: int | None = None
    explicit_ranks: tuple[int, ...] | None = None
    rtol: float = 1e-8
    reps: int = 5
    seed: int = 0
    preconditioner_block: int = DEFAULT_PRECONDITIONER_BLOCK

    def __post_init__(self) -> None:
        if self.location not in ("start", "center"):
            raise ValueError("location must be 'start' or 'center'")
        if self.failures < 0:
            raise ValueError("failures must be >= 0")
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if self.explicit_ranks is not None:
            object.__setattr__(
                self, "explicit_ranks", tuple(sorted(self.explicit_ranks))
            )


@dataclass
class RunReport:
    """One row of results: a single repetition of a single scenario."""

    scenario: str
    mode: str
    period: int
    nredu: int
    n_fail: int
    location: str
    repetition: int
    C: int
    iterations: int
    wasted_iterations: int
    converged: bool
    relres: float
    t: float
    t0: float
    relative_overhead: float
    reconstruction_overhead: float
    residual_drift: float
    failure_iteration: int | None = None
    rollback_target: int | None = None
    bytes_by_tag: dict[str, int] = field(default_factory=dict)
    error: str | None = None


def worst_case_failure_iteration(C: int, T: int) -> int:
    """Iteration two before the end of the storage/checkpoint interval that
    contains iteration C//2 (for T = 1, simply C//2)."""
    if T < 1:
        raise ValueError("interval must be >= 1")
    if C < 1:
        raise ValueError("reference iteration count must be >= 1")
    j = C // 2 if T == 1 else ((C // 2) // T + 1) * T - 2
    if not 1 <= j < C:
        raise ValueError(
            f"no valid worst-case injection point for C={C}, T={T} "
            f"(computed iteration {j} outside [1, {C}))"
        )
    return j


def residual_drift(
    A: SparseMatrix, b: np.ndarray, x_end: np.ndarray, r_end: np.ndarray
) -> float:
    """Signed relative gap between the recursively updated residual norm and
    the true residual norm: (‖r_end‖ − ‖b − A x_end‖) / ‖b − A x_end‖.

    Computed out of band on assembled vectors; contributes no accounted
    bytes. A bitwise-exact solution (zero true residual) reports 0.0."""
    true_norm = float(np.linalg.norm(b - matvec(A, x_end)))
    if true_norm == 0.0:
        return 0.0
    return (float(np.linalg.norm(r_end)) - true_norm) / true_norm


def build_problem(
    spec: ExperimentSpec,
) -> tuple[SparseMatrix, Partition, BlockJacobiPreconditioner, np.ndarray]:
    """Materialize matrix, block-row partition, preconditioner, and b = 1."""
    if spec.matrix == "poisson2d":
        A = generate_poisson2d(spec.n)
    elif spec.matrix == "banded":
        A = generate_random_banded(spec.n, 5, seed=spec.seed)
    else:
        A = load_matrix_market(spec.matrix)
    part = make_block_row_partition(A.n, spec.nodes)
    M = build_block_jacobi(A, part, spec.preconditioner_block)
    b = np.ones(A.n)
    return A, part, M, b


def failure_ranks(spec: ExperimentSpec) -> tuple[int, ...]:
    if spec.explicit_ranks is not None:
        return spec.explicit_ranks
    anchor = 0 if spec.location == "start" else spec.nodes // 2
    if spec.failures > spec.nodes - 1:
        raise ValueError("at least one node must survive a failure event")
    return tuple((anchor + i) % spec.nodes for i in range(spec.failures))


def _effective_period(spec: ExperimentSpec) -> int:
    return 1 if spec.mode == "esr" else max(spec.period, 1)


def run_experiment(spec: ExperimentSpec) -> list[RunReport]:
    """Run the scenario battery for one experiment.

    Scenarios: (a) "reference" — plain mode, defines C and t0 (median over
    repetitions); (b) "failure_free" — the resilient configuration with no
    event (skipped for plain mode); (c) "failure" — same configuration with
    the failure event (skipped when no failures requested). Every repetition
    of every scenario yields one RunReport; errors are recorded per
    repetition rather than aborting the batch."""
    A, part, M, b = build_problem(spec)
    cfg_kwargs = dict(rtol=spec.rtol, nredu=spec.nredu)
    reference_cfg = SolverConfig(mode="plain", **cfg_kwargs)

    reference_runs: list[SolveResult] = []
    for _ in range(spec.reps):
        reference_runs.append(solve(A, M, b, part, reference_cfg))
    C = reference_runs[0].iterations
    t0 = statistics.median(res.wall_seconds for res in reference_runs)

    reports: list[RunReport] = []
    for rep, res in enumerate(reference_runs):
        reports.append(
            _report_from_result(
                spec, "reference", "plain", rep, res, C, t0, A, b, reference=True
            )
        )

    if spec.mode == "plain":
        resilient_cfg = reference_cfg
    else:
        resilient_cfg = SolverConfig(mode=spec.mode, period=spec.period, **cfg_kwargs)
        for rep in range(spec.reps):
            try:
                res = solve(A, M, b, part, resilient_cfg)
            except (SolverBreakdownError, UnrecoverableFailureError) as exc:
                reports.append(_error_report(spec, "failure_free", rep, C, t0, exc))
            else:
                reports.append(
                    _report_from_result(
                        spec, "failure_free", spec.mode, rep, res, C, t0, A, b
                    )
                )

    if spec.failures > 0 or spec.explicit_ranks is not None:
        ranks = failure_ranks(spec)
        iteration = (
            spec.failure_iteration
            if spec.failure_iteration is not None
            else worst_case_failure_iteration(C, _effective_period(spec))
        )
        event = FailureEvent(iteration, ranks)
        for rep in range(spec.reps):
            try:
                res = solve(A, M, b, part, resilient_cfg, failure=event)
            except (SolverBreakdownError, UnrecoverableFailureError) as exc:
                reports.append(
                    _error_report(
                        spec, "failure", rep, C, t0, exc, failure_iteration=iteration
                    )
                )
            else:
                reports.append(
                    _report_from_result(
                        spec,
                        "failure",
                        spec.mode,
                        rep,
                        res,
                        C,
                        t0,
                        A,
                        b,
                        failure_iteration=iteration,
                    )
                )
    return reports


def _report_from_result(
    spec: ExperimentSpec,
    scenario: str,
    mode: str,
    rep: int,
    res: SolveResult,
    C: int,
    t0: float,
    A: SparseMatrix,
    b: np.ndarray,
    *,
    reference: bool = False,
    failure_iteration: int | None = None,
) -> RunReport:
    drift = residual_drift(A, b, res.x, res.residual)
    recovery = res.recovery
    return RunReport(
        scenario=scenario,
        mode=mode,
        period=spec.period if mode != "plain" else 0,
        nredu=spec.nredu,
        n_fail=len(recovery.failed_ranks) if recovery else 0,
        location=spec.location,
        repetition=rep,
        C=C,
        iterations=res.iterations,
        wasted_iterations=recovery.wasted_iterations if recovery else 0,
        converged=res.converged,
        relres=res.relres,
        t=res.wall_seconds,
        t0=t0,
        relative_overhead=0.0 if reference else (res.wall_seconds - t0) / t0,
        reconstruction_overhead=(recovery.seconds / t0) if recovery else 0.0,
        residual_drift=drift,
        failure_iteration=failure_iteration,
        rollback_target=recovery.rollback_target if recovery else None,
        bytes_by_tag=dict(res.bytes_by_tag),
    )


def _error_report(
    spec: ExperimentSpec,
    scenario: str,
    rep: int,
    C: int,
    t0: float,
    exc: Exception,
    *,
    failure_iteration: int | None = None,
) -> RunReport:
    return RunReport(
        scenario=scenario,
        mode=spec.mode,
        period=spec.period,
        nredu=spec.nredu,
        n_fail=spec.failures,
        location=spec.location,
        repetition=rep,
        C=C,
        iterations=0,
        wasted_iterations=0,
        converged=False,
        relres=float("nan"),
        t=0.0,
        t0=t0,
        relative_overhead=float("nan"),
        reconstruction_overhead=float("nan"),
        residual_drift=float("nan"),
        failure_iteration=failure_iteration,
        rollback_target=None,
        error=f"{type(exc).__name__}: {exc}",
    )


def emit_report(reports: list[RunReport], path: str | Path) -> tuple[Path, Path]:
    """Write reports as versioned JSON plus a flat CSV (one row per run).

    ``path`` may carry a .json/.csv suffix or none; both files are written
    with the respective suffixes. Returns (json_path, csv_path)."""
    base = Path(path)
    if base.suffix in (".json", ".csv"):
        base = base.with_suffix("")
    json_path = base.with_suffix(".json")
    csv_path = base.with_suffix(".csv")
    json_path.parent.mkdir(parents=True, exist_ok=True)

    payload = {
        "schema_version": SCHEMA_VERSION,
        "reports": [asdict(r) for r in reports],
    }
    json_path.write_text(json.dumps(payload, indent=2) + "\n")

    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for r in reports:
            row = asdict(r)
            tags = row.pop("bytes_by_tag")
            for tag in ("spmv", "redundant", "gather", "checkpoint", "scalar"):
                row[f"bytes_{tag}"] = tags.get(tag, 0)
            row["bytes_total"] = sum(tags.values())
            writer.writerow(row)
    return json_path, csv_path


def load_reports(path: str | Path) -> list[RunReport]:
    """Reload reports from the JSON emitted by emit_report (exact float
    round-trip)."""
    payload = json.loads(Path(path).read_text())
    version = payload.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema version: {version!r}")
    return [RunReport(**entry) for entry in payload["reports"]]


def aggregate(reports: list[RunReport]) -> list[dict]:
    """Median-aggregate repetitions per scenario.

    Groups by (scenario, mode, period, nredu, n_fail, location) and reports
    medians of the timing metrics alongside the deterministic fields."""
    groups: dict[tuple, list[RunReport]] = {}
    for r in reports:
        key = (r.scenario, r.mode, r.period, r.nredu, r.n_fail, r.location)
        groups.setdefault(key, []).append(r)

    rows = []
    for key in sorted(groups, key=str):
        runs = groups[key]
        ok = [r for r in runs if r.error is None]
        scenario, mode, period, nredu, n_fail, location = key
        row = {
            "scenario": scenario,
            "mode": mode,
            "period": period,
            "nredu": nredu,
            "n_fail": n_fail,
            "location": location,
            "reps": len(runs),
            "errors": len(runs) - len(ok),
        }
        if ok:
            row.update(
                C=ok[0].C,
                iterations=ok[0].iterations,
                wasted_iterations=ok[0].wasted_iterations,
                converged=all(r.converged for r in ok),
                median_t=statistics.median(r.t for r in ok),
                median_relative_overhead=statistics.median(
                    r.relative_overhead for r in ok
                ),
                median_reconstruction_overhead=statistics.median(
                    r.reconstruction_overhead for r in ok
                ),
                residual_drift=ok[0].residual_drift,
                rollback_target=ok[0].rollback_target,
            )
        rows.append(row)
    return rows
