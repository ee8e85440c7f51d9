"""Distributed preconditioned conjugate gradient with optional resilience.

One driver runs four modes:

* ``plain``  — no redundancy.
* ``esr``    — the product records a redundant copy of the search direction
  every iteration (queue capacity 2); a failure is repaired by exact state
  reconstruction at the current iteration, wasting no work.
* ``esrp``   — recording happens only on two consecutive iterations every
  ``period`` iterations (queue capacity 3), plus node-local duplicate copies
  of x, r, z, p and the stage scalar; a failure rolls survivors back to the
  last completed storage stage and reconstructs the failed segments there.
* ``imcr``   — every ``period`` iterations each node checkpoints its dynamic
  state locally and at its designated destinations; a failure restores the
  last checkpoint bitwise.

All modes execute identical floating-point arithmetic in the failure-free
case, so their iterates are bitwise equal. Reductions run in fixed ascending
rank order; per-node products accumulate in storage order.

A failure event fires while its iteration runs, immediately after the
matrix-vector communication of that iteration (the point where a real failure
surfaces) and after the communication-free duplicate refresh it may carry.
No state update of the interrupted iteration has happened at that point, so
the destroyed data is exactly the iteration-boundary state.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import recovery as _recovery
from .cluster import (
    DuplicateSet,
    FailureEvent,
    SimCluster,
)
from .redundancy import (
    CommPlan,
    RedundancyPlan,
    build_comm_plan,
    compute_extra_sets,
    perform_product,
)
from .sparse import (
    BlockJacobiPreconditioner,
    Partition,
    SparseMatrix,
)

MODES = ("plain", "esr", "esrp", "imcr")


class SolverBreakdownError(RuntimeError):
    """The short recurrence hit a non-positive curvature/energy term."""


@dataclass(frozen=True)
class SolverConfig:
    """Stopping rule and resilience selection.

    ``period`` is the storage/checkpoint interval: ignored for ``plain``,
    forced to 1 for ``esr``, at least 3 for ``esrp`` (1 would *be* esr and 2
    cannot keep two consecutive recorded directions ahead of the eviction
    window), and at least 1 for ``imcr``.
    """

    rtol: float = 1e-8
    max_iterations: int | None = None
    mode: str = "plain"
    period: int = 0
    nredu: int = 1

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.rtol <= 0:
            raise ValueError("rtol must be positive")
        if self.nredu < 1:
            raise ValueError("redundancy degree must be >= 1")
        if self.mode == "esrp":
            if self.period == 1:
                # A period of 1 stores every iteration: that is esr.
                object.__setattr__(self, "mode", "esr")
            elif self.period == 2:
                raise ValueError(
                    "storage period 2 is unsupported: the second stored "
                    "direction of a stage would evict the copy the previous "
                    "stage still needs"
                )
            elif self.period < 3:
                raise ValueError("esrp requires period >= 3")
        if self.mode == "esr":
            object.__setattr__(self, "period", 1)
        if self.mode == "imcr" and self.period < 1:
            raise ValueError("imcr requires period >= 1")


@dataclass
class TrajectoryLog:
    """Relative residual after every executed iteration, plus event markers.

    ``entries`` hold (step, iteration, relres) with ``step`` a monotone
    counter over executed iterations; after a rollback the same iteration
    number appears again under a later step. ``events`` hold
    (step, iteration, kind, detail).
    """

    entries: list[tuple[int, int, float]] = field(default_factory=list)
    events: list[tuple[int, int, str, dict]] = field(default_factory=list)

    def record(self, step: int, iteration: int, relres: float) -> None:
        self.entries.append((step, iteration, relres))

    def mark(self, step: int, iteration: int, kind: str, **detail) -> None:
        self.events.append((step, iteration, kind, dict(detail)))

    def series_from(self, iteration: int, *, min_step: int = 0) -> list[tuple[int, float]]:
        """(iteration, relres) pairs for iterations >= the given one, taking
        the latest recorded occurrence of each iteration past min_step."""
        out: dict[int, float] = {}
        for step, j, rr in self.entries:
            if j >= iteration and step >= min_step:
                out[j] = rr
        return sorted(out.items())

    def first_event(self, kind: str) -> tuple[int, int, str, dict] | None:
        for ev in self.events:
            if ev[2] == kind:
                return ev
        return None


@dataclass
class SolveResult:
    x: np.ndarray
    iterations: int
    converged: bool
    relres: float
    trajectory: TrajectoryLog
    bytes_by_tag: dict[str, int]
    aspmv_calls: int
    recovery: "_recovery.RecoveryReport | None"
    wall_seconds: float
    residual: np.ndarray
    failure_fired: bool


def converged(r_norm: float, b_norm: float, rtol: float) -> bool:
    """Relative-residual stopping rule (strict inequality)."""
    if b_norm == 0.0:
        if r_norm == 0.0:
            return True
        raise ValueError("zero right-hand side with nonzero residual")
    return r_norm / b_norm < rtol


class Driver:
    """Executes the iteration loop on a cluster; recovery hooks back into it."""

    def __init__(
        self,
        A: SparseMatrix,
        M: BlockJacobiPreconditioner,
        b: np.ndarray,
        part: Partition,
        config: SolverConfig,
        *,
        x0: np.ndarray | None = None,
        failure: FailureEvent | None = None,
        bytes_by_tag: dict[str, int] | None = None,
        iteration_hook: Callable[["Driver", int], None] | None = None,
        recovery_hook: Callable[["Driver", "_recovery.RecoveryReport"], None] | None = None,
    ):
        self.A = A
        self.M = M
        self.b = np.asarray(b, dtype=np.float64)
        self.part = part
        self.config = config
        self.x0 = np.zeros(A.n) if x0 is None else np.asarray(x0, dtype=np.float64)
        self.plan: CommPlan = build_comm_plan(A, part)
        needs_redundancy = config.mode in ("esr", "esrp")
        self.rplan: RedundancyPlan | None = (
            compute_extra_sets(self.plan, part, config.nredu)
            if needs_redundancy
            else None
        )
        capacity = {"esr": 2, "esrp": 3}.get(config.mode, 0)
        self.cluster = SimCluster(
            A, part, M, self.b, queue_capacity=capacity, bytes_by_tag=bytes_by_tag
        )
        self.pending_failure = failure
        self.failure_fired = False
        self.iteration_hook = iteration_hook
        self.recovery_hook = recovery_hook
        self.trajectory = TrajectoryLog()
        self.j = 0
        self.step = 0
        self.iterations = 0
        self.aspmv_calls = 0
        self.recovery_report: _recovery.RecoveryReport | None = None
        self._rz: float | None = None
        self.b_norm = 0.0

    # -- helpers -------------------------------------------------------------

    def _dot(self, field_a: str, field_b: str) -> float:
        contribs = {
            node.rank: float(np.dot(getattr(node, field_a), getattr(node, field_b)))
            for node in self.cluster.nodes
        }
        return self.cluster.allreduce_sum(contribs)

    def assemble(self, field_name: str) -> np.ndarray:
        return np.concatenate(
            [getattr(node, field_name) for node in self.cluster.nodes]
        )

    def seg(self, arr: np.ndarray, rank: int) -> np.ndarray:
        lo, hi = self.part.ranges[rank]
        return arr[lo:hi]

    def init_state(self) -> None:
        """(Re)initialize the dynamic state from x0; used at start and restart."""
        for node in self.cluster.nodes:
            node.x = self.seg(self.x0, node.rank).copy()
            node.alpha = 0.0
            node.beta = 0.0
            node.duplicates = DuplicateSet()
            node.queue.clear()
            node.checkpoint_local = None
            node.checkpoint_store.clear()
        if np.any(self.x0):
            for node in self.cluster.nodes:
                node.p = node.x.copy()
            perform_product(self.cluster, self.plan)
            for node in self.cluster.nodes:
                node.r = self.seg(self.b, node.rank) - node.q
        else:
            for node in self.cluster.nodes:
                node.r = self.seg(self.b, node.rank).copy()
        for node in self.cluster.nodes:
            node.z = self.M.apply_range(node.r, node.lo, node.hi)
            node.p = node.z.copy()
            node.q[:] = 0.0
        self.j = 0
        self._rz = None

    def _storage_kind(self, j: int) -> str | None:
        mode = self.config.mode
        if mode == "esr":
            return "every"
        if mode == "esrp":
            T = self.config.period
            if j % T == 0 and j > 2:
                return "first"
            if (j - 1) % T == 0 and j > 2:
                return "second"
        return None

    def _refresh_duplicates(self, j: int) -> None:
        for node in self.cluster.nodes:
            d = node.duplicates
            d.stage_tag = j
            d.x = node.x.copy()
            d.r = node.r.copy()
            d.z = node.z.copy()
            d.p = node.p.copy()
            d.beta_star = d.beta_pending

    # -- main loop -----------------------------------------------------------

    def run(self) -> SolveResult:
        t_begin = time.perf_counter()
        cfg = self.config
        max_iterations = (
            cfg.max_iterations if cfg.max_iterations is not None else 10 * self.A.n
        )
        self.init_state()
        self.b_norm = float(np.sqrt(self._dot_static(self.b)))
        rr = self._dot("r", "r")
        self._initial_relres = self._relres(np.sqrt(rr))
        done = converged(np.sqrt(rr), self.b_norm, cfg.rtol)

        while not done:
            if self.iterations >= max_iterations:
                raise SolverBreakdownError(
                    f"no convergence within {max_iterations} iterations"
                )
            finished = self._run_body()
            if finished is None:
                continue  # iteration abandoned by a failure; resume at target
            done = finished

        x = self.assemble("x")
        r = self.assemble("r")
        return SolveResult(
            x=x,
            iterations=self.iterations,
            converged=True,
            relres=self._last_relres(),
            trajectory=self.trajectory,
            bytes_by_tag=dict(self.cluster.bytes_by_tag),
            aspmv_calls=self.aspmv_calls,
            recovery=self.recovery_report,
            wall_seconds=time.perf_counter() - t_begin,
            residual=r,
            failure_fired=self.failure_fired,
        )

    def _dot_static(self, vec: np.ndarray) -> float:
        contribs = {
            node.rank: float(np.dot(self.seg(vec, node.rank), self.seg(vec, node.rank)))
            for node in self.cluster.nodes
        }
        return self.cluster.allreduce_sum(contribs)

    def _relres(self, r_norm: float) -> float:
        return r_norm / self.b_norm if self.b_norm else 0.0

    def _last_relres(self) -> float:
        if self.trajectory.entries:
            return self.trajectory.entries[-1][2]
        return getattr(self, "_initial_relres", 0.0)

    def _run_body(self) -> bool | None:
        """One iteration. Returns convergence, or None if a failure abandoned it."""
        cfg = self.config
        j = self.j
        if self.iteration_hook is not None:
            self.iteration_hook(self, j)

        if cfg.mode == "imcr" and j > 0 and j % cfg.period == 0:
            _recovery.take_checkpoints(self, j)
            self.trajectory.mark(self.step, j, "checkpoint", tag=j)

        storage = self._storage_kind(j)
        if storage is None:
            perform_product(self.cluster, self.plan)
        else:
            perform_product(
                self.cluster, self.plan, rplan=self.rplan, record_tag=j
            )
            self.aspmv_calls += 1
            if storage == "second":
                self._refresh_duplicates(j)
                self.trajectory.mark(self.step, j, "storage", stage_tag=j)

        if (
            self.pending_failure is not None
            and self.pending_failure.iteration == j
        ):
            event = self.pending_failure
            self.pending_failure = None
            self.failure_fired = True
            self.trajectory.mark(self.step, j, "failure", ranks=event.ranks)
            report = _recovery.handle_failure(self, event)
            self.recovery_report = report
            self.trajectory.mark(
                self.step,
                report.rollback_target,
                "recovery",
                method=report.method,
                rollback_target=report.rollback_target,
                restarted=report.restarted,
            )
            if self.recovery_hook is not None:
                self.recovery_hook(self, report)
            self._rz = None
            return None

        rz = self._rz if self._rz is not None else self._dot("r", "z")
        pq = self._dot("p", "q")
        if rz <= 0.0 or pq <= 0.0:
            raise SolverBreakdownError(
                f"indefinite term at iteration {j}: r.z={rz:.3e}, p.Ap={pq:.3e}"
            )
        alpha = rz / pq
        for node in self.cluster.nodes:
            node.x += alpha * node.p
            node.r -= alpha * node.q
            node.z = self.M.apply_range(node.r, node.lo, node.hi)
            node.alpha = alpha
        rz_new = self._dot("r", "z")
        beta = rz_new / rz
        for node in self.cluster.nodes:
            node.p = node.z + beta * node.p
            node.beta = beta
        if storage == "first":
            for node in self.cluster.nodes:
                node.duplicates.beta_pending = beta
        self._rz = rz_new

        rr = self._dot("r", "r")
        relres = self._relres(np.sqrt(rr))
        self.trajectory.record(self.step, j, relres)
        self.step += 1
        self.iterations += 1
        self.j = j + 1
        return converged(np.sqrt(rr), self.b_norm, cfg.rtol)


def solve(
    A: SparseMatrix,
    M: BlockJacobiPreconditioner,
    b: np.ndarray,
    part: Partition,
    config: SolverConfig,
    *,
    x0: np.ndarray | None = None,
    failure: FailureEvent | None = None,
    iteration_hook: Callable[[Driver, int], None] | None = None,
    recovery_hook: Callable[[Driver, "_recovery.RecoveryReport"], None] | None = None,
) -> SolveResult:
    """Run the distributed solver on a fresh simulated cluster."""
    driver = Driver(
        A,
        M,
        b,
        part,
        config,
        x0=x0,
        failure=failure,
        iteration_hook=iteration_hook,
        recovery_hook=recovery_hook,
    )
    return driver.run()


def reference_pcg(
    A: SparseMatrix,
    M: BlockJacobiPreconditioner,
    b: np.ndarray,
    part: Partition,
    *,
    rtol: float = 1e-8,
    max_iterations: int | None = None,
    x0: np.ndarray | None = None,
) -> tuple[np.ndarray, int]:
    """Single-stream reference implementation of the same iteration.

    Independent of the cluster machinery; dot products are accumulated
    segment-by-segment in ascending rank order to match the distributed
    reduction's bracketing.
    """
    from .sparse import matvec

    def blockdot(u: np.ndarray, v: np.ndarray) -> float:
        total = 0.0
        for lo, hi in part.ranges:
            total += float(np.dot(u[lo:hi], v[lo:hi]))
        return total

    n = A.n
    limit = max_iterations if max_iterations is not None else 10 * n
    x = np.zeros(n) if x0 is None else x0.astype(np.float64).copy()
    r = b - matvec(A, x) if np.any(x) else b.copy()
    b_norm = np.sqrt(blockdot(b, b))
    if converged(np.sqrt(blockdot(r, r)), b_norm, rtol):
        return x, 0
    z = M.apply(r)
    p = z.copy()
    rz = blockdot(r, z)
    iterations = 0
    while True:
        if iterations >= limit:
            raise SolverBreakdownError(f"no convergence within {limit} iterations")
        q = matvec(A, p)
        pq = blockdot(p, q)
        if rz <= 0.0 or pq <= 0.0:
            raise SolverBreakdownError("indefinite term in reference iteration")
        alpha = rz / pq
        x += alpha * p
        r -= alpha * q
        z = M.apply(r)
        rz_new = blockdot(r, z)
        beta = rz_new / rz
        p = z + beta * p
        rz = rz_new
        iterations += 1
        if converged(np.sqrt(blockdot(r, r)), b_norm, rtol):
            return x, iterations
