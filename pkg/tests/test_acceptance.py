"""Acceptance suite: ten end-to-end criteria covering mode equivalence,
exact and rollback recovery, redundancy coverage, checkpoint restore,
drift behavior, and communication-volume trends.

Each test prints one PASS line with its measured evidence; run with
``pytest -v -s tests/test_acceptance.py`` to see them all.
"""
from __future__ import annotations

import itertools
import math
import time

import numpy as np
import pytest

from ftpcg import (
    FailureEvent,
    SolverConfig,
    build_block_jacobi,
    build_comm_plan,
    buddy,
    compute_extra_sets,
    generate_poisson2d,
    generate_random_banded,
    make_block_row_partition,
    solve,
    worst_case_failure_iteration,
)
from ftpcg.harness import ExperimentSpec, residual_drift, run_experiment
from ftpcg.redundancy import distinct_recipients


def _problem(grid, num_nodes):
    A = generate_poisson2d(grid)
    part = make_block_row_partition(A.n, num_nodes)
    M = build_block_jacobi(A, part, 32)
    b = np.ones(A.n)
    return A, part, M, b


@pytest.fixture(scope="module")
def poisson32_n8_problem():
    return _problem(32, 8)


@pytest.fixture(scope="module")
def poisson32_n8_reference(poisson32_n8_problem):
    A, part, M, b = poisson32_n8_problem
    return solve(A, M, b, part, SolverConfig())


def test_criterion_01_failure_free_equivalence():
    """Plain, per-iteration storage, and periodic storage produce bitwise
    identical results on a grid of problems and cluster sizes."""
    configs = [
        SolverConfig(),
        SolverConfig(mode="esr"),
        SolverConfig(mode="esrp", period=5),
        SolverConfig(mode="esrp", period=20),
        SolverConfig(mode="esrp", period=50),
    ]
    cases = checked = 0
    worst = 0.0
    for grid, num_nodes in itertools.product((16, 32, 64), (4, 8, 16)):
        A, part, M, b = _problem(grid, num_nodes)
        t_begin = time.perf_counter()
        results = [solve(A, M, b, part, cfg) for cfg in configs]
        elapsed = time.perf_counter() - t_begin
        worst = max(worst, elapsed)
        assert elapsed < 10.0, f"grid={grid} N={num_nodes} took {elapsed:.1f}s"
        baseline = results[0]
        for res in results[1:]:
            assert res.iterations == baseline.iterations
            assert np.array_equal(res.x, baseline.x)
            checked += 1
        cases += 1
    print(
        f"\nACCEPTANCE 1: PASS - bitwise-equal x and equal iteration counts on "
        f"{cases} problem/cluster cases x {len(configs) - 1} resilient configs "
        f"({checked} comparisons, slowest case {worst:.2f}s)"
    )


def test_criterion_02_exact_recovery_at_midpoint(
    poisson32_n8_problem, poisson32_n8_reference
):
    """Single failure midway: convergence, iteration count within +-2 of the
    reference count, and the resumed residual trajectory replays the
    failure-free one."""
    A, part, M, b = poisson32_n8_problem
    C = poisson32_n8_reference.iterations
    j_fail = C // 2
    free = solve(A, M, b, part, SolverConfig(mode="esr"))
    res = solve(
        A, M, b, part, SolverConfig(mode="esr"),
        failure=FailureEvent(j_fail, (4,)),
    )
    assert res.converged
    assert res.relres < 1e-8
    assert abs(res.iterations - C) <= 2
    assert res.recovery.wasted_iterations == 0

    recovery_step = res.trajectory.first_event("recovery")[0]
    resumed = dict(res.trajectory.series_from(j_fail, min_step=recovery_step))
    reference = dict(free.trajectory.series_from(j_fail))
    compared = 0
    for j in range(j_fail, j_fail + 20):
        if j in reference:
            assert resumed[j] == pytest.approx(reference[j], rel=1e-6)
            compared += 1
    assert compared == min(20, len(reference))
    print(
        f"\nACCEPTANCE 2: PASS - failure at {j_fail}: {res.iterations} vs C={C} "
        f"iterations, relres={res.relres:.2e}, trajectory match over "
        f"{compared} resumed iterations"
    )


def test_criterion_03_multi_failure_sweep(
    poisson32_n8_problem, poisson32_n8_reference
):
    """Every contiguous failed block of size nredu (all anchors, covering the
    start and center placements) recovers under both storage schemes."""
    A, part, M, b = poisson32_n8_problem
    C = poisson32_n8_reference.iterations
    t_begin = time.perf_counter()
    runs = 0
    for nredu in (1, 3):
        for mode, period in (("esr", 0), ("esrp", 5)):
            cfg = SolverConfig(mode=mode, period=period, nredu=nredu)
            for anchor in range(8):
                ranks = tuple(sorted((anchor + i) % 8 for i in range(nredu)))
                res = solve(
                    A, M, b, part, cfg, failure=FailureEvent(C // 2, ranks)
                )
                assert res.converged and res.relres < 1e-8
                rec = res.recovery
                assert abs(res.iterations - (C + rec.wasted_iterations)) <= 2
                assert rec.inner_relres < 1e-14
                runs += 1
    elapsed = time.perf_counter() - t_begin
    assert elapsed < 120.0
    print(
        f"\nACCEPTANCE 3: PASS - {runs} failure-block runs (nredu 1 and 3, all "
        f"anchors, both storage schemes) recovered; inner solves < 1e-14; "
        f"{elapsed:.1f}s total"
    )


def test_criterion_04_rollback_accounting(
    poisson32_n8_problem, poisson32_n8_reference
):
    """Worst-case injection with period 20: the rollback discards T-2 (+-1)
    iterations and the total grows by exactly the wasted work."""
    A, part, M, b = poisson32_n8_problem
    C = poisson32_n8_reference.iterations
    period = 20
    j_fail = worst_case_failure_iteration(C, period)
    res = solve(
        A, M, b, part, SolverConfig(mode="esrp", period=period),
        failure=FailureEvent(j_fail, (3,)),
    )
    wasted = res.recovery.wasted_iterations
    assert abs(wasted - (period - 2)) <= 1
    assert abs(res.iterations - (C + wasted)) <= 2
    print(
        f"\nACCEPTANCE 4: PASS - worst-case failure at {j_fail} (C={C}, T=20): "
        f"wasted={wasted} (T-2={period - 2} +-1), total={res.iterations} "
        f"= C+wasted{res.iterations - (C + wasted):+d}"
    )


def test_criterion_05_queue_semantics(poisson32_n8_problem):
    """A failure immediately after the first recorded product of a storage
    stage must roll back to the previous stage's iteration, because the
    second direction of the interrupted stage was never stored."""
    A, part, M, b = poisson32_n8_problem
    period = 5
    stage_first = 10  # first storage iteration of the stage (2T)
    previous_stage_end = 6  # last completed stage ended at T+1
    res = solve(
        A, M, b, part, SolverConfig(mode="esrp", period=period),
        failure=FailureEvent(stage_first, (2,)),
    )
    assert res.recovery.rollback_target == previous_stage_end
    assert res.converged
    print(
        f"\nACCEPTANCE 5: PASS - failure at the first stored direction of "
        f"iteration {stage_first} rolled back to iteration "
        f"{res.recovery.rollback_target}"
    )


def test_criterion_06_redundancy_coverage():
    """On random banded problems every entry reaches at least nredu distinct
    non-owner nodes per recorded product; when every owned column couples to
    a foreign row block, degree-1 redundancy needs no extra traffic at all."""
    checked = 0
    for n, num_nodes, hb in ((60, 6, 2), (128, 8, 3), (200, 16, 7)):
        A = generate_random_banded(n, hb, seed=n)
        part = make_block_row_partition(n, num_nodes)
        plan = build_comm_plan(A, part)
        for nredu in (1, 2, 3):
            rplan = compute_extra_sets(plan, part, nredu)
            for i in range(n):
                recipients = distinct_recipients(plan, rplan, part, i)
                assert part.owner_of(i) not in recipients
                assert len(recipients) >= nredu
                checked += 1

    # column condition: full band wider than every block
    A = generate_random_banded(24, 6, seed=1, density=1.0)
    part = make_block_row_partition(24, 4)
    dense = A.to_dense()
    for lo, hi in part.ranges:
        off_block = np.delete(dense, np.s_[lo:hi], axis=0)[:, lo:hi]
        assert np.all(np.any(off_block != 0, axis=0))
    plan = build_comm_plan(A, part)
    rplan = compute_extra_sets(plan, part, 1)
    assert rplan.extra_sets == {}
    print(
        f"\nACCEPTANCE 6: PASS - {checked} entry/degree coverage checks; "
        f"column-condition matrix ships zero extra entries at degree 1"
    )


def test_criterion_07_buddy_mapping():
    """The destination rule walks nearest neighbors: forward ceil(k/2) for
    odd ordinals, backward k/2 for even, wrapping modulo the cluster size,
    with all destinations distinct."""
    checked = 0
    for N in range(2, 33):
        for s in range(N):
            dests = []
            for k in range(1, N):
                expected = (
                    (s + math.ceil(k / 2)) % N if k % 2 == 1 else (s - k // 2) % N
                )
                got = buddy(s, k, N)
                assert got == expected
                dests.append(got)
                checked += 1
            assert len(set(dests)) == len(dests)
            assert s not in dests
    assert buddy(7, 1, 8) == 0 and buddy(0, 2, 8) == 7  # wraparound spot checks
    print(
        f"\nACCEPTANCE 7: PASS - destination rule verified for all "
        f"N <= 32 ({checked} ordinals), all distinct, wraparound included"
    )


def test_criterion_08_checkpoint_exactness(
    poisson32_n8_problem, poisson32_n8_reference
):
    """Checkpoint restore is bitwise exact and the run replays the reference
    arithmetic: total iterations exceed the reference count by exactly the
    discarded iterations."""
    A, part, M, b = poisson32_n8_problem
    C = poisson32_n8_reference.iterations
    period = 10
    j_fail = 27
    j_star = 20

    snapshots = {}

    def snapshot_hook(driver, j):
        if j == j_star:
            snapshots[j] = {
                f: driver.assemble(f).copy() for f in ("x", "r", "z", "p")
            }

    solve(
        A, M, b, part, SolverConfig(mode="imcr", period=period),
        iteration_hook=snapshot_hook,
    )

    restored = {}

    def recovery_hook(driver, report):
        restored["report"] = report
        restored["state"] = {
            f: driver.assemble(f).copy() for f in ("x", "r", "z", "p")
        }

    res = solve(
        A, M, b, part, SolverConfig(mode="imcr", period=period),
        failure=FailureEvent(j_fail, (5,)),
        recovery_hook=recovery_hook,
    )
    assert restored["report"].rollback_target == j_star
    for f in ("x", "r", "z", "p"):
        assert np.array_equal(restored["state"][f], snapshots[j_star][f])
    assert res.iterations == C + (j_fail - j_star)
    assert np.array_equal(res.x, poisson32_n8_reference.x)
    print(
        f"\nACCEPTANCE 8: PASS - restore at {j_star} bitwise equals the "
        f"snapshot; total {res.iterations} = C + {j_fail - j_star} exactly"
    )


def test_criterion_09_residual_drift(poisson32_n8_problem, poisson32_n8_reference):
    """Failure-free resilient runs report the identical drift value; a
    failure may perturb it only within an order of magnitude."""
    A, part, M, b = poisson32_n8_problem
    drift_ref = residual_drift(
        A, b, poisson32_n8_reference.x, poisson32_n8_reference.residual
    )
    esrp_free = solve(A, M, b, part, SolverConfig(mode="esrp", period=5))
    drift_free = residual_drift(A, b, esrp_free.x, esrp_free.residual)
    assert drift_free == drift_ref  # bitwise-equal states, identical metric

    C = poisson32_n8_reference.iterations
    res = solve(
        A, M, b, part, SolverConfig(mode="esrp", period=5),
        failure=FailureEvent(worst_case_failure_iteration(C, 5), (4,)),
    )
    drift_fail = residual_drift(A, b, res.x, res.residual)
    assert abs(drift_fail - drift_ref) <= 10.0 * abs(drift_ref) + 1e-12
    print(
        f"\nACCEPTANCE 9: PASS - drift identical failure-free "
        f"({drift_ref:+.3e}); with failure {drift_fail:+.3e}, degradation "
        f"within one order of magnitude"
    )


def test_criterion_10_redundant_volume_falls_with_period(poisson32_n8_problem):
    """Extra-copy traffic volume strictly decreases as the storage interval
    grows, the deterministic analogue of falling failure-free overheads."""
    A, part, M, b = poisson32_n8_problem
    volumes = []
    for period in (5, 20, 50):
        res = solve(A, M, b, part, SolverConfig(mode="esrp", period=period))
        volumes.append(res.bytes_by_tag["redundant"])
    assert volumes[0] > volumes[1] > volumes[2]
    print(
        f"\nACCEPTANCE 10: PASS - redundant-tag bytes fall strictly with the "
        f"interval: T=5: {volumes[0]}, T=20: {volumes[1]}, T=50: {volumes[2]}"
    )
