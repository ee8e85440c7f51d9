"""Failure handling: exact state reconstruction, stage rollback, and
checkpoint restore.

Reconstruction rebuilds a failed node's dynamic segments at a target
iteration j* from (a) the two recorded consecutive search directions j*-1 and
j*, (b) the scalar that combined them, and (c) survivors' x and r entries at
the columns the failed rows couple to:

    z_f = p_f(j*) - beta(j*-1) * p_f(j*-1)
    r_f from z_f by applying the original preconditioner blocks (the
        off-block preconditioner coupling is zero for partition-respecting
        block Jacobi, so no survivor r entries are needed)
    w   = b_f - r_f - A[f, rest] x_rest(j*)
    x_f from the principal subsystem A[f, f] x_f = w, solved by a distributed
        inner PCG over the replacement nodes.

Plain exact reconstruction (storage every iteration) targets the interrupted
iteration itself; the periodic variant first rolls survivors back to their
duplicate copies from the last completed storage stage; checkpoint restore
copies the last checkpoint back bitwise.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .cluster import (
    Checkpoint,
    DuplicateSet,
    FailureEvent,
    Message,
    UnrecoverableFailureError,
)
from .redundancy import buddy, gather_lost_entries
from .sparse import Partition, extract_submatrix, make_block_row_partition, rowblock_matvec

if TYPE_CHECKING:  # pragma: no cover
    from .solver import Driver

INNER_RTOL = 1e-14
INNER_BLOCK_MAX = 10


@dataclass
class RecoveryReport:
    method: str
    failed_ranks: tuple[int, ...]
    failure_iteration: int
    rollback_target: int
    wasted_iterations: int
    gather_bytes: int
    inner_iterations: int
    inner_relres: float
    reconstruction_ok: bool
    restarted: bool
    seconds: float


# ---------------------------------------------------------------------------
# Inner subsystem solve
# ---------------------------------------------------------------------------

def solve_inner_system(
    A_ff,
    w: np.ndarray,
    ranges_f: list[tuple[int, int]],
    *,
    bytes_by_tag: dict[str, int] | None = None,
) -> tuple[np.ndarray, int, float]:
    """Solve the principal subsystem on the replacement nodes.

    Distributed PCG over one node per failed rank (each keeps its original,
    renumbered range), block Jacobi preconditioning with blocks of at most
    10 rows, stopping at relative residual 1e-14. The true residual is
    verified afterwards; if rounding drift left it above threshold, up to two
    deterministic refinement passes close the gap. Returns (solution, total
    iterations, true relative residual).
    """
    from .sparse import build_block_jacobi, matvec
    from .solver import Driver, SolverConfig

    sizes = [hi - lo for lo, hi in ranges_f]
    if sum(sizes) != A_ff.n or len(w) != A_ff.n:
        raise ValueError("subsystem ranges do not match the extracted matrix")
    pos = 0
    sub_ranges = []
    for sz in sizes:
        sub_ranges.append((pos, pos + sz))
        pos += sz
    sub_part = Partition(A_ff.n, tuple(sub_ranges))
    M_ff = build_block_jacobi(A_ff, sub_part, INNER_BLOCK_MAX)

    w_norm = float(np.linalg.norm(w))
    if w_norm == 0.0:
        return np.zeros(A_ff.n), 0, 0.0

    x = np.zeros(A_ff.n)
    iterations = 0
    relres_true = np.inf
    for attempt in range(3):
        res = w - matvec(A_ff, x) if attempt else w.copy()
        relres_true = float(np.linalg.norm(res)) / w_norm
        if relres_true < INNER_RTOL:
            break
        # Later passes only need to close the rounding gap, not full
        # accuracy; aim two orders below it so one pass suffices.
        rtol = 1e-2 * INNER_RTOL / relres_true if attempt else INNER_RTOL
        cfg = SolverConfig(rtol=max(rtol, 1e-15), mode="plain")
        driver = Driver(A_ff, M_ff, res, sub_part, cfg, bytes_by_tag=bytes_by_tag)
        result = driver.run()
        x = x + result.x
        iterations += result.iterations
        res = w - matvec(A_ff, x)
        relres_true = float(np.linalg.norm(res)) / w_norm
        if relres_true < INNER_RTOL:
            break
    return x, iterations, relres_true


# ---------------------------------------------------------------------------
# Exact state reconstruction at a target iteration
# ---------------------------------------------------------------------------

def _gather_survivor_x(
    driver: "Driver", failed: tuple[int, ...], from_duplicates: bool
) -> dict[int, np.ndarray]:
    """Full-length scratch per replacement holding survivors' x entries at the
    columns its rows need (zero elsewhere, including failed columns)."""
    A = driver.A
    part = driver.part
    cluster = driver.cluster
    owner = part.owner_array()
    failed_arr = np.asarray(failed)

    messages: list[Message] = []
    for fr in failed:
        lo, hi = part.ranges[fr]
        a, b = A.row_offsets[lo], A.row_offsets[hi]
        cols = np.unique(A.col_indices[a:b])
        ext = cols[~np.isin(owner[cols], failed_arr)]
        for s in np.unique(owner[ext]):
            idx = ext[owner[ext] == s]
            src = cluster.node(int(s))
            source_vec = src.duplicates.x if from_duplicates else src.x
            messages.append(
                Message(int(s), fr, "gather", source_vec[idx - src.lo], indices=idx)
            )
    delivered = cluster.exchange(messages)
    out: dict[int, np.ndarray] = {}
    for fr in failed:
        scratch = np.zeros(A.n)
        for m in delivered.get(fr, []):
            scratch[m.indices] = m.values
        out[fr] = scratch
    return out


def reconstruct_lost_state(
    driver: "Driver",
    failed: tuple[int, ...],
    target: int,
    beta_prev: float,
    *,
    from_duplicates: bool,
) -> tuple[int, float]:
    """Rebuild x, r, z, p segments of the failed ranks at iteration ``target``
    and install them on the replacements. Returns (inner iterations, inner
    true relative residual)."""
    if not failed:
        return 0, 0.0
    part = driver.part
    cluster = driver.cluster
    A = driver.A
    M = driver.M

    p_cur = gather_lost_entries(cluster, part, failed, target)
    p_prev = (
        gather_lost_entries(cluster, part, failed, target - 1)
        if target >= 1
        else {fr: np.zeros(part.size(fr)) for fr in failed}
    )
    x_scratch = _gather_survivor_x(driver, failed, from_duplicates)

    # One scalar per replacement: the combination coefficient beta(j*-1).
    survivors = [r for r in cluster.alive_ranks() if r not in set(failed)]
    if not survivors:
        raise UnrecoverableFailureError("no surviving node to supply scalars")
    scalar_src = survivors[0]
    cluster.exchange(
        [
            Message(scalar_src, fr, "gather", np.asarray([beta_prev]))
            for fr in failed
        ]
    )

    z_f: dict[int, np.ndarray] = {}
    r_f: dict[int, np.ndarray] = {}
    w_segs: list[np.ndarray] = []
    for fr in sorted(failed):
        lo, hi = part.ranges[fr]
        z_seg = p_cur[fr] - beta_prev * p_prev[fr]
        r_seg = M.multiply_range(z_seg, lo, hi)
        w = driver.b[lo:hi] - r_seg - rowblock_matvec(A, lo, hi, x_scratch[fr])
        z_f[fr], r_f[fr] = z_seg, r_seg
        w_segs.append(w)

    I_f = np.concatenate(
        [np.arange(*part.ranges[fr]) for fr in sorted(failed)]
    )
    A_ff = extract_submatrix(A, I_f, I_f)
    x_sub, inner_iterations, inner_relres = solve_inner_system(
        A_ff,
        np.concatenate(w_segs),
        [part.ranges[fr] for fr in sorted(failed)],
        bytes_by_tag=cluster.bytes_by_tag,
    )

    pos = 0
    for fr in sorted(failed):
        node = cluster.node(fr)
        L = node.seg_len
        node.x = x_sub[pos : pos + L].copy()
        node.r = r_f[fr]
        node.z = z_f[fr]
        node.p = p_cur[fr]
        node.alpha = 0.0
        node.beta = beta_prev
        pos += L
    return inner_iterations, inner_relres


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def take_checkpoints(driver: "Driver", tag: int) -> None:
    """Store each node's dynamic state locally and at its nredu destinations."""
    cluster = driver.cluster
    nredu = driver.config.nredu
    N = cluster.num_nodes
    messages: list[Message] = []
    for node in cluster.nodes:
        ck = Checkpoint(
            tag,
            node.rank,
            node.x.copy(),
            node.r.copy(),
            node.z.copy(),
            node.p.copy(),
            node.beta,
        )
        node.checkpoint_local = ck
        payload = ck.payload()
        for k in range(1, nredu + 1):
            messages.append(
                Message(node.rank, buddy(node.rank, k, N), "checkpoint", payload)
            )
    delivered = cluster.exchange(messages)
    for rank, inbox in delivered.items():
        store = cluster.node(rank).checkpoint_store
        for m in inbox:
            store[m.source] = Checkpoint.from_payload(tag, m.source, m.values)


def restore_from_checkpoints(driver: "Driver", event: FailureEvent) -> int | None:
    """Bring every node back to the last checkpoint; returns its tag, or None
    when no checkpoint exists yet."""
    cluster = driver.cluster
    failed = set(event.ranks)
    tags = {
        node.checkpoint_local.tag
        for node in cluster.nodes
        if node.rank not in failed and node.checkpoint_local is not None
    }
    if not tags:
        return None
    tag = max(tags)

    messages: list[Message] = []
    for fr in sorted(failed):
        holders = [
            s
            for s in cluster.alive_ranks()
            if s not in failed
            and fr in cluster.node(s).checkpoint_store
            and cluster.node(s).checkpoint_store[fr].tag == tag
        ]
        if not holders:
            raise UnrecoverableFailureError(
                f"no surviving checkpoint copy for rank {fr} at iteration {tag}"
            )
        src = holders[0]
        messages.append(
            Message(src, fr, "gather", cluster.node(src).checkpoint_store[fr].payload())
        )
    delivered = cluster.exchange(messages)
    for fr in sorted(failed):
        m = delivered[fr][0]
        node = cluster.node(fr)
        ck = Checkpoint.from_payload(tag, fr, m.values)
        node.checkpoint_local = ck
        _install_checkpoint(node, ck)
    for node in cluster.nodes:
        if node.rank not in failed:
            _install_checkpoint(node, node.checkpoint_local)
    return tag


def _install_checkpoint(node, ck: Checkpoint) -> None:
    node.x = ck.x.copy()
    node.r = ck.r.copy()
    node.z = ck.z.copy()
    node.p = ck.p.copy()
    node.q[:] = 0.0
    node.alpha = 0.0
    node.beta = ck.beta


# ---------------------------------------------------------------------------
# Top-level failure handling
# ---------------------------------------------------------------------------

def handle_failure(driver: "Driver", event: FailureEvent) -> RecoveryReport:
    """Inject the failure, revive replacements, and repair per the mode."""
    t0 = time.perf_counter()
    cluster = driver.cluster
    mode = driver.config.mode
    if mode == "plain":
        cluster.inject_failure(event)
        raise UnrecoverableFailureError(
            "node failure with no resilience enabled (plain mode)"
        )

    gather_before = cluster.bytes_by_tag.get("gather", 0)
    cluster.inject_failure(event)
    cluster.promote_replacements(event)

    restarted = False
    inner_iterations = 0
    inner_relres = 0.0
    if mode == "esr":
        target = event.iteration
        if target == 0:
            _restart(driver)
            restarted = True
            target = 0
        else:
            survivors = [r for r in cluster.alive_ranks() if r not in set(event.ranks)]
            beta_prev = cluster.node(survivors[0]).beta
            inner_iterations, inner_relres = reconstruct_lost_state(
                driver, event.ranks, target, beta_prev, from_duplicates=False
            )
            driver.j = target
    elif mode == "esrp":
        survivors = [r for r in cluster.alive_ranks() if r not in set(event.ranks)]
        stage_tag = cluster.node(survivors[0]).duplicates.stage_tag
        if stage_tag is None:
            _restart(driver)
            restarted = True
            target = 0
        else:
            target = stage_tag
            beta_prev = cluster.node(survivors[0]).duplicates.beta_star
            for s in survivors:
                cluster.node(s).queue.drop_newer_than(target)
            inner_iterations, inner_relres = reconstruct_lost_state(
                driver, event.ranks, target, beta_prev, from_duplicates=True
            )
            for s in survivors:
                node = cluster.node(s)
                d = node.duplicates
                node.x = d.x.copy()
                node.r = d.r.copy()
                node.z = d.z.copy()
                node.p = d.p.copy()
                node.q[:] = 0.0
                node.alpha = 0.0
                node.beta = d.beta_star
            for fr in event.ranks:
                node = cluster.node(fr)
                node.duplicates = DuplicateSet(
                    stage_tag=target,
                    x=node.x.copy(),
                    r=node.r.copy(),
                    z=node.z.copy(),
                    p=node.p.copy(),
                    beta_star=beta_prev,
                    beta_pending=beta_prev,
                )
            driver.j = target
    elif mode == "imcr":
        tag = restore_from_checkpoints(driver, event)
        if tag is None:
            _restart(driver)
            restarted = True
            target = 0
        else:
            target = tag
            driver.j = target
    else:  # pragma: no cover
        raise ValueError(f"unknown mode {mode!r}")

    return RecoveryReport(
        method=mode,
        failed_ranks=event.ranks,
        failure_iteration=event.iteration,
        rollback_target=target,
        wasted_iterations=event.iteration - target,
        gather_bytes=cluster.bytes_by_tag.get("gather", 0) - gather_before,
        inner_iterations=inner_iterations,
        inner_relres=inner_relres,
        reconstruction_ok=True,
        restarted=restarted,
        seconds=time.perf_counter() - t0,
    )


def _restart(driver: "Driver") -> None:
    """No recoverable state exists yet: restart the iteration from x0."""
    driver.init_state()
