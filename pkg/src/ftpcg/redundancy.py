"""Redundant-copy planning and the distributed matrix-vector product.

The sparse product already ships search-direction entries between nodes; the
planner tops that traffic up with just enough extra copies that every vector
entry reaches at least ``nredu`` distinct non-owner nodes, making the state of
up to ``nredu`` simultaneously failed nodes reassemblable from survivors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cluster import Message, SimCluster, UnrecoverableFailureError
from .sparse import Partition, SparseMatrix, rowblock_matvec


def buddy(s: int, k: int, num_nodes: int) -> int:
    """k-th designated redundancy destination of node s (nearest neighbors).

    Odd k counts forward ((s + ceil(k/2)) mod N), even k backward
    ((s - k/2) mod N); k = 1..N-1 enumerates every other node exactly once.
    """
    if not (1 <= k <= num_nodes - 1):
        raise ValueError(f"buddy ordinal k={k} must be in [1, {num_nodes - 1}]")
    if k % 2 == 1:
        return (s + (k + 1) // 2) % num_nodes
    return (s - k // 2) % num_nodes


@dataclass
class CommPlan:
    """Static product communication: send_sets[(s, l)] lists the indices owned
    by s that node l needs to multiply its rows (sorted, s != l)."""

    n: int
    num_nodes: int
    send_sets: dict[tuple[int, int], np.ndarray]

    def sends_from(self, s: int) -> list[tuple[int, np.ndarray]]:
        out = [
            (l, idx) for (src, l), idx in self.send_sets.items() if src == s
        ]
        out.sort(key=lambda t: t[0])
        return out


def build_comm_plan(A: SparseMatrix, part: Partition) -> CommPlan:
    if A.n != part.n:
        raise ValueError("matrix and partition sizes must agree")
    owner = part.owner_array()
    send_sets: dict[tuple[int, int], np.ndarray] = {}
    for l, (lo, hi) in enumerate(part.ranges):
        a, b = A.row_offsets[lo], A.row_offsets[hi]
        cols = np.unique(A.col_indices[a:b])
        ext = cols[owner[cols] != l]
        if len(ext) == 0:
            continue
        for s in np.unique(owner[ext]):
            send_sets[(int(s), l)] = ext[owner[ext] == s]
    return CommPlan(A.n, part.num_nodes, send_sets)


@dataclass
class RedundancyPlan:
    """Extra-copy schedule on top of a CommPlan.

    ``multiplicity[i]`` is the number of distinct non-owner nodes the product
    already sends entry i to; ``buddy_coverage[i]`` counts how many of the
    owner's designated destinations are among them. ``extra_sets[(s, k)]``
    lists the entries node s additionally ships to its k-th destination.
    """

    nredu: int
    buddies: list[tuple[int, ...]]
    extra_sets: dict[tuple[int, int], np.ndarray]
    multiplicity: np.ndarray
    buddy_coverage: np.ndarray

    def extras_from(self, s: int) -> list[tuple[int, int, np.ndarray]]:
        """(k, destination, indices) triples for node s, ascending k."""
        out = []
        for k in range(1, self.nredu + 1):
            idx = self.extra_sets.get((s, k))
            if idx is not None and len(idx):
                out.append((k, self.buddies[s][k - 1], idx))
        return out


def compute_extra_sets(
    plan: CommPlan, part: Partition, nredu: int
) -> RedundancyPlan:
    """Greedy top-up schedule.

    Walking destinations k = 1..nredu, an entry is added for destination k iff
    that node does not already receive it through the product and the entry's
    accumulated number of distinct non-owner recipients (product destinations
    plus extras scheduled so far) is still below nredu. Every destination is
    distinct, so each scheduled extra adds a new recipient and the coverage
    target is met after the walk.
    """
    N = part.num_nodes
    if not (1 <= nredu <= N - 1):
        raise ValueError(f"redundancy degree must be in [1, {N - 1}]")
    n = plan.n
    multiplicity = np.zeros(n, dtype=np.int64)
    for idx in plan.send_sets.values():
        multiplicity[idx] += 1

    buddies = [tuple(buddy(s, k, N) for k in range(1, nredu + 1)) for s in range(N)]
    buddy_coverage = np.zeros(n, dtype=np.int64)
    extra_sets: dict[tuple[int, int], np.ndarray] = {}
    for s, (lo, hi) in enumerate(part.ranges):
        covered = multiplicity[lo:hi].copy()
        for k in range(1, nredu + 1):
            d = buddies[s][k - 1]
            via_product = plan.send_sets.get((s, d))
            if via_product is not None:
                buddy_coverage[via_product] += 1
            local = np.arange(lo, hi)
            candidate = covered < nredu
            if via_product is not None and len(via_product):
                candidate &= ~np.isin(local, via_product)
            extra = local[candidate]
            if len(extra):
                extra_sets[(s, k)] = extra
                covered[extra - lo] += 1
    return RedundancyPlan(nredu, buddies, extra_sets, multiplicity, buddy_coverage)


def distinct_recipients(
    plan: CommPlan, rplan: RedundancyPlan, part: Partition, i: int
) -> set[int]:
    """All non-owner nodes that hold a copy of entry i after a recorded product."""
    s = part.owner_of(i)
    out: set[int] = set()
    for (src, l), idx in plan.send_sets.items():
        if src == s and i in idx:
            out.add(l)
    for k in range(1, rplan.nredu + 1):
        idx = rplan.extra_sets.get((s, k))
        if idx is not None and i in idx:
            out.add(rplan.buddies[s][k - 1])
    return out


# ---------------------------------------------------------------------------
# Distributed product
# ---------------------------------------------------------------------------

def build_product_messages(
    cluster: SimCluster,
    plan: CommPlan,
    rplan: RedundancyPlan | None = None,
) -> list[Message]:
    """Sends for one product: plan traffic, plus extra copies when recording."""
    messages: list[Message] = []
    for s in range(cluster.num_nodes):
        node = cluster.node(s)
        for l, idx in plan.sends_from(s):
            messages.append(
                Message(s, l, "spmv", node.p[idx - node.lo], indices=idx)
            )
        if rplan is not None:
            for _k, d, idx in rplan.extras_from(s):
                messages.append(
                    Message(s, d, "redundant", node.p[idx - node.lo], indices=idx)
                )
    return messages


def assemble_and_multiply(
    cluster: SimCluster, rank: int, inbox: list[Message]
) -> np.ndarray:
    """Node-local product of the rank's row block; reads only the node's own
    state and its delivered messages."""
    A = cluster.matrix
    node = cluster.node(rank)
    if node.scratch is None:
        node.scratch = np.zeros(A.n)
    scratch = node.scratch
    scratch[node.lo : node.hi] = node.p
    for m in inbox:
        if m.tag == "spmv":
            scratch[m.indices] = m.values
    return rowblock_matvec(A, node.lo, node.hi, scratch)


def perform_product(
    cluster: SimCluster,
    plan: CommPlan,
    *,
    rplan: RedundancyPlan | None = None,
    record_tag: int | None = None,
) -> None:
    """One distributed q = A p over all nodes, writing each node's q segment.

    With ``record_tag`` set (requires ``rplan``), every node also records the
    entries it received — product traffic and extra copies alike — as the
    redundant copy of the tagged search direction in its bounded queue.
    """
    if record_tag is not None and rplan is None:
        raise ValueError("recording a redundant copy requires a redundancy plan")
    delivered = cluster.exchange(
        build_product_messages(cluster, plan, rplan if record_tag is not None else None)
    )
    for rank in range(cluster.num_nodes):
        inbox = delivered.get(rank, [])
        node = cluster.node(rank)
        node.q = assemble_and_multiply(cluster, rank, inbox)
        if record_tag is not None:
            if inbox:
                idx = np.concatenate([m.indices for m in inbox])
                vals = np.concatenate([m.values for m in inbox])
                order = np.argsort(idx, kind="stable")
                idx, vals = idx[order], vals[order]
            else:
                idx = np.zeros(0, dtype=np.int64)
                vals = np.zeros(0)
            node.queue.push(record_tag, idx, vals)


# ---------------------------------------------------------------------------
# Recovery-side retrieval
# ---------------------------------------------------------------------------

def gather_lost_entries(
    cluster: SimCluster,
    part: Partition,
    failed_ranks: tuple[int, ...],
    tag: int,
) -> dict[int, np.ndarray]:
    """Reassemble failed nodes' segments of the search direction tagged ``tag``.

    For every lost index the lowest-rank surviving holder sends its copy, so
    each replacement receives each owned index exactly once. Raises
    UnrecoverableFailureError naming the first index with no surviving copy.
    """
    failed = sorted(failed_ranks)
    needed: dict[int, np.ndarray] = {}
    for fr in failed:
        lo, hi = part.ranges[fr]
        needed[fr] = np.ones(hi - lo, dtype=bool)

    messages: list[Message] = []
    for s in range(cluster.num_nodes):
        node = cluster.node(s)
        if not node.alive or s in failed:
            continue
        slot = node.queue.get(tag)
        if slot is None:
            continue
        idx, vals = slot
        for fr in failed:
            lo, hi = part.ranges[fr]
            rel = idx - lo
            sel = np.where((rel >= 0) & (rel < hi - lo))[0]
            sel = sel[needed[fr][rel[sel]]]
            if len(sel) == 0:
                continue
            messages.append(Message(s, fr, "gather", vals[sel], indices=idx[sel]))
            needed[fr][rel[sel]] = False

    for fr in failed:
        if needed[fr].any():
            lo, _hi = part.ranges[fr]
            lost = lo + int(np.argmax(needed[fr]))
            raise UnrecoverableFailureError(
                f"no surviving copy of entry {lost} for iteration {tag}"
            )

    delivered = cluster.exchange(messages)
    out: dict[int, np.ndarray] = {}
    for fr in failed:
        lo, hi = part.ranges[fr]
        seg = np.zeros(hi - lo)
        for m in delivered.get(fr, []):
            seg[m.indices - lo] = m.values
        out[fr] = seg
    return out
