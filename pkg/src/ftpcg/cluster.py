"""Deterministic in-process message-passing cluster.

Nodes own contiguous row ranges and communicate through explicit messages
with per-tag byte accounting. Reductions sum contributions in fixed ascending
rank order, so every run is bitwise reproducible. Failures zero a node's
dynamic data; replacements are the same ranks revived with their static data
(matrix rows, preconditioner blocks, right-hand-side segment) re-attached,
which costs nothing here and is excluded from timing.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .sparse import BlockJacobiPreconditioner, Partition, SparseMatrix

MESSAGE_TAGS = ("spmv", "redundant", "gather", "checkpoint", "scalar")


class DeadNodeError(RuntimeError):
    """A message or reduction touched a failed node."""


class UnrecoverableFailureError(RuntimeError):
    """Recovery cannot proceed (lost data has no surviving copy)."""


@dataclass(frozen=True)
class ClusterConfig:
    num_nodes: int
    redundancy_degree: int = 1

    def __post_init__(self) -> None:
        if self.num_nodes < 2:
            raise ValueError("a cluster needs at least 2 nodes")
        if not (1 <= self.redundancy_degree <= self.num_nodes - 1):
            raise ValueError(
                f"redundancy degree must be in [1, {self.num_nodes - 1}]"
            )


@dataclass(frozen=True)
class FailureEvent:
    """Simultaneous failure of ``ranks`` while iteration ``iteration`` runs."""

    iteration: int
    ranks: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.iteration < 0:
            raise ValueError("failure iteration must be >= 0")
        ranks = tuple(sorted(int(r) for r in self.ranks))
        if len(set(ranks)) != len(ranks) or not ranks:
            raise ValueError("failure ranks must be distinct and non-empty")
        object.__setattr__(self, "ranks", ranks)


@dataclass
class Message:
    """One point-to-point payload.

    ``values`` is the float payload; ``indices`` (optional) carries global
    indices for sparse payloads. Byte size is 8 per value plus 8 per index.
    """

    source: int
    dest: int
    tag: str
    values: np.ndarray
    indices: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.tag not in MESSAGE_TAGS:
            raise ValueError(f"unknown message tag {self.tag!r}")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.indices is not None:
            self.indices = np.asarray(self.indices, dtype=np.int64)
            if len(self.indices) != len(self.values):
                raise ValueError("indexed payload length mismatch")

    @property
    def byte_size(self) -> int:
        n = len(self.values) * 8
        if self.indices is not None:
            n += len(self.indices) * 8
        return n


class RedundantQueue:
    """Bounded FIFO of tagged redundant-copy slots.

    A push for a tag already present replaces that slot in place (re-executed
    iterations after a rollback must not duplicate tags); otherwise the oldest
    slot is evicted once capacity is exceeded.
    """

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self._slots: list[tuple[int, np.ndarray, np.ndarray]] = []

    def push(self, tag: int, indices: np.ndarray, values: np.ndarray) -> None:
        for k, (t, _, _) in enumerate(self._slots):
            if t == tag:
                self._slots[k] = (tag, indices, values)
                return
        self._slots.append((tag, indices, values))
        while len(self._slots) > self.capacity:
            self._slots.pop(0)

    def get(self, tag: int) -> tuple[np.ndarray, np.ndarray] | None:
        for t, idx, vals in self._slots:
            if t == tag:
                return idx, vals
        return None

    def tags(self) -> tuple[int, ...]:
        return tuple(t for t, _, _ in self._slots)

    def drop_newer_than(self, tag: int) -> None:
        self._slots = [s for s in self._slots if s[0] <= tag]

    def clear(self) -> None:
        self._slots.clear()

    def __len__(self) -> int:
        return len(self._slots)


@dataclass
class DuplicateSet:
    """Local copies taken at the end of a storage stage.

    After a completed stage ending at iteration j*, the vector copies hold the
    iteration-j* values and ``beta_star`` holds the scalar used to build the
    stage's first stored search direction (the value needed to reconstruct
    iteration j*). ``beta_pending`` stages the newer scalar between the two
    storage iterations so the previous stage stays reconstructable.
    """

    stage_tag: int | None = None
    x: np.ndarray | None = None
    r: np.ndarray | None = None
    z: np.ndarray | None = None
    p: np.ndarray | None = None
    beta_star: float = 0.0
    beta_pending: float = 0.0


@dataclass
class Checkpoint:
    """Full local dynamic state at an iteration boundary."""

    tag: int
    owner: int
    x: np.ndarray
    r: np.ndarray
    z: np.ndarray
    p: np.ndarray
    beta: float

    def payload(self) -> np.ndarray:
        return np.concatenate([self.x, self.r, self.z, self.p, [self.beta]])

    @classmethod
    def from_payload(cls, tag: int, owner: int, payload: np.ndarray) -> "Checkpoint":
        L = (len(payload) - 1) // 4
        return cls(
            tag,
            owner,
            payload[0:L].copy(),
            payload[L : 2 * L].copy(),
            payload[2 * L : 3 * L].copy(),
            payload[3 * L : 4 * L].copy(),
            float(payload[-1]),
        )


class NodeState:
    """Dynamic per-node state plus references to shared static data."""

    def __init__(self, rank: int, lo: int, hi: int, queue_capacity: int):
        self.rank = rank
        self.lo = lo
        self.hi = hi
        self.alive = True
        L = hi - lo
        self.x = np.zeros(L)
        self.r = np.zeros(L)
        self.z = np.zeros(L)
        self.p = np.zeros(L)
        self.q = np.zeros(L)
        self.alpha = 0.0
        self.beta = 0.0
        self.duplicates = DuplicateSet()
        self.queue = RedundantQueue(queue_capacity)
        self.checkpoint_local: Checkpoint | None = None
        self.checkpoint_store: dict[int, Checkpoint] = {}
        self.scratch: np.ndarray | None = None  # lazily sized to n by the solver

    @property
    def seg_len(self) -> int:
        return self.hi - self.lo

    def zero_dynamic(self) -> None:
        """Destroy everything a failure destroys; static data is untouched."""
        for a in (self.x, self.r, self.z, self.p, self.q):
            a[:] = 0.0
        self.alpha = 0.0
        self.beta = 0.0
        self.duplicates = DuplicateSet()
        self.queue.clear()
        self.checkpoint_local = None
        self.checkpoint_store.clear()
        if self.scratch is not None:
            self.scratch[:] = 0.0


class SimCluster:
    """Simulated cluster binding nodes to a matrix, preconditioner, and rhs."""

    def __init__(
        self,
        matrix: SparseMatrix,
        partition: Partition,
        preconditioner: BlockJacobiPreconditioner,
        rhs: np.ndarray,
        *,
        queue_capacity: int = 0,
        bytes_by_tag: dict[str, int] | None = None,
    ):
        if partition.n != matrix.n or len(rhs) != matrix.n:
            raise ValueError("matrix, partition, and rhs sizes must agree")
        self.matrix = matrix
        self.partition = partition
        self.preconditioner = preconditioner
        self.rhs = np.asarray(rhs, dtype=np.float64)
        self.nodes = [
            NodeState(s, lo, hi, queue_capacity)
            for s, (lo, hi) in enumerate(partition.ranges)
        ]
        self.bytes_by_tag = (
            bytes_by_tag if bytes_by_tag is not None else {t: 0 for t in MESSAGE_TAGS}
        )

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def node(self, rank: int) -> NodeState:
        return self.nodes[rank]

    def alive_ranks(self) -> list[int]:
        return [n.rank for n in self.nodes if n.alive]

    @property
    def total_bytes(self) -> int:
        return sum(self.bytes_by_tag.values())

    # -- communication ------------------------------------------------------

    def exchange(self, messages: Iterable[Message]) -> dict[int, list[Message]]:
        """Deliver messages, accounting bytes per tag.

        Delivery order is fixed by (source, dest, tag) regardless of
        submission order. Touching a dead endpoint surfaces the fault.
        """
        msgs = sorted(messages, key=lambda m: (m.source, m.dest, m.tag))
        delivered: dict[int, list[Message]] = {}
        for m in msgs:
            if not self.nodes[m.source].alive:
                raise DeadNodeError(f"send from failed node {m.source}")
            if not self.nodes[m.dest].alive:
                raise DeadNodeError(f"message addressed to failed node {m.dest}")
            self.bytes_by_tag[m.tag] = self.bytes_by_tag.get(m.tag, 0) + m.byte_size
            delivered.setdefault(m.dest, []).append(m)
        return delivered

    def allreduce_sum(self, contributions: Mapping[int, float]) -> float:
        """Sum one scalar per alive node in ascending rank order."""
        alive = self.alive_ranks()
        if set(contributions) != set(alive):
            missing = set(alive) ^ set(contributions)
            dead = [r for r in contributions if not self.nodes[r].alive]
            if dead:
                raise DeadNodeError(f"reduction includes failed node {dead[0]}")
            raise ValueError(f"reduction contributions mismatch at ranks {sorted(missing)}")
        total = 0.0
        for r in alive:
            total += contributions[r]
        self.bytes_by_tag["scalar"] = (
            self.bytes_by_tag.get("scalar", 0) + 8 * len(alive)
        )
        return total

    # -- failures ------------------------------------------------------------

    def inject_failure(self, event: FailureEvent) -> None:
        for r in event.ranks:
            if not (0 <= r < self.num_nodes):
                raise ValueError(f"failure rank {r} out of range")
        for r in event.ranks:
            node = self.nodes[r]
            node.zero_dynamic()
            node.alive = False

    def promote_replacements(self, event: FailureEvent) -> None:
        """Revive failed ranks as replacements.

        Static data lives in shared immutable objects, so re-attachment is
        free and contributes neither bytes nor time.
        """
        for r in event.ranks:
            node = self.nodes[r]
            if node.alive:
                raise ValueError(f"rank {r} is not failed")
            node.alive = True
