"""Sparse matrix core.

CSR storage for square symmetric positive definite systems, Matrix Market
coordinate I/O, generators for test problems, contiguous block-row
partitioning, and a block Jacobi preconditioner whose blocks never cross
partition boundaries.

Dense vectors are plain float64 numpy arrays throughout the package.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve


class MatrixFormatError(ValueError):
    """Raised for malformed or unsupported Matrix Market content."""


# ---------------------------------------------------------------------------
# CSR container
# ---------------------------------------------------------------------------

@dataclass
class SparseMatrix:
    """Square sparse matrix in CSR form.

    ``row_offsets`` has length n+1; column indices are strictly increasing
    within each row. ``spd`` marks matrices that are (claimed) symmetric
    positive definite; symmetry of the stored entries is checked by
    :meth:`is_symmetric`.
    """

    n: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    spd: bool = False

    def __post_init__(self) -> None:
        self.row_offsets = np.asarray(self.row_offsets, dtype=np.int64)
        self.col_indices = np.asarray(self.col_indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.row_offsets.shape != (self.n + 1,):
            raise ValueError("row_offsets must have length n+1")
        if self.row_offsets[0] != 0 or self.row_offsets[-1] != len(self.values):
            raise ValueError("row_offsets do not span the value array")
        if len(self.col_indices) != len(self.values):
            raise ValueError("col_indices and values length mismatch")
        if len(self.col_indices) and (
            self.col_indices.min() < 0 or self.col_indices.max() >= self.n
        ):
            raise ValueError("column index out of range")
        # strictly increasing columns within each row
        starts = self.row_offsets[:-1]
        stops = self.row_offsets[1:]
        for a, b in zip(starts, stops):
            cols = self.col_indices[a:b]
            if len(cols) > 1 and not np.all(np.diff(cols) > 0):
                raise ValueError("column indices must be strictly increasing per row")

    @property
    def nnz(self) -> int:
        return int(len(self.values))

    @classmethod
    def from_coo(
        cls,
        n: int,
        rows: np.ndarray,
        cols: np.ndarray,
        vals: np.ndarray,
        *,
        spd: bool = False,
    ) -> "SparseMatrix":
        """Build from coordinate triples; duplicate (row, col) pairs are rejected."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        if not (len(rows) == len(cols) == len(vals)):
            raise ValueError("coordinate arrays must have equal length")
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if len(rows) > 1:
            same = (np.diff(rows) == 0) & (np.diff(cols) == 0)
            if same.any():
                k = int(np.argmax(same))
                raise MatrixFormatError(
                    f"duplicate entry at ({int(rows[k])}, {int(cols[k])})"
                )
        offsets = np.zeros(n + 1, dtype=np.int64)
        np.add.at(offsets, rows + 1, 1)
        offsets = np.cumsum(offsets)
        return cls(n, offsets, cols, vals, spd=spd)

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.row_offsets[i], self.row_offsets[i + 1]
        return self.col_indices[a:b], self.values[a:b]

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        row_ids = np.repeat(np.arange(self.n), np.diff(self.row_offsets))
        out[row_ids, self.col_indices] = self.values
        return out

    def diagonal(self) -> np.ndarray:
        d = np.zeros(self.n)
        for i in range(self.n):
            cols, vals = self.row(i)
            k = np.searchsorted(cols, i)
            if k < len(cols) and cols[k] == i:
                d[i] = vals[k]
        return d

    def is_symmetric(self) -> bool:
        """Exact symmetry of the stored entries (structure and values)."""
        row_ids = np.repeat(np.arange(self.n), np.diff(self.row_offsets))
        order = np.lexsort((row_ids, self.col_indices))  # transpose ordering
        t_rows = self.col_indices[order]
        t_cols = row_ids[order]
        t_vals = self.values[order]
        return (
            np.array_equal(t_rows, row_ids)
            and np.array_equal(t_cols, self.col_indices)
            and np.array_equal(t_vals, self.values)
        )


def rowblock_matvec(A: SparseMatrix, lo: int, hi: int, x: np.ndarray) -> np.ndarray:
    """Product of rows [lo, hi) of A with a full-length vector x.

    Accumulation order within each row is fixed (storage order), so repeated
    calls on identical inputs are bitwise reproducible.
    """
    start = int(A.row_offsets[lo])
    stop = int(A.row_offsets[hi])
    prods = A.values[start:stop] * x[A.col_indices[start:stop]]
    lens = np.diff(A.row_offsets[lo : hi + 1])
    if len(lens) == 0:
        return np.zeros(0)
    if (lens == 0).any():
        out = np.zeros(hi - lo)
        pos = 0
        for r, ln in enumerate(lens):
            out[r] = prods[pos : pos + ln].sum()
            pos += ln
        return out
    seg_starts = (A.row_offsets[lo:hi] - start).astype(np.intp)
    return np.add.reduceat(prods, seg_starts)


def matvec(A: SparseMatrix, x: np.ndarray) -> np.ndarray:
    return rowblock_matvec(A, 0, A.n, x)


# ---------------------------------------------------------------------------
# Matrix Market coordinate I/O
# ---------------------------------------------------------------------------

def load_matrix_market(path: str) -> SparseMatrix:
    """Read a square real matrix in Matrix Market coordinate format.

    Supports the ``general`` and ``symmetric`` qualifiers (symmetric storage
    is expanded to both triangles). Pattern, complex, integer, and array
    headers are rejected, as are non-square sizes, out-of-range or duplicate
    entries.
    """
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline()
        if not header.lower().startswith("%%matrixmarket"):
            raise MatrixFormatError("missing MatrixMarket header line")
        parts = header.strip().lower().split()
        if len(parts) != 5 or parts[1] != "matrix":
            raise MatrixFormatError(f"unsupported header: {header.strip()!r}")
        _, _, layout, fieldkind, symmetry = parts
        if layout != "coordinate":
            raise MatrixFormatError(f"unsupported layout {layout!r} (coordinate only)")
        if fieldkind == "pattern":
            raise MatrixFormatError("pattern-only files carry no values")
        if fieldkind != "real":
            raise MatrixFormatError(f"unsupported field type {fieldkind!r} (real only)")
        if symmetry not in ("general", "symmetric"):
            raise MatrixFormatError(f"unsupported symmetry {symmetry!r}")

        size_line = None
        for line in fh:
            s = line.strip()
            if not s or s.startswith("%"):
                continue
            size_line = s
            break
        if size_line is None:
            raise MatrixFormatError("missing size line")
        try:
            nrows, ncols, nnz = (int(t) for t in size_line.split())
        except ValueError as exc:
            raise MatrixFormatError(f"bad size line: {size_line!r}") from exc
        if nrows != ncols:
            raise MatrixFormatError(f"matrix is not square ({nrows}x{ncols})")

        rows: list[int] = []
        cols: list[int] = []
        vals: list[float] = []
        count = 0
        for line in fh:
            s = line.strip()
            if not s or s.startswith("%"):
                continue
            toks = s.split()
            if len(toks) != 3:
                raise MatrixFormatError(f"bad entry line: {s!r}")
            try:
                i, j, v = int(toks[0]), int(toks[1]), float(toks[2])
            except ValueError as exc:
                raise MatrixFormatError(f"bad entry line: {s!r}") from exc
            if not (1 <= i <= nrows and 1 <= j <= ncols):
                raise MatrixFormatError(f"entry ({i}, {j}) out of range")
            rows.append(i - 1)
            cols.append(j - 1)
            vals.append(v)
            count += 1
        if count != nnz:
            raise MatrixFormatError(f"expected {nnz} entries, found {count}")

    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)
    v = np.asarray(vals)
    if symmetry == "symmetric":
        off = r != c
        r, c, v = (
            np.concatenate([r, c[off]]),
            np.concatenate([c, r[off]]),
            np.concatenate([v, v[off]]),
        )
    A = SparseMatrix.from_coo(nrows, r, c, v)
    A.spd = A.is_symmetric()
    return A


def write_matrix_market(A: SparseMatrix, path: str, *, symmetric: bool = False) -> None:
    """Write coordinate Matrix Market; values round-trip bit-exactly.

    With ``symmetric=True`` only the lower triangle is stored (the matrix must
    be symmetric).
    """
    if symmetric and not A.is_symmetric():
        raise ValueError("symmetric output requested for an unsymmetric matrix")
    row_ids = np.repeat(np.arange(A.n), np.diff(A.row_offsets))
    cols = A.col_indices
    vals = A.values
    if symmetric:
        keep = cols <= row_ids
        row_ids, cols, vals = row_ids[keep], cols[keep], vals[keep]
    kind = "symmetric" if symmetric else "general"
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"%%MatrixMarket matrix coordinate real {kind}\n")
        fh.write(f"{A.n} {A.n} {len(vals)}\n")
        for i, j, v in zip(row_ids, cols, vals):
            fh.write(f"{i + 1} {j + 1} {v:.17g}\n")


# ---------------------------------------------------------------------------
# Test problems
# ---------------------------------------------------------------------------

def generate_poisson2d(grid: int) -> SparseMatrix:
    """5-point finite-difference Laplacian on a grid x grid mesh (n = grid**2).

    Diagonal 4, grid-neighbor couplings -1; row-major node numbering.
    """
    if grid < 1:
        raise ValueError("grid side must be >= 1")
    n = grid * grid
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    for y in range(grid):
        for x in range(grid):
            i = y * grid + x
            if y > 0:
                rows.append(i), cols.append(i - grid), vals.append(-1.0)
            if x > 0:
                rows.append(i), cols.append(i - 1), vals.append(-1.0)
            rows.append(i), cols.append(i), vals.append(4.0)
            if x < grid - 1:
                rows.append(i), cols.append(i + 1), vals.append(-1.0)
            if y < grid - 1:
                rows.append(i), cols.append(i + grid), vals.append(-1.0)
    return SparseMatrix.from_coo(n, rows, cols, vals, spd=True)


def generate_random_banded(
    n: int, half_bandwidth: int, *, seed: int, density: float = 1.0
) -> SparseMatrix:
    """Random symmetric diagonally dominant (hence SPD) banded matrix.

    Off-diagonal entries inside the band are sampled with the given density;
    the diagonal is set to 1 plus the absolute row sum. Deterministic for a
    fixed seed.
    """
    if half_bandwidth < 0 or half_bandwidth >= n:
        raise ValueError("half_bandwidth must be in [0, n)")
    rng = np.random.default_rng(seed)
    dense = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, min(n, i + half_bandwidth + 1)):
            if rng.random() < density:
                v = rng.uniform(-1.0, 1.0)
                dense[i, j] = v
                dense[j, i] = v
    np.fill_diagonal(dense, 1.0 + np.abs(dense).sum(axis=1))
    rows, cols = np.nonzero(dense)
    return SparseMatrix.from_coo(n, rows, cols, dense[rows, cols], spd=True)


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Partition:
    """Contiguous block-row ownership: node s owns rows [ranges[s][0], ranges[s][1])."""

    n: int
    ranges: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        pos = 0
        for lo, hi in self.ranges:
            if lo != pos or hi <= lo:
                raise ValueError("ranges must be non-empty, consecutive, and cover [0, n)")
            pos = hi
        if pos != self.n:
            raise ValueError("ranges must cover exactly [0, n)")

    @property
    def num_nodes(self) -> int:
        return len(self.ranges)

    @property
    def starts(self) -> np.ndarray:
        return np.asarray([lo for lo, _ in self.ranges], dtype=np.int64)

    def size(self, s: int) -> int:
        lo, hi = self.ranges[s]
        return hi - lo

    def owner_of(self, i: int) -> int:
        if not (0 <= i < self.n):
            raise ValueError(f"index {i} out of range")
        return int(np.searchsorted(self.starts, i, side="right")) - 1

    def owner_array(self) -> np.ndarray:
        """owner rank of every index, length n."""
        sizes = [hi - lo for lo, hi in self.ranges]
        return np.repeat(np.arange(self.num_nodes, dtype=np.int64), sizes)


def make_block_row_partition(n: int, num_nodes: int) -> Partition:
    """Near-uniform contiguous split; earlier nodes take the larger size."""
    if num_nodes < 1 or num_nodes > n:
        raise ValueError(f"cannot split {n} rows over {num_nodes} nodes")
    big = -(-n // num_nodes)  # ceil
    small = n // num_nodes
    n_big = n - small * num_nodes
    sizes = [big] * n_big + [small] * (num_nodes - n_big)
    ranges = []
    pos = 0
    for sz in sizes:
        ranges.append((pos, pos + sz))
        pos += sz
    return Partition(n, tuple(ranges))


# ---------------------------------------------------------------------------
# Submatrix extraction
# ---------------------------------------------------------------------------

def extract_submatrix(A: SparseMatrix, rows, cols) -> SparseMatrix:
    """Submatrix on the given (sorted, unique) row/column index sets.

    Indices are renumbered consecutively in ascending original order. Row and
    column sets must have equal length so the result stays square (all uses
    here are principal submatrices).
    """
    rows = np.asarray(sorted(set(int(i) for i in rows)), dtype=np.int64)
    cols = np.asarray(sorted(set(int(i) for i in cols)), dtype=np.int64)
    if len(rows) != len(cols):
        raise ValueError("row and column sets must have equal size")
    if len(rows) == 0:
        raise ValueError("empty index set")
    if rows[0] < 0 or rows[-1] >= A.n or cols[0] < 0 or cols[-1] >= A.n:
        raise ValueError("index out of range")

    lens = (A.row_offsets[rows + 1] - A.row_offsets[rows]).astype(np.int64)
    take = np.concatenate(
        [np.arange(A.row_offsets[r], A.row_offsets[r + 1]) for r in rows]
    ) if lens.sum() else np.zeros(0, dtype=np.int64)
    sub_rows = np.repeat(np.arange(len(rows)), lens)
    sub_cols_orig = A.col_indices[take]
    sub_vals = A.values[take]
    pos = np.searchsorted(cols, sub_cols_orig)
    pos_clipped = np.minimum(pos, len(cols) - 1)
    keep = cols[pos_clipped] == sub_cols_orig
    return SparseMatrix.from_coo(
        len(rows), sub_rows[keep], pos_clipped[keep], sub_vals[keep], spd=A.spd
    )


# ---------------------------------------------------------------------------
# Block Jacobi preconditioner
# ---------------------------------------------------------------------------

@dataclass
class JacobiBlock:
    start: int
    size: int
    dense: np.ndarray          # original diagonal block
    inverse: np.ndarray        # action of the block solve, from one Cholesky


@dataclass
class BlockJacobiPreconditioner:
    """Block-diagonal preconditioner; blocks tile each partition range.

    The operator applies the inverse of each diagonal block (z = M r solves
    the blocks against r); ``multiply_range`` applies the original blocks,
    which is the inverse operation needed when reconstructing a residual from
    a preconditioned one.
    """

    n: int
    block_size_max: int
    blocks: list[JacobiBlock]
    _by_range: dict[tuple[int, int], list[JacobiBlock]] = field(default_factory=dict)

    def blocks_in(self, lo: int, hi: int) -> list[JacobiBlock]:
        key = (lo, hi)
        if key not in self._by_range:
            sel = [b for b in self.blocks if lo <= b.start and b.start + b.size <= hi]
            if sum(b.size for b in sel) != hi - lo:
                raise ValueError(f"blocks do not tile range [{lo}, {hi})")
            self._by_range[key] = sel
        return self._by_range[key]

    def apply_range(self, r_seg: np.ndarray, lo: int, hi: int) -> np.ndarray:
        """z = (block solves of) r on the rows [lo, hi); node-local."""
        if len(r_seg) != hi - lo:
            raise ValueError("segment length does not match range")
        z = np.empty_like(r_seg)
        for b in self.blocks_in(lo, hi):
            a = b.start - lo
            z[a : a + b.size] = b.inverse @ r_seg[a : a + b.size]
        return z

    def multiply_range(self, v_seg: np.ndarray, lo: int, hi: int) -> np.ndarray:
        """Apply the original diagonal blocks (the inverse of apply_range)."""
        if len(v_seg) != hi - lo:
            raise ValueError("segment length does not match range")
        out = np.empty_like(v_seg)
        for b in self.blocks_in(lo, hi):
            a = b.start - lo
            out[a : a + b.size] = b.dense @ v_seg[a : a + b.size]
        return out

    def apply(self, r: np.ndarray) -> np.ndarray:
        if len(r) != self.n:
            raise ValueError("vector length does not match preconditioner span")
        return self.apply_range(r, 0, self.n)


def apply_preconditioner(M: BlockJacobiPreconditioner, r: np.ndarray) -> np.ndarray:
    return M.apply(r)


def build_block_jacobi(
    A: SparseMatrix, part: Partition, max_block: int
) -> BlockJacobiPreconditioner:
    """Factorize near-uniform diagonal blocks of size <= max_block per range.

    A range of length L is split into ceil(L / max_block) blocks whose sizes
    differ by at most one; block boundaries never cross partition boundaries.
    """
    if max_block < 1:
        raise ValueError("max_block must be >= 1")
    if part.n != A.n:
        raise ValueError("partition does not match matrix size")
    blocks: list[JacobiBlock] = []
    for lo, hi in part.ranges:
        L = hi - lo
        count = -(-L // max_block)
        base, rem = divmod(L, count)
        sizes = [base + 1] * rem + [base] * (count - rem)
        pos = lo
        for sz in sizes:
            idx = np.arange(pos, pos + sz)
            dense = extract_submatrix(A, idx, idx).to_dense()
            try:
                cf = cho_factor(dense, lower=True)
            except np.linalg.LinAlgError as exc:
                raise ValueError(
                    f"diagonal block starting at row {pos} (size {sz}) "
                    f"is not positive definite"
                ) from exc
            inverse = cho_solve(cf, np.eye(sz))
            blocks.append(JacobiBlock(pos, sz, dense, inverse))
            pos += sz
    return BlockJacobiPreconditioner(A.n, max_block, blocks)
