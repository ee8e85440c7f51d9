"""Shared problem fixtures and independent oracles used across test modules.

The oracles here deliberately avoid the package's distributed machinery:
dense linear algebra goes through numpy/scipy directly, and the textbook
iteration below uses plain whole-vector dot products. They exist so tests
compare the package against something that cannot share its bugs.
"""
from __future__ import annotations

import numpy as np
import pytest

from ftpcg import (
    build_block_jacobi,
    generate_poisson2d,
    make_block_row_partition,
)


def textbook_pcg(A_dense, M_blocks, b, rtol=1e-8, max_iterations=None):
    """Minimal dense PCG with plain numpy dots; returns (x, iteration count).

    ``M_blocks`` is a list of (start, dense_block) pairs covering the
    diagonal; preconditioning solves each block directly.
    """
    n = len(b)
    limit = max_iterations if max_iterations is not None else 10 * n

    def precondition(r):
        z = np.empty_like(r)
        for start, block in M_blocks:
            sz = block.shape[0]
            z[start : start + sz] = np.linalg.solve(block, r[start : start + sz])
        return z

    x = np.zeros(n)
    r = b.copy()
    b_norm = np.linalg.norm(b)
    if np.linalg.norm(r) / b_norm < rtol:
        return x, 0
    z = precondition(r)
    p = z.copy()
    rz = float(r @ z)
    for iterations in range(1, limit + 1):
        q = A_dense @ p
        alpha = rz / float(p @ q)
        x += alpha * p
        r -= alpha * q
        z = precondition(r)
        rz_new = float(r @ z)
        beta = rz_new / rz
        p = z + beta * p
        rz = rz_new
        if np.linalg.norm(r) / b_norm < rtol:
            return x, iterations
    raise RuntimeError(f"no convergence within {limit} iterations")


def dense_blocks_like(A_dense, part, max_block):
    """The (start, block) list matching the package's block tiling rule:
    each partition range is cut into ceil(L / max_block) near-equal blocks,
    larger blocks first."""
    blocks = []
    for lo, hi in part.ranges:
        length = hi - lo
        count = -(-length // max_block)
        base, rem = divmod(length, count)
        pos = lo
        for i in range(count):
            sz = base + 1 if i < rem else base
            blocks.append((pos, A_dense[pos : pos + sz, pos : pos + sz].copy()))
            pos += sz
    return blocks


@pytest.fixture(scope="session")
def poisson16():
    A = generate_poisson2d(16)
    part = make_block_row_partition(A.n, 4)
    M = build_block_jacobi(A, part, 32)
    b = np.ones(A.n)
    return A, part, M, b


@pytest.fixture(scope="session")
def poisson32_n8():
    A = generate_poisson2d(32)
    part = make_block_row_partition(A.n, 8)
    M = build_block_jacobi(A, part, 32)
    b = np.ones(A.n)
    return A, part, M, b
