"""Instance generators and brute-force oracles shared by the tests."""

from __future__ import annotations

import itertools

import numpy as np

from ipmsolve.ipm import LpProblem
from ipmsolve.sparse import SparseMatrix


def random_pattern(rng, n, density):
    return rng.random((n, n)) < density


def spd_instance(rng, n, density=0.1) -> SparseMatrix:
    """Symmetric, strictly diagonally dominant with positive diagonal."""
    R = random_pattern(rng, n, density) * rng.uniform(-1, 1, (n, n))
    R = np.triu(R, 1)
    R = R + R.T
    d = np.abs(R).sum(axis=1) + rng.uniform(0.5, 2.0, n)
    return SparseMatrix.from_dense(R + np.diag(d), symmetry="symmetric")


def nonsym_dd_instance(rng, n, density=0.1) -> SparseMatrix:
    R = random_pattern(rng, n, density) * rng.uniform(-1, 1, (n, n))
    np.fill_diagonal(R, 0.0)
    d = np.maximum(np.abs(R).sum(axis=1), np.abs(R).sum(axis=0)) + rng.uniform(0.5, 2.0, n)
    sign = np.where(rng.random(n) < 0.2, -1.0, 1.0)
    return SparseMatrix.from_dense(R + np.diag(sign * d))


def arrow_instance(rng, n, nblocks=3, iface=None, density=0.3) -> SparseMatrix:
    """Block diagonal plus a dense-ish trailing border, diagonally dominant."""
    iface = iface if iface is not None else max(1, n // 8)
    interior = n - iface
    sizes = np.full(nblocks, interior // nblocks)
    sizes[: interior % nblocks] += 1
    D = np.zeros((n, n))
    lo = 0
    for sz in sizes:
        hi = lo + sz
        D[lo:hi, lo:hi] = random_pattern(rng, sz, density) * rng.uniform(-1, 1, (sz, sz))
        lo = hi
    D[interior:, :] = random_pattern(rng, n, density)[:iface] * rng.uniform(-1, 1, (iface, n))
    D[:, interior:] = random_pattern(rng, n, density)[:, :iface] * rng.uniform(-1, 1, (n, iface))
    np.fill_diagonal(D, 0.0)
    d = np.maximum(np.abs(D).sum(axis=1), np.abs(D).sum(axis=0)) + rng.uniform(0.5, 2.0, n)
    return SparseMatrix.from_dense(D + np.diag(d))


def laplacian_2d(m: int) -> SparseMatrix:
    n = m * m
    rows, cols, vals = [], [], []
    for i in range(m):
        for j in range(m):
            v = i * m + j
            rows.append(v)
            cols.append(v)
            vals.append(4.0)
            for di, dj in ((0, 1), (1, 0), (0, -1), (-1, 0)):
                a, b = i + di, j + dj
                if 0 <= a < m and 0 <= b < m:
                    rows.append(v)
                    cols.append(a * m + b)
                    vals.append(-1.0)
    return SparseMatrix.from_unsorted(n, n, np.array(rows), np.array(cols), np.array(vals), symmetry="symmetric")


def path_graph(n: int) -> SparseMatrix:
    D = 2 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)
    return SparseMatrix.from_dense(D, symmetry="symmetric")


def structurally_nonsingular(rng, n, density=0.4) -> SparseMatrix:
    """Random pattern with a hidden permutation so a perfect matching exists."""
    D = random_pattern(rng, n, density) * rng.uniform(-10, 10, (n, n))
    perm = rng.permutation(n)
    D[perm, np.arange(n)] = rng.uniform(0.1, 10, n) * rng.choice([-1, 1], n)
    return SparseMatrix.from_dense(D)


def brute_force_max_log_product(A: SparseMatrix) -> float:
    dense = np.abs(A.to_dense())
    n = dense.shape[0]
    best = -np.inf
    with np.errstate(divide="ignore"):
        logs = np.log(dense)
    cols = np.arange(n)
    for perm in itertools.permutations(range(n)):
        val = logs[list(perm), cols].sum()
        if val > best:
            best = val
    return float(best)


def drop_rule_scan(A: SparseMatrix, tau: float) -> np.ndarray:
    """Dense reference for the filter, one entry at a time."""
    dense = A.to_dense()
    stored = np.zeros_like(dense, dtype=bool)
    stored[A.row_ids, A.col_indices] = True
    out = np.zeros_like(dense)
    n = dense.shape[0]
    for i in range(n):
        for j in range(n):
            if not stored[i, j]:
                continue
            a = abs(dense[i, j])
            if i != j and a < tau * abs(dense[i, i]) and a < tau * abs(dense[j, j]):
                continue
            out[i, j] = dense[i, j]
    return out


def stored_mask(A: SparseMatrix) -> np.ndarray:
    mask = np.zeros(A.shape, dtype=bool)
    mask[A.row_ids, A.col_indices] = True
    return mask


def constructed_lp(rng, m=10, n=20) -> tuple[LpProblem, np.ndarray, float]:
    """LP with a planted optimum: b = B x_hat, c = B^T y + z with x_hat z = 0."""
    Bd = rng.standard_normal((m, n)) * (rng.random((m, n)) < 0.4)
    Bd[np.arange(m), np.arange(m)] += 3.0
    x_hat = np.zeros(n)
    z = np.zeros(n)
    basis = rng.permutation(n)[:m]
    x_hat[basis] = rng.uniform(0.5, 1.5, m)
    nonbasic = np.setdiff1d(np.arange(n), basis)
    z[nonbasic] = rng.uniform(0.5, 1.5, n - m)
    y = rng.standard_normal(m)
    prob = LpProblem(SparseMatrix.from_dense(Bd), Bd @ x_hat, Bd.T @ y + z)
    return prob, x_hat, float(prob.c @ x_hat)


def hand_lp() -> LpProblem:
    # min 2 x1 + x2  s.t.  x1 + x2 = 1, x >= 0
    return LpProblem(SparseMatrix.from_dense(np.array([[1.0, 1.0]])), np.array([1.0]), np.array([2.0, 1.0]))


def pinned_lp(n=5, c=None) -> LpProblem:
    c = np.linspace(-2, 2, n) if c is None else c
    return LpProblem(SparseMatrix.identity(n), np.ones(n), c)


def relerr(x, ref) -> float:
    return float(np.linalg.norm(x - ref) / max(np.linalg.norm(ref), 1e-300))


def scale_disparate_lp(m=12) -> LpProblem:
    """LP whose normal matrix at x = s = e has 1e-8 couplings next to O(1) diagonals."""
    E = np.eye(m) + 1e-8 * np.eye(m, k=1)
    B = np.hstack([np.eye(m), E])
    x_hat = np.ones(2 * m)
    c = np.concatenate([np.linspace(1, 2, m), np.linspace(2, 1, m)])
    return LpProblem(SparseMatrix.from_dense(B), B @ x_hat, c)
