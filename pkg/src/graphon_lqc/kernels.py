"""Discretized calculus on L2(I; R^d) and L2(I x I; R^{d x d}) over I = [0, 1].

Labels sit at cell midpoints u_i = (i + 1/2) / N and every integral over I is
replaced by the midpoint rule with uniform weight h = 1 / N.  Kernels are stored
as dense ``(N, N, p, q)`` block arrays, label fields as ``(N, ...)`` arrays.

The array-level helpers (``apply``, ``compose``, ``mult_compose``, ``adjoint``)
are what the solver uses in its inner loops; the typed wrappers below them
carry the grid along and check it.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

SYMMETRY_ATOL = 1e-10


class GridMismatchError(ValueError):
    """Raised when two objects live on different label grids."""


@dataclass(frozen=True)
class LabelGrid:
    n_labels: int

    def __post_init__(self):
        if int(self.n_labels) <= 0:
            raise ValueError(f"n_labels must be positive, got {self.n_labels}")

    @property
    def weight(self) -> float:
        return 1.0 / self.n_labels

    @property
    def nodes(self) -> np.ndarray:
        return (np.arange(self.n_labels) + 0.5) / self.n_labels

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.n_labels, self.weight)


# ---------------------------------------------------------------------------
# array-level operations
# ---------------------------------------------------------------------------

def apply(blocks: np.ndarray, f: np.ndarray, h: float) -> np.ndarray:
    """out[i] = h * sum_j blocks[i, j] @ f[j]; ``f`` may carry leading batch axes."""
    return h * np.einsum("ijpq,...jq->...ip", blocks, f)


def local(mats: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Label-wise product out[..., i] = mats[i] @ f[..., i] for ``(N, p, q)`` mats."""
    if mats.shape[1:] == (1, 1):
        return mats[:, 0, :] * f
    return np.einsum("ipq,...iq->...ip", mats, f)


def adjoint(blocks: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(blocks, (1, 0, 3, 2)))


def compose(a: np.ndarray, b: np.ndarray, h: float) -> np.ndarray:
    return h * np.einsum("iwpr,wjrq->ijpq", a, b)


def mult_compose(a: np.ndarray, mid: np.ndarray, b: np.ndarray, h: float) -> np.ndarray:
    return h * np.einsum("iwpr,wrs,wjsq->ijpq", a, mid, b)


def l2_norm(blocks: np.ndarray, h: float) -> float:
    return float(np.sqrt(h * h * np.sum(blocks * blocks)))


def to_matrix(blocks: np.ndarray, h: float) -> np.ndarray:
    """Weighted (N p) x (N q) matrix whose action on stacked fields equals T_K."""
    n, _, p, q = blocks.shape
    return h * np.transpose(blocks, (0, 2, 1, 3)).reshape(n * p, n * q)


def symmetrize(blocks: np.ndarray) -> np.ndarray:
    return 0.5 * (blocks + adjoint(blocks))


def asymmetry(blocks: np.ndarray) -> float:
    return float(np.max(np.abs(blocks - adjoint(blocks)), initial=0.0))


@dataclass
class PowerIterationResult:
    norm: float
    vector: np.ndarray
    converged: bool
    iterations: int


def power_norm(blocks: np.ndarray, h: float, max_iter: int = 10_000, tol: float = 1e-10,
               start: np.ndarray | None = None) -> PowerIterationResult:
    """Largest singular value of T_K by power iteration on T_{K*} T_K.

    The default start vector is all ones; ``start`` allows warm starts from a
    neighbouring kernel.
    """
    n, _, p, q = blocks.shape
    adj = adjoint(blocks)
    x = np.ones((n, q)) if start is None else np.array(start, dtype=float, copy=True)
    nrm = np.sqrt(h * np.sum(x * x))
    if nrm == 0.0:
        x = np.ones((n, q))
        nrm = np.sqrt(h * np.sum(x * x))
    x /= nrm
    lam_prev = 0.0
    for it in range(1, max_iter + 1):
        y = apply(adj, apply(blocks, x, h), h)
        lam = np.sqrt(h * np.sum(y * y))
        if lam == 0.0:
            return PowerIterationResult(0.0, x, True, it)
        x = y / lam
        if abs(lam - lam_prev) <= tol * lam:
            return PowerIterationResult(float(np.sqrt(lam)), x, True, it)
        lam_prev = lam
    logger.warning("power iteration did not converge in %d iterations", max_iter)
    return PowerIterationResult(float(np.sqrt(lam_prev)), x, False, max_iter)


# ---------------------------------------------------------------------------
# typed wrappers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabelField:
    grid: LabelGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape[0] != self.grid.n_labels:
            raise GridMismatchError(
                f"field has {vals.shape[0]} entries, grid has {self.grid.n_labels}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("label field contains non-finite entries")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class MatrixKernel:
    grid: LabelGrid
    blocks: np.ndarray
    symmetric: bool = field(default=False)

    def __post_init__(self):
        b = np.asarray(self.blocks, dtype=float)
        if b.ndim == 2:
            b = b[:, :, None, None]
        n = self.grid.n_labels
        if b.shape[:2] != (n, n):
            raise GridMismatchError(f"kernel blocks {b.shape[:2]} do not match grid N={n}")
        if not np.all(np.isfinite(b)):
            raise ValueError("kernel contains non-finite blocks")
        if self.symmetric and asymmetry(b) > SYMMETRY_ATOL:
            raise ValueError(f"kernel flagged symmetric but asymmetry is {asymmetry(b):.3e}")
        b.setflags(write=False)
        object.__setattr__(self, "blocks", b)

    @property
    def dim(self) -> int:
        return self.blocks.shape[2]


def _same_grid(*grids: LabelGrid) -> None:
    if any(g != grids[0] for g in grids[1:]):
        raise GridMismatchError("objects are defined on different label grids")


def _field_values(f: LabelField, d: int) -> np.ndarray:
    v = f.values
    return v.reshape(v.shape[0], d) if v.ndim == 1 else v


def apply_operator(K: MatrixKernel, f: LabelField) -> LabelField:
    _same_grid(K.grid, f.grid)
    vals = _field_values(f, K.blocks.shape[3])
    out = apply(K.blocks, vals, K.grid.weight)
    return LabelField(K.grid, out.reshape(f.values.shape) if f.values.ndim == 1 else out)


def kernel_adjoint(K: MatrixKernel) -> MatrixKernel:
    return MatrixKernel(K.grid, adjoint(K.blocks), symmetric=K.symmetric)


def kernel_compose(K: MatrixKernel, W: MatrixKernel) -> MatrixKernel:
    _same_grid(K.grid, W.grid)
    return MatrixKernel(K.grid, compose(K.blocks, W.blocks, K.grid.weight))


def kernel_mult_compose(K: MatrixKernel, L: LabelField, W: MatrixKernel) -> MatrixKernel:
    _same_grid(K.grid, L.grid, W.grid)
    mid = L.values
    if mid.ndim == 1:
        mid = mid[:, None, None]
    return MatrixKernel(K.grid, mult_compose(K.blocks, mid, W.blocks, K.grid.weight))


def operator_norm(K: MatrixKernel, max_iter: int = 10_000, tol: float = 1e-10) -> PowerIterationResult:
    """Operator norm of T_K; asserts the Hilbert-Schmidt bound ||T_K|| <= ||K||_2."""
    res = power_norm(K.blocks, K.grid.weight, max_iter=max_iter, tol=tol)
    hs = l2_norm(K.blocks, K.grid.weight)
    assert res.norm <= hs * (1 + 1e-12) + 1e-300, (res.norm, hs)
    return res


# ---------------------------------------------------------------------------
# graphon library
# ---------------------------------------------------------------------------

def _scalar_kernel(grid: LabelGrid, values: np.ndarray) -> MatrixKernel:
    vals = np.asarray(values, dtype=float)
    return MatrixKernel(grid, vals[:, :, None, None], symmetric=asymmetry(vals[:, :, None, None]) <= SYMMETRY_ATOL)


def constant_graphon(grid: LabelGrid, value: float = 1.0) -> MatrixKernel:
    return _scalar_kernel(grid, np.full((grid.n_labels, grid.n_labels), float(value)))


def step_graphon(grid: LabelGrid, block_values, cuts=None) -> MatrixKernel:
    """Stochastic-block graphon; ``cuts`` default to equal-width blocks."""
    bv = np.asarray(block_values, dtype=float)
    nb = bv.shape[0]
    cuts = np.linspace(0.0, 1.0, nb + 1) if cuts is None else np.asarray(cuts, dtype=float)
    idx = np.clip(np.searchsorted(cuts, grid.nodes, side="right") - 1, 0, nb - 1)
    return _scalar_kernel(grid, bv[np.ix_(idx, idx)])


def min_graphon(grid: LabelGrid) -> MatrixKernel:
    u = grid.nodes
    return _scalar_kernel(grid, np.minimum.outer(u, u))


def exp_graphon(grid: LabelGrid, length: float = 1.0) -> MatrixKernel:
    u = grid.nodes
    return _scalar_kernel(grid, np.exp(-np.abs(np.subtract.outer(u, u)) / float(length)))


def load_kernel_csv(path: str | Path, grid: LabelGrid, dim: int = 1) -> MatrixKernel:
    """Tabulated kernel: rows ``i, j, b_11, b_12, ...`` (block entries row-major)."""
    n = grid.n_labels
    blocks = np.full((n, n, dim, dim), np.nan)
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                i, j = int(row[0]), int(row[1])
            except ValueError:
                continue  # header
            blocks[i, j] = np.asarray(row[2:2 + dim * dim], dtype=float).reshape(dim, dim)
    if np.isnan(blocks).any():
        raise ValueError(f"kernel CSV {path} does not cover all {n}x{n} blocks")
    return MatrixKernel(grid, blocks, symmetric=asymmetry(blocks) <= SYMMETRY_ATOL)


GRAPHONS = {
    "constant": constant_graphon,
    "step": step_graphon,
    "sbm": step_graphon,
    "min": min_graphon,
    "exp": exp_graphon,
}


def make_graphon(grid: LabelGrid, spec) -> MatrixKernel:
    """Build a scalar graphon from ``{"name": ..., **params}`` or ``{"csv": path}``."""
    if isinstance(spec, (int, float)):
        return constant_graphon(grid, spec)
    spec = dict(spec)
    if "csv" in spec:
        return load_kernel_csv(spec["csv"], grid, spec.get("dim", 1))
    name = spec.pop("name")
    if name not in GRAPHONS:
        raise KeyError(f"unknown graphon {name!r}; choose from {sorted(GRAPHONS)}")
    return GRAPHONS[name](grid, **spec)
