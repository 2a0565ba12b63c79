"""LQ problem data for graphon-coupled mean-field dynamics with common noise.

State, for every label u::

    dX^u = [beta + A X^u + (T_{G_A} Xbar)(u) + B alpha^u] dt
         + [gamma + C X^u + (T_{G_C} Xbar)(u) + D alpha^u] dW^u + theta dB0

and cost::

    sum_u h E[ int X'QX + Xbar'(T_{G_Q} Xbar) + (alpha+I)'R(alpha+I) dt
               + X_T'H X_T + Xbar_T'(T_{G_H} Xbar_T) ]

Coefficients are either time-constant (stored without a time axis) or given at
every knot of the time grid (leading axis of length ``n_steps + 1``); on
``[t_k, t_{k+1})`` the knot-``k`` value is used.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels as kc
from .kernels import LabelGrid

logger = logging.getLogger(__name__)


class ModelError(ValueError):
    """A hard violation of the standing assumptions on the problem data."""


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.T > self.t0:
            raise ValueError(f"need t0 < T, got t0={self.t0}, T={self.T}")
        if int(self.n_steps) <= 0:
            raise ValueError("n_steps must be positive")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)


# (name, static shape in terms of N, d, m)  -- kernels carry two label axes
_FIELDS = {
    "A": ("N", "d", "d"), "B": ("N", "d", "m"), "beta": ("N", "d"),
    "G_A": ("N", "N", "d", "d"),
    "C": ("N", "d", "d"), "D": ("N", "d", "m"), "gamma": ("N", "d"),
    "G_C": ("N", "N", "d", "d"), "theta": ("N", "d"),
    "Q": ("N", "d", "d"), "G_Q": ("N", "N", "d", "d"),
    "R": ("N", "m", "m"), "I_off": ("N", "m"),
}
_TERMINAL = {"H": ("N", "d", "d"), "G_H": ("N", "N", "d", "d")}
_INITIAL = {"xi_mean": ("N", "d"), "xi_cov": ("N", "d", "d")}


@dataclass(frozen=True)
class Coefficients:
    """Coefficient values frozen at one time knot."""
    A: np.ndarray
    B: np.ndarray
    beta: np.ndarray
    G_A: np.ndarray
    C: np.ndarray
    D: np.ndarray
    gamma: np.ndarray
    G_C: np.ndarray
    theta: np.ndarray
    Q: np.ndarray
    G_Q: np.ndarray
    R: np.ndarray
    I_off: np.ndarray


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    grid: LabelGrid
    tgrid: TimeGrid
    d: int
    m: int
    A: np.ndarray
    B: np.ndarray
    beta: np.ndarray
    G_A: np.ndarray
    C: np.ndarray
    D: np.ndarray
    gamma: np.ndarray
    G_C: np.ndarray
    theta: np.ndarray
    Q: np.ndarray
    G_Q: np.ndarray
    R: np.ndarray
    I_off: np.ndarray
    H: np.ndarray
    G_H: np.ndarray
    xi_mean: np.ndarray
    xi_cov: np.ndarray
    r_min: float = 1e-8
    name: str = "custom"

    def __post_init__(self):
        dims = {"N": self.grid.n_labels, "d": self.d, "m": self.m}
        for table, timed in ((_FIELDS, True), (_TERMINAL, False), (_INITIAL, False)):
            for key, shape in table.items():
                static = tuple(dims[s] for s in shape)
                arr = np.asarray(getattr(self, key), dtype=float)
                if arr.shape != static:
                    if timed and arr.shape == (self.tgrid.n_steps + 1,) + static:
                        pass
                    else:
                        try:
                            arr = np.broadcast_to(arr, static).copy()
                        except ValueError:
                            raise ModelError(f"{key}: shape {arr.shape} incompatible with {static}") from None
                if not np.all(np.isfinite(arr)):
                    raise ModelError(f"{key} has non-finite entries")
                arr = np.ascontiguousarray(arr)
                arr.setflags(write=False)
                object.__setattr__(self, key, arr)

    @property
    def h(self) -> float:
        return self.grid.weight

    def is_time_varying(self, key: str) -> bool:
        return getattr(self, key).ndim > len(_FIELDS[key])

    def at(self, k: int) -> Coefficients:
        vals = {}
        for key, shape in _FIELDS.items():
            arr = getattr(self, key)
            vals[key] = arr[k] if arr.ndim > len(shape) else arr
        return Coefficients(**vals)

    def replace(self, **changes) -> "ProblemSpec":
        return dataclasses.replace(self, **changes)


def zero_spec(grid: LabelGrid, tgrid: TimeGrid, d: int = 1, m: int = 1, **overrides) -> ProblemSpec:
    """All-zero dynamics and cost with R = identity; overrides are broadcast."""
    n = grid.n_labels
    base = dict(
        A=np.zeros((n, d, d)), B=np.zeros((n, d, m)), beta=np.zeros((n, d)),
        G_A=np.zeros((n, n, d, d)), C=np.zeros((n, d, d)), D=np.zeros((n, d, m)),
        gamma=np.zeros((n, d)), G_C=np.zeros((n, n, d, d)), theta=np.zeros((n, d)),
        Q=np.zeros((n, d, d)), G_Q=np.zeros((n, n, d, d)),
        R=np.broadcast_to(np.eye(m), (n, m, m)), I_off=np.zeros((n, m)),
        H=np.zeros((n, d, d)), G_H=np.zeros((n, n, d, d)),
        xi_mean=np.zeros((n, d)), xi_cov=np.zeros((n, d, d)),
    )
    base.update(overrides)
    return ProblemSpec(grid=grid, tgrid=tgrid, d=d, m=m, **base)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

@dataclass
class PositivityReport:
    min_eig_Q_plus_GQ: float
    min_eig_H_plus_GH: float
    min_eig_R: float
    method: str = "dense eigvalsh of blockdiag(W) + h*K on the N*d label grid"

    @property
    def warnings(self) -> list[str]:
        out = []
        if self.min_eig_Q_plus_GQ < -1e-9:
            out.append(f"running-cost operator not PSD (min eig {self.min_eig_Q_plus_GQ:.3e})")
        if self.min_eig_H_plus_GH < -1e-9:
            out.append(f"terminal-cost operator not PSD (min eig {self.min_eig_H_plus_GH:.3e})")
        return out

    def rows(self) -> list[tuple[str, float]]:
        return [("min eig M_Q + T_GQ", self.min_eig_Q_plus_GQ),
                ("min eig M_H + T_GH", self.min_eig_H_plus_GH),
                ("min eig R", self.min_eig_R)]


def _per_knot(arr: np.ndarray, static_ndim: int):
    return list(arr) if arr.ndim > static_ndim else [arr]


def assembled_min_eig(local: np.ndarray, kern: np.ndarray, h: float) -> float:
    """Smallest eigenvalue of the operator f -> W f + T_K f on the discretized L2."""
    n, d = local.shape[0], local.shape[1]
    mat = kc.to_matrix(kern, h)
    for i in range(n):
        mat[i * d:(i + 1) * d, i * d:(i + 1) * d] += local[i]
    mat = 0.5 * (mat + mat.T)
    return float(np.linalg.eigvalsh(mat)[0])


def _check_psd(name: str, mats: np.ndarray) -> None:
    if np.max(np.abs(mats - np.swapaxes(mats, -1, -2)), initial=0.0) > 1e-10:
        raise ModelError(f"{name} is not symmetric")
    scale = max(1.0, float(np.max(np.abs(mats), initial=0.0)))
    lo = float(np.min(np.linalg.eigvalsh(mats), initial=0.0))
    if lo < -1e-12 * scale:
        raise ModelError(f"{name} is not positive semi-definite (min eig {lo:.3e})")


def validate(spec: ProblemSpec) -> PositivityReport:
    """Check standing assumptions; hard errors raise ``ModelError``.

    Non-negativity of the assembled cost operators is only a sufficient
    condition for the conditional positivity assumption, so a negative
    eigenvalue there is logged and reported, not raised.
    """
    h = spec.h
    _check_psd("Q", spec.Q)
    _check_psd("H", spec.H)
    _check_psd("xi_cov", spec.xi_cov)
    if np.max(np.abs(spec.R - np.swapaxes(spec.R, -1, -2))) > 1e-10:
        raise ModelError("R is not symmetric")
    min_r = float(np.min(np.linalg.eigvalsh(spec.R)))
    if not (min_r >= spec.r_min and spec.r_min > 0):
        raise ModelError(f"coercivity violated: min eig R = {min_r:.3e} < c = {spec.r_min:.3e}")
    for key in ("G_Q", "G_H"):
        asym = max(kc.asymmetry(g) for g in _per_knot(getattr(spec, key), 4))
        if asym > kc.SYMMETRY_ATOL:
            raise ModelError(f"{key} is not a symmetric kernel (asymmetry {asym:.3e})")

    n_knots = spec.tgrid.n_steps + 1
    if spec.is_time_varying("Q") or spec.is_time_varying("G_Q"):
        ks = range(n_knots)
    else:
        ks = [0]
    min_q = min(assembled_min_eig(spec.at(k).Q, spec.at(k).G_Q, h) for k in ks)
    min_h = assembled_min_eig(spec.H, spec.G_H, h)
    report = PositivityReport(min_q, min_h, min_r)
    for w in report.warnings:
        logger.warning(w)
    return report


# ---------------------------------------------------------------------------
# centered costs and initial conditions
# ---------------------------------------------------------------------------

def centered_kernel(ghat: np.ndarray, weight: np.ndarray, h: float) -> np.ndarray:
    """Kernel G with  x'(W + T_G)x = (x - T_ghat x)' W (x - T_ghat x)  (array level)."""
    gadj = kc.adjoint(ghat)
    out = kc.mult_compose(gadj, weight, ghat, h)
    out -= np.einsum("ipr,ijrq->ijpq", weight, ghat)
    out -= np.einsum("ijpr,jrq->ijpq", gadj, weight)
    return kc.symmetrize(out)


def centered_transform(ghat: kc.MatrixKernel, weight: kc.LabelField) -> kc.MatrixKernel:
    if kc.asymmetry(ghat.blocks) > kc.SYMMETRY_ATOL:
        raise ModelError("centering graphon must be symmetric")
    w = weight.values
    if w.ndim == 1:
        w = w[:, None, None]
    return kc.MatrixKernel(ghat.grid, centered_kernel(ghat.blocks, w, ghat.grid.weight), symmetric=True)


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    if np.min(vals, initial=0.0) < -1e-12 * max(1.0, float(np.max(np.abs(vals), initial=0.0))):
        raise ModelError("initial covariance is not positive semi-definite")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))[..., None, :]


def sample_initial(xi_mean: np.ndarray, xi_cov: np.ndarray, rng: np.random.Generator,
                   size: tuple[int, ...]) -> np.ndarray:
    """Independent Gaussian draws per label; returns ``size + (N, d)``."""
    root = _psd_sqrt(xi_cov)
    z = rng.standard_normal(size + xi_mean.shape)
    return xi_mean + np.einsum("npq,...nq->...np", root, z)


def build_initial_condition(spec: ProblemSpec, n_samples: int, rng_seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(rng_seed))
    return sample_initial(spec.xi_mean, spec.xi_cov, rng, (int(n_samples),))


# ---------------------------------------------------------------------------
# JSON configuration
# ---------------------------------------------------------------------------

def label_values(grid: LabelGrid, raw, shape: tuple[int, ...]) -> np.ndarray:
    """Scalar, per-label list, a ``{"step": [...]}`` piecewise table or a full array."""
    if isinstance(raw, dict):
        if "step" in raw:
            vals = np.asarray(raw["step"], dtype=float)
            idx = np.minimum((grid.nodes * len(vals)).astype(int), len(vals) - 1)
            raw = vals[idx]
        elif "linear" in raw:
            a, b = raw["linear"]
            raw = a + b * grid.nodes
        else:
            raise ModelError(f"unsupported label-field form {raw}")
    arr = np.asarray(raw, dtype=float)
    n = grid.n_labels
    if arr.ndim == 1 and arr.shape[0] == n and len(shape) > 1:
        arr = arr.reshape((n,) + (1,) * (len(shape) - 1))
        if len(shape) == 3 and shape[1] == shape[2]:
            arr = arr * np.eye(shape[1])
    elif arr.ndim == 0 and len(shape) == 3 and shape[1] == shape[2]:
        arr = arr * np.eye(shape[1])
    return np.broadcast_to(arr, shape).copy()


def _kernel_values(grid: LabelGrid, raw, d: int, base_dir: Path) -> np.ndarray:
    if isinstance(raw, dict) and "csv" in raw:
        raw = dict(raw, csv=str((base_dir / raw["csv"]).resolve()), dim=d)
        return kc.make_graphon(grid, raw).blocks
    scale = 1.0
    if isinstance(raw, dict) and "scale" in raw:
        raw = dict(raw)
        scale = float(raw.pop("scale"))
    g = kc.make_graphon(grid, raw).blocks
    return scale * np.broadcast_to(g, g.shape[:2] + (d, d)) * np.eye(d)


def spec_from_config(cfg: dict, base_dir: str | Path = ".") -> ProblemSpec:
    """Build a ``ProblemSpec`` from the sectioned JSON layout.

    Sections: grid, time, dims, drift, diffusion, cost, terminal, initial.
    Kernels are given as graphon specs (``{"name": "exp", "length": 1}``,
    ``{"csv": "file.csv"}``), optionally with ``"scale"``; a ``"centered"``
    entry under cost/terminal builds the centered kernel from its graphon.
    """
    base_dir = Path(base_dir)
    grid = LabelGrid(int(cfg["grid"]["n_labels"]))
    t = cfg["time"]
    tgrid = TimeGrid(float(t.get("t0", 0.0)), float(t["T"]), int(t["n_steps"]))
    d = int(cfg.get("dims", {}).get("d", 1))
    m = int(cfg.get("dims", {}).get("m", 1))
    n = grid.n_labels
    shapes = {"N": n, "d": d, "m": m}
    vals = {}
    for section in ("drift", "diffusion", "cost", "terminal", "initial"):
        for key, raw in cfg.get(section, {}).items():
            if key == "centered":
                continue
            table = {**_FIELDS, **_TERMINAL, **_INITIAL}
            if key not in table:
                raise ModelError(f"unknown coefficient {key!r} in section {section!r}")
            shape = tuple(shapes[s] for s in table[key])
            if len(shape) == 4:
                vals[key] = _kernel_values(grid, raw, d, base_dir)
            else:
                vals[key] = label_values(grid, raw, shape)
    for section, (wkey, gkey) in (("cost", ("Q", "G_Q")), ("terminal", ("H", "G_H"))):
        centered = cfg.get(section, {}).get("centered")
        if centered is not None:
            ghat = _kernel_values(grid, centered, d, base_dir)
            w = vals.get(wkey, np.zeros((n, d, d)))
            vals[gkey] = centered_kernel(ghat, w, grid.weight)
    return zero_spec(grid, tgrid, d, m, r_min=float(cfg.get("r_min", 1e-8)),
                     name=cfg.get("name", "custom"), **vals)
