"""Builders for the optimal-trading and systemic-risk models, plus scalar
reference solutions for their homogeneous (label-independent) limits."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels as kc
from .kernels import LabelGrid
from .model import ModelError, ProblemSpec, TimeGrid, centered_kernel, label_values, validate, zero_spec


def _as_field(grid: LabelGrid, value) -> np.ndarray:
    if isinstance(value, dict):
        return label_values(grid, value, (grid.n_labels,))
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(grid.n_labels, float(arr))
    if arr.shape[-1] != grid.n_labels:
        raise ModelError(f"label field has {arr.shape[-1]} entries, grid has {grid.n_labels}")
    return arr


def _as_graphon(grid: LabelGrid, value) -> np.ndarray:
    if isinstance(value, kc.MatrixKernel):
        blocks = value.blocks
    elif isinstance(value, (dict, int, float)):
        blocks = kc.make_graphon(grid, value).blocks
    else:
        blocks = np.asarray(value, dtype=float)
        if blocks.ndim == 2:
            blocks = blocks[:, :, None, None]
    if kc.asymmetry(blocks) > kc.SYMMETRY_ATOL:
        raise ModelError("graphon must be symmetric")
    return blocks


@dataclass
class TradingParams:
    """Inventory dX = alpha dt + sigma dW + sigma0 dB0, cost (alpha+P)^2 and
    terminal lambda (X_T - T_G Xbar_T)^2."""
    n_labels: int = 16
    T: float = 1.0
    n_steps: int = 400
    P: object = 0.0
    lam: object = 1.0
    G_lambda: object = 1.0
    sigma: object = 0.0
    sigma0: object = 0.0
    xi_mean: object = 0.0
    xi_var: object = 0.0


@dataclass
class SystemicParams:
    """Log-reserves dX = [kappa (X - T_Gk Xbar) + alpha] dt
    + sigma (sqrt(1 - rho^2) dW + rho dB0)."""
    n_labels: int = 16
    T: float = 1.0
    n_steps: int = 400
    kappa: float = -1.0
    G_kappa: object = 1.0
    G_eta: object = 1.0
    G_r: object = 1.0
    eta: object = 1.0
    r: object = 1.0
    sigma: object = 0.2
    rho: object = 0.5
    xi_mean: object = 0.0
    xi_var: object = 0.0


def _initial(grid, mean, var):
    m = _as_field(grid, mean)[:, None]
    v = _as_field(grid, var)
    if np.any(v < 0):
        raise ModelError("initial variance must be non-negative")
    return m, v[:, None, None]


def build_trading(p: TradingParams, name: str = "trading") -> ProblemSpec:
    grid = LabelGrid(p.n_labels)
    tgrid = TimeGrid(0.0, p.T, p.n_steps)
    lam = _as_field(grid, p.lam)
    if np.any(lam < 0):
        raise ModelError("risk aversion must be non-negative")
    G = _as_graphon(grid, p.G_lambda)
    P = _as_field(grid, p.P)
    sigma = _as_field(grid, p.sigma)
    sigma0 = _as_field(grid, p.sigma0)
    xm, xv = _initial(grid, p.xi_mean, p.xi_var)
    spec = zero_spec(
        grid, tgrid, 1, 1,
        B=np.ones((grid.n_labels, 1, 1)),
        gamma=sigma[..., None], theta=sigma0[..., None],
        I_off=P[:, None],
        H=lam[:, None, None],
        G_H=centered_kernel(G, lam[:, None, None], grid.weight),
        xi_mean=xm, xi_cov=xv, name=name,
    )
    validate(spec)
    return spec


def build_systemic(p: SystemicParams, name: str = "systemic") -> ProblemSpec:
    if p.kappa > 0:
        raise ModelError("kappa must be <= 0")
    grid = LabelGrid(p.n_labels)
    tgrid = TimeGrid(0.0, p.T, p.n_steps)
    eta, r = _as_field(grid, p.eta), _as_field(grid, p.r)
    if np.any(eta <= 0) or np.any(r <= 0):
        raise ModelError("eta and r must be positive")
    sigma, rho = _as_field(grid, p.sigma), _as_field(grid, p.rho)
    if np.any(np.abs(rho) > 1):
        raise ModelError("rho must lie in [-1, 1]")
    Gk = _as_graphon(grid, p.G_kappa)
    Ge = _as_graphon(grid, p.G_eta)
    Gr = _as_graphon(grid, p.G_r)
    n = grid.n_labels
    xm, xv = _initial(grid, p.xi_mean, p.xi_var)
    spec = zero_spec(
        grid, tgrid, 1, 1,
        A=np.full((n, 1, 1), float(p.kappa)),
        G_A=-float(p.kappa) * Gk,
        B=np.ones((n, 1, 1)),
        gamma=(sigma * np.sqrt(1.0 - rho ** 2))[..., None],
        theta=(sigma * rho)[..., None],
        Q=eta[:, None, None],
        G_Q=centered_kernel(Ge, eta[:, None, None], grid.weight),
        H=r[:, None, None],
        G_H=centered_kernel(Gr, r[:, None, None], grid.weight),
        xi_mean=xm, xi_cov=xv, name=name,
    )
    validate(spec)
    return spec


# ---------------------------------------------------------------------------
# homogeneous reference
# ---------------------------------------------------------------------------

@dataclass
class ScalarReference:
    times: np.ndarray
    K: np.ndarray
    kbar: np.ndarray
    gains: dict = field(default_factory=dict)


def _rk4_backward(rhs, terminal, T, n_steps, refine):
    """Integrate dz/dt = rhs(z) backward from T on a grid refined ``refine`` times."""
    n_fine = n_steps * refine
    dt = T / n_fine
    z = np.array(terminal, dtype=float)
    out = np.zeros((n_steps + 1, z.size))
    out[n_steps] = z
    for j in range(n_fine - 1, -1, -1):
        s1 = rhs(z)
        s2 = rhs(z - 0.5 * dt * s1)
        s3 = rhs(z - 0.5 * dt * s2)
        s4 = rhs(z - dt * s3)
        z = z - dt * (s1 + 2 * s2 + 2 * s3 + s4) / 6.0
        if j % refine == 0:
            out[j // refine] = z
    return out


def homogeneous_oracle(app: str, T: float = 1.0, n_steps: int = 400, refine: int = 16,
                       **params) -> ScalarReference:
    """Scalar (K, kbar) for label-constant parameters and unit graphons.

    Substituting a constant kernel kbar(t) into the kernel Riccati driver gives,
    for systemic risk (G_A = -kappa, G_Q = -eta, G_H = -r)::

        K'    = -(2 kappa K + eta - K^2),          K_T = r
        kbar' = 2 kappa K + eta + 2 K kbar + kbar^2, kbar_T = -r

    and for trading (G_H = -lambda)::

        K' = K^2, K_T = lambda;   kbar' = 2 K kbar + kbar^2, kbar_T = -lambda
    """
    for key, v in params.items():
        if np.ndim(v) and np.ptp(np.asarray(v, dtype=float)) != 0:
            raise ModelError(f"homogeneous oracle needs label-constant {key}")
    get = lambda k, default: float(np.ravel(params.get(k, default))[0])
    if app == "systemic":
        kappa, eta, r = get("kappa", -1.0), get("eta", 1.0), get("r", 1.0)

        def rhs(z):
            K, kb = z
            return np.array([-(2 * kappa * K + eta - K * K),
                             2 * kappa * K + eta + 2 * K * kb + kb * kb])
        path = _rk4_backward(rhs, [r, -r], T, n_steps, refine)
    elif app == "trading":
        lam = get("lam", 1.0)

        def rhs(z):
            K, kb = z
            return np.array([K * K, 2 * K * kb + kb * kb])
        path = _rk4_backward(rhs, [lam, -lam], T, n_steps, refine)
    else:
        raise ValueError(f"unknown application {app!r}")
    times = np.linspace(0.0, T, n_steps + 1)
    K, kb = path[:, 0], path[:, 1]
    return ScalarReference(times, K, kb, gains={"state": -K, "mean_field": -kb})


def trading_closed_form(lam: float, T: float, t: np.ndarray) -> np.ndarray:
    return lam / (1.0 + lam * (T - np.asarray(t)))
