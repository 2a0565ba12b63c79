"""Backward Riccati system for deterministic coefficients.

With deterministic coefficients every martingale part vanishes and the system
is an ODE chain solved backward from T:

* K    per label,  dK/dt    = -(A'K + KA + C'KC + Q - U' O^{-1} U),  K_T = H
* Kbar kernel,     dKbar/dt = -F(t, Kbar),                             Kbar_T = G_H
* Y    vector field, dY/dt  = -Fhat(t, Y),                             Y_T = 0
* Lam  per label,  Lam_t    = int_t^T  L - Gamma' O^{-1} Gamma ds

with O = R + D'KD, U = B'K + D'KC, V = D'K G_C + B' Kbar and
Gamma = D'K gamma + B'Y + R I.  The optimal control is
alpha = -O^{-1}(U X + T_V Xbar + Gamma).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels as kc
from .model import Coefficients, ProblemSpec

logger = logging.getLogger(__name__)


class RiccatiError(RuntimeError):
    """Raised when the backward integration leaves the admissible region."""


def _tr(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def gain_terms(c: Coefficients, K: np.ndarray, r_min: float = 0.0):
    """O, O^{-1}, U at one knot; raises on loss of coercivity."""
    O = c.R + _tr(c.D) @ K @ c.D
    O = 0.5 * (O + _tr(O))
    if r_min > 0:
        lo = float(np.min(np.linalg.eigvalsh(O)))
        if lo < 0.5 * r_min:
            raise RiccatiError(f"coercivity lost along trajectory: min eig O = {lo:.3e}")
    Oinv = np.linalg.inv(O)
    U = _tr(c.B) @ K + _tr(c.D) @ K @ c.C
    return O, Oinv, U


def driver_K(c: Coefficients, K: np.ndarray, r_min: float = 0.0) -> np.ndarray:
    _, Oinv, U = gain_terms(c, K, r_min)
    out = _tr(c.A) @ K + K @ c.A + _tr(c.C) @ K @ c.C + c.Q - _tr(U) @ Oinv @ U
    return 0.5 * (out + _tr(out))


def v_kernel(c: Coefficients, K: np.ndarray, kbar: np.ndarray) -> np.ndarray:
    """V(u,v) = D_u' K_u G_C(u,v) + B_u' Kbar(u,v), blocks of shape m x d."""
    return (np.einsum("ipq,iqr,ijrs->ijps", _tr(c.D), K, c.G_C)
            + np.einsum("ipq,ijqs->ijps", _tr(c.B), kbar))


def driver_Kbar(c: Coefficients, K: np.ndarray, kbar: np.ndarray, h: float,
                r_min: float = 0.0) -> np.ndarray:
    _, Oinv, U = gain_terms(c, K, r_min)
    ga_adj = kc.adjoint(c.G_A)
    gc_adj = kc.adjoint(c.G_C)
    kb_adj = kc.adjoint(kbar)
    psi = (np.einsum("ipq,ijqr->ijpr", K, c.G_A)
           + np.einsum("ijpq,jqr->ijpr", ga_adj, K)
           + np.einsum("ipq,iqr,ijrs->ijps", _tr(c.C), K, c.G_C)
           + np.einsum("ijpq,jqr,jrs->ijps", gc_adj, K, c.C)
           + kc.mult_compose(gc_adj, K, c.G_C, h)
           + np.einsum("ipq,ijqr->ijpr", _tr(c.A), kbar)
           + kc.compose(ga_adj, kbar, h)
           + np.einsum("ijpq,jqr->ijpr", kb_adj, c.A)
           + kc.compose(kb_adj, c.G_A, h)
           + c.G_Q)
    V = v_kernel(c, K, kbar)
    V_adj = kc.adjoint(V)
    F = (psi
         - np.einsum("ipq,iqr,ijrs->ijps", _tr(U), Oinv, V)
         - np.einsum("ijpq,jqr,jrs->ijps", V_adj, Oinv, U)
         - kc.mult_compose(V_adj, Oinv, V, h))
    return kc.symmetrize(F)


def gamma_field(c: Coefficients, K: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (np.einsum("ipq,iqr,ir->ip", _tr(c.D), K, c.gamma)
            + np.einsum("ipq,iq->ip", _tr(c.B), y)
            + np.einsum("ipq,iq->ip", c.R, c.I_off))


def driver_Y(c: Coefficients, K: np.ndarray, kbar: np.ndarray, y: np.ndarray, h: float,
             r_min: float = 0.0) -> np.ndarray:
    _, Oinv, U = gain_terms(c, K, r_min)
    Kg = np.einsum("ipq,iq->ip", K, c.gamma)
    M = (np.einsum("ipq,iq->ip", K, c.beta)
         + np.einsum("ipq,iq->ip", _tr(c.C), Kg)
         + kc.apply(kc.adjoint(c.G_C), Kg, h)
         + kc.apply(kbar, c.beta, h)
         + np.einsum("ipq,iq->ip", _tr(c.A), y)
         + kc.apply(kc.adjoint(c.G_A), y, h))
    gam = gamma_field(c, K, y)
    og = np.einsum("ipq,iq->ip", Oinv, gam)
    V = v_kernel(c, K, kbar)
    return M - np.einsum("ipq,iq->ip", _tr(U), og) - kc.apply(kc.adjoint(V), og, h)


def lambda_integrand(c: Coefficients, K: np.ndarray, kbar: np.ndarray, y: np.ndarray,
                     h: float) -> np.ndarray:
    """L - Gamma' O^{-1} Gamma per label."""
    _, Oinv, _ = gain_terms(c, K)
    gam = gamma_field(c, K, y)
    quad = lambda a, M, b: np.einsum("ip,ipq,iq->i", a, M, b)
    L = (quad(c.gamma, K, c.gamma) + quad(c.theta, K, c.theta)
         + 2.0 * np.einsum("ip,ip->i", c.beta, y)
         + np.einsum("ip,ip->i", c.theta, kc.apply(kbar, c.theta, h))
         + quad(c.I_off, c.R, c.I_off))
    return L - quad(gam, Oinv, gam)


@dataclass
class RiccatiSolution:
    times: np.ndarray
    K: np.ndarray        # (n+1, N, d, d)
    Kbar: np.ndarray     # (n+1, N, N, d, d)
    Y: np.ndarray        # (n+1, N, d)
    Lam: np.ndarray      # (n+1, N)
    O: np.ndarray        # (n+1, N, m, m)
    Oinv: np.ndarray
    U: np.ndarray        # (n+1, N, m, d)
    V: np.ndarray        # (n+1, N, N, m, d)
    Gamma: np.ndarray    # (n+1, N, m)
    h: float
    scheme: str = "rk4"
    monitor: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    def kbar_constant(self) -> np.ndarray:
        """Mean kernel value per knot (the aggregate value for constant kernels)."""
        return self.Kbar.mean(axis=(1, 2))

    def feedback(self, k: int, X: np.ndarray, Xbar: np.ndarray) -> np.ndarray:
        """alpha = -O^{-1}(U X + T_V Xbar + Gamma); X has shape (..., N, d), Xbar (..., N, d)."""
        TV = kc.apply(self.V[k], Xbar, self.h)
        if X.ndim > Xbar.ndim:
            TV = np.expand_dims(TV, axis=-3)
        rhs = kc.local(self.U[k], X) + TV + self.Gamma[k]
        return -kc.local(self.Oinv[k], rhs)


def _stage(spec: ProblemSpec, c: Coefficients, state):
    K, kb, y = state
    h = spec.h
    return (driver_K(c, K, spec.r_min),
            driver_Kbar(c, K, kb, h, spec.r_min),
            driver_Y(c, K, kb, y, h, spec.r_min))


def _axpy(state, inc, a):
    K, kb, y = state
    dK, dkb, dy = inc
    return (0.5 * ((K + a * dK) + _tr(K + a * dK)),
            kc.symmetrize(kb + a * dkb),
            y + a * dy)


def solve_backward(spec: ProblemSpec, scheme: str = "rk4", blowup_cap: float = 1e6) -> RiccatiSolution:
    """Integrate (K, Kbar, Y) backward with fixed steps, then accumulate Lam.

    On [t_k, t_{k+1}] every stage uses the knot-k coefficients.  In reversed time
    s = T - t the system reads d(state)/ds = driver(state).
    """
    if scheme not in ("rk4", "euler"):
        raise ValueError(f"unknown scheme {scheme!r}")
    n = spec.tgrid.n_steps
    dt = spec.tgrid.dt
    N, d, m, h = spec.grid.n_labels, spec.d, spec.m, spec.h
    K = np.zeros((n + 1, N, d, d))
    Kbar = np.zeros((n + 1, N, N, d, d))
    Y = np.zeros((n + 1, N, d))
    K[n], Kbar[n] = spec.H, kc.symmetrize(spec.G_H)

    norms = np.zeros(n + 1)
    pi = kc.power_norm(Kbar[n], h)
    norms[n], vec = pi.norm, pi.vector
    state = (K[n], Kbar[n], Y[n])
    for k in range(n - 1, -1, -1):
        c = spec.at(k)
        try:
            k1 = _stage(spec, c, state)
            if scheme == "euler":
                state = _axpy(state, k1, dt)
            else:
                k2 = _stage(spec, c, _axpy(state, k1, dt / 2))
                k3 = _stage(spec, c, _axpy(state, k2, dt / 2))
                k4 = _stage(spec, c, _axpy(state, k3, dt))
                inc = tuple((a + 2 * b + 2 * cc + e) / 6.0 for a, b, cc, e in zip(k1, k2, k3, k4))
                state = _axpy(state, inc, dt)
        except RiccatiError as exc:
            raise RiccatiError(f"{exc} (interval {k}, t={spec.tgrid.times[k]:.6g})") from None
        K[k], Kbar[k], Y[k] = state
        if not (np.all(np.isfinite(K[k])) and np.all(np.isfinite(Kbar[k]))):
            raise RiccatiError(f"Riccati blow-up - non-finite values at knot {k}")
        pi = kc.power_norm(Kbar[k], h, start=vec)
        norms[k], vec = pi.norm, pi.vector
        if norms[k] > blowup_cap:
            raise RiccatiError(
                f"Riccati blow-up - check positivity assumptions (||T_Kbar|| = {norms[k]:.3e} at knot {k})")

    O = np.zeros((n + 1, N, m, m))
    Oinv = np.zeros_like(O)
    U = np.zeros((n + 1, N, m, d))
    V = np.zeros((n + 1, N, N, m, d))
    Gam = np.zeros((n + 1, N, m))
    for k in range(n + 1):
        c = spec.at(k)
        O[k], Oinv[k], U[k] = gain_terms(c, K[k], spec.r_min)
        V[k] = v_kernel(c, K[k], Kbar[k])
        Gam[k] = gamma_field(c, K[k], Y[k])

    sol = RiccatiSolution(spec.tgrid.times, K, Kbar, Y, np.zeros((n + 1, N)), O, Oinv, U, V, Gam, h,
                          scheme=scheme)
    sol.Lam = eval_Lambda(sol, spec)
    sol.monitor = {
        "opnorm_Kbar": norms,
        "min_eig_K": np.linalg.eigvalsh(K).min(axis=(1, 2)),
        "min_eig_O": np.linalg.eigvalsh(O).min(axis=(1, 2)),
    }
    return sol


def eval_Lambda(sol: RiccatiSolution, spec: ProblemSpec) -> np.ndarray:
    """Backward left-rectangle accumulation of the Lam integrand."""
    n, dt = spec.tgrid.n_steps, spec.tgrid.dt
    lam = np.zeros((n + 1, spec.grid.n_labels))
    for k in range(n - 1, -1, -1):
        lt = lambda_integrand(spec.at(k), sol.K[k], sol.Kbar[k], sol.Y[k], spec.h)
        lam[k] = lam[k + 1] + dt * lt
    return lam


def value_function(sol: RiccatiSolution, spec: ProblemSpec, t_index: int = 0,
                   xi_mean: np.ndarray | None = None,
                   xi_second_moment: np.ndarray | None = None) -> float:
    """Optimal cost for an initial law with the given per-label mean and E[xi xi']."""
    h = spec.h
    mean = spec.xi_mean if xi_mean is None else np.asarray(xi_mean, dtype=float)
    if xi_second_moment is None:
        xi_second_moment = spec.xi_cov + np.einsum("ip,iq->ipq", mean, mean)
    k = t_index
    quad = h * np.einsum("ipq,iqp->", sol.K[k], xi_second_moment)
    mf = h * np.einsum("ip,ip->", mean, kc.apply(sol.Kbar[k], mean, h))
    lin = 2.0 * h * np.einsum("ip,ip->", sol.Y[k], mean)
    return float(quad + mf + lin + h * sol.Lam[k].sum())


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def export_csv(sol: RiccatiSolution, out_dir: str | Path, header: str = "") -> list[Path]:
    """Write K.csv, Kbar.csv, Y.csv, Lambda.csv and monitor.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n1, N = sol.K.shape[:2]
    d = sol.K.shape[2]
    written = []

    def emit(name, cols, rows):
        path = out_dir / name
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in rows:
                w.writerow([r[0], *(_fmt(v) if isinstance(v, float) else v for v in r[1:])])
        written.append(path)

    ij = [(p, q) for p in range(d) for q in range(d)]
    emit("K.csv", ["t", "label", *[f"K_{p}{q}" for p, q in ij]],
         ([_fmt(sol.times[k]), i, *[float(sol.K[k, i, p, q]) for p, q in ij]]
          for k in range(n1) for i in range(N)))
    emit("Kbar.csv", ["t", "i", "j", *[f"Kbar_{p}{q}" for p, q in ij]],
         ([_fmt(sol.times[k]), i, j, *[float(sol.Kbar[k, i, j, p, q]) for p, q in ij]]
          for k in range(n1) for i in range(N) for j in range(N)))
    emit("Y.csv", ["t", "label", *[f"Y_{p}" for p in range(d)]],
         ([_fmt(sol.times[k]), i, *[float(v) for v in sol.Y[k, i]]] for k in range(n1) for i in range(N)))
    emit("Lambda.csv", ["t", "label", "Lambda"],
         ([_fmt(sol.times[k]), i, float(sol.Lam[k, i])] for k in range(n1) for i in range(N)))
    mon = sol.monitor
    emit("monitor.csv", ["t", "opnorm_Kbar", "min_eig_K", "min_eig_O"],
         ([_fmt(sol.times[k]), float(mon["opnorm_Kbar"][k]), float(mon["min_eig_K"][k]),
           float(mon["min_eig_O"][k])] for k in range(n1)))
    return written


_CACHE_KEYS = ("times", "K", "Kbar", "Y", "Lam", "O", "Oinv", "U", "V", "Gamma")


def save_solution(sol: RiccatiSolution, path: str | Path, tag: str = "") -> Path:
    """Store a solution as ``.npz``; ``tag`` (e.g. a config hash) is checked on load."""
    path = Path(path)
    arrays = {key: getattr(sol, key) for key in _CACHE_KEYS}
    arrays.update({f"monitor_{k}": v for k, v in sol.monitor.items()})
    np.savez(path, h=sol.h, scheme=sol.scheme, tag=tag, **arrays)
    return path


def load_solution(path: str | Path, spec: ProblemSpec, tag: str = "") -> RiccatiSolution:
    """Load a cached solution and check it against ``spec``; any defect raises RiccatiError."""
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {key: np.array(z[key]) for key in z.files}
    except Exception as exc:  # zip, header or decoding failures all mean a bad cache
        raise RiccatiError(f"unreadable Riccati cache {path}: {exc}") from None
    missing = [k for k in _CACHE_KEYS + ("h", "scheme", "tag") if k not in data]
    if missing:
        raise RiccatiError(f"Riccati cache {path} lacks {missing}")
    if str(data["tag"]) != tag:
        raise RiccatiError(f"Riccati cache {path} was produced for a different configuration")
    n, N, d, m = spec.tgrid.n_steps, spec.grid.n_labels, spec.d, spec.m
    shapes = {"times": (n + 1,), "K": (n + 1, N, d, d), "Kbar": (n + 1, N, N, d, d), "Y": (n + 1, N, d),
              "Lam": (n + 1, N), "O": (n + 1, N, m, m), "Oinv": (n + 1, N, m, m), "U": (n + 1, N, m, d),
              "V": (n + 1, N, N, m, d), "Gamma": (n + 1, N, m)}
    for key, shape in shapes.items():
        if data[key].shape != shape:
            raise RiccatiError(f"Riccati cache field {key} has shape {data[key].shape}, expected {shape}")
        if not np.all(np.isfinite(data[key])):
            raise RiccatiError(f"Riccati cache field {key} has non-finite entries")
    if not (np.allclose(data["K"][n], spec.H) and np.allclose(data["Kbar"][n], kc.symmetrize(spec.G_H))
            and np.allclose(data["times"], spec.tgrid.times)):
        raise RiccatiError(f"Riccati cache {path} does not match the terminal data of the problem")
    monitor = {k[len("monitor_"):]: v for k, v in data.items() if k.startswith("monitor_")}
    return RiccatiSolution(*(data[k] for k in _CACHE_KEYS), h=float(data["h"]),
                           scheme=str(data["scheme"]), monitor=monitor)
