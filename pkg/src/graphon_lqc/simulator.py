"""Monte-Carlo simulation of the controlled label system with common noise.

Each common-noise path carries its own conditional-mean field Xbar, propagated
by the closed (noise-averaged) Euler recursion; for affine controls this is
exactly the average of the Euler recursion over idiosyncratic noise.  The
idiosyncratic replicas X then read Xbar from their common path.

Random numbers come from one Philox stream per common path keyed by
``(seed, path index)``, with a fixed draw layout (common increments, then
idiosyncratic increments ``(n_steps, n_idio, N)``, then initial draws), so
results do not depend on how paths are batched.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels as kc
from .model import ProblemSpec, sample_initial
from .riccati import RiccatiSolution, value_function

logger = logging.getLogger(__name__)

BATCH_PATHS = 250


class SimulationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------

class Feedback:
    """Optimal feedback read from the knot caches of a Riccati solution."""

    def __init__(self, sol: RiccatiSolution):
        self.sol = sol

    def control(self, k, X, Xbar):
        return self.sol.feedback(k, X, Xbar)

    def mean_control(self, k, Xbar):
        return self.sol.feedback(k, Xbar, Xbar)


class PerturbedFeedback(Feedback):
    """Feedback plus eps * delta, with delta a deterministic ``(N, m)`` or ``(n, N, m)`` field."""

    def __init__(self, sol: RiccatiSolution, delta: np.ndarray, eps: float):
        super().__init__(sol)
        delta = np.asarray(delta, dtype=float)
        if not np.all(np.isfinite(delta)):
            raise ValueError("perturbation field must be finite")
        self.delta = delta
        self.eps = float(eps)

    def shift(self, k):
        return self.eps * (self.delta[k] if self.delta.ndim == 3 else self.delta)

    def control(self, k, X, Xbar):
        return super().control(k, X, Xbar) + self.shift(k)

    def mean_control(self, k, Xbar):
        return super().mean_control(k, Xbar) + self.shift(k)


class OpenLoopField:
    """Deterministic control values per knot and label, shape ``(n, N, m)`` or ``(N, m)``."""

    def __init__(self, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if not np.all(np.isfinite(values)):
            raise ValueError("open-loop control must be finite")
        self.values = values

    def _at(self, k):
        return self.values[k] if self.values.ndim == 3 else self.values

    def control(self, k, X, Xbar):
        return np.broadcast_to(self._at(k), X.shape[:-1] + (self._at(k).shape[-1],))

    def mean_control(self, k, Xbar):
        return np.broadcast_to(self._at(k), Xbar.shape[:-1] + (self._at(k).shape[-1],))


def _check_policy(spec: ProblemSpec, policy) -> None:
    if not isinstance(policy, (Feedback, OpenLoopField)):
        raise TypeError(f"unsupported policy {type(policy).__name__}")
    if isinstance(policy, OpenLoopField) and policy.values.shape[-1] != spec.m:
        raise ValueError("open-loop control dimension does not match m")
    if isinstance(policy, PerturbedFeedback) and policy.delta.shape[-1] != spec.m:
        raise ValueError("perturbation dimension does not match m")


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------

@dataclass
class Noise:
    dB0: np.ndarray   # (b, n)
    dW: np.ndarray    # (b, n, n_idio, N)
    xi: np.ndarray    # (b, n_idio, N, d)


def draw_noise(spec: ProblemSpec, seed: int, paths, n_idio: int) -> Noise:
    n, N = spec.tgrid.n_steps, spec.grid.n_labels
    sq = np.sqrt(spec.tgrid.dt)
    dB0, dW, xi = [], [], []
    for c in paths:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(c),))))
        dB0.append(sq * rng.standard_normal(n))
        dW.append(sq * rng.standard_normal((n, n_idio, N)))
        xi.append(sample_initial(spec.xi_mean, spec.xi_cov, rng, (n_idio,)))
    return Noise(np.stack(dB0), np.stack(dW), np.stack(xi))


# ---------------------------------------------------------------------------
# core Euler-Maruyama engine
# ---------------------------------------------------------------------------

def _active(spec: ProblemSpec) -> dict:
    """Which coefficients are not identically zero; zero terms are skipped."""
    keys = ("beta", "A", "G_A", "B", "gamma", "C", "G_C", "D", "theta", "Q", "G_Q", "I_off")
    return {key: bool(np.any(getattr(spec, key))) for key in keys}


def _mean_drift(c, Xbar, abar, h, on):
    out = np.zeros_like(Xbar)
    if on["beta"]:
        out += c.beta
    if on["A"]:
        out += kc.local(c.A, Xbar)
    if on["G_A"]:
        out += kc.apply(c.G_A, Xbar, h)
    if on["B"]:
        out += kc.local(c.B, abar)
    return out


def _quad(M, x):
    """Per-label quadratic forms x_i' M_i x_i."""
    return np.sum(x * kc.local(M, x), axis=-1)


def _run(spec: ProblemSpec, policy, noise: Noise, record: bool = False):
    """Simulate one batch; returns per-sample cost parts ``(b, n_idio, 3)`` and optional paths."""
    n, dt, h = spec.tgrid.n_steps, spec.tgrid.dt, spec.h
    on = _active(spec)
    X = noise.xi.copy()
    b = X.shape[0]
    Xbar = np.broadcast_to(spec.xi_mean, (b,) + spec.xi_mean.shape).copy()
    parts = np.zeros(X.shape[:2] + (3,))
    if record:
        Xs, Xbars, alphas = [X.copy()], [Xbar.copy()], []
    for k in range(n):
        c = spec.at(k)
        alpha = policy.control(k, X, Xbar)
        abar = policy.mean_control(k, Xbar)
        if on["Q"]:
            parts[..., 0] += dt * h * _quad(c.Q, X).sum(-1)
        if on["G_Q"]:
            TGQ = kc.apply(c.G_Q, Xbar, h)
            parts[..., 0] += (dt * h * np.einsum("bip,bip->b", Xbar, TGQ))[:, None]
        ai = alpha + c.I_off if on["I_off"] else alpha
        parts[..., 1] += dt * h * _quad(c.R, ai).sum(-1)
        drift = _mean_drift(c, X, alpha, h, {**on, "G_A": False})
        if on["G_A"]:
            drift += kc.apply(c.G_A, Xbar, h)[:, None]
        vol = np.zeros_like(X)
        if on["gamma"]:
            vol += c.gamma
        if on["C"]:
            vol += kc.local(c.C, X)
        if on["G_C"]:
            vol += kc.apply(c.G_C, Xbar, h)[:, None]
        if on["D"]:
            vol += kc.local(c.D, alpha)
        X = X + drift * dt + vol * noise.dW[:, k, :, :, None]
        Xbar = Xbar + _mean_drift(c, Xbar, abar, h, on) * dt
        if on["theta"]:
            dB = noise.dB0[:, k]
            X += c.theta * dB[:, None, None, None]
            Xbar += c.theta * dB[:, None, None]
        if not (np.isfinite(X).all() and np.isfinite(Xbar).all()):
            raise SimulationError(f"non-finite state at knot {k + 1} (t={spec.tgrid.times[k + 1]:.6g})")
        if record:
            Xs.append(X.copy())
            Xbars.append(Xbar.copy())
            alphas.append(np.array(alpha, copy=True))
    parts[..., 2] += h * _quad(spec.H, X).sum(-1)
    parts[..., 2] += (h * np.einsum("bip,bip->b", Xbar, kc.apply(spec.G_H, Xbar, h)))[:, None]
    if record:
        return parts, np.stack(Xs, 2), np.stack(Xbars, 1), np.stack(alphas, 2)
    return parts, None, None, None


def propagate_conditional_mean(spec: ProblemSpec, sol: RiccatiSolution | None, policy,
                               common_increments: np.ndarray) -> np.ndarray:
    """Xbar along one (or a batch of) common-noise increment path(s); returns ``(..., n+1, N, d)``.

    ``sol`` is only consulted through the policy and may be None for open-loop fields.
    """
    _check_policy(spec, policy)
    dB = np.atleast_2d(np.asarray(common_increments, dtype=float))
    n, dt, h = spec.tgrid.n_steps, spec.tgrid.dt, spec.h
    Xbar = np.broadcast_to(spec.xi_mean, (dB.shape[0],) + spec.xi_mean.shape).copy()
    on = _active(spec)
    out = [Xbar.copy()]
    for k in range(n):
        c = spec.at(k)
        abar = policy.mean_control(k, Xbar)
        Xbar = Xbar + _mean_drift(c, Xbar, abar, h, on) * dt + c.theta * dB[:, k, None, None]
        out.append(Xbar.copy())
    res = np.stack(out, 1)
    return res[0] if np.ndim(common_increments) == 1 else res


# ---------------------------------------------------------------------------
# ensembles and cost estimates
# ---------------------------------------------------------------------------

@dataclass
class SimulationEnsemble:
    times: np.ndarray
    seed: int
    common_paths: np.ndarray   # B0 increments, (n_common, n)
    Xbar: np.ndarray           # (n_common, n+1, N, d)
    X: np.ndarray              # (n_common, n_idio, n+1, N, d)
    controls: np.ndarray       # (n_common, n_idio, n, N, m)
    costs: np.ndarray          # (n_common, n_idio, 3): running state, control, terminal

    @property
    def n_common(self) -> int:
        return self.X.shape[0]

    @property
    def n_idio(self) -> int:
        return self.X.shape[1]


@dataclass
class CostEstimate:
    mean: float
    std_error: float
    n_samples: int
    breakdown: dict = field(default_factory=dict)


def _estimate(samples: np.ndarray) -> tuple[float, float]:
    """Mean and standard error; samples sharing a common path are grouped."""
    samples = np.asarray(samples, dtype=float)
    per_path = samples.mean(axis=1)
    if per_path.size > 1:
        se = per_path.std(ddof=1) / np.sqrt(per_path.size)
    elif samples.size > 1:
        se = samples.std(ddof=1) / np.sqrt(samples.size)
    else:
        se = 0.0
    return float(per_path.mean()), float(se)


def simulate_paths(spec: ProblemSpec, sol: RiccatiSolution | None, policy, n_common: int,
                   n_idio: int, seed: int) -> SimulationEnsemble:
    """Store full trajectories; meant for small ensembles (see ``sample_costs`` for large ones).

    Feedback policies carry their Riccati solution; ``sol`` is accepted for symmetry
    with the other entry points and checked against it when both are given.
    """
    _check_policy(spec, policy)
    if isinstance(policy, Feedback) and sol is not None and policy.sol is not sol:
        raise ValueError("policy was built from a different Riccati solution")
    chunks = []
    for start in range(0, n_common, BATCH_PATHS):
        paths = range(start, min(start + BATCH_PATHS, n_common))
        noise = draw_noise(spec, seed, paths, n_idio)
        parts, X, Xbar, alpha = _run(spec, policy, noise, record=True)
        chunks.append((noise.dB0, Xbar, X, alpha, parts))
    cat = lambda i: np.concatenate([ch[i] for ch in chunks])
    return SimulationEnsemble(spec.tgrid.times, seed, cat(0), cat(1), cat(2), cat(3), cat(4))


def nested_mean_check(spec: ProblemSpec, sol: RiccatiSolution | None, policy, n_idio: int,
                      seed: int, common_index: int = 0):
    """Average ``n_idio`` replicas on one common path and compare with the propagated Xbar.

    Returns ``(xbar, mc_mean, mc_se)``, each of shape ``(n+1, N, d)``.
    """
    _check_policy(spec, policy)
    noise = draw_noise(spec, seed, [common_index], n_idio)
    _, X, _, _ = _run(spec, policy, noise, record=True)
    xbar = propagate_conditional_mean(spec, sol, policy, noise.dB0[0])
    X = X[0]
    return xbar, X.mean(axis=0), X.std(axis=0, ddof=1) / np.sqrt(n_idio)


def estimate_cost(spec: ProblemSpec, ens: SimulationEnsemble) -> CostEstimate:
    """Recompute the realized cost of every sample from the stored trajectories."""
    dt, h = spec.tgrid.dt, spec.h
    n = spec.tgrid.n_steps
    state = np.zeros(ens.X.shape[:2])
    control = np.zeros_like(state)
    for k in range(n):
        c = spec.at(k)
        X, Xbar, a = ens.X[:, :, k], ens.Xbar[:, k], ens.controls[:, :, k]
        state += dt * h * _quad(c.Q, X).sum(-1)
        state += (dt * h * np.einsum("bip,bip->b", Xbar, kc.apply(c.G_Q, Xbar, h)))[:, None]
        control += dt * h * _quad(c.R, a + c.I_off).sum(-1)
    XT, XbT = ens.X[:, :, n], ens.Xbar[:, n]
    term = h * _quad(spec.H, XT).sum(-1) + (h * np.einsum("bip,bip->b", XbT, kc.apply(spec.G_H, XbT, h)))[:, None]
    total = state + control + term
    mean, se = _estimate(total)
    return CostEstimate(mean, se, total.size, {
        "running_state": float(state.mean()), "control": float(control.mean()), "terminal": float(term.mean())})


def sample_costs(spec: ProblemSpec, policies: list, n_common: int, n_idio: int, seed: int) -> list[np.ndarray]:
    """Realized total cost per (common, idio) sample for several policies under
    common random numbers; trajectories are not stored."""
    for p in policies:
        _check_policy(spec, p)
    out = [np.zeros((n_common, n_idio)) for _ in policies]
    for start in range(0, n_common, BATCH_PATHS):
        stop = min(start + BATCH_PATHS, n_common)
        noise = draw_noise(spec, seed, range(start, stop), n_idio)
        for acc, p in zip(out, policies):
            parts, *_ = _run(spec, p, noise)
            acc[start:stop] = parts.sum(-1)
    return out


def quadratic_penalty(spec: ProblemSpec, sol: RiccatiSolution, delta: np.ndarray, eps: float) -> float:
    """eps^2 * sum_k dt sum_u h delta' O delta over the knots where controls act."""
    n, dt, h = spec.tgrid.n_steps, spec.tgrid.dt, spec.h
    delta = np.asarray(delta, dtype=float)
    dl = delta if delta.ndim == 3 else np.broadcast_to(delta, (n,) + delta.shape)
    return float(eps * eps * dt * h * np.einsum("kip,kipq,kiq->", dl[:n], sol.O[:n], dl[:n]))


def fundamental_relation_residual(spec: ProblemSpec, sol: RiccatiSolution, delta: np.ndarray,
                                  eps: float, n_common: int, n_idio: int, seed: int,
                                  extra_eps: tuple[float, ...] = ()) -> dict:
    """Monte-Carlo check of the square-completion identity J(alpha) = V + penalty.

    residual_a  J(opt) - V
    residual_b  J(opt + eps delta) - V - penalty
    residual_b_crn  [J(opt + eps delta) - J(opt)] - penalty   (common random numbers)
    residual_c  [J(opt + eps delta) - J(opt - eps delta)] / (2 eps)   (0 when eps = 0)
    """
    delta = np.asarray(delta, dtype=float)
    if delta.ndim == 1:
        delta = np.broadcast_to(delta[:, None], (spec.grid.n_labels, spec.m))
    policies = [Feedback(sol), PerturbedFeedback(sol, delta, eps), PerturbedFeedback(sol, delta, -eps)]
    policies += [PerturbedFeedback(sol, delta, e) for e in extra_eps]
    costs = sample_costs(spec, policies, n_common, n_idio, seed)
    c0, cp, cm = costs[:3]
    V = value_function(sol, spec, 0)
    pen = quadratic_penalty(spec, sol, delta, eps)
    J0, se0 = _estimate(c0)
    Jp, sep = _estimate(cp)
    diff, se_diff = _estimate(cp - c0)
    if eps == 0:
        rc, se_c = 0.0, 0.0
    else:
        rc, se_c = _estimate((cp - cm) / (2 * eps))
    rep = {
        "J_hat": J0, "J_plus": Jp, "J_minus": _estimate(cm)[0], "V": V,
        "eps": float(eps), "penalty": pen,
        "residual_a": J0 - V, "se_a": se0,
        "residual_b": Jp - V - pen, "se_b": sep,
        "residual_b_crn": diff - pen, "se_b_crn": se_diff,
        "residual_c": rc, "se_c": se_c,
        "n_common": int(n_common), "n_idio": int(n_idio), "seed": int(seed),
    }
    for e, ce in zip(extra_eps, costs[3:]):
        de, sde = _estimate(ce - c0)
        rep[f"excess_eps_{e:g}"] = de
        rep[f"se_excess_eps_{e:g}"] = sde
    rep["excess_eps"] = diff
    rep["passed"] = bool(abs(rep["residual_a"]) <= 3 * se0
                         and abs(rep["residual_b_crn"]) <= 3 * se_diff
                         and abs(rc) <= 3 * se_c)
    return rep


def write_report(rep: dict, path: str | Path, header: dict | None = None) -> Path:
    """Flat JSON, floats rendered with 17 significant digits."""
    doc = dict(header or {})
    for key, v in rep.items():
        doc[key] = float(format(v, ".17g")) if isinstance(v, float) else v
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def trajectory_quantiles(ens: SimulationEnsemble) -> list[tuple]:
    """Rows (t, label, kind, mean, q05, q95) for X and alpha."""
    rows = []
    X = ens.X.reshape((-1,) + ens.X.shape[2:])[..., 0]
    A = ens.controls.reshape((-1,) + ens.controls.shape[2:])[..., 0]
    for name, arr, ts in (("X", X, ens.times), ("alpha", A, ens.times[:-1])):
        mean = arr.mean(0)
        q05, q95 = np.quantile(arr, [0.05, 0.95], axis=0)
        for k, t in enumerate(ts):
            for i in range(arr.shape[2]):
                rows.append((t, i, name, mean[k, i], q05[k, i], q95[k, i]))
    return rows
