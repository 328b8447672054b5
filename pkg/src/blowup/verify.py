"""
Numerical checks of the structural identities behind the viscosity and
continuity results.

* :func:`ito_residual` replays the semimartingale decomposition of
  ``phi(t* - t, X_t) Y_t`` on simulated paths and reports what is left over.
* :func:`viscosity_residual` measures the consistency residual
  ``u_t - L'u`` of a solution field under grid refinement; for a continuous
  solution this is the standard numerical surrogate for the viscosity
  inequalities (the semicontinuous envelopes coincide with the function).
* :func:`continuity_bound` evaluates the explicit modulus of continuity in
  time and :func:`continuity_check` tests Monte Carlo estimates against it.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .expr import CoefficientExpr, EvaluationError, parse_expression, state_variables
from .model import DiffusionModel, FeynmanKacSpec, validate_model
from .montecarlo import estimate_feynman_kac, estimate_u, mean_and_sd
from .paths import INVALID, SimConfig, kill_box, simulate_batch
from .pde import PDESolution, _lattice, _march

__all__ = [
    "TestFunctionJet",
    "JetMismatchError",
    "make_jet",
    "ItoResidual",
    "ito_residual",
    "LevelResidual",
    "ViscosityTable",
    "viscosity_residual",
    "ContinuityBoundParams",
    "continuity_bound",
    "ContinuityReport",
    "continuity_check",
]


# --------------------------------------------------------------------------
# test-function jets


class JetMismatchError(ValueError):
    """Declared derivatives disagree with finite differences of ``phi``."""


@dataclass(frozen=True)
class TestFunctionJet:
    """``phi(t, x)`` with declared ``phi_t``, gradient and Hessian.

    All parts are expressions in ``t`` and the state variables (``x`` or
    ``x1..xn``). Build with :func:`make_jet`, which runs the finite-difference
    self-check.
    """

    __test__ = False  # not a pytest class

    n: int
    phi: CoefficientExpr
    phi_t: CoefficientExpr
    grad: tuple
    hess: tuple

    def _args(self, t, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1 and self.n == 1:
            x = x[None, :]
        elif x.ndim == 1:
            x = x[:, None]
        shape = x.shape[1:]
        t = np.broadcast_to(np.asarray(t, dtype=float), shape)
        return (t, *x), shape

    def _ev(self, e, args, shape):
        return np.broadcast_to(e(*args), shape).astype(float)

    def value(self, t, x) -> np.ndarray:
        args, shape = self._args(t, x)
        return self._ev(self.phi, args, shape)

    def time_derivative(self, t, x) -> np.ndarray:
        args, shape = self._args(t, x)
        return self._ev(self.phi_t, args, shape)

    def gradient(self, t, x) -> np.ndarray:
        args, shape = self._args(t, x)
        return np.stack([self._ev(g, args, shape) for g in self.grad])

    def hessian(self, t, x) -> np.ndarray:
        args, shape = self._args(t, x)
        return np.stack([np.stack([self._ev(h, args, shape) for h in row]) for row in self.hess])

    def generator(self, model: DiffusionModel, fk: FeynmanKacSpec, t, x) -> np.ndarray:
        """``G = phi_t - L'phi`` at ``(t, x)``, with ``x`` of shape (n, L)."""
        x = np.asarray(x, dtype=float).reshape(self.n, -1)
        sig = model.dispersion(x)
        a = np.einsum("ikl,jkl->ijl", sig, sig)
        b = model.drift(x)
        h = np.broadcast_to(fk.h(*x), x.shape[1:])
        hess = self.hessian(t, x)
        lphi = 0.5 * np.einsum("ijl,ijl->l", a, hess) + np.einsum("il,il->l", b,
                                                                  self.gradient(t, x))
        return self.time_derivative(t, x) - (lphi - h * self.value(t, x))

    def self_check(self, points=None, n_points: int = 100, box=None, seed: int = 0,
                   tol: float = 1e-6) -> float:
        """Largest relative mismatch of declared derivatives against central
        differences, relative to ``max(1, |value|)``; raises above ``tol``.

        ``points`` has shape (1 + n, L) holding ``(t, x)`` columns; by default
        ``n_points`` uniform draws from ``box`` (``t`` in [0, 1] and each
        ``x_i`` in [-1, 1] unless given).
        """
        n = self.n
        if points is None:
            rng = np.random.default_rng(seed)
            box = box or [(0.0, 1.0)] + [(-1.0, 1.0)] * n
            lo = np.array([b[0] for b in box])
            hi = np.array([b[1] for b in box])
            points = lo[:, None] + (hi - lo)[:, None] * rng.random((n + 1, n_points))
        points = np.asarray(points, dtype=float)
        t, x = points[0], points[1:]
        worst = 0.0

        def rel(declared, fd):
            d = np.abs(declared - fd) / np.maximum(1.0, np.abs(declared))
            if not np.all(np.isfinite(d)):
                raise EvaluationError("jet not finite at a probe point")
            return float(d.max())

        def step(v):
            return 1e-5 * np.maximum(1.0, np.abs(v))

        ht = step(t)
        worst = max(worst, rel(self.time_derivative(t, x),
                               (self.value(t + ht, x) - self.value(t - ht, x)) / (2 * ht)))
        for i in range(n):
            e = np.zeros_like(x)
            hx = step(x[i])
            e[i] = hx
            worst = max(worst, rel(self.gradient(t, x)[i],
                                   (self.value(t, x + e) - self.value(t, x - e)) / (2 * hx)))
            d_grad = (self.gradient(t, x + e) - self.gradient(t, x - e)) / (2 * hx)
            hess = self.hessian(t, x)
            for j in range(n):
                worst = max(worst, rel(hess[j, i], d_grad[j]))
        if worst > tol:
            raise JetMismatchError(
                f"declared derivatives differ from finite differences by {worst:.3g} "
                f"(relative, tolerance {tol:g})")
        return worst


def make_jet(phi: str, phi_t: str, grad, hess, n: int = 1, check: bool = True,
             **check_kw) -> TestFunctionJet:
    """Parse a jet from expression strings in ``t`` and the state variables.

    For ``n = 1``, ``grad`` and ``hess`` may be single strings.
    """
    names = ("t",) + state_variables(n)
    if isinstance(grad, str):
        grad = [grad]
    if isinstance(hess, str):
        hess = [[hess]]
    if len(grad) != n or len(hess) != n or any(len(r) != n for r in hess):
        raise ValueError(f"gradient needs {n} entries and the Hessian {n}x{n}")
    jet = TestFunctionJet(
        n=n,
        phi=parse_expression(phi, names),
        phi_t=parse_expression(phi_t, names),
        grad=tuple(parse_expression(g, names) for g in grad),
        hess=tuple(tuple(parse_expression(h, names) for h in row) for row in hess),
    )
    if check:
        jet.self_check(**check_kw)
    return jet


# --------------------------------------------------------------------------
# Ito residual


@dataclass(frozen=True)
class ItoResidual:
    """Statistics of the per-path decomposition residual ``D``."""

    mean: float
    sd: float
    std_error: float
    martingale_mean: float
    martingale_std_error: float
    max_abs: float
    mean_nu: float
    n_paths: int
    n_invalid: int
    dt: float

    def as_dict(self):
        return asdict(self)


def ito_residual(model: DiffusionModel, fk: FeynmanKacSpec, jet: TestFunctionJet,
                 t_star: float, x0, n_paths: int, cfg: SimConfig, delta: float | None = None,
                 keep_samples: bool = False):
    """Residual of the decomposition ``d[phi Y] = -G Y dt + grad(phi) sigma Y dW``.

    Paths start at ``x0`` and run to ``nu ^ t_star``, where ``nu`` is the first
    grid time ``(t_star - s, X_s)`` leaves the ``delta``-neighbourhood of
    ``(t_star, x0)`` (without ``delta`` only ``t_star`` and the domain exit
    stop them). Per path

        D = phi(t*-nu, X_nu) Y_nu - phi(t*, x0)
            + sum G(t*-t_k, X_k) Y_k dt - sum grad(phi) sigma(X_k) Y_k dW_k,

    with left-point sums on the simulation grid. Returns :class:`ItoResidual`
    (and the per-path ``D`` when ``keep_samples``).
    """
    if jet.n != model.n:
        raise ValueError("jet and model dimensions differ")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float)).ravel()
    k_star = cfg.step_of(t_star)
    if k_star == 0:
        raise ValueError("t_star must be positive")
    caps = k_star
    stop = None
    if delta is not None:
        if not 0 < delta:
            raise ValueError("delta must be positive")
        lo, hi = kill_box(model, cfg.truncation_index)
        if np.any(x0 - delta <= lo) or np.any(x0 + delta >= hi):
            raise ValueError("the ball B_delta(x0) must lie inside the domain")
        caps = min(k_star, int(math.ceil(delta / cfg.dt - 1e-9)))
        c = x0[:, None]
        d2 = delta * delta

        def stop(x_old, x_new):
            return ((x_new - c) ** 2).sum(axis=0) >= d2

    g_sum = np.zeros(n_paths)
    m_sum = np.zeros(n_paths)
    dt = cfg.dt

    def hook(k, ids, x_old, x_new, dw, logy_old, logy_new, inside):
        s = t_star - k * dt
        y = np.exp(logy_old)
        g = jet.generator(model, fk, s, x_old)
        grad = jet.gradient(s, x_old)
        sig = model.dispersion(x_old)
        incr = np.einsum("il,ikl,kl->l", grad, sig, dw)
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(incr))):
            raise EvaluationError(f"jet not finite along a path at step {k}")
        g_sum[ids] += g * y * dt
        m_sum[ids] += incr * y

    res = simulate_batch(model, fk, x0, cfg, n_paths=n_paths, caps=caps, stop=stop, hook=hook)
    ok = res.status != INVALID
    if not ok.any():
        raise ArithmeticError("no valid paths")
    nu = res.final_step[ok] * dt
    xs = res.final_state[ok].T
    end = jet.value(t_star - nu, xs) * np.exp(res.final_logy[ok])
    start = float(jet.value(t_star, x0[:, None])[0])
    d = (end - start) + g_sum[ok] - m_sum[ok]
    m, sd = mean_and_sd(d)
    mm, msd = mean_and_sd(m_sum[ok])
    n_ok = int(ok.sum())
    out = ItoResidual(m, sd, sd / math.sqrt(n_ok), mm, msd / math.sqrt(n_ok),
                      float(np.max(np.abs(d))), mean_and_sd(nu)[0], n_ok, res.n_invalid, dt)
    return (out, d) if keep_samples else out


# --------------------------------------------------------------------------
# viscosity (consistency) residual


@dataclass(frozen=True)
class LevelResidual:
    level: int
    dx: float
    dt: float
    max_abs: float
    median_abs: float
    n_points: int


@dataclass
class ViscosityTable:
    levels: list = field(default_factory=list)
    window: tuple = ()
    source: str = "solver"

    @property
    def medians(self) -> list:
        return [r.median_abs for r in self.levels]

    @property
    def maxima(self) -> list:
        return [r.max_abs for r in self.levels]

    @property
    def median_decreasing(self) -> bool:
        m = self.medians
        return all(b < a for a, b in zip(m, m[1:]))

    @property
    def median_ratios(self) -> list:
        m = self.medians
        return [a / b if b > 0 else math.inf for a, b in zip(m, m[1:])]

    def as_dict(self):
        return {"levels": [asdict(r) for r in self.levels], "window": list(self.window),
                "source": self.source, "median_decreasing": self.median_decreasing,
                "median_ratios": self.median_ratios}


def _residual_at(model, fk, axes, dx, dt, u_minus, u_mid, u_plus, idx):
    """Centered residual ``u_t - L'u`` at interior lattice indices ``idx``."""
    n = len(axes)
    pts = np.stack([axes[d][idx[d]] for d in range(n)])
    res = (u_plus[idx] - u_minus[idx]) / (2 * dt)
    sig = model.dispersion(pts)
    a = np.einsum("ikl,jkl->ijl", sig, sig)
    b = model.drift(pts)
    h = np.broadcast_to(fk.h(*pts), pts.shape[1:])
    lu = -h * u_mid[idx]
    for d in range(n):
        up = list(idx)
        dn = list(idx)
        up[d] = idx[d] + 1
        dn[d] = idx[d] - 1
        up, dn = tuple(up), tuple(dn)
        lu = lu + 0.5 * a[d, d] * (u_mid[up] - 2 * u_mid[idx] + u_mid[dn]) / dx[d] ** 2
        lu = lu + b[d] * (u_mid[up] - u_mid[dn]) / (2 * dx[d])
    return res - lu


def viscosity_residual(sol: PDESolution, model: DiffusionModel, fk: FeynmanKacSpec,
                       levels: int = 3, window: Sequence | None = None,
                       field: Callable | None = None) -> ViscosityTable:
    """Consistency residual ``u_t - L'u`` under successive grid halvings.

    Level ``l`` uses ``dx / 2**l`` and ``dt / 2**l`` (level 0 is the grid of
    ``sol``). The residual is taken with centered differences at the nodes
    and saved times of ``sol`` that lie in the window, so every level is
    measured at the same points.

    Parameters
    ----------
    window : sequence, optional
        ``(t_min, t_max)`` optionally followed by one ``(lo, hi)`` per axis;
        keep ``t_min > 0`` to avoid the initial boundary layer. Defaults to
        ``t`` in ``[t_max / 4, t_max]`` and the whole box.
    field : callable, optional
        ``field(t, x_axes...) -> u`` sampled on each lattice instead of
        re-solving (for example an exact solution).
    """
    if levels < 2:
        raise ValueError("need at least 2 refinement levels")
    T = sol.grid.t_max
    if window is None:
        window = (T / 4, T)
    t_lo, t_hi = float(window[0]), float(window[1])
    xwin = list(window[2:]) if len(window) > 2 else None
    if not t_lo > 0:
        raise ValueError("the window must start at t > 0")
    n = sol.n
    times = [float(t) for t in sol.times if t_lo - 1e-12 <= t <= t_hi + 1e-12]
    table = ViscosityTable(window=tuple(window), source="field" if field else "solver")
    for lev in range(levels):
        g = sol.grid.refined(lev)
        dt = g.dt
        dx = g.spacing(n)
        # keep t-dt, t, t+dt for each comparison time
        base = [int(round(t / dt)) for t in times]
        base = [k for k in base if k >= 1 and k + 1 <= g.n_steps]
        if not base:
            raise ValueError("no comparison times inside the window")
        wanted = sorted({k + d for k in base for d in (-1, 0, 1)})
        if field is None:
            want = set(wanted)
            _, axes, t_saved, vals, _ = _march(model, fk, sol.m, g, want.__contains__)
            slices = {int(round(t / dt)): v for t, v in zip(t_saved, vals)}
        else:
            _, axes = _lattice(model, sol.m, g)
            mesh = np.meshgrid(*axes, indexing="ij")
            slices = {k: np.broadcast_to(np.asarray(field(k * dt, *mesh), dtype=float),
                                         mesh[0].shape) for k in wanted}
        # base nodes (interior, in window) mapped to this lattice
        idx = []
        for d in range(n):
            ax_b = sol.axes[d][1:-1]
            if xwin is not None:
                lo, hi = xwin[d]
                ax_b = ax_b[(ax_b >= lo - 1e-12) & (ax_b <= hi + 1e-12)]
            ii = np.rint((ax_b - axes[d][0]) / dx[d]).astype(int)
            if ii.size == 0 or ii.min() < 1 or ii.max() > len(axes[d]) - 2:
                raise ValueError("refined lattice does not contain the comparison nodes")
            idx.append(ii)
        grid_idx = tuple(v.ravel() for v in np.meshgrid(*idx, indexing="ij"))
        r = np.concatenate([
            _residual_at(model, fk, axes, dx, dt, slices[k - 1], slices[k], slices[k + 1],
                         grid_idx)
            for k in base])
        r = np.abs(r)
        if not np.all(np.isfinite(r)):
            raise ArithmeticError("non-finite residual")
        table.levels.append(LevelResidual(lev, float(dx[0]), dt, float(r.max()),
                                          float(np.median(r)), int(r.size)))
    return table


# --------------------------------------------------------------------------
# continuity modulus


@dataclass(frozen=True)
class ContinuityBoundParams:
    """Constants of the time-continuity modulus.

    ``C0`` bounds ``|f|`` and ``|h|``; ``C`` bounds ``a`` and ``|b|``; ``C_alpha``
    and ``alpha`` are Hölder data of ``f`` (mode ``holder_f``); ``C_prime``
    bounds ``f' sigma`` and ``f' b + f'' a / 2`` (mode ``smooth_f``).
    """

    C0: float
    mode: str = "smooth_f"
    C: float | None = None
    C_alpha: float | None = None
    alpha: float | None = None
    C_prime: float | None = None

    def __post_init__(self):
        if not (self.C0 >= 0 and math.isfinite(self.C0)):
            raise ValueError("C0 must be finite and >= 0")
        if self.mode == "holder_f":
            if not (self.C and self.C > 0 and self.C_alpha and self.C_alpha > 0):
                raise ValueError("holder_f needs positive C and C_alpha")
            if not (self.alpha and 0 < self.alpha <= 1):
                raise ValueError("alpha must lie in (0, 1]")
        elif self.mode == "smooth_f":
            if not (self.C_prime and self.C_prime > 0):
                raise ValueError("smooth_f needs a positive C_prime")
        else:
            raise ValueError(f"unknown mode {self.mode!r}")


def continuity_bound(params: ContinuityBoundParams, t: float, t_prime: float,
                     u_diff: float) -> float:
    """Right-hand side of the time-continuity estimate for the Feynman-Kac functional.

    ``exp(max(t, t') C0) * (C0 |dU| + C0 (exp(|t - t'| C0) - 1) + branch)`` with
    ``branch = C_alpha (8 s C + 2 s^2 C^2)^(alpha/2)`` (``holder_f``) or
    ``(8 s C' + 2 s^2 C'^2)^(1/2)`` (``smooth_f``), ``s = |t - t'|``.
    """
    if t < 0 or t_prime < 0:
        raise ValueError("times must be nonnegative")
    if u_diff < 0:
        raise ValueError("u_diff is an absolute difference")
    p = params
    s = abs(t - t_prime)
    if p.mode == "holder_f":
        branch = p.C_alpha * (8 * s * p.C + 2 * s * s * p.C ** 2) ** (p.alpha / 2)
    else:
        branch = math.sqrt(8 * s * p.C_prime + 2 * s * s * p.C_prime ** 2)
    return math.exp(max(t, t_prime) * p.C0) * (
        p.C0 * u_diff + p.C0 * math.expm1(s * p.C0) + branch)


@dataclass
class ContinuityReport:
    pairs: list = field(default_factory=list)
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def as_dict(self):
        return {"ok": self.ok, "pairs": self.pairs, "violations": self.violations}


def continuity_check(model: DiffusionModel, fk: FeynmanKacSpec, params: ContinuityBoundParams,
                     x, t_grid: Sequence[float], n_paths: int, cfg: SimConfig,
                     workers: int = 1) -> ContinuityReport:
    """Check ``|U_fk(t') - U_fk(t)| <= bound + 3 * SE`` over adjacent grid times.

    ``U`` and the Feynman-Kac functional are estimated on one path set, and
    the combined standard error of a pair is ``sqrt(se_t^2 + se_t'^2)``.
    Requires a one-dimensional model whose validation report is free of
    failures and advisories.
    """
    if model.n != 1:
        raise ValueError("continuity_check is one-dimensional")
    report = ContinuityReport()
    ts = [float(t) for t in t_grid]
    if len(ts) < 2:
        return report
    vr = validate_model(model, fk)
    if not vr.clean:
        raise ValueError("model does not satisfy the declared bounds: "
                         + "; ".join(vr.messages("fail") + vr.messages("advisory")))
    us = estimate_u(model, x, ts, n_paths, cfg, workers=workers)
    vs = estimate_feynman_kac(model, fk, x, ts, n_paths, cfg, workers=workers)
    for i in range(len(ts) - 1):
        t, tp = ts[i], ts[i + 1]
        du = abs(us[i + 1].value - us[i].value)
        diff = abs(vs[i + 1].value - vs[i].value)
        bound = continuity_bound(params, t, tp, du)
        se = math.hypot(vs[i].std_error, vs[i + 1].std_error)
        entry = {"t": t, "t_prime": tp, "diff": diff, "u_diff": du, "bound": bound,
                 "std_error": se, "ok": diff <= bound + 3 * se}
        report.pairs.append(entry)
        if not entry["ok"]:
            report.violations.append(entry)
    return report
