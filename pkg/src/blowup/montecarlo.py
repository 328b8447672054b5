"""
Monte Carlo estimators of the survival function and the Feynman-Kac functional.

All time points of one call share a single path set (common random numbers),
so the survival estimates are exactly non-increasing in ``t`` and a constant
potential factorizes out of the Feynman-Kac estimate to rounding. Sums are
taken with :func:`math.fsum` in path order, which makes results independent of
the worker count.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .expr import EvaluationError
from .model import DiffusionModel, FeynmanKacSpec
from .paths import ALIVE, EXITED, INVALID, SimConfig, kill_box, simulate_batch
from .rng import derive_seed

__all__ = [
    "MCEstimate",
    "MartingaleCheck",
    "estimate_u",
    "estimate_feynman_kac",
    "check_martingale",
    "mean_and_sd",
    "write_estimates_csv",
    "estimates_to_json",
]


@dataclass(frozen=True)
class MCEstimate:
    value: float
    std_error: float
    n_paths: int
    n_invalid: int
    t: float
    x: tuple
    seed: int

    def as_dict(self):
        d = asdict(self)
        d["x"] = list(self.x)
        return d


@dataclass(frozen=True)
class MartingaleCheck:
    """Both sides of ``E[U(t*-nu, X_nu) Y_nu] = U(t*, x*)`` with their errors."""

    lhs: float
    rhs: float
    std_error: float
    lhs_std_error: float
    rhs_std_error: float
    n_outer: int
    n_inner: int
    n_rhs: int
    n_invalid: int
    mean_nu: float

    @property
    def discrepancy(self) -> float:
        return abs(self.lhs - self.rhs)

    @property
    def within(self) -> float:
        """Discrepancy in units of the combined standard error."""
        if self.std_error == 0:
            return 0.0 if self.discrepancy == 0 else math.inf
        return self.discrepancy / self.std_error

    def as_dict(self):
        return asdict(self) | {"discrepancy": self.discrepancy}


def mean_and_sd(values) -> tuple[float, float]:
    """Order-stable two-pass mean and sample standard deviation.

    The correction pass makes the mean of identical values exact.
    """
    v = np.asarray(values, dtype=float).ravel()
    n = v.size
    if n == 0:
        raise ValueError("no values")
    m = math.fsum(v) / n
    m += math.fsum(v - m) / n
    if n == 1:
        return m, 0.0
    d = v - m
    return m, math.sqrt(math.fsum(d * d) / (n - 1))


def _grid_steps(t_grid, cfg: SimConfig) -> list[int]:
    ts = [float(t) for t in np.atleast_1d(t_grid)]
    if not ts:
        raise ValueError("t_grid is empty")
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise ValueError("t_grid must be strictly increasing")
    return [cfg.step_of(t) for t in ts]


def _point(model, x0) -> np.ndarray:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float)).ravel()
    if x0.size != model.n:
        raise ValueError(f"start point needs {model.n} coordinates")
    return x0


def estimate_u(model: DiffusionModel, x0, t_grid: Sequence[float], n_paths: int,
               cfg: SimConfig, workers: int = 1) -> list[MCEstimate]:
    """Estimate ``P_x0[S > t]`` for each ``t`` in ``t_grid`` from one path set.

    ``std_error`` is the binomial standard error. With
    ``cfg.truncation_index = m`` the estimate is of ``P[S_m > t]``.
    """
    x0 = _point(model, x0)
    steps = _grid_steps(t_grid, cfg)
    res = simulate_batch(model, None, x0, cfg, n_paths=n_paths, observe=steps,
                         caps=max(steps), workers=workers)
    valid = res.status != INVALID
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ArithmeticError("no valid paths")
    out = []
    for j, k in enumerate(steps):
        alive = int(np.count_nonzero(res.obs_alive[j] & valid))
        p = alive / n_valid
        out.append(MCEstimate(p, math.sqrt(p * (1.0 - p) / n_valid), n_valid,
                              res.n_invalid, k * cfg.dt, tuple(x0.tolist()),
                              int(cfg.rng_seed)))
    return out


def _fk_values(fk, res, j, valid, x0, step):
    """Per-path samples of 1{S>t} f(X_t) Y_t over the valid paths."""
    alive = res.obs_alive[j] & valid
    vals = np.zeros(res.status.size)
    if step == 0:
        vals[alive] = fk.f.value(x0)
    elif alive.any():
        xs = res.obs_state[j][alive].T
        fx = np.broadcast_to(fk.f(*xs), (xs.shape[1],)).astype(float)
        if not np.all(np.isfinite(fx)):
            bad = xs[:, ~np.isfinite(fx)][:, 0]
            raise EvaluationError(f"f is not finite at surviving endpoint {bad.tolist()}")
        vals[alive] = fx * np.exp(res.obs_logy[j][alive])
    return vals[valid]


def estimate_feynman_kac(model: DiffusionModel, fk: FeynmanKacSpec, x0,
                         t_grid: Sequence[float], n_paths: int, cfg: SimConfig,
                         workers: int = 1) -> list[MCEstimate]:
    """Estimate ``E_x0[1{S>t} f(X_t) Y_t]`` for each ``t`` from one path set.

    Uses the same streams as :func:`estimate_u` for equal ``cfg``, so the two
    are directly comparable. ``std_error`` is the sample standard deviation over
    ``sqrt(N)``.
    """
    x0 = _point(model, x0)
    steps = _grid_steps(t_grid, cfg)
    res = simulate_batch(model, fk, x0, cfg, n_paths=n_paths, observe=steps,
                         caps=max(steps), workers=workers)
    valid = res.status != INVALID
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ArithmeticError("no valid paths")
    out = []
    for j, k in enumerate(steps):
        m, sd = mean_and_sd(_fk_values(fk, res, j, valid, x0, k))
        out.append(MCEstimate(m, sd / math.sqrt(n_valid), n_valid, res.n_invalid,
                              k * cfg.dt, tuple(x0.tolist()), int(cfg.rng_seed)))
    return out


def _ball_stop(center, delta):
    c = np.asarray(center, dtype=float)[:, None]
    d2 = delta * delta

    def stop(x_old, x_new):
        return ((x_new - c) ** 2).sum(axis=0) >= d2
    return stop


def check_martingale(model: DiffusionModel, fk: FeynmanKacSpec, t_star: float, x_star,
                     delta: float, n_outer: int, n_inner: int, cfg: SimConfig,
                     n_rhs: int | None = None, workers: int = 1,
                     chunk_paths: int = 131072) -> MartingaleCheck:
    """Nested Monte Carlo test of the martingale identity at ``(t_star, x_star)``.

    Outer paths start at ``x_star`` and stop at ``nu``, the first grid time
    ``(t_star - s, X_s)`` leaves ``(t_star - delta, t_star + delta) x B_delta(x_star)``
    (capped at ``t_star``). Each stopped state seeds ``n_inner`` fresh paths
    run for the remaining time ``t_star - nu``; the left side averages
    ``Y_nu * U_hat(t_star - nu, X_nu)``. The right side is an independent
    estimate at ``(t_star, x_star)`` from ``n_rhs`` paths (default
    ``n_outer * n_inner``).
    """
    x_star = _point(model, x_star)
    if not t_star > 0:
        raise ValueError("t_star must be positive")
    if not 0 < delta < t_star:
        raise ValueError("need 0 < delta < t_star")
    if delta <= 10 * cfg.dt:
        raise ValueError(f"delta={delta} must exceed 10*dt={10 * cfg.dt}")
    lo, hi = kill_box(model, cfg.truncation_index)
    if np.any(x_star - delta <= lo) or np.any(x_star + delta >= hi):
        raise ValueError("the ball B_delta(x_star) must lie inside the domain")
    k_star = cfg.step_of(t_star)
    k_nu = min(k_star, int(math.ceil(delta / cfg.dt - 1e-9)))
    seed = int(cfg.rng_seed)

    outer = simulate_batch(model, fk, x_star, cfg, n_paths=n_outer, caps=k_nu,
                           stop=_ball_stop(x_star, delta), workers=workers)
    ok = outer.status != INVALID
    n_invalid = outer.n_invalid
    alive = ok & (outer.status != EXITED)
    idx = np.flatnonzero(alive)
    inner_mean = np.zeros(n_outer)

    inner_seed = derive_seed(seed, 1)
    per_chunk = max(1, chunk_paths // max(1, n_inner))
    for c in range(0, idx.size, per_chunk):
        ids = idx[c:c + per_chunk]
        starts = np.repeat(outer.final_state[ids], n_inner, axis=0)
        caps = np.repeat(k_star - outer.final_step[ids], n_inner)
        streams = (np.repeat(ids.astype(np.uint64), n_inner) * np.uint64(n_inner)
                   + np.tile(np.arange(n_inner, dtype=np.uint64), ids.size))
        icfg = SimConfig(cfg.dt, cfg.t_max, cfg.truncation_index, inner_seed, 0)
        res = simulate_batch(model, fk, starts, icfg, streams=streams, caps=caps,
                             workers=workers)
        st = res.status.reshape(ids.size, n_inner)
        fs = res.final_state.reshape(ids.size, n_inner, model.n)
        ly = res.final_logy.reshape(ids.size, n_inner)
        for r, i in enumerate(ids):
            good = st[r] != INVALID
            n_invalid += int((~good).sum())
            if not good.any():
                raise ArithmeticError("no valid inner paths")
            surv = st[r] == ALIVE
            vals = np.zeros(n_inner)
            if surv.any():
                fx = np.broadcast_to(fk.f(*fs[r][surv].T), (int(surv.sum()),))
                vals[surv] = fx * np.exp(ly[r][surv])
            inner_mean[i] = mean_and_sd(vals[good])[0]

    samples = np.exp(outer.final_logy[ok]) * inner_mean[ok]
    if samples.size == 0:
        raise ArithmeticError("no valid outer paths")
    lhs, sd = mean_and_sd(samples)
    se_lhs = sd / math.sqrt(samples.size)
    mean_nu = mean_and_sd(outer.final_step[ok] * cfg.dt)[0]

    n_rhs = n_outer * n_inner if n_rhs is None else n_rhs
    rcfg = SimConfig(cfg.dt, cfg.t_max, cfg.truncation_index, derive_seed(seed, 2), 0)
    r = estimate_feynman_kac(model, fk, x_star, [t_star], n_rhs, rcfg, workers=workers)[0]
    n_invalid += r.n_invalid
    return MartingaleCheck(
        lhs=lhs, rhs=r.value, std_error=math.hypot(se_lhs, r.std_error),
        lhs_std_error=se_lhs, rhs_std_error=r.std_error, n_outer=n_outer,
        n_inner=n_inner, n_rhs=n_rhs, n_invalid=n_invalid, mean_nu=mean_nu,
    )


def write_estimates_csv(estimates: Sequence[MCEstimate], filename) -> None:
    """CSV with columns ``t, x, value, std_error, n_paths, n_invalid, seed``.

    Multi-dimensional points are written as ``x1;x2;...``.
    """
    with open(filename, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "value", "std_error", "n_paths", "n_invalid", "seed"])
        for e in estimates:
            w.writerow([repr(e.t), ";".join(repr(v) for v in e.x), repr(e.value),
                        repr(e.std_error), e.n_paths, e.n_invalid, e.seed])


def estimates_to_json(estimates: Sequence[MCEstimate], **meta) -> str:
    return json.dumps({"estimates": [e.as_dict() for e in estimates], **meta}, indent=2)
