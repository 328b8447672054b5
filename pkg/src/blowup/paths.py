"""
Euler-Maruyama path simulation up to the exit (explosion) time.

Paths are advanced on the grid ``t_k = k dt`` and killed at the first grid time
their state leaves the (possibly truncated) domain; on unbounded sides leaving
``|x_i| <= escape_radius`` counts as explosion. The discount
``Y(t) = exp(-int_0^t h(X_s) ds)`` is accumulated by the trapezoidal rule with
compensated summation, so constant potentials reproduce ``exp(-c t)`` to
rounding.

Randomness is counter based (see :mod:`blowup.rng`): path ``p`` with stream id
``s`` uses normals ``Z[k*n + i]`` of stream ``s`` for component ``i`` of step
``k``, independent of batching or worker count.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import DiffusionModel, Domain, FeynmanKacSpec
from .rng import normals

__all__ = [
    "SimConfig",
    "PathResult",
    "BatchResult",
    "simulate_path",
    "simulate_batch",
    "hitting_time",
    "hitting_times",
    "write_path_csv",
    "ALIVE",
    "EXITED",
    "STOPPED",
    "INVALID",
]

ALIVE, EXITED, STOPPED, INVALID = 0, 1, 2, 3
BLOCK_SIZE = 2048
_CHUNK_STEPS = 64


@dataclass(frozen=True)
class SimConfig:
    """Time discretization and randomness of a simulation."""

    dt: float
    t_max: float
    truncation_index: int | None = None
    rng_seed: int = 0
    stream_id: int = 0

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError("dt must be positive")
        if not (self.t_max > 0 and math.isfinite(self.t_max)):
            raise ValueError("t_max must be positive")
        if self.dt > self.t_max * (1 + 1e-12):
            raise ValueError("dt must not exceed t_max")
        if not (0 <= int(self.rng_seed) < 2**64):
            raise ValueError("rng_seed must be a 64-bit unsigned integer")
        if self.truncation_index is not None and self.truncation_index < 1:
            raise ValueError("truncation_index must be >= 1")

    @property
    def n_steps(self) -> int:
        k = self.t_max / self.dt
        r = round(k)
        return int(r) if abs(k - r) <= 1e-9 * max(1.0, k) else int(math.ceil(k))

    def step_of(self, t: float) -> int:
        """Grid index of time ``t``; raises if ``t`` is not a grid time."""
        k = t / self.dt
        r = round(k)
        if abs(k - r) > 1e-9 * max(1.0, k) or r < 0:
            raise ValueError(f"time {t} is not on the simulation grid (dt={self.dt})")
        if r > self.n_steps:
            raise ValueError(f"time {t} exceeds t_max={self.t_max}")
        return int(r)


@dataclass
class PathResult:
    """A single simulated trajectory, retained up to and including ``exit_step``."""

    times: np.ndarray
    states: np.ndarray  # (K+1, n)
    exited: bool
    exit_time: float  # math.inf when the path survives to t_max
    exit_step: int
    weight_grid: np.ndarray  # Y(t_k)
    valid: bool = True
    stream_id: int = 0


@dataclass
class BatchResult:
    """Per-path outcome of :func:`simulate_batch` (arrays indexed by path)."""

    status: np.ndarray
    final_step: np.ndarray
    final_state: np.ndarray  # (N, n)
    final_logy: np.ndarray
    obs_steps: np.ndarray
    obs_alive: np.ndarray  # (n_obs, N)
    obs_state: np.ndarray  # (n_obs, N, n)
    obs_logy: np.ndarray  # (n_obs, N)
    trajectory: list | None = None

    @property
    def invalid(self) -> np.ndarray:
        return self.status == INVALID

    @property
    def n_invalid(self) -> int:
        return int(np.count_nonzero(self.status == INVALID))


@dataclass
class _Block:
    status: np.ndarray
    final_step: np.ndarray
    final_state: np.ndarray
    final_logy: np.ndarray
    obs_alive: np.ndarray
    obs_state: np.ndarray
    obs_logy: np.ndarray
    trajectory: list | None = field(default=None)


def kill_box(model: DiffusionModel, m: int | None) -> tuple[np.ndarray, np.ndarray]:
    """Open box whose exit defines ``S`` (m None) or ``S_m``."""
    lo, hi = model.domain.effective_bounds()
    if m is None:
        return lo, hi
    lo_m, hi_m = model.truncation.bounds(m)
    return np.maximum(lo_m, lo), np.minimum(hi_m, hi)


class _Coefficients:
    """Drift and dispersion evaluators specialised for the batch loop."""

    def __init__(self, model: DiffusionModel):
        self.n = model.n
        self.b = model.b
        self.sigma = model.sigma
        self.sigma_zero = all(s.constant_value() == 0.0 for row in model.sigma
                              for s in row)

    def __call__(self, x):
        n = self.n
        L = x.shape[1]
        if n == 1:
            bx = self.b[0](x[0])
            sx = self.sigma[0][0](x[0])
            ok = np.isfinite(bx) & np.isfinite(sx)
            if ok.ndim == 0:
                ok = np.full(L, bool(ok))
            return bx, sx, ok
        bx = np.empty((n, L))
        sx = np.empty((n, n, L))
        for i in range(n):
            bx[i] = self.b[i](*x)
            for k in range(n):
                sx[i, k] = self.sigma[i][k](*x)
        ok = np.all(np.isfinite(bx), axis=0) & np.all(np.isfinite(sx), axis=(0, 1))
        return bx, sx, ok

    def increment(self, x, bx, sx, dw, dt):
        if self.n == 1:
            if self.sigma_zero:
                return x + bx * dt
            return x + (bx * dt + sx * dw[0])
        return x + bx * dt + np.einsum("ikl,kl->il", sx, dw)


def _take(v, mask):
    return v[mask] if np.ndim(v) else v


def _simulate_block(model, fk, x0, streams, seed, dt, caps, lo, hi, stop, observe,
                    record, hook, offset=0):
    with np.errstate(all="ignore"):
        return _simulate_block_inner(model, fk, x0, streams, seed, dt, caps, lo, hi, stop,
                                     observe, record, hook, offset)


def _simulate_block_inner(model, fk, x0, streams, seed, dt, caps, lo, hi, stop, observe,
                          record, hook, offset):
    n = model.n
    B = x0.shape[0]
    n_obs = len(observe)
    out = _Block(
        status=np.full(B, ALIVE, dtype=np.int8),
        final_step=caps.copy(),
        final_state=x0.copy(),
        final_logy=np.zeros(B),
        obs_alive=np.zeros((n_obs, B), dtype=bool),
        obs_state=np.full((n_obs, B, n), np.nan),
        obs_logy=np.full((n_obs, B), np.nan),
    )
    obs_index = {int(s): j for j, s in enumerate(observe)}
    sqdt = math.sqrt(dt)
    coef = _Coefficients(model)
    h_fun = None if fk is None else fk.h
    h_const = h_fun is None or h_fun.is_constant
    lo_c = lo[:, None]
    hi_c = hi[:, None]

    live = np.arange(B)
    x = x0.T.copy()  # (n, L)
    integ = np.zeros(B)
    comp = np.zeros(B)
    if h_fun is None:
        hx = np.zeros(B)
    else:
        hx = np.broadcast_to(h_fun(*x), (B,)).astype(float)
        bad = ~np.isfinite(hx)
        if bad.any():
            out.status[bad] = INVALID
            out.final_step[bad] = 0

    if record:
        out.trajectory = [[(x0[p].copy(), 0.0)] for p in range(B)]

    def retire(mask, step, status):
        nonlocal live, x, integ, comp, hx
        idx = live[mask]
        out.status[idx] = status
        out.final_step[idx] = step
        out.final_state[idx] = x[:, mask].T
        out.final_logy[idx] = -integ[mask]
        keep = ~mask
        live, x, integ, comp, hx = live[keep], x[:, keep], integ[keep], comp[keep], hx[keep]

    dead0 = out.status[live] == INVALID
    if dead0.any():
        retire(dead0, 0, INVALID)
    if 0 in obs_index:
        j = obs_index[0]
        out.obs_alive[j, live] = True
        out.obs_state[j, live] = x.T
        out.obs_logy[j, live] = 0.0
    done = caps[live] <= 0
    if done.any():
        retire(done, 0, ALIVE)
    caps_live = caps[live]
    next_cap = int(caps_live.min()) if live.size else 0

    k = 0
    max_cap = int(caps.max()) if B else 0
    while k < max_cap and live.size:
        k_end = min(max_cap, k + _CHUNK_STEPS)
        if coef.sigma_zero:
            z_all = None
        else:
            z_all = normals(seed, streams, k * n, (k_end - k) * n).reshape(k_end - k, n, B)
        for kk in range(k, k_end):
            if not live.size:
                break
            bx, sx, ok = coef(x)
            if not ok.all():
                bad = ~ok
                retire(bad, kk, INVALID)
                caps_live = caps_live[ok]
                if n == 1:
                    bx, sx = _take(bx, ok), _take(sx, ok)
                else:
                    bx, sx = bx[:, ok], sx[:, :, ok]
                if not live.size:
                    break
            if z_all is None:
                dw = np.zeros((n, live.size))
            else:
                dw = sqdt * z_all[kk - k][:, live]
            x_new = coef.increment(x, bx, sx, dw, dt)
            inside = ((x_new > lo_c) & (x_new < hi_c)).all(axis=0)
            if h_fun is None:
                h_new = hx
            elif h_const:
                h_new = hx
            else:
                h_new = np.broadcast_to(h_fun(*np.where(inside, x_new, x)), (live.size,)).astype(float)
            # compensated trapezoid for the integral of h
            y = (hx + h_new) * dt / 2.0 - comp
            t_ = integ + y
            all_in = inside.all()
            if hook is not None:
                logy_new = -t_ if all_in else np.where(inside, -t_, -integ)
                hook(kk, live + offset, x, x_new, dw, -integ, logy_new, inside)
            if all_in:
                comp = (t_ - integ) - y
                integ = t_
            else:
                comp = np.where(inside, (t_ - integ) - y, comp)
                integ = np.where(inside, t_, integ)
            if record:
                for j, p in enumerate(live):
                    out.trajectory[p].append((x_new[:, j].copy(), float(-integ[j])))
            step = kk + 1
            x_old = x
            x = x_new
            hx = h_new

            if h_const:
                bad_h = None
            else:
                bad_h = inside & ~np.isfinite(h_new)
                if not bad_h.any():
                    bad_h = None
            stopped = None
            if stop is not None:
                stopped = inside & stop(x_old, x_new)
                if bad_h is not None:
                    stopped &= ~bad_h
                if not stopped.any():
                    stopped = None

            if step in obs_index:
                j = obs_index[step]
                alive = inside if bad_h is None else inside & ~bad_h
                ids = live[alive]
                out.obs_alive[j, ids] = True
                out.obs_state[j, ids] = x[:, alive].T
                out.obs_logy[j, ids] = -integ[alive]

            if not all_in:
                exited = ~inside
                retire(exited, step, EXITED)
                caps_live = caps_live[inside]
                if bad_h is not None:
                    bad_h = bad_h[inside]
                if stopped is not None:
                    stopped = stopped[inside]
            if bad_h is not None:
                retire(bad_h, step, INVALID)
                caps_live = caps_live[~bad_h]
                if stopped is not None:
                    stopped = stopped[~bad_h]
            if stopped is not None:
                retire(stopped, step, STOPPED)
                caps_live = caps_live[~stopped]
            if step >= next_cap and live.size:
                capped = caps_live <= step
                retire(capped, step, ALIVE)
                caps_live = caps_live[~capped]
                next_cap = int(caps_live.min()) if live.size else 0
        k = k_end
    return out


def simulate_batch(model: DiffusionModel, fk: FeynmanKacSpec | None, x0, cfg: SimConfig,
                   n_paths: int | None = None, streams=None, caps=None,
                   observe=(), stop: Callable | None = None, record: bool = False,
                   hook: Callable | None = None, workers: int = 1,
                   block_size: int = BLOCK_SIZE) -> BatchResult:
    """Simulate many paths; the workhorse behind every estimator.

    Parameters
    ----------
    x0 : array_like
        Start point (n,) shared by all paths, or per-path starts (N, n).
    cfg : SimConfig
        ``rng_seed`` keys the generator; ``stream_id`` is the stream of the
        first path when ``streams`` is not given (path ``p`` uses
        ``stream_id + p``).
    caps : array_like of int, optional
        Per-path step horizon; defaults to ``cfg.n_steps``.
    observe : sequence of int
        Grid steps at which survivors' states and log-weights are recorded.
    stop : callable, optional
        ``stop(x_old, x_new) -> bool mask``; stops a surviving path (status
        ``STOPPED``) at the first step where it returns True.
    hook : callable, optional
        Called every step as ``hook(k, path_ids, x_old, x_new, dW, logy_old,
        logy_new, inside)`` on the live paths only.
    workers : int
        Thread count; blocks are fixed by ``block_size`` so results do not depend
        on it.
    """
    n = model.n
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim <= 1:
        if n_paths is None:
            raise ValueError("n_paths is required with a shared start point")
        x0 = np.broadcast_to(x0.reshape(1, n), (n_paths, n))
    N = x0.shape[0]
    if x0.shape[1] != n:
        raise ValueError(f"start points must have {n} components")
    if streams is None:
        streams = cfg.stream_id + np.arange(N, dtype=np.uint64)
    streams = np.asarray(streams, dtype=np.uint64)
    if caps is None:
        caps = np.full(N, cfg.n_steps, dtype=np.int64)
    caps = np.broadcast_to(np.asarray(caps, dtype=np.int64), (N,))
    observe = np.array(sorted(set(int(s) for s in observe)), dtype=np.int64)

    lo, hi = kill_box(model, cfg.truncation_index)
    inside0 = np.all((x0 > lo) & (x0 < hi), axis=1)
    if not inside0.all():
        p = int(np.argmin(inside0))
        where = "truncated domain" if cfg.truncation_index else "domain"
        raise ValueError(f"start point {x0[p].tolist()} lies outside the {where}")

    seed = int(cfg.rng_seed)
    starts = list(range(0, N, block_size))

    def run(s):
        sl = slice(s, min(N, s + block_size))
        return _simulate_block(model, fk, np.array(x0[sl]), streams[sl], seed, cfg.dt,
                               np.array(caps[sl]), lo, hi, stop, observe, record, hook, s)

    if workers > 1 and len(starts) > 1 and hook is None:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            blocks = list(ex.map(run, starts))
    else:
        blocks = [run(s) for s in starts]

    n_obs = len(observe)
    if not blocks:
        empty = np.empty(0)
        return BatchResult(empty.astype(np.int8), empty.astype(np.int64), np.empty((0, n)),
                           empty, observe, np.empty((n_obs, 0), bool), np.empty((n_obs, 0, n)),
                           np.empty((n_obs, 0)))
    traj = None
    if record:
        traj = [t for b in blocks for t in b.trajectory]
    return BatchResult(
        status=np.concatenate([b.status for b in blocks]),
        final_step=np.concatenate([b.final_step for b in blocks]),
        final_state=np.concatenate([b.final_state for b in blocks]),
        final_logy=np.concatenate([b.final_logy for b in blocks]),
        obs_steps=observe,
        obs_alive=np.concatenate([b.obs_alive for b in blocks], axis=1),
        obs_state=np.concatenate([b.obs_state for b in blocks], axis=1),
        obs_logy=np.concatenate([b.obs_logy for b in blocks], axis=1),
        trajectory=traj,
    )


def simulate_path(model: DiffusionModel, fk: FeynmanKacSpec | None, x0,
                  cfg: SimConfig) -> PathResult:
    """Simulate one path with stream ``cfg.stream_id``.

    The path stops at the first grid time it leaves the domain (or ``O_m`` when
    ``cfg.truncation_index`` is set); ``exit_time`` is that grid time, or
    ``math.inf`` when the path survives to ``t_max``.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    res = simulate_batch(model, fk, x0.reshape(1, -1), cfg,
                         streams=np.array([cfg.stream_id], dtype=np.uint64), record=True)
    states = np.array([s for s, _ in res.trajectory[0]])
    weights = np.exp(np.array([ly for _, ly in res.trajectory[0]]))
    k_end = len(states) - 1
    status = int(res.status[0])
    times = np.arange(k_end + 1) * cfg.dt
    exited = status == EXITED
    return PathResult(
        times=times,
        states=states,
        exited=exited,
        exit_time=float(times[-1]) if exited else math.inf,
        exit_step=k_end if exited else -1,
        weight_grid=weights,
        valid=status != INVALID,
        stream_id=int(cfg.stream_id),
    )


def _hit_stop(target, radius):
    def stop(x_old, x_new):
        d_old = x_old[0] - target
        d_new = x_new[0] - target
        return (np.abs(d_new) <= radius) | (np.sign(d_old) != np.sign(d_new))
    return stop


def hitting_times(model: DiffusionModel, x0, target: float, radius: float, cfg: SimConfig,
                  n_paths: int, workers: int = 1) -> np.ndarray:
    """First grid time each path enters ``[target - radius, target + radius]``.

    Crossing the target between grid times also counts (at the later grid time).
    Paths that exit the domain or reach ``t_max`` first get ``math.inf``;
    invalid paths get NaN.
    """
    if model.n != 1:
        raise ValueError("hitting times are defined for one-dimensional models")
    x0 = float(np.ravel(x0)[0])
    if not model.domain.contains(np.array([target])):
        raise ValueError("target must lie in the domain")
    out = np.full(n_paths, math.inf)
    if abs(x0 - target) <= radius:
        out[:] = 0.0
        return out
    res = simulate_batch(model, None, np.array([x0]), cfg, n_paths=n_paths,
                         stop=_hit_stop(target, radius), workers=workers)
    hit = res.status == STOPPED
    out[hit] = res.final_step[hit] * cfg.dt
    out[res.status == INVALID] = math.nan
    return out


def hitting_time(model: DiffusionModel, x0, target: float, radius: float,
                 cfg: SimConfig) -> float:
    """Hitting time of ``target`` (within ``radius``) for the path of stream ``cfg.stream_id``."""
    x0 = float(np.ravel(x0)[0])
    if model.n != 1:
        raise ValueError("hitting times are defined for one-dimensional models")
    if abs(x0 - target) <= radius:
        return 0.0
    if not model.domain.contains(np.array([target])):
        raise ValueError("target must lie in the domain")
    res = simulate_batch(model, None, np.array([[x0]]), cfg,
                         streams=np.array([cfg.stream_id], dtype=np.uint64),
                         stop=_hit_stop(target, radius))
    if res.status[0] == STOPPED:
        return float(res.final_step[0] * cfg.dt)
    if res.status[0] == INVALID:
        raise ArithmeticError("coefficient evaluation failed along the path")
    return math.inf


def write_path_csv(path: PathResult, filename) -> None:
    """Dump a trajectory as CSV with columns ``step, t, x1..xn, Y``."""
    n = path.states.shape[1]
    with open(filename, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "t"] + [f"x{i + 1}" for i in range(n)] + ["Y"])
        for k, (t, xs, y) in enumerate(zip(path.times, path.states, path.weight_grid)):
            w.writerow([k, repr(float(t))] + [repr(float(v)) for v in xs] + [repr(float(y))])
