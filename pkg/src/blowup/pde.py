"""
Finite-difference solution of ``u_t = L'u``, ``u(0, .) = f`` on truncated boxes.

``L'u = 1/2 sum a_ij u_ij + sum b_i u_i - h u`` with ``a = sigma sigma^T``. The
boundary of the box carries ``u = 0``, which is the PDE image of killing the
diffusion when it leaves ``O_m``. Time stepping is the theta scheme; with
``theta = 1`` and upwinded drift the system matrix is an M-matrix, so the
discrete comparison principle holds and the truncated solutions increase with
``m`` (the monotone construction of the minimal solution).

A constant potential ``h = c`` is not discretized: the solver integrates the
``h = 0`` problem and multiplies by ``exp(-c t)``, which is exact.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.linalg import lapack
from scipy.sparse.linalg import splu

from .expr import EvaluationError
from .model import DiffusionModel, FeynmanKacSpec
from .paths import kill_box

__all__ = [
    "PDEGrid",
    "PDESolution",
    "MinimalSolution",
    "DominationReport",
    "AlignmentError",
    "MonotonicityError",
    "SCHEME_TOL",
    "solve_cauchy",
    "minimal_solution",
    "check_supersolution",
]

SCHEME_TOL = 1e-8
_SNAP = 1e-9


class AlignmentError(ValueError):
    """Points or grids that do not coincide; no interpolation is attempted."""


class MonotonicityError(ArithmeticError):
    """Truncated solutions decreased in ``m`` by more than the scheme tolerance."""


@dataclass(frozen=True)
class PDEGrid:
    """Uniform space-time grid template.

    ``dx`` may be a scalar or one spacing per axis. Solution slices are kept
    every ``save_every`` steps (the final step is always kept). For
    ``0 < theta < 1`` the first ``smoothing_steps`` steps are each replaced by
    two implicit half steps (Rannacher start-up), which damps the oscillation
    Crank-Nicolson otherwise carries from discontinuous initial data.
    """

    dx: float | tuple
    dt: float
    t_max: float
    theta: float = 0.5
    upwind: bool = False
    save_every: int = 1
    smoothing_steps: int = 2

    def __post_init__(self):
        dx = tuple(float(v) for v in np.atleast_1d(self.dx))
        if any(not (v > 0 and math.isfinite(v)) for v in dx):
            raise ValueError("dx must be positive")
        object.__setattr__(self, "dx", dx[0] if len(dx) == 1 else dx)
        if not (self.dt > 0 and self.t_max > 0):
            raise ValueError("dt and t_max must be positive")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if self.save_every < 1:
            raise ValueError("save_every must be >= 1")
        if self.smoothing_steps < 0:
            raise ValueError("smoothing_steps must be >= 0")
        self.n_steps  # validates alignment

    @property
    def n_steps(self) -> int:
        k = self.t_max / self.dt
        r = round(k)
        if abs(k - r) > 1e-9 * max(1.0, k):
            raise ValueError(f"t_max={self.t_max} is not a multiple of dt={self.dt}")
        return int(r)

    def spacing(self, n: int) -> tuple:
        dx = self.dx if isinstance(self.dx, tuple) else (self.dx,) * n
        if len(dx) != n:
            raise ValueError(f"grid has {len(dx)} spacings for a {n}-dimensional model")
        return dx

    @property
    def monotone(self) -> bool:
        return self.theta == 1.0 and self.upwind

    def smoothed(self, k: int) -> bool:
        """Whether step ``k`` (1-based) uses the implicit start-up."""
        return 0.0 < self.theta < 1.0 and k <= self.smoothing_steps

    def refined(self, level: int) -> "PDEGrid":
        """Grid with ``dx`` and ``dt`` divided by ``2**level``."""
        f = 2.0 ** -level
        dx = tuple(v * f for v in np.atleast_1d(self.dx))
        return replace(self, dx=dx, dt=self.dt * f, save_every=1)


@dataclass
class PDESolution:
    """Space-time field ``values[j, i...] = u(times[j], axes[..][i])``.

    Boundary nodes (value 0) are included; ``anchor`` is the lattice origin so
    solutions on different truncations of the same template share nodes.
    """

    grid: PDEGrid
    axes: tuple
    anchor: tuple
    times: np.ndarray
    values: np.ndarray
    m: int | None
    theta: float
    upwind: bool
    potential: str = "discretized"
    model_name: str = ""

    @property
    def n(self) -> int:
        return len(self.axes)

    @property
    def x(self) -> np.ndarray:
        return self.axes[0]

    def time_index(self, t: float) -> int:
        j = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[j] - t) > _SNAP * max(1.0, abs(t)):
            raise AlignmentError(f"time {t} is not a saved time of the solution")
        return j

    def node_index(self, x) -> tuple:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.size != self.n:
            raise AlignmentError(f"point needs {self.n} coordinates")
        idx = []
        for ax, xi in zip(self.axes, x):
            i = int(np.argmin(np.abs(ax - xi)))
            if abs(ax[i] - xi) > _SNAP * max(1.0, abs(xi)):
                raise AlignmentError(f"point {x.tolist()} is not a grid node")
            idx.append(i)
        return tuple(idx)

    def at(self, t: float, x) -> float:
        """Value at a grid node and saved time; raises AlignmentError otherwise."""
        return float(self.values[(self.time_index(t),) + self.node_index(x)])

    def slice_at(self, t: float) -> np.ndarray:
        return self.values[self.time_index(t)]

    def metadata(self) -> dict:
        return {
            "scheme": {"theta": self.theta, "upwind": self.upwind,
                       "potential": self.potential},
            "grid": asdict(self.grid),
            "m": self.m,
            "nodes": [int(len(a)) for a in self.axes],
            "box": [[float(a[0]), float(a[-1])] for a in self.axes],
            "anchor": list(self.anchor),
            "n_times": int(len(self.times)),
            "tolerances": {"scheme": SCHEME_TOL, "alignment": _SNAP},
            "model": self.model_name,
        }

    def to_csv(self, filename) -> None:
        """Columns ``t, x, u`` (``t, x1, x2, u`` in two dimensions)."""
        with open(filename, "w", newline="") as fh:
            w = csv.writer(fh)
            if self.n == 1:
                w.writerow(["t", "x", "u"])
                for t, row in zip(self.times, self.values):
                    tr = repr(float(t))
                    for xv, uv in zip(self.axes[0], row):
                        w.writerow([tr, repr(float(xv)), repr(float(uv))])
            else:
                w.writerow(["t", "x1", "x2", "u"])
                for t, sl in zip(self.times, self.values):
                    tr = repr(float(t))
                    for i, x1 in enumerate(self.axes[0]):
                        for k, x2 in enumerate(self.axes[1]):
                            w.writerow([tr, repr(float(x1)), repr(float(x2)),
                                        repr(float(sl[i, k]))])

    def write(self, prefix) -> tuple[str, str]:
        """Write ``<prefix>.csv`` and the JSON sidecar ``<prefix>.json``."""
        prefix = str(prefix)
        self.to_csv(prefix + ".csv")
        with open(prefix + ".json", "w") as fh:
            json.dump(self.metadata(), fh, indent=2)
        return prefix + ".csv", prefix + ".json"


# --------------------------------------------------------------------------
# grid construction


def _lattice(model: DiffusionModel, m, grid: PDEGrid):
    lo, hi = kill_box(model, m)
    dx = grid.spacing(model.n)
    anchor, axes = [], []
    for i in range(model.n):
        fl, fh = math.isfinite(model.domain.lower[i]), math.isfinite(model.domain.upper[i])
        a = model.domain.lower[i] if fl else (model.domain.upper[i] if fh else 0.0)
        i_lo = math.ceil((lo[i] - a) / dx[i] - _SNAP)
        i_hi = math.floor((hi[i] - a) / dx[i] + _SNAP)
        if i_hi - i_lo < 2:
            raise ValueError(f"dx={dx[i]} leaves no interior node on axis {i + 1}")
        anchor.append(a)
        axes.append(a + dx[i] * np.arange(i_lo, i_hi + 1))
    return tuple(anchor), tuple(axes)


def _potential(fk: FeynmanKacSpec):
    c = fk.h.constant_value()
    return (c, "exact-factor") if c is not None else (None, "discretized")


def _eval(expr, pts, shape, what):
    v = np.broadcast_to(expr(*pts), shape).astype(float)
    if not np.all(np.isfinite(v)):
        raise EvaluationError(f"{what} is not finite at a grid node")
    return v


def _check_explicit(grid: PDEGrid, dx, amax, force):
    if grid.theta < 0.5 and not force:
        limit = min(dx) ** 2 / (amax * (1.0 - 2.0 * grid.theta)) if amax > 0 else math.inf
        if grid.dt > limit:
            raise ValueError(
                f"dt={grid.dt} violates the explicit stability limit {limit:.3g}; "
                "use a smaller dt, theta >= 0.5, or force=True")


def _operator_1d(model, fk, x, grid, h_const):
    xi = x[None, 1:-1]
    shape = (xi.shape[1],)
    s = _eval(model.sigma[0][0], xi, shape, "sigma")
    a = s * s
    if np.any(a <= 0):
        bad = x[1:-1][np.argmax(a <= 0)]
        raise ValueError(f"a(x) = 0 at interior node x={bad}; the 1D solver needs a > 0")
    b = _eval(model.b[0], xi, shape, "b")
    h = np.zeros(shape) if h_const is not None else _eval(fk.h, xi, shape, "h")
    dx = grid.spacing(1)[0]
    diff = a / (2 * dx * dx)
    if grid.upwind:
        lower = diff + np.maximum(-b, 0) / dx
        upper = diff + np.maximum(b, 0) / dx
        diag = -2 * diff - np.abs(b) / dx - h
    else:
        lower = diff - b / (2 * dx)
        upper = diff + b / (2 * dx)
        diag = -2 * diff - h
    return lower, diag, upper, float(a.max())


def _operator_2d(model, fk, axes, grid, h_const):
    x1, x2 = axes
    g1, g2 = np.meshgrid(x1[1:-1], x2[1:-1], indexing="ij")
    pts = np.stack([g1.ravel(), g2.ravel()])
    shape = (pts.shape[1],)
    s = [[_eval(model.sigma[i][k], pts, shape, "sigma") for k in range(2)] for i in range(2)]
    a11 = s[0][0] ** 2 + s[0][1] ** 2
    a22 = s[1][0] ** 2 + s[1][1] ** 2
    a12 = s[0][0] * s[1][0] + s[0][1] * s[1][1]
    scale = np.maximum(np.maximum(a11, a22), 1.0)
    if np.any(np.abs(a12) > 1e-12 * scale):
        raise ValueError("off-diagonal a_12 != 0: cross-derivative stencils are not supported")
    b = [_eval(model.b[i], pts, shape, "b") for i in range(2)]
    h = np.zeros(shape) if h_const is not None else _eval(fk.h, pts, shape, "h")
    n1, n2 = len(x1) - 2, len(x2) - 2
    N = n1 * n2
    idx = np.arange(N).reshape(n1, n2)
    rows, cols, vals = [np.arange(N)], [np.arange(N)], [-h.copy()]
    dx = grid.spacing(2)
    for axis, (aa, bb, d) in enumerate(((a11, b[0], dx[0]), (a22, b[1], dx[1]))):
        diff = aa / (2 * d * d)
        if grid.upwind:
            lo_c = diff + np.maximum(-bb, 0) / d
            hi_c = diff + np.maximum(bb, 0) / d
            vals[0] -= 2 * diff + np.abs(bb) / d
        else:
            lo_c = diff - bb / (2 * d)
            hi_c = diff + bb / (2 * d)
            vals[0] -= 2 * diff
        lo_c = lo_c.reshape(n1, n2)
        hi_c = hi_c.reshape(n1, n2)
        if axis == 0:
            rows += [idx[1:, :].ravel(), idx[:-1, :].ravel()]
            cols += [idx[:-1, :].ravel(), idx[1:, :].ravel()]
            vals += [lo_c[1:, :].ravel(), hi_c[:-1, :].ravel()]
        else:
            rows += [idx[:, 1:].ravel(), idx[:, :-1].ravel()]
            cols += [idx[:, :-1].ravel(), idx[:, 1:].ravel()]
            vals += [lo_c[:, 1:].ravel(), hi_c[:, :-1].ravel()]
    L = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(N, N))
    return L, float(max(a11.max(), a22.max()))


def _initial(model, fk, axes):
    if len(axes) == 1:
        pts = axes[0][None, :]
        shape = (len(axes[0]),)
    else:
        g = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([v.ravel() for v in g])
        shape = (pts.shape[1],)
    u0 = _eval(fk.f, pts, shape, "f").reshape(tuple(len(a) for a in axes)).copy()
    # boundary nodes carry the absorbing value even where f > 0
    u0[0] = 0.0
    u0[-1] = 0.0
    if len(axes) == 2:
        u0[:, 0] = 0.0
        u0[:, -1] = 0.0
    return u0


def _march(model, fk, m, grid: PDEGrid, save, force=False):
    """Run the theta scheme; ``save(k)`` selects which steps are kept."""
    if model.n not in (1, 2):
        raise ValueError("the finite-difference solver supports n = 1 or 2")
    anchor, axes = _lattice(model, m, grid)
    c, potential = _potential(fk)
    u = _initial(model, fk, axes)
    th, dt = grid.theta, grid.dt
    K = grid.n_steps
    out_t, out_v = [], []

    def keep(k, interior):
        full = np.zeros(u.shape)
        if model.n == 1:
            full[1:-1] = interior
        else:
            full[1:-1, 1:-1] = interior.reshape(full.shape[0] - 2, full.shape[1] - 2)
        t = k * dt
        if c is not None:
            full *= math.exp(-c * t)
        out_t.append(t)
        out_v.append(full)

    if model.n == 1:
        lower, diag, upper, amax = _operator_1d(model, fk, axes[0], grid, c)
        _check_explicit(grid, grid.spacing(1), amax, force)
        v = u[1:-1].copy()

        def factor(w):
            f = lapack.dgttrf(-w * dt * lower[1:], 1.0 - w * dt * diag, -w * dt * upper[:-1])
            if f[-1] != 0:
                raise ArithmeticError(f"tridiagonal factorization failed (info={f[-1]})")
            return f[:-1]

        def solve(f, rhs):
            x_, info = lapack.dgttrs(*f, rhs)
            if info != 0:
                raise ArithmeticError(f"tridiagonal solve failed (info={info})")
            return x_

        main = factor(th) if th > 0 else None
        half = factor(0.5) if grid.smoothing_steps and 0 < th < 1 else None
        e = (1.0 - th) * dt
        if save(0):
            keep(0, v)
        for k in range(1, K + 1):
            if grid.smoothed(k):
                v = solve(half, solve(half, v))
            else:
                if th < 1.0:
                    rhs = v + e * diag * v
                    rhs[1:] += e * lower[1:] * v[:-1]
                    rhs[:-1] += e * upper[:-1] * v[1:]
                else:
                    rhs = v
                v = solve(main, rhs) if main is not None else rhs
            if save(k):
                keep(k, v)
    else:
        L, amax = _operator_2d(model, fk, axes, grid, c)
        _check_explicit(grid, grid.spacing(2), amax, force)
        N = L.shape[0]
        eye = sp.identity(N, format="csc")
        B = (eye + (1.0 - th) * dt * L).tocsr()
        lu = splu((eye - th * dt * L).tocsc()) if th > 0 else None
        lu_half = (splu((eye - 0.5 * dt * L).tocsc())
                   if grid.smoothing_steps and 0 < th < 1 else None)
        v = u[1:-1, 1:-1].ravel().copy()
        if save(0):
            keep(0, v)
        for k in range(1, K + 1):
            if grid.smoothed(k):
                v = lu_half.solve(lu_half.solve(v))
            else:
                rhs = B @ v if th < 1.0 else v
                v = lu.solve(rhs) if lu is not None else rhs
            if save(k):
                keep(k, v)
    if not all(np.all(np.isfinite(s)) for s in out_v):
        raise ArithmeticError("non-finite values in the finite-difference solution")
    return anchor, axes, np.array(out_t), np.array(out_v), potential


def solve_cauchy(model: DiffusionModel, fk: FeynmanKacSpec, m: int | None, grid: PDEGrid,
                 force: bool = False) -> PDESolution:
    """Solve the absorbed Cauchy problem on ``O_m`` (``m=None``: the domain itself).

    Parameters
    ----------
    m : int or None
        Truncation index. With ``None`` the box is the domain, with infinite
        sides replaced by the escape radius; intended for bounded domains.
    grid : PDEGrid
        ``theta=1, upwind=True`` gives the monotone scheme; ``theta=0.5``
        (centered) is the accurate one.
    force : bool
        Allow an explicit step beyond the stability limit.

    Raises
    ------
    ValueError
        Unstable explicit step, ``a = 0`` at an interior node (n=1), or a
        non-diagonal ``a`` (n=2).
    """
    K = grid.n_steps
    every = grid.save_every
    anchor, axes, times, values, potential = _march(
        model, fk, m, grid, lambda k: k % every == 0 or k == K, force)
    return PDESolution(grid, axes, anchor, times, values, m, grid.theta, grid.upwind,
                       potential, model.name)


# --------------------------------------------------------------------------
# minimal solution


@dataclass
class MinimalSolution:
    """Monotone limit over truncations and its convergence record."""

    solution: PDESolution
    converged: bool
    report: list = field(default_factory=list)
    solutions: list = field(default_factory=list)
    window: tuple = ()

    def as_dict(self):
        return {"converged": self.converged, "m_final": self.solution.m,
                "window": [list(w) for w in self.window], "steps": self.report}


def _common(small: PDESolution, big: PDESolution):
    """Values of ``big`` on the nodes of ``small`` (same lattice required)."""
    if small.anchor != big.anchor or small.grid != big.grid:
        raise AlignmentError("solutions were computed on different lattices")
    sl = [slice(None)]
    for ax_s, ax_b in zip(small.axes, big.axes):
        d = ax_b[1] - ax_b[0]
        i0 = int(round((ax_s[0] - ax_b[0]) / d))
        if i0 < 0 or i0 + len(ax_s) > len(ax_b) or abs(ax_b[i0] - ax_s[0]) > _SNAP * max(1, abs(ax_s[0])):
            raise AlignmentError("node sets are not nested")
        sl.append(slice(i0, i0 + len(ax_s)))
    return big.values[tuple(sl)]


def _window_slices(sol: PDESolution, window):
    sl = [slice(None)]
    for ax, (lo, hi) in zip(sol.axes, window):
        ii = np.flatnonzero((ax >= lo - _SNAP) & (ax <= hi + _SNAP))
        if ii.size == 0:
            raise ValueError("the evaluation window contains no nodes")
        sl.append(slice(int(ii[0]), int(ii[-1]) + 1))
    return tuple(sl)


def minimal_solution(model: DiffusionModel, fk: FeynmanKacSpec, grid: PDEGrid,
                     m_range: Sequence[int], tol: float = 1e-4, window=None,
                     allow_degenerate: bool = False, keep_all: bool = False) -> MinimalSolution:
    """Solve on ``O_m`` for ``m`` in ``m_range`` and follow the increasing limit.

    The scheme must be the monotone one (``theta=1``, upwind). Each step of the
    report holds the sup-difference to the previous truncation on the
    evaluation window and the largest decrease ``max(u_m - u_{m+1})`` over all
    common nodes; a decrease beyond ``SCHEME_TOL`` raises
    :class:`MonotonicityError`. Convergence means the last sup-difference is
    below ``tol``; a single truncation only counts as converged with
    ``allow_degenerate``.

    Parameters
    ----------
    window : sequence of (lo, hi), optional
        Compact comparison window per axis; defaults to the central half of
        ``O_{m_1}``, away from the absorbing boundary layer.
    """
    if not grid.monotone:
        raise ValueError("the minimal-solution construction needs theta=1 with upwind drift")
    ms = sorted(int(m) for m in m_range)
    if not ms or ms[0] < 1 or len(set(ms)) != len(ms):
        raise ValueError("m_range must be distinct positive integers")
    if window is None:
        lo, hi = model.truncation.bounds(ms[0])
        mid, half = (lo + hi) / 2, (hi - lo) / 4
        window = tuple(zip((mid - half).tolist(), (mid + half).tolist()))
    window = tuple((float(a), float(b)) for a, b in window)
    if len(window) != model.n:
        raise ValueError("window needs one (lo, hi) pair per axis")
    sols, report = [], []
    prev = win = None
    for m in ms:
        sol = solve_cauchy(model, fk, m, grid)
        if np.any(sol.values[0] < 0):
            raise ValueError("f must be nonnegative on the grid")
        entry = {"m": m, "box": [[float(a[0]), float(a[-1])] for a in sol.axes],
                 "sup_diff": None, "monotone_violation": None}
        if prev is not None:
            on_prev = _common(prev, sol)
            viol = float(np.max(prev.values - on_prev))
            entry["sup_diff"] = float(np.max(np.abs(on_prev[win] - prev.values[win])))
            entry["monotone_violation"] = max(viol, 0.0)
            if viol > SCHEME_TOL:
                raise MonotonicityError(
                    f"u_{m} is below u_{prev.m} by {viol:.3g} at a common node")
        report.append(entry)
        if keep_all:
            sols.append(sol)
        prev = sol
        # window slices refer to the previous solution's nodes
        win = _window_slices(prev, window)
    if len(ms) == 1:
        converged = bool(allow_degenerate)
    else:
        converged = report[-1]["sup_diff"] < tol
    return MinimalSolution(prev, converged, report, sols, window)


# --------------------------------------------------------------------------
# supersolution domination


@dataclass
class DominationReport:
    """Outcome of ``reference <= candidate + slack`` over all comparison points.

    ``worst_violation`` is ``max(reference - candidate - slack)`` (<= 0 when
    dominated); ``margin`` is ``min(candidate - reference)``. The reverse
    direction ``candidate <= reference + slack`` is reported too.
    """

    dominated: bool
    worst_violation: float
    worst_point: tuple
    margin: float
    reverse_holds: bool
    reverse_worst: float
    n_points: int
    slack_rule: str

    def as_dict(self):
        return asdict(self)


def _candidate_checks(candidate, fk, ref_points):
    if isinstance(candidate, PDESolution):
        if np.any(candidate.values < 0):
            raise ValueError("candidate must be nonnegative at all nodes")
        if fk is not None:
            u0 = candidate.values[0]
            f0 = _initial_f(fk, candidate)
            if np.any(u0 < f0 - SCHEME_TOL):
                raise ValueError("candidate initial slice is below f at a node")
    else:
        M = float(candidate)
        if M < 0:
            raise ValueError("candidate must be nonnegative")
        if fk is not None and ref_points:
            fx = np.array([fk.f.value(p) for p in ref_points])
            if np.any(fx > M):
                raise ValueError("constant candidate is below f at a comparison point")


def _initial_f(fk, sol):
    g = np.meshgrid(*sol.axes, indexing="ij")
    pts = np.stack([v.ravel() for v in g])
    f = np.broadcast_to(fk.f(*pts), (pts.shape[1],)).reshape(sol.values[0].shape).copy()
    # boundary nodes are pinned to zero by construction
    f[0] = f[-1] = 0.0
    if sol.n == 2:
        f[:, 0] = f[:, -1] = 0.0
    return f


def check_supersolution(candidate, reference, fk: FeynmanKacSpec | None = None
                        ) -> DominationReport:
    """Check that ``reference`` lies below ``candidate`` up to its slack.

    Parameters
    ----------
    candidate : PDESolution or float
        A nonnegative supersolution; a constant ``M`` is one whenever
        ``f <= M`` and ``h >= 0``.
    reference : list of MCEstimate, or PDESolution
        Monte Carlo references get slack ``3 * std_error``; PDE references get
        ``10 * SCHEME_TOL`` and are compared on their common nodes and times.
    fk : FeynmanKacSpec, optional
        When given, the candidate's initial data is checked against ``f``.

    Raises
    ------
    AlignmentError
        A reference point is not a node/time of a PDE candidate, or two PDE
        solutions share no nodes.
    """
    if isinstance(reference, PDESolution):
        _candidate_checks(candidate, fk, [])
        slack_rule = "10*scheme_tol"
        slack = 10 * SCHEME_TOL
        if isinstance(candidate, PDESolution):
            cand, ref, pts = _align_fields(candidate, reference)
        else:
            ref = reference.values
            cand = np.full(ref.shape, float(candidate))
            pts = _field_points(reference)
        ref = ref.ravel()
        cand = cand.ravel()
        slack_v = np.full(ref.shape, slack)
    else:
        refs = list(reference)
        if not refs:
            raise ValueError("no reference estimates")
        _candidate_checks(candidate, fk, [e.x for e in refs])
        slack_rule = "3*std_error"
        ref = np.array([e.value for e in refs])
        slack_v = np.array([3.0 * e.std_error for e in refs])
        if isinstance(candidate, PDESolution):
            cand = np.array([candidate.at(e.t, e.x) for e in refs])
        else:
            cand = np.full(ref.shape, float(candidate))
        pts = [(e.t, tuple(e.x)) for e in refs]
    excess = ref - cand - slack_v
    w = int(np.argmax(excess))
    rev = cand - ref - slack_v
    return DominationReport(
        dominated=bool(excess[w] <= 0),
        worst_violation=float(excess[w]),
        worst_point=tuple(pts[w]) if not callable(pts) else pts(w),
        margin=float(np.min(cand - ref)),
        reverse_holds=bool(np.max(rev) <= 0),
        reverse_worst=float(np.max(rev)),
        n_points=int(ref.size),
        slack_rule=slack_rule,
    )


def _field_points(sol: PDESolution):
    shape = sol.values.shape

    def point(flat):
        j, *ix = np.unravel_index(flat, shape)
        return (float(sol.times[j]), tuple(float(sol.axes[d][i]) for d, i in enumerate(ix)))
    return point


def _align_fields(cand: PDESolution, ref: PDESolution):
    """Restrict two solutions to their common times and nodes."""
    if cand.anchor != ref.anchor or cand.n != ref.n:
        raise AlignmentError("solutions use different lattices")
    for a, b in zip(cand.axes, ref.axes):
        if abs((a[1] - a[0]) - (b[1] - b[0])) > _SNAP * (a[1] - a[0]):
            raise AlignmentError("solutions use different spacings")
    tc = {round(float(t), 12): j for j, t in enumerate(cand.times)}
    pairs = [(j, tc[round(float(t), 12)]) for j, t in enumerate(ref.times)
             if round(float(t), 12) in tc]
    if not pairs:
        raise AlignmentError("no common saved times")
    idx_c, idx_r, common_axes = [np.array([p[1] for p in pairs])], [np.array([p[0] for p in pairs])], []
    for a, b in zip(cand.axes, ref.axes):
        lo, hi = max(a[0], b[0]), min(a[-1], b[-1])
        d = a[1] - a[0]
        ia = int(round((lo - a[0]) / d))
        ib = int(round((lo - b[0]) / d))
        cnt = int(round((hi - lo) / d)) + 1
        if cnt < 1 or abs(a[ia] - b[ib]) > _SNAP * max(1.0, abs(lo)):
            raise AlignmentError("no common nodes")
        idx_c.append(np.arange(ia, ia + cnt))
        idx_r.append(np.arange(ib, ib + cnt))
        common_axes.append(a[ia:ia + cnt])
    cv = cand.values[np.ix_(*idx_c)]
    rv = ref.values[np.ix_(*idx_r)]
    times = cand.times[idx_c[0]]
    shape = cv.shape

    def point(flat):
        j, *ix = np.unravel_index(flat, shape)
        return (float(times[j]), tuple(float(common_axes[d][i]) for d, i in enumerate(ix)))
    return cv, rv, point
