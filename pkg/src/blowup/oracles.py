"""
Reference values that do not depend on the simulation or PDE code.

``bm_interval_survival`` is the eigenfunction series for Brownian motion killed
at the ends of (0, 1); ``ode_explosion_time`` integrates the noiseless
equation to its blow-up time. The catalog bundles the standard models used by
the tests and demos.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .expr import CoefficientExpr, parse_coefficient
from .model import DiffusionModel, FeynmanKacSpec, dumps_config, make_fk, make_model

__all__ = [
    "bm_interval_survival",
    "bm_interval_tail_bound",
    "ode_explosion_time",
    "NoBlowupError",
    "OracleCatalogEntry",
    "catalog",
    "catalog_entry",
]


def bm_interval_tail_bound(t: float, n_terms: int) -> float:
    """Bound on the terms dropped by :func:`bm_interval_survival`.

    The first omitted odd index is ``K = 2 n_terms + 1``; successive omitted
    terms shrink at least by ``exp(-2 K pi^2 t)``, so the tail is at most the
    first omitted term over ``1 - exp(-2 K pi^2 t)``.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    K = 2 * n_terms + 1
    first = 4.0 / (K * math.pi) * math.exp(-K * K * math.pi ** 2 * t / 2.0)
    return first / -math.expm1(-2.0 * K * math.pi ** 2 * t)


def bm_interval_survival(t: float, x, n_terms: int = 50):
    """``P_x[S > t]`` for standard Brownian motion killed outside (0, 1).

    Sums ``4/(k pi) sin(k pi x) exp(-k^2 pi^2 t / 2)`` over odd ``k <= 2 n_terms``
    with :func:`math.fsum`. ``x`` may be an array; points on the boundary give 0.
    Accuracy is only guaranteed for ``t >= 0.01`` (see
    :func:`bm_interval_tail_bound`).
    """
    if not t > 0:
        raise ValueError("t must be positive")
    if n_terms < 1:
        raise ValueError("n_terms must be >= 1")
    xa = np.asarray(x, dtype=float)
    if np.any((xa < 0) | (xa > 1)):
        raise ValueError("x must lie in [0, 1]")
    k = np.arange(1, 2 * n_terms, 2, dtype=float)
    coef = 4.0 / (k * math.pi) * np.exp(-k * k * math.pi ** 2 * t / 2.0)
    flat = np.atleast_1d(xa).ravel()
    terms = coef[:, None] * np.sin(math.pi * k[:, None] * flat[None, :])
    out = np.array([math.fsum(col) for col in terms.T])
    # sin(k pi) is not exactly zero in floating point
    out[(flat == 0.0) | (flat == 1.0)] = 0.0
    return float(out[0]) if xa.ndim == 0 else out.reshape(xa.shape)


class NoBlowupError(ArithmeticError):
    """The deterministic path did not reach the threshold within the step cap."""


def _rk4_step(f, x, fx, h):
    k2 = f(x + 0.5 * h * fx)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + h / 6.0 * (fx + 2 * k2 + 2 * k3 + k4)


def _rk4_hit(f, x0, R, dt, max_steps):
    """First time |x| reaches R for x' = f(x), with relative step control."""
    t, x = 0.0, float(x0)
    if abs(x) >= R:
        return t
    for _ in range(max_steps):
        fx = f(x)
        if not math.isfinite(fx):
            raise ArithmeticError(f"drift not finite at x={x}")
        if fx == 0.0:
            break
        # x changes by at most a fraction dt of max(1, |x|) per step
        h = min(dt, dt * max(1.0, abs(x)) / abs(fx))
        x_new = _rk4_step(f, x, fx, h)
        if not abs(x_new) < R:
            # halve the final step until it lands just past R
            lo, hi = 0.0, h
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if abs(_rk4_step(f, x, fx, mid)) >= R:
                    hi = mid
                else:
                    lo = mid
                if hi - lo <= 1e-15 * max(t, 1e-300):
                    break
            return t + hi
        t += h
        x = x_new
    raise NoBlowupError(f"no blow-up past |x| = {R:g} within {max_steps} steps (t = {t:g})")


def ode_explosion_time(b, x0: float, R: float = 1e6, dt: float = 1e-3,
                       max_steps: int = 200_000) -> float:
    """Blow-up time of ``x' = b(x)``, ``x(0) = x0``.

    RK4 with steps bounded by ``dt`` and by a relative change of ``dt`` per
    step; the final step is bisected until the threshold crossing is located
    to rounding. The hitting times of ``R``, ``2R`` and ``4R`` are extrapolated
    to infinite ``R`` with Aitken's delta-squared.

    Raises
    ------
    NoBlowupError
        When ``|x|`` does not reach ``4R`` within ``max_steps`` steps.
    """
    if isinstance(b, str):
        b = parse_coefficient(b, 1)
    if isinstance(b, CoefficientExpr):
        expr = b

        def f(x):
            return float(expr(x))
    else:
        f = b
    ts = [_rk4_hit(f, x0, r, dt, max_steps) for r in (R, 2 * R, 4 * R)]
    d1, d2 = ts[1] - ts[0], ts[2] - ts[1]
    if d1 == d2 or d1 == 0.0:
        return ts[2]
    return ts[2] - d2 * d2 / (d2 - d1)


# --------------------------------------------------------------------------
# catalog


@dataclass(frozen=True)
class OracleCatalogEntry:
    """A reference model with what is known about it."""

    name: str
    model: DiffusionModel
    fk: FeynmanKacSpec
    explosive: bool
    description: str
    closed_form: str | None = None
    used_by: tuple = field(default_factory=tuple)

    def config(self) -> str:
        return dumps_config(self.model, self.fk)


def _base_entries():
    inf = math.inf
    return [
        ("bm_unit_interval", make_model("0", "1", 0.0, 1.0, name="bm_unit_interval"), True,
         "Brownian motion killed at the ends of (0, 1)", "bm_interval_survival",
         ("initial condition", "spectral cross-check", "martingale identity",
          "supersolution domination", "continuity modulus", "Ito residual")),
        ("bm_line", make_model("0", "1", -inf, inf, name="bm_line"), False,
         "Brownian motion on the real line (conservative)", None,
         ("Feller consistency", "supersolution domination")),
        ("ou", make_model("-x", "1", -inf, inf, name="ou"), False,
         "Ornstein-Uhlenbeck process on the real line (conservative)", None,
         ("Feller consistency", "supersolution domination")),
        ("cubic_drift", make_model("x^3", "1", -inf, inf, name="cubic_drift"), True,
         "b(x) = x^3 with unit noise; explodes in both directions", None,
         ("minimality construction", "Feller consistency", "supersolution domination")),
        ("deterministic_tan",
         make_model("1+x^2", "0", -inf, inf, escape_radius=1e8, name="deterministic_tan"),
         True, "x' = 1 + x^2 from 0, blows up at pi/2 (x = tan t)", "tan",
         ("deterministic explosion", "supersolution domination")),
    ]


def catalog(potential: float = 1.0) -> dict:
    """All catalog entries keyed by name.

    Every base model also appears as ``<name>_killed`` with constant potential
    ``h = potential``. Payoffs are ``f = 1``.
    """
    out = {}
    c = float(potential)
    for name, model, explosive, desc, closed, used in _base_entries():
        out[name] = OracleCatalogEntry(name, model, make_fk("1", "0", 1, c0=1.0), explosive,
                                       desc, closed, used)
        killed = f"{name}_killed"
        km = make_model(tuple(e.source for e in model.b)[0], model.sigma[0][0].source,
                        model.domain.lower[0], model.domain.upper[0],
                        escape_radius=model.domain.escape_radius, name=killed)
        out[killed] = OracleCatalogEntry(
            killed, km, make_fk("1", repr(c), 1, c0=max(1.0, abs(c))), explosive,
            desc + f", with constant potential h = {c:g}",
            closed and f"exp(-{c:g} t) * {closed}",
            ("constant-potential factorization",) + used)
    return out


def catalog_entry(name: str) -> OracleCatalogEntry:
    entries = catalog()
    try:
        return entries[name]
    except KeyError:
        raise KeyError(f"unknown catalog model {name!r}; available: "
                       + ", ".join(sorted(entries))) from None
