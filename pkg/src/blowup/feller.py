"""
Feller's test for explosion of a one-dimensional diffusion.

With scale density ``p'(y) = exp(-int_c^y 2b/sigma^2)`` the test function is

    v(x) = int_c^x p'(y) int_c^y 2 / (p'(z) sigma(z)^2) dz dy,

and an endpoint is reached in finite time with positive probability iff ``v`` is
finite there. Writing ``I(y) = p'(y) int_c^y 2/(p' sigma^2)`` turns the nested
integral into the linear system

    I' = 2/sigma^2 - (2b/sigma^2) I,    v' = I,    I(c) = v(c) = 0,

which an adaptive stiff integrator follows outward through an escalating
sequence of cutoffs. This avoids forming ``p'`` itself, which under- or
overflows for polynomial drifts.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .expr import EvaluationError
from .model import DiffusionModel, probe_grid

__all__ = ["FellerQuad", "EndpointIntegral", "FellerReport", "feller_classify",
           "default_reference_point"]


@dataclass(frozen=True)
class FellerQuad:
    """Integration and divergence settings.

    After a few points near ``c``, cutoffs approach a finite endpoint as
    ``e - (e - c) 2**-j`` and an infinite one as ``c +- 2**j``; ``v`` counts as infinite once it exceeds
    ``threshold`` with a rising trend over the last three cutoffs.
    """

    threshold: float = 1e8
    n_cutoffs: int = 60
    rtol: float = 1e-10
    atol: float = 1e-14
    method: str = "LSODA"


@dataclass
class EndpointIntegral:
    endpoint: float
    cutoffs: list = field(default_factory=list)
    values: list = field(default_factory=list)
    diverged: bool = False
    stopped_early: bool = False
    n_evaluations: int = 0
    tail_ratio: float = math.nan
    solver_message: str = ""

    @property
    def slow_divergence_suspected(self) -> bool:
        """Finite verdict whose last increments do not shrink (e.g. log growth)."""
        return not self.diverged and self.tail_ratio > 0.9

    @property
    def v(self) -> float:
        """Feller integral at the endpoint; ``math.inf`` when diverged."""
        if self.diverged:
            return math.inf
        return self.values[-1] if self.values else math.nan


@dataclass
class FellerReport:
    v_left: float
    v_right: float
    classification: str
    c: float
    left: EndpointIntegral
    right: EndpointIntegral

    @property
    def explosive(self) -> bool:
        return self.classification != "conservative"

    def as_dict(self):
        def enc(v):
            return "inf" if v == math.inf else v
        d = {"v_left": enc(self.v_left), "v_right": enc(self.v_right),
             "classification": self.classification, "c": self.c}
        for side in ("left", "right"):
            e = asdict(getattr(self, side))
            e["endpoint"] = enc(e["endpoint"]) if e["endpoint"] != -math.inf else "-inf"
            e["tail_ratio"] = None if math.isnan(e["tail_ratio"]) else e["tail_ratio"]
            e["slow_divergence_suspected"] = getattr(self, side).slow_divergence_suspected
            d[side] = e
        return d

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)


def default_reference_point(model: DiffusionModel) -> float:
    """Midpoint of a bounded interval, else 0 when inside, else one unit in."""
    lo, hi = model.domain.lower[0], model.domain.upper[0]
    if math.isfinite(lo) and math.isfinite(hi):
        return 0.5 * (lo + hi)
    if lo < 0.0 < hi:
        return 0.0
    return lo + 1.0 if math.isfinite(lo) else hi - 1.0


def _cutoffs(c, end, n):
    # a few cutoffs close to c first, so the trend rule has values to work
    # with even when v blows up within the first unit
    near = 2.0 ** -np.arange(10, 1, -1, dtype=float)
    j = np.arange(1, n + 1, dtype=float)
    if math.isfinite(end):
        cut = c + (end - c) * np.concatenate([near, 1.0 - 2.0 ** -j])
        # stop before the cutoffs round onto the endpoint
        keep = np.abs(cut - end) > 4 * np.spacing(abs(end) + 1.0)
        return cut[keep]
    return c + math.copysign(1.0, end) * np.concatenate([near, 2.0 ** (j - 1)])


def _integrate(model, c, end, quad: FellerQuad) -> EndpointIntegral:
    b, s = model.b[0], model.sigma[0][0]
    res = EndpointIntegral(endpoint=end)

    def rhs(y, z):
        sy = float(s(y))
        by = float(b(y))
        if not (math.isfinite(sy) and math.isfinite(by)):
            raise EvaluationError(f"coefficients not finite at interior point {y}")
        if sy == 0.0:
            raise EvaluationError(f"sigma vanishes at {y}")
        a = sy * sy
        dI = 2.0 / a - (2.0 * by / a) * z[0]
        if not math.isfinite(dI):
            raise EvaluationError(f"Feller integrand not finite at {y} (sigma={sy})")
        return [dI, z[0]]

    stop_at = 10.0 * quad.threshold

    def too_big(y, z):
        return stop_at - abs(z[1])
    too_big.terminal = True

    cut = _cutoffs(c, end, quad.n_cutoffs)
    sol = solve_ivp(rhs, (c, float(cut[-1])), [0.0, 0.0], method=quad.method,
                    t_eval=cut, events=too_big, rtol=quad.rtol, atol=quad.atol)
    res.n_evaluations = int(sol.nfev)
    res.cutoffs = [float(v) for v in sol.t]
    res.values = [float(abs(v)) for v in sol.y[1]] if sol.y.size else []
    if sol.status == -1:
        # far cutoffs can defeat the step control; the cutoffs already reached
        # still decide the verdict when there are enough of them
        if len(res.values) < 3:
            raise ArithmeticError(f"Feller integration failed toward {end}: {sol.message}")
        res.stopped_early = True
        res.solver_message = str(sol.message)
    if sol.status == 1:
        # passed 10x the threshold before the last cutoff
        res.stopped_early = True
        res.cutoffs.append(float(sol.t_events[0][0]))
        res.values.append(float(abs(sol.y_events[0][0][1])))
    vals = res.values
    if len(vals) >= 3 and vals[-2] != vals[-3]:
        res.tail_ratio = (vals[-1] - vals[-2]) / (vals[-2] - vals[-3])
    res.diverged = (len(vals) >= 3 and vals[-1] > quad.threshold
                    and vals[-3] < vals[-2] < vals[-1])
    return res


def feller_classify(model: DiffusionModel, c: float | None = None,
                    quad: FellerQuad | None = None) -> FellerReport:
    """Classify a one-dimensional model by Feller's test.

    Returns ``conservative`` when ``v`` diverges at both endpoints, else
    ``explosive_left``, ``explosive_right`` or ``explosive_both`` for the
    endpoints where it stays finite.

    Notes
    -----
    The threshold rule misreads integrals that diverge too slowly to pass the
    threshold within the cutoffs (``b(x) = x`` gives ``v ~ log x``); such
    endpoints carry ``slow_divergence_suspected``. Conversely a finite but
    astronomically large ``v`` (a strong drift away from a finite endpoint)
    is reported as divergent.
    """
    if model.n != 1:
        raise ValueError("Feller's test applies to one-dimensional models")
    quad = quad or FellerQuad()
    c = default_reference_point(model) if c is None else float(c)
    lo, hi = model.domain.lower[0], model.domain.upper[0]
    if not lo < c < hi:
        raise ValueError(f"reference point {c} must lie in ({lo}, {hi})")
    probe = probe_grid(model)[:, 0]
    with np.errstate(all="ignore"):
        s = np.broadcast_to(model.sigma[0][0](probe), probe.shape)
    if np.any(s == 0):
        raise EvaluationError(f"sigma vanishes at probe point {probe[np.argmax(s == 0)]}")
    left = _integrate(model, c, lo, quad)
    right = _integrate(model, c, hi, quad)
    el, er = not left.diverged, not right.diverged
    cls = {(False, False): "conservative", (True, False): "explosive_left",
           (False, True): "explosive_right", (True, True): "explosive_both"}[(el, er)]
    return FellerReport(left.v, right.v, cls, c, left, right)
