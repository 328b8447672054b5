"""
Diffusion models, state domains and Feynman-Kac payloads.

A :class:`DiffusionModel` bundles drift ``b``, dispersion ``sigma`` (both as
:class:`~blowup.expr.CoefficientExpr`), an axis-aligned state domain and a
truncation rule producing bounded subdomains that increase to the domain.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .expr import CoefficientExpr, ExprError, parse_coefficient

try:  # Python >= 3.11
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as _toml

__all__ = [
    "Domain",
    "TruncationSequence",
    "DiffusionModel",
    "FeynmanKacSpec",
    "Finding",
    "ValidationReport",
    "ConfigError",
    "diffusion_matrix",
    "validate_model",
    "probe_grid",
    "make_model",
    "load_config",
    "loads_config",
    "dumps_config",
]

DEFAULT_ESCAPE_RADIUS = 1.0e4
DEFAULT_TRUNCATION_UNIT = 10.0


class ConfigError(ValueError):
    """Malformed model configuration; message carries file and line."""


@dataclass(frozen=True)
class Domain:
    """Open box ``prod_i (lower_i, upper_i)``; infinite sides are allowed.

    ``escape_radius`` is the machine surrogate for infinity: a path with
    ``|X_i| > escape_radius`` on an unbounded side counts as exploded.
    """

    lower: tuple
    upper: tuple
    escape_radius: float = DEFAULT_ESCAPE_RADIUS

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if len(lo) != len(hi):
            raise ValueError("lower and upper bounds differ in length")
        if any(not (a < b) for a, b in zip(lo, hi)):
            raise ValueError(f"empty domain: lower {lo} must be below upper {hi}")
        if any(math.isnan(v) for v in lo + hi):
            raise ValueError("domain bounds must not be NaN")
        r = float(self.escape_radius)
        if not (math.isfinite(r) and r > 0):
            raise ValueError("escape_radius must be finite and positive")
        object.__setattr__(self, "escape_radius", r)

    @classmethod
    def interval(cls, left=-math.inf, right=math.inf, escape_radius=DEFAULT_ESCAPE_RADIUS):
        return cls((left,), (right,), escape_radius)

    @classmethod
    def whole_space(cls, n: int, escape_radius=DEFAULT_ESCAPE_RADIUS):
        return cls((-math.inf,) * n, (math.inf,) * n, escape_radius)

    @property
    def n(self) -> int:
        return len(self.lower)

    @property
    def bounded(self) -> bool:
        return all(math.isfinite(v) for v in self.lower + self.upper)

    def effective_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Bounds with infinite sides replaced by the escape radius."""
        lo = np.array(self.lower)
        hi = np.array(self.upper)
        r = self.escape_radius
        lo = np.where(np.isfinite(lo), lo, -r)
        hi = np.where(np.isfinite(hi), hi, r)
        return lo, hi

    def contains(self, x) -> np.ndarray:
        """Membership in the open box (exact, no escape radius); ``x`` has shape (n, ...)."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 0:
            x = x[None]
        inside = np.ones(x.shape[1:], dtype=bool)
        for i in range(self.n):
            inside &= (x[i] > self.lower[i]) & (x[i] < self.upper[i])
        return inside


@dataclass(frozen=True)
class TruncationSequence:
    """Rule ``m -> O_m`` of bounded boxes with closure inside the domain.

    Unbounded sides are clipped at ``anchor +- m * unit``; finite sides are
    inset by ``half_width * 2**-m`` (bounded direction) or ``unit * 2**-m``
    (half-line), so ``O_m`` is strictly inside ``O_{m+1}`` and the union is the
    whole domain.
    """

    domain: Domain
    unit: float = DEFAULT_TRUNCATION_UNIT

    def __post_init__(self):
        if not (math.isfinite(self.unit) and self.unit > 0):
            raise ValueError("truncation unit must be finite and positive")

    def bounds(self, m: int) -> tuple[np.ndarray, np.ndarray]:
        if int(m) != m or m < 1:
            raise ValueError(f"truncation index must be a positive integer, got {m!r}")
        m = int(m)
        lo_m, hi_m = [], []
        u = self.unit
        for lo, hi in zip(self.domain.lower, self.domain.upper):
            flo, fhi = math.isfinite(lo), math.isfinite(hi)
            if flo and fhi:
                inset = 0.5 * (hi - lo) * 2.0**-m
                lo_m.append(lo + inset)
                hi_m.append(hi - inset)
            elif flo:
                lo_m.append(lo + u * 2.0**-m)
                hi_m.append(lo + m * u)
            elif fhi:
                lo_m.append(hi - m * u)
                hi_m.append(hi - u * 2.0**-m)
            else:
                lo_m.append(-m * u)
                hi_m.append(m * u)
        return np.array(lo_m), np.array(hi_m)

    def box(self, m: int) -> Domain:
        lo, hi = self.bounds(m)
        return Domain(tuple(lo), tuple(hi), self.domain.escape_radius)


@dataclass(frozen=True)
class DiffusionModel:
    """``dX = b(X) dt + sigma(X) dW`` on ``domain`` (dimension ``n``)."""

    n: int
    b: tuple
    sigma: tuple
    domain: Domain
    truncation: TruncationSequence | None = None
    name: str = ""

    def __post_init__(self):
        n = self.n
        if len(self.b) != n:
            raise ValueError(f"drift needs {n} components, got {len(self.b)}")
        if len(self.sigma) != n or any(len(row) != n for row in self.sigma):
            raise ValueError(f"sigma must be {n}x{n}")
        if self.domain.n != n:
            raise ValueError("domain dimension does not match model dimension")
        object.__setattr__(self, "b", tuple(self.b))
        object.__setattr__(self, "sigma", tuple(tuple(row) for row in self.sigma))
        if self.truncation is None:
            object.__setattr__(self, "truncation", TruncationSequence(self.domain))

    def drift(self, x) -> np.ndarray:
        """Drift at states ``x`` of shape (n, ...); returns shape (n, ...)."""
        x = np.asarray(x, dtype=float)
        shape = x.shape[1:]
        return np.stack([np.broadcast_to(bi(*x), shape) for bi in self.b])

    def dispersion(self, x) -> np.ndarray:
        """Dispersion matrix at ``x`` of shape (n, ...); returns (n, n, ...)."""
        x = np.asarray(x, dtype=float)
        shape = x.shape[1:]
        return np.stack([
            np.stack([np.broadcast_to(s(*x), shape) for s in row]) for row in self.sigma
        ])

    def subdomain(self, m: int | None) -> Domain:
        return self.domain if m is None else self.truncation.box(m)


@dataclass(frozen=True)
class FeynmanKacSpec:
    """Payoff ``f`` and potential ``h``; ``c0`` optionally bounds both."""

    f: CoefficientExpr
    h: CoefficientExpr
    c0: float | None = None

    def __post_init__(self):
        if self.c0 is not None and not (self.c0 > 0):
            raise ValueError("c0 must be positive when declared")


def diffusion_matrix(model: DiffusionModel, x) -> np.ndarray:
    """``a(x) = sigma(x) sigma(x)^T`` at a single point, exactly symmetric."""
    s = model.dispersion(np.asarray(x, dtype=float).reshape(model.n))
    if not np.all(np.isfinite(s)):
        from .expr import EvaluationError

        raise EvaluationError(f"dispersion not finite at {np.ravel(x).tolist()}")
    a = s @ s.T
    return 0.5 * (a + a.T)


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Finding:
    check: str
    status: str  # "pass" | "fail" | "advisory"
    detail: str = ""


@dataclass
class ValidationReport:
    findings: list = field(default_factory=list)

    def add(self, check, status, detail=""):
        self.findings.append(Finding(check, status, detail))

    @property
    def ok(self) -> bool:
        """No hard failures (advisories allowed)."""
        return all(f.status != "fail" for f in self.findings)

    @property
    def clean(self) -> bool:
        return all(f.status == "pass" for f in self.findings)

    def messages(self, status: str | None = None) -> list[str]:
        return [f"{f.check}: {f.detail}" for f in self.findings
                if status is None or f.status == status]

    def as_dict(self):
        return {"ok": self.ok, "findings": [asdict(f) for f in self.findings]}


def probe_grid(model: DiffusionModel, k: int = 21, m: int = 1) -> np.ndarray:
    """Tensor grid of ``k`` points per axis strictly inside ``O_m``; shape (N, n)."""
    lo, hi = model.truncation.bounds(m)
    axes = [np.linspace(a, b, k + 2)[1:-1] for a, b in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def validate_model(model: DiffusionModel, fk: FeynmanKacSpec | None,
                   probe_points: Sequence | None = None) -> ValidationReport:
    """Sample the standing assumptions at probe points; never raises.

    Checks are recorded as ``pass``, ``fail`` (the assumption is violated) or
    ``advisory`` (the run may still make sense, e.g. degenerate noise).
    """
    rep = ValidationReport()
    pts = probe_grid(model) if probe_points is None else np.asarray(probe_points, dtype=float)
    pts = pts.reshape(-1, model.n)
    inside = model.domain.contains(pts.T)
    if not np.all(inside):
        rep.add("probe_points", "advisory", f"{int((~inside).sum())} probe points outside domain ignored")
        pts = pts[inside]
    if len(pts) == 0:
        rep.add("probe_points", "fail", "no probe points inside the domain")
        return rep
    X = pts.T

    try:
        b = model.drift(X)
        s = model.dispersion(X)
    except Exception as exc:  # collect, never block
        rep.add("coefficients", "fail", f"evaluation error: {exc}")
        return rep
    finite = np.all(np.isfinite(b), axis=0) & np.all(np.isfinite(s), axis=(0, 1))
    if not np.all(finite):
        bad = pts[~finite][0].tolist()
        rep.add("coefficients_finite", "fail", f"non-finite b or sigma at {bad}")
    else:
        rep.add("coefficients_finite", "pass")

    a = np.einsum("ik...,jk...->ij...", s[..., finite], s[..., finite])
    a = np.moveaxis(a, -1, 0)
    a = 0.5 * (a + np.swapaxes(a, 1, 2))
    if len(a):
        eig = np.linalg.eigvalsh(a)
        scale = np.linalg.norm(a, axis=(1, 2))
        if np.any(eig[:, 0] < -1e-12 * np.maximum(scale, 1e-300)):
            rep.add("a_psd", "fail", "sigma sigma^T has a negative eigenvalue")
        else:
            rep.add("a_psd", "pass")
        rep.add("bounded_a_b", "pass",
                f"max|a|={float(scale.max()):.6g}, max|b|={float(np.abs(b[:, finite]).max()):.6g} on probes")
        if model.n == 1:
            if np.any(a[:, 0, 0] <= 0):
                rep.add("a_positive", "advisory", "a not strictly positive at a probe point")
            else:
                rep.add("a_positive", "pass")

    if fk is not None:
        fv = np.broadcast_to(fk.f(*X), X.shape[1:])
        hv = np.broadcast_to(fk.h(*X), X.shape[1:])
        if not (np.all(np.isfinite(fv)) and np.all(np.isfinite(hv))):
            rep.add("fk_finite", "fail", "f or h not finite at a probe point")
        else:
            rep.add("fk_finite", "pass")
            if np.any(hv < 0):
                rep.add("h_nonnegative", "advisory",
                        "h not bounded below by 0; ensure the Feynman-Kac functional is well-defined")
            else:
                rep.add("h_nonnegative", "pass")
            if fk.c0 is not None:
                lim = fk.c0 * (1 + 1e-9)
                worst = float(max(np.abs(fv).max(), np.abs(hv).max()))
                if worst > lim:
                    rep.add("c0_bound", "fail", f"max(|f|,|h|)={worst:.6g} exceeds c0={fk.c0}")
                else:
                    rep.add("c0_bound", "pass")
    return rep


# --------------------------------------------------------------------------
# construction and config files


def _as_list(v, n, what):
    if isinstance(v, (str, int, float)):
        v = [v]
    v = list(v)
    if len(v) != n:
        raise ValueError(f"{what}: expected {n} entries, got {len(v)}")
    return v


def make_model(b, sigma, lower=-math.inf, upper=math.inf, n: int | None = None,
               escape_radius=DEFAULT_ESCAPE_RADIUS, unit=DEFAULT_TRUNCATION_UNIT,
               name="") -> DiffusionModel:
    """Build a model from expression strings.

    ``b`` and ``sigma`` may be plain strings/numbers for ``n = 1``; otherwise a
    list of ``n`` drifts and an ``n x n`` nested list.
    """
    if n is None:
        n = 1 if isinstance(b, (str, int, float)) else len(b)
    bs = _as_list(b, n, "b")
    if n == 1 and isinstance(sigma, (str, int, float)):
        sigma = [[sigma]]
    rows = [_as_list(row, n, "sigma row") for row in _as_list(sigma, n, "sigma")]
    # a scalar bound applies to every coordinate
    if isinstance(lower, (int, float)):
        lower = [lower] * n
    if isinstance(upper, (int, float)):
        upper = [upper] * n
    domain = Domain(tuple(_as_list(lower, n, "lower")), tuple(_as_list(upper, n, "upper")),
                    escape_radius)
    return DiffusionModel(
        n=n,
        b=tuple(parse_coefficient(str(e), n) for e in bs),
        sigma=tuple(tuple(parse_coefficient(str(e), n) for e in row) for row in rows),
        domain=domain,
        truncation=TruncationSequence(domain, unit),
        name=name,
    )


def make_fk(f="1", h="0", n: int = 1, c0: float | None = None) -> FeynmanKacSpec:
    return FeynmanKacSpec(parse_coefficient(str(f), n), parse_coefficient(str(h), n), c0)


def _line_of(text: str, needle: str) -> int | None:
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


def loads_config(text: str, path: str = "<string>") -> tuple[DiffusionModel, FeynmanKacSpec]:
    """Parse a TOML model configuration (schema in the README)."""
    try:
        doc = _toml.loads(text)
    except _toml.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if "model" not in doc:
        raise ConfigError(f"{path}: missing [model] section")
    md = doc["model"]
    try:
        n = int(md.get("n", 1))
        dom = md.get("domain", {})
        trunc = doc.get("truncation", {})
        model = make_model(
            md["b"], md["sigma"],
            lower=dom.get("lower", [-math.inf] * n if n > 1 else -math.inf),
            upper=dom.get("upper", [math.inf] * n if n > 1 else math.inf),
            n=n,
            escape_radius=float(dom.get("escape_radius", DEFAULT_ESCAPE_RADIUS)),
            unit=float(trunc.get("unit", DEFAULT_TRUNCATION_UNIT)),
            name=str(md.get("name", "")),
        )
        fkd = doc.get("feynman_kac", {})
        c0 = fkd.get("c0")
        fk = make_fk(fkd.get("f", "1"), fkd.get("h", "0"), n, None if c0 is None else float(c0))
    except ExprError as exc:
        line = _line_of(text, exc.source) if exc.source else None
        where = f"{path}:{line}" if line else path
        raise ConfigError(f"{where}: {exc} in {exc.source!r}") from None
    except (KeyError, TypeError, ValueError) as exc:
        key = exc.args[0] if isinstance(exc, KeyError) else None
        line = _line_of(text, str(key)) if key else None
        where = f"{path}:{line}" if line else path
        what = f"missing key {key!r}" if isinstance(exc, KeyError) else str(exc)
        raise ConfigError(f"{where}: {what}") from None
    return model, fk


def load_config(path) -> tuple[DiffusionModel, FeynmanKacSpec]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    return loads_config(text, str(path))


def _toml_float(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


def _toml_str(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def dumps_config(model: DiffusionModel, fk: FeynmanKacSpec | None = None) -> str:
    """Serialize a model (and payload) back to the TOML config format."""
    lines = ["[model]"]
    if model.name:
        lines.append(f"name = {_toml_str(model.name)}")
    lines.append(f"n = {model.n}")
    lines.append("b = [" + ", ".join(_toml_str(e.source) for e in model.b) + "]")
    rows = ["[" + ", ".join(_toml_str(e.source) for e in row) + "]" for row in model.sigma]
    lines.append("sigma = [" + ", ".join(rows) + "]")
    lines.append("")
    lines.append("[model.domain]")
    lines.append("lower = [" + ", ".join(_toml_float(v) for v in model.domain.lower) + "]")
    lines.append("upper = [" + ", ".join(_toml_float(v) for v in model.domain.upper) + "]")
    lines.append(f"escape_radius = {_toml_float(model.domain.escape_radius)}")
    if fk is not None:
        lines.append("")
        lines.append("[feynman_kac]")
        lines.append(f"f = {_toml_str(fk.f.source)}")
        lines.append(f"h = {_toml_str(fk.h.source)}")
        if fk.c0 is not None:
            lines.append(f"c0 = {_toml_float(fk.c0)}")
    lines.append("")
    lines.append("[truncation]")
    lines.append(f"unit = {_toml_float(model.truncation.unit)}")
    return "\n".join(lines) + "\n"
