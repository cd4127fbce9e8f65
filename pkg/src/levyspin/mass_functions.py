"""Time-change densities ``m``: builtins, tabulated masses, transforms."""

from __future__ import annotations

import csv
import logging
import math
import re
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import IntegrationWarning, quad, trapezoid

from .errors import NotIntegrable, UnknownName

logger = logging.getLogger(__name__)

#: Smallest mass value accepted by the positivity check.
MASS_FLOOR = 1e-300

BUILTIN_NAMES = ("inv_linear", "example2_rational", "gaussian", "cauchy_like")


@dataclass(frozen=True)
class MassFunction:
    """Positive density driving the random clock.

    Attributes
    ----------
    name : str
    func : callable
        Vectorised evaluator ``x -> m(x)``.
    in_L1, in_L2 : bool
        Declared integrability.
    sup_norm, l2_norm : float
    l1_norm : float or None
        ``None`` unless ``in_L1``.
    decay_exponent : float
        ``p`` such that ``m(x) ~ C |x|^-p``; ``inf`` for faster decay.
    core : float
        ``m`` is strictly decreasing in ``|x|`` beyond this radius.
    symmetric : bool
        ``m(-x) == m(x)``; the Fourier transform is then real.
    """

    name: str
    func: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    in_L1: bool
    in_L2: bool
    sup_norm: float
    l1_norm: float | None
    l2_norm: float
    decay_exponent: float
    core: float = 0.0
    symmetric: bool = True
    logfunc: Callable[[np.ndarray], np.ndarray] | None = field(
        default=None, repr=False)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = self.func(x)
        return out if np.ndim(out) else float(out)

    def log(self, x):
        """``log m(x)``; exact when a log evaluator is known, else floored."""
        if self.logfunc is not None:
            return self.logfunc(np.asarray(x, dtype=float))
        return np.log(np.maximum(self(x), MASS_FLOOR))

    def default_half_width(self):
        """Default working-domain half width."""
        return 40.0 if self.in_L1 else 60.0

    def tail_mass(self, half_width):
        """Asymptotic estimate of ``int_{|x|>L} m`` from the decay exponent."""
        L = float(half_width)
        p = self.decay_exponent
        if not p > 1.0:
            return math.inf
        if math.isinf(p):
            return 0.0
        mL = 0.5 * (self(L) + self(-L))
        return 2.0 * mL * L / (p - 1.0)

    def transform(self):
        """Return the Fourier transform as a :class:`MassTransform`."""
        if not self.in_L1:
            raise NotIntegrable(f"mass {self.name!r} is not in L1")
        return MassTransform(self)


def _inv_linear(x):
    return 1.0 / (1.0 + np.abs(x))


def _example2(x):
    ax = np.abs(x)
    return (2.0 * x * x + 6.0 * ax + 3.0) / (1.0 + ax) ** 4


def _cauchy_like(x):
    return 1.0 / (1.0 + x * x)


def builtin_mass(name, param=None):
    """Look up a builtin mass by name.

    ``name`` may carry its parameter inline, e.g. ``"gaussian(2)"``.

    Raises
    ------
    UnknownName
        If ``name`` is not one of :data:`BUILTIN_NAMES`.
    """
    match = re.fullmatch(r"\s*([A-Za-z0-9_]+)\s*(?:\(\s*([^)]*)\s*\))?\s*", name)
    if not match:
        raise UnknownName(f"unknown mass {name!r}")
    key, inline = match.groups()
    if inline:
        param = float(inline)
    if key == "inv_linear":
        return MassFunction("inv_linear", _inv_linear, in_L1=False,
                            in_L2=True, sup_norm=1.0, l1_norm=None,
                            l2_norm=math.sqrt(2.0), decay_exponent=1.0)
    if key == "example2_rational":
        return MassFunction("example2_rational", _example2, in_L1=True,
                            in_L2=True, sup_norm=3.0, l1_norm=16.0 / 3.0,
                            l2_norm=math.sqrt(118.0 / 21.0),
                            decay_exponent=2.0)
    if key == "gaussian":
        a = 1.0 if param is None else float(param)
        if not a > 0:
            raise ValueError("gaussian mass parameter must be positive")
        return MassFunction(f"gaussian({a:g})", lambda x: np.exp(-a * x * x),
                            in_L1=True, in_L2=True, sup_norm=1.0,
                            l1_norm=math.sqrt(math.pi / a),
                            l2_norm=(math.pi / (2.0 * a)) ** 0.25,
                            decay_exponent=math.inf,
                            logfunc=lambda x: -a * x * x)
    if key == "cauchy_like":
        return MassFunction("cauchy_like", _cauchy_like, in_L1=True,
                            in_L2=True, sup_norm=1.0, l1_norm=math.pi,
                            l2_norm=math.sqrt(math.pi / 2.0),
                            decay_exponent=2.0)
    raise UnknownName(f"unknown mass {name!r}; builtins are "
                      + ", ".join(BUILTIN_NAMES))


def _quad(f, a, b, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IntegrationWarning)
        return quad(f, a, b, **kw)[0]


def tabulated_mass(xs, ms, decay_exponent, name="tabulated"):
    """Mass given by samples, interpolated linearly.

    Outside the table the mass continues as a power law with the declared
    ``decay_exponent`` from each end value.
    """
    xs = np.asarray(xs, dtype=float)
    ms = np.asarray(ms, dtype=float)
    order = np.argsort(xs)
    xs, ms = xs[order], ms[order]
    if xs.size < 2 or np.any(np.diff(xs) <= 0):
        raise ValueError("table needs at least two distinct abscissae")
    if np.any(ms <= 0):
        raise ValueError("tabulated mass must be positive")
    p = float(decay_exponent)
    lo, hi = xs[0], xs[-1]

    def func(x):
        x = np.asarray(x, dtype=float)
        out = np.interp(x, xs, ms)
        right = x > hi
        left = x < lo
        if np.any(right):
            out = np.where(right, ms[-1] * (np.maximum(x, hi) / hi) ** -p
                           if hi > 0 else ms[-1] * np.exp(-(x - hi)), out)
        if np.any(left):
            out = np.where(left, ms[0] * (np.minimum(x, lo) / lo) ** -p
                           if lo < 0 else ms[0] * np.exp(x - lo), out)
        return out

    in_L1 = p > 1.0 and lo < 0 < hi
    in_L2 = p > 0.5 and lo < 0 < hi
    symmetric = bool(np.allclose(xs, -xs[::-1]) and np.allclose(ms, ms[::-1]))

    def tail(power):
        if power * p <= 1.0:
            return math.inf
        right = ms[-1] ** power * hi / (power * p - 1.0)
        left = ms[0] ** power * (-lo) / (power * p - 1.0)
        return right + left

    body1 = float(trapezoid(ms, xs))
    body2 = float(trapezoid(ms * ms, xs))
    l1 = body1 + tail(1.0) if in_L1 else None
    l2 = math.sqrt(body2 + tail(2.0)) if in_L2 else math.inf
    core = float(max(abs(lo), abs(hi)))
    return MassFunction(name, func, in_L1=in_L1, in_L2=in_L2,
                        sup_norm=float(ms.max()), l1_norm=l1, l2_norm=l2,
                        decay_exponent=p, core=core, symmetric=symmetric)


def load_mass_csv(path, decay_exponent):
    """Read a two-column ``x, m`` CSV (header optional) into a mass."""
    xs, ms = [], []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                x, m = float(row[0]), float(row[1])
            except ValueError:
                continue
            xs.append(x)
            ms.append(m)
    return tabulated_mass(xs, ms, decay_exponent, name=str(path))


# ----------------------------------------------------------------------
# validation
# ----------------------------------------------------------------------

@dataclass
class ConditionReport:
    """Result of :func:`validate_conditions`."""

    passed: bool
    failing: str | None
    in_L1: bool
    in_L2: bool
    details: dict

    def __bool__(self):
        return self.passed


def validate_conditions(m, domain=None, samples=4001):
    """Check positivity, decay to zero and square integrability of ``m``.

    The predicates are tested in order ``positive``, ``continuous``,
    ``vanishes_at_infinity``, ``decreasing_tail``, ``square_integrable``
    and, for masses declared integrable, ``l1_consistent``.  The first
    failing predicate is reported.
    """
    if domain is None:
        half = m.default_half_width()
        domain = (-half, half)
    a, b = map(float, domain)
    xs = np.linspace(a, b, samples)
    vals = np.asarray(m(xs), dtype=float)
    details = {}
    checks = []

    details["min_value"] = float(vals.min())
    if m.logfunc is not None:
        positive = bool(np.all(np.isfinite(m.log(xs))))
    else:
        positive = bool(np.all(vals > MASS_FLOOR))
    checks.append(("positive", positive))

    jump = float(np.max(np.abs(np.diff(vals)))) if vals.size > 1 else 0.0
    step = (b - a) / (samples - 1)
    details["max_step_change"] = jump
    checks.append(("continuous", jump <= 0.5 * m.sup_norm + 1e3 * step))

    # vanishing at infinity: finite positive decay exponent plus small ends
    ends = max(abs(float(m(a))), abs(float(m(b))))
    details["end_ratio"] = ends / m.sup_norm
    far = max(abs(a), abs(b), 1.0) * 1e3
    far_ratio = max(float(m(far)), float(m(-far))) / m.sup_norm
    details["far_ratio"] = far_ratio
    checks.append(("vanishes_at_infinity",
                   m.decay_exponent > 0 and far_ratio < 0.5 * details["end_ratio"] + 1e-12
                   and details["end_ratio"] < 0.5))

    core = max(m.core, 0.0)
    right = xs[xs >= core]
    left = xs[xs <= -core]
    prof = m.log if m.logfunc is not None else m
    dec_r = np.all(np.diff(prof(right)) < 0) if right.size > 1 else True
    dec_l = np.all(np.diff(prof(left)) > 0) if left.size > 1 else True
    checks.append(("decreasing_tail", bool(dec_r and dec_l)))

    checks.append(("square_integrable", m.decay_exponent > 0.5))

    if m.in_L1:
        body = _quad(m, a, b, points=[0.0] if a < 0 < b else None, limit=500)
        tail = m.tail_mass(min(abs(a), abs(b)))
        details["l1_quadrature"] = body
        details["l1_tail_bound"] = tail
        gap = abs(m.l1_norm - body)
        checks.append(("l1_consistent", gap <= 2.0 * tail + 1e-6 * m.l1_norm))

    failing = next((name for name, ok in checks if not ok), None)
    for name, ok in checks:
        details[name] = ok
    return ConditionReport(failing is None, failing, m.in_L1, m.in_L2, details)


# ----------------------------------------------------------------------
# Fourier transform
# ----------------------------------------------------------------------

def _cos_sin_transform(f, z, weight, split):
    """``int_0^inf f(x) w(z x) dx`` with ``w`` cos or sin, split at ``split``."""
    # QAWF crashes on denormal frequencies; below 1e-12 the weight is
    # 1 (or 0) to within |z| int x m(x) over any range that matters
    if abs(z) < 1e-12:
        z = 0.0
    if z == 0.0:
        if weight == "sin":
            return 0.0
        return _quad(f, 0.0, split, limit=500) + _quad(f, split, np.inf, limit=500)
    head = _quad(f, 0.0, split, weight=weight, wvar=z, limit=2000)
    tail = _quad(f, split, np.inf, weight=weight, wvar=z, limlst=200)
    return head + tail


def mass_fourier(m, z):
    """``m_hat(z) = int e^{-i z x} m(x) dx`` by adaptive quadrature.

    Raises
    ------
    NotIntegrable
        If the mass is not declared integrable.
    """
    if not m.in_L1:
        raise NotIntegrable(f"mass {m.name!r} is not in L1")
    z = float(z)
    split = 50.0

    def right(x):
        return float(m(x))

    if m.symmetric:
        return complex(2.0 * _cos_sin_transform(right, abs(z), "cos", split), 0.0)

    def left(x):
        return float(m(-x))

    re = (_cos_sin_transform(right, abs(z), "cos", split)
          + _cos_sin_transform(left, abs(z), "cos", split))
    im = (_cos_sin_transform(left, abs(z), "sin", split)
          - _cos_sin_transform(right, abs(z), "sin", split))
    return complex(re, math.copysign(1.0, z) * im if z != 0 else 0.0)


class MassTransform:
    """Callable wrapper ``z -> m_hat(z)`` for an integrable mass."""

    def __init__(self, mass):
        if not mass.in_L1:
            raise NotIntegrable(f"mass {mass.name!r} is not in L1")
        self.mass = mass

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        out = np.array([mass_fourier(self.mass, zi) for zi in z.ravel()],
                       dtype=complex).reshape(z.shape)
        return out if out.ndim else complex(out)
