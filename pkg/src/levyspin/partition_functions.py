"""Partition functions of the dual ring spin system and related checks.

The ring of ``n`` spins with pair interaction ``-log v^r`` and pinning
``-log m`` has partition function ``Z_n = trace(S^n)``.  The open chain
``Z^f_n`` drops the closing bond.  This module also evaluates the moments
of the survival time through open chains, the Fourier-dual form of
``Z_2``, the two-sided eigenvalue bound and the small-r scaling study.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import IntegrationWarning, quad

from .errors import NotIntegrable
from .levy_models import PotentialDensity, char_exponent, v0_asymptotic
from .mass_functions import mass_fourier
from .spectral_core import Grid, build_kernel, solve_from_operator

logger = logging.getLogger(__name__)


def _quad(f, a, b, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IntegrationWarning)
        return quad(f, a, b, **kw)[0]


def log_zn_trace(op, n):
    """``log Z_n`` from the full Nystrom spectrum, overflow-safe."""
    if n < 2:
        raise ValueError("Z_n is only defined here for n >= 2")
    mu = op.eigenvalues()
    top = mu[0]
    return n * math.log(top) + math.log(float(np.sum((mu / top) ** n)))


def zn_trace(op, n):
    """``Z_n = sum_j mu_j^n`` over the full spectrum (``n >= 2``)."""
    return math.exp(log_zn_trace(op, n))


def log_zn_free(op, n):
    """``log Z^f_n`` for the open chain of ``n`` spins.

    ``Z^f_n = s^T S^(n-1) s`` with ``s_i = sqrt(w_i m_i)``, applied by
    repeated kernel-vector products with running normalisation.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    s = op.sqrt_wm
    y = s.copy()
    log_scale = 0.0
    for _ in range(n - 1):
        y = op.matvec(y)
        norm = float(np.max(np.abs(y)))
        y /= norm
        log_scale += math.log(norm)
    return log_scale + math.log(float(s @ y))


def zn_free(op, n):
    """Open-chain partition function ``Z^f_n``."""
    return math.exp(log_zn_free(op, n))


def _lattice_pair_sum(model, mass, r, grid, pd, power):
    """``sum_ij a_i a_j v(x_i - x_j)^power`` with ``a = w m``.

    On a uniform grid only ``N`` distinct offsets occur, so ``v`` is
    tabulated once and gathered row block by row block.
    """
    if grid is None:
        grid = Grid.for_mass(mass)
    if pd is None:
        pd = PotentialDensity(model, r)
    x = grid.nodes
    a = grid.weights * np.asarray(mass(x), dtype=float)
    table = np.asarray(pd(np.arange(grid.N) * grid.h), dtype=float) ** power
    idx = np.arange(grid.N)
    total = 0.0
    block = 256
    for s in range(0, grid.N, block):
        offs = np.abs(idx[s:s + block, None] - idx[None, :])
        total += float(a[s:s + block] @ (table[offs] @ a))
    return total


def z2_direct(model, mass, r, grid=None, pd=None):
    """``Z_2 = int int m(x) m(y) v^r(x - y)^2`` by 2D trapezoid quadrature."""
    return _lattice_pair_sum(model, mass, r, grid, pd, 2)


def zf2_direct(model, mass, r, grid=None, pd=None):
    """Open chain ``int int m(x) v^r(y - x) m(y)`` by 2D trapezoid quadrature."""
    return _lattice_pair_sum(model, mass, r, grid, pd, 1)


def resolvent_autocorrelation(model, r, u):
    """``int f(z) f(z + u) dz`` with ``f = 1 / (r - psi)``."""
    def f(z):
        return 1.0 / (r - float(char_exponent(model, z)))

    u = abs(float(u))
    # integrand is symmetric about z = -u/2
    c = -0.5 * u

    def g(t):
        return f(c + t) * f(c - t)

    brk = [0.5 * u] if u > 0 else None
    return 2.0 * (_quad(g, 0.0, max(1.0, u), points=brk, limit=500)
                  + _quad(g, max(1.0, u), np.inf, limit=500))


def zhat2_dual(model, mass, r, transform=None):
    """Fourier-dual evaluation of ``Z_2``.

    With ``u = z_1 - z_2`` the double integral collapses to

        Z_2 = (1 / (2 pi)^2) int |m_hat(u)|^2 A(u) du,

    where ``A`` is the autocorrelation of the resolvent ``1 / (r - psi)``.

    Parameters
    ----------
    transform : callable, optional
        Replacement for ``m_hat`` (used by tests).

    Raises
    ------
    NotIntegrable
        If ``mass`` is not integrable.
    """
    if not mass.in_L1:
        raise NotIntegrable(f"mass {mass.name!r} is not in L1")
    mhat = transform if transform is not None else (lambda z: mass_fourier(mass, z))

    def integrand(u):
        val = mhat(u)
        mag2 = float(abs(val) ** 2)
        if mag2 == 0.0:
            return 0.0
        return mag2 * resolvent_autocorrelation(model, r, u)

    split = 20.0
    total = (_quad(integrand, 0.0, split, limit=400, epsrel=1e-9)
             + _quad(integrand, split, np.inf, limit=400, epsrel=1e-9))
    if not mass.symmetric:
        total += (_quad(lambda u: integrand(-u), 0.0, split, limit=400)
                  + _quad(lambda u: integrand(-u), split, np.inf, limit=400))
    else:
        total *= 2.0
    return total / (2.0 * math.pi) ** 2


@dataclass
class ZetaMoments:
    """Moments ``E[zeta_x^n]`` for ``n = 1..n_max`` and a direct first moment."""

    x: float
    moments: np.ndarray
    reduced: np.ndarray
    first_direct: float

    def root_test(self):
        """``(E[zeta^n] / n!)^(1/n)``, tending to ``1 / gamma``."""
        n = np.arange(1, self.reduced.size + 1)
        return self.reduced ** (1.0 / n)

    def ratio_test(self):
        """Successive ratios of ``E[zeta^n] / n!``."""
        return self.reduced[1:] / self.reduced[:-1]


def zeta_moments(op, x, n_max):
    """Moments of the survival time from ``x`` by open-chain contraction.

    ``E[zeta_x^n] = n! Z~_n(x)`` where ``Z~_n(x)`` chains ``v^r(. - x)``
    with ``n - 1`` further kernel factors and ``n`` mass factors.  The first
    moment is also returned from ``int v^r(y) m(x + y) dy`` on the shifted
    grid ``y = x_i - x``.
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    grid = op.grid
    a = op.mass_weights
    nodes = grid.nodes
    start = op.pd(nodes - x)
    b = start * a
    reduced = [float(b.sum())]
    for _ in range(n_max - 1):
        b = a * op.v_matvec(b)
        reduced.append(float(b.sum()))
    reduced = np.asarray(reduced)
    fact = np.array([math.factorial(n) for n in range(1, n_max + 1)], dtype=float)
    ys = nodes - x
    direct = float(np.sum(grid.weights * op.pd(ys) * op.mass(x + ys)))
    return ZetaMoments(float(x), reduced * fact, reduced, direct)


@dataclass
class BoundReport:
    lower: float
    lam1: float
    upper: float

    @property
    def passed(self):
        return self.lower <= self.lam1 <= self.upper

    def as_tuple(self):
        return self.lower, self.upper, self.passed


def eigen_bounds(lam1, v0, l1_norm, z2):
    """Two-sided bound ``1/(||m||_1 v0) <= lambda_1 <= ||m||_1 v0 / Z_2``."""
    if l1_norm is None:
        raise NotIntegrable("bound needs an integrable mass")
    return BoundReport(1.0 / (l1_norm * v0), float(lam1), l1_norm * v0 / z2)


@dataclass
class PartitionReport:
    """Table of ``(n, Z_n, Z^f_n, -log Z_n / n)`` plus reference data."""

    n: np.ndarray
    log_zn: np.ndarray
    log_zf: np.ndarray
    E: float
    v0: float
    z2_dual: float | None = None
    bounds: BoundReport | None = None
    extra: dict = field(default_factory=dict)

    @property
    def free_energy_periodic(self):
        return -self.log_zn / self.n

    @property
    def free_energy_free(self):
        return -self.log_zf / self.n

    def boundary_inequality_holds(self):
        """``Z_n <= v0 Z^f_n`` for every tabulated ``n`` (relative slack 1e-12)."""
        return bool(np.all(self.log_zn <= math.log(self.v0) + self.log_zf + 1e-12))

    def rows(self):
        for n, lz, lf in zip(self.n, self.log_zn, self.log_zf):
            yield int(n), math.exp(lz), math.exp(lf), -lz / n


def partition_report(sol, n_values, mass=None, with_dual=False):
    """Tabulate periodic and free partition functions for ``sol``."""
    op = sol.op
    n_values = np.asarray(list(n_values), dtype=int)
    log_zn = np.array([log_zn_trace(op, int(n)) for n in n_values])
    log_zf = np.array([log_zn_free(op, int(n)) for n in n_values])
    rep = PartitionReport(n_values, log_zn, log_zf, sol.free_energy, op.v0)
    mass = mass if mass is not None else op.mass
    if mass is not None and mass.in_L1:
        z2 = op.frobenius_sq()
        rep.bounds = eigen_bounds(sol.gamma, op.v0, mass.l1_norm, z2)
        if with_dual and op.pd is not None:
            rep.z2_dual = zhat2_dual(op.pd.model, mass, op.pd.r)
    return rep


@dataclass
class SmallRRow:
    r: float
    gamma: float
    prediction: float
    L: float
    N: int

    @property
    def ratio(self):
        return self.gamma / self.prediction


def small_r_domain(model, r, floor=40.0, factor=8.0):
    """Half width ``max(floor, factor * r^(-1/alpha))``."""
    alpha, _ = model.small_y_power()
    return max(floor, factor * r ** (-1.0 / alpha))


def small_r_prediction(model, mass, r):
    """``1 / (||m||_1 v0_asym(r))``, the small-r equivalent of ``gamma``."""
    if not mass.in_L1:
        raise NotIntegrable("small-r study needs an integrable mass")
    return 1.0 / (mass.l1_norm * v0_asymptotic(model, r))


def small_r_study(model, mass, r_list, h=0.05):
    """Leading decay rate against its small-r prediction for each ``r``.

    Each entry uses a grid of spacing ``h`` on the widened domain from
    :func:`small_r_domain` and the matrix-free eigensolver.
    """
    rows = []
    for r in r_list:
        L = small_r_domain(model, r)
        grid = Grid.with_spacing(L, h)
        op = build_kernel(model, mass, r, grid, dense=False)
        sol = solve_from_operator(op, k=2)
        pred = small_r_prediction(model, mass, r)
        logger.info("small-r r=%g N=%d gamma=%.6g ratio=%.4f", r, grid.N,
                    sol.gamma, sol.gamma / pred)
        rows.append(SmallRRow(float(r), sol.gamma, pred, L, grid.N))
    return rows


def fitted_exponent(rows):
    """Least-squares slope of ``log gamma`` against ``log r``."""
    lr = np.log([row.r for row in rows])
    lg = np.log([row.gamma for row in rows])
    return float(np.polyfit(lr, lg, 1)[0])
