"""Nystrom discretisation of the symmetric kernel operator and its spectrum.

On a uniform grid with trapezoid weights ``w`` the operator with kernel
``sqrt(m(x) m(y)) v^r(x - y)`` becomes the symmetric matrix

    S_ij = sqrt(w_i m_i) v^r(x_i - x_j) sqrt(w_j m_j).

Its eigenvalues ``mu_n`` give the decay rates ``lambda_n = 1 / mu_n`` of
the killed time-changed process, and the Nystrom extension of its
eigenvectors gives the eigenfunctions ``q_n``, orthonormal in ``L2(m)``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np
import scipy.linalg
from scipy.fft import irfft, next_fast_len, rfft
from scipy.linalg import toeplitz
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from .errors import ConvergenceFailure, DegenerateGap, OutOfGrid, RowMassError
from .levy_models import PotentialDensity

logger = logging.getLogger(__name__)

#: Largest node count for which the kernel matrix is stored densely.
DENSE_LIMIT = 4001
#: Default number of retained eigenpairs.
DEFAULT_K = 40
#: Minimal separation of the two leading Nystrom eigenvalues.
GAP_FLOOR = 1e-12
#: Eigenvalues closer than this to lambda_2 count towards its eigenspace.
MULTIPLICITY_TOL = 1e-8


@dataclass(frozen=True)
class Grid:
    """Uniform symmetric grid on ``[-L, L]`` with an odd number of nodes."""

    L: float
    N: int

    def __post_init__(self):
        if not self.L > 0:
            raise ValueError("grid half width must be positive")
        if self.N < 3 or self.N % 2 == 0:
            raise ValueError(f"grid node count must be odd and >= 3, got {self.N}")

    @classmethod
    def for_mass(cls, mass):
        """Default grid: (40, 2001) for integrable masses, else (60, 3001)."""
        return cls(40.0, 2001) if mass.in_L1 else cls(60.0, 3001)

    @classmethod
    def with_spacing(cls, L, h):
        """Grid on ``[-L, L]`` with spacing at most ``h``."""
        n = int(math.ceil(2.0 * L / h)) + 1
        return cls(float(L), n + (n % 2 == 0))

    @property
    def h(self):
        return 2.0 * self.L / (self.N - 1)

    @cached_property
    def nodes(self):
        x = np.linspace(-self.L, self.L, self.N)
        x[self.N // 2] = 0.0
        return x

    @cached_property
    def weights(self):
        w = np.full(self.N, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return w

    def refined(self):
        """The grid ``(1.25 L, 2N - 1)`` used for resolution checks."""
        return Grid(1.25 * self.L, 2 * self.N - 1)

    def locate(self, x):
        """Index of grid node ``x``, or ``None`` if ``x`` is between nodes.

        Raises
        ------
        OutOfGrid
            If ``|x| > L``.
        """
        x = float(x)
        if abs(x) > self.L * (1.0 + 1e-12):
            raise OutOfGrid(f"x={x:g} outside [-{self.L:g}, {self.L:g}]")
        pos = (x + self.L) / self.h
        idx = int(round(pos))
        if abs(pos - idx) < 1e-9:
            return idx
        return None


class KernelOperator:
    """The symmetric Nystrom matrix, stored densely or applied by FFT.

    Parameters
    ----------
    grid : Grid
    sqrt_wm : ndarray
        ``sqrt(w_i m(x_i))``.
    v_offsets : ndarray
        ``v^r(k h)`` for ``k = 0 .. N-1``; the kernel is Toeplitz.
    pd : PotentialDensity, optional
        Evaluator used for off-grid interpolation.
    dense : bool, optional
        Store the matrix; defaults to ``N <= DENSE_LIMIT``.
    """

    def __init__(self, grid, sqrt_wm, v_offsets, pd=None, provenance=None,
                 dense=None, mass=None):
        self.grid = grid
        self.mass = mass
        self.sqrt_wm = np.asarray(sqrt_wm, dtype=float)
        self.v_offsets = np.asarray(v_offsets, dtype=float)
        self.v0 = float(self.v_offsets[0])
        self.pd = pd
        self.provenance = dict(provenance or {})
        self.N = self.sqrt_wm.size
        self.is_dense = self.N <= DENSE_LIMIT if dense is None else bool(dense)
        self._matrix = None
        self._fft = None
        self._eigenvalues = None

    @classmethod
    def from_matrix(cls, S):
        """Wrap a raw symmetric matrix (no grid, no kernel structure)."""
        S = np.asarray(S, dtype=float)
        op = cls.__new__(cls)
        op.grid = None
        op.mass = None
        op.sqrt_wm = None
        op.v_offsets = None
        op.v0 = float("nan")
        op.pd = None
        op.provenance = {"source": "matrix"}
        op.N = S.shape[0]
        op.is_dense = True
        op._matrix = 0.5 * (S + S.T)
        op._fft = None
        op._eigenvalues = None
        return op

    @property
    def shape(self):
        return (self.N, self.N)

    @property
    def mass_weights(self):
        """``w_i m(x_i)``."""
        return self.sqrt_wm ** 2

    @cached_property
    def V(self):
        """Dense Toeplitz matrix ``v^r(x_i - x_j)``."""
        if self.v_offsets is None:
            raise ValueError("operator has no kernel structure")
        return toeplitz(self.v_offsets)

    @property
    def matrix(self):
        """Dense symmetric matrix ``S``."""
        if self._matrix is None:
            s = self.sqrt_wm
            S = s[:, None] * self.V * s[None, :]
            self._matrix = 0.5 * (S + S.T)
        return self._matrix

    def _circulant(self, values):
        N = self.N
        M = next_fast_len(2 * N - 1, real=True)
        col = np.zeros(M)
        col[:N] = values
        col[M - N + 1:] = values[1:][::-1]
        return M, rfft(col)

    def _toeplitz_apply(self, spectrum, y):
        M, F = spectrum
        y = np.asarray(y, dtype=float)
        pad = np.zeros((M,) + y.shape[1:])
        pad[: self.N] = y
        return irfft(F.reshape((-1,) + (1,) * (y.ndim - 1)) * rfft(pad, axis=0),
                     M, axis=0)[: self.N]

    def v_matvec(self, y):
        """Apply the bare kernel ``sum_j v(x_i - x_j) y_j``."""
        if self.is_dense:
            return self.V @ y
        if self._fft is None:
            self._fft = self._circulant(self.v_offsets)
        return self._toeplitz_apply(self._fft, y)

    def matvec(self, y):
        """Apply ``S``."""
        if self._matrix is not None or self.is_dense:
            return self.matrix @ y
        y = np.asarray(y, dtype=float)
        s = self.sqrt_wm.reshape((-1,) + (1,) * (y.ndim - 1))
        return s * self.v_matvec(s * y)

    def as_linear_operator(self):
        return LinearOperator(self.shape, matvec=self.matvec,
                              matmat=self.matvec, dtype=float)

    def trace(self):
        """``trace(S)``, the sum of all eigenvalues."""
        if self._matrix is not None:
            return float(np.trace(self._matrix))
        return self.v0 * float(np.sum(self.mass_weights))

    def frobenius_sq(self):
        """``||S||_F^2 = trace(S^2)``."""
        if self._matrix is not None or self.is_dense:
            return float(np.sum(self.matrix ** 2))
        a = self.mass_weights
        sq = self._circulant(self.v_offsets ** 2)
        return float(a @ self._toeplitz_apply(sq, a))

    def eigenvalues(self):
        """Full spectrum in descending order (dense only, cached)."""
        if self._eigenvalues is None:
            try:
                vals = scipy.linalg.eigvalsh(self.matrix)
            except np.linalg.LinAlgError as exc:
                raise ConvergenceFailure(f"dense eigvalsh failed: {exc}") from exc
            self._eigenvalues = vals[::-1]
        return self._eigenvalues

    def tampered(self, i=None, j=None, factor=-1.0):
        """Copy with entries ``(i, j)`` and ``(j, i)`` scaled by ``factor``.

        Test hook for the verification battery; defaults to the central
        diagonal entry.
        """
        i = self.N // 2 if i is None else i
        j = i if j is None else j
        S = self.matrix.copy()
        S[i, j] *= factor
        if i != j:
            S[j, i] *= factor
        op = KernelOperator(self.grid, self.sqrt_wm, self.v_offsets, self.pd,
                            dict(self.provenance, tampered=[i, j]), dense=True,
                            mass=self.mass)
        op._matrix = S
        return op


def build_kernel(model, mass, r, grid=None, pd=None, dense=None):
    """Assemble the Nystrom operator for ``(model, mass, r)`` on ``grid``.

    Raises
    ------
    ConditionViolated
        Propagated from :class:`PotentialDensity`.
    """
    if pd is None:
        pd = PotentialDensity(model, r)
    if grid is None:
        grid = Grid.for_mass(mass)
    x = grid.nodes
    mvals = np.asarray(mass(x), dtype=float)
    sqrt_wm = np.sqrt(grid.weights * mvals)
    v_off = np.asarray(pd(np.arange(grid.N) * grid.h), dtype=float)
    provenance = {"model": repr(model), "mass": mass.name, "r": float(r),
                  "L": grid.L, "N": grid.N}
    return KernelOperator(grid, sqrt_wm, v_off, pd=pd, provenance=provenance,
                          dense=dense, mass=mass)


def top_eigenpairs(op, k):
    """Leading ``k`` eigenpairs of ``op`` in descending order.

    Dense operators use LAPACK's symmetric solver; matrix-free operators
    use implicitly restarted Lanczos.  Eigenvector signs are fixed so that
    the first vector has positive sum and every other vector has its
    largest-magnitude entry positive.

    Raises
    ------
    ConvergenceFailure
        If the eigensolver does not converge.
    """
    N = op.N
    if not 1 <= k <= N:
        raise ValueError(f"need 1 <= k <= N={N}, got {k}")
    if op.is_dense or k >= N - 1:
        try:
            if k == N:
                vals, vecs = scipy.linalg.eigh(op.matrix)
            else:
                vals, vecs = scipy.linalg.eigh(op.matrix,
                                               subset_by_index=[N - k, N - 1])
        except np.linalg.LinAlgError as exc:
            raise ConvergenceFailure(f"dense eigh failed: {exc}") from exc
    else:
        try:
            vals, vecs = eigsh(op.as_linear_operator(), k=k, which="LA",
                               tol=1e-13, maxiter=max(1000, 20 * N))
        except ArpackNoConvergence as exc:
            raise ConvergenceFailure(
                f"Lanczos did not converge: {len(exc.eigenvalues)} of {k} "
                "eigenpairs found") from exc
    order = np.argsort(vals)[::-1]
    vals = vals[order]
    vecs = vecs[:, order]
    for n in range(vecs.shape[1]):
        col = vecs[:, n]
        if n == 0:
            flip = col.sum() < 0
        else:
            flip = col[np.argmax(np.abs(col))] < 0
        if flip:
            vecs[:, n] = -col
    return vals, vecs


class SurvivalSeries(NamedTuple):
    value: float
    truncation_bound: float


class CorrelationResult(NamedTuple):
    value: float
    prefactor: float


@dataclass
class SpectralSolution:
    """Eigen-data of the killed time-changed process on a grid.

    Attributes
    ----------
    op : KernelOperator
    mu : ndarray
        Nystrom eigenvalues, descending.
    lam : ndarray
        Decay rates ``1 / mu``, ascending.
    u : ndarray
        Euclidean eigenvectors, one column per retained pair.
    q : ndarray
        Eigenfunctions on the grid, shape ``(k, N)``, ``L2(m)``-orthonormal.
    """

    op: KernelOperator
    mu: np.ndarray
    lam: np.ndarray
    u: np.ndarray = field(repr=False)
    q: np.ndarray = field(repr=False)

    @property
    def grid(self):
        return self.op.grid

    @property
    def x(self):
        return self.op.grid.nodes

    @property
    def mass_weights(self):
        return self.op.mass_weights

    @cached_property
    def m(self):
        return self.op.mass_weights / self.op.grid.weights

    @property
    def v0(self):
        return self.op.v0

    @property
    def k(self):
        return self.mu.size

    @property
    def gamma(self):
        return float(self.lam[0])

    @property
    def free_energy(self):
        return math.log(self.lam[0])

    E = free_energy

    @property
    def gap(self):
        return float(self.lam[1] - self.lam[0]) if self.k > 1 else math.nan

    @property
    def corr_rate(self):
        return math.log(self.lam[1] / self.lam[0]) if self.k > 1 else math.nan

    C = corr_rate

    @cached_property
    def coef(self):
        """``<m, q_n>`` in ``L2(R)`` for each retained ``n``."""
        return self.q @ self.mass_weights

    @property
    def q1(self):
        return self.q[0]

    @property
    def K(self):
        """Survival prefactor ``K(x) = <m, q_1> q_1(x)`` on the grid."""
        return self.coef[0] * self.q[0]

    @property
    def ell1(self):
        """Single-site Gibbs density ``m q_1^2`` on the grid."""
        return self.m * self.q[0] ** 2

    # -- point evaluation -------------------------------------------
    def eigenfunction(self, n, y):
        """``q_n(y)`` at arbitrary ``y`` by Nystrom interpolation.

        ``n`` is zero-based.  Grid nodes return the tabulated value.
        """
        idx = self.grid.locate(y)
        if idx is not None:
            return float(self.q[n, idx])
        if self.op.pd is None:
            raise OutOfGrid("off-grid evaluation needs a potential density")
        kern = self.op.pd(y - self.x)
        return float(kern @ (self.mass_weights * self.q[n]) / self.mu[n])

    def K_at(self, x):
        return float(self.coef[0] * self.eigenfunction(0, x))

    def gram(self):
        """Gram matrix of the retained ``q_n`` in ``L2(m)``."""
        return (self.q * self.mass_weights) @ self.q.T

    # -- serialisation ----------------------------------------------
    def summary(self):
        return {"gamma": self.gamma, "E": self.free_energy, "gap": self.gap,
                "C": self.corr_rate, "v0": self.v0, "k": int(self.k),
                "L": self.grid.L, "N": self.grid.N}

    def to_json(self):
        doc = dict(self.summary())
        doc["provenance"] = self.op.provenance
        doc["lambda"] = self.lam.tolist()
        doc["mu"] = self.mu.tolist()
        doc["x"] = self.x.tolist()
        doc["q"] = self.q.tolist()
        return json.dumps(doc)

    def table(self):
        """Columns ``(x, q1, l1, K)`` as a 2D array."""
        return np.column_stack([self.x, self.q1, self.ell1, self.K])


def _refine_ground_state(op, q, mu, mu2):
    """Positive power iteration in ``q``-space on the dense kernel.

    Sums of positive terms keep full relative accuracy far into the tails,
    where the eigenvector returned by LAPACK only has absolute accuracy.
    """
    a = op.mass_weights
    ratio = mu2 / mu if mu2 and mu2 > 0 else 0.5
    iters = int(min(400, math.ceil(40.0 * math.log(10.0) / -math.log(min(ratio, 0.999)))))
    q = np.abs(q)
    for _ in range(iters):
        nxt = op.V @ (a * q)
        nxt /= math.sqrt(float(a @ (nxt * nxt)))
        done = np.allclose(nxt, q, rtol=1e-14, atol=0.0)
        q = nxt
        if done:
            break
    return q


def solve_from_operator(op, k=DEFAULT_K, eigenpairs=None):
    """Build a :class:`SpectralSolution` from an assembled operator.

    Parameters
    ----------
    eigenpairs : tuple, optional
        Precomputed ``(mu, u)`` (for instance from a cache); skips the solve.

    Raises
    ------
    DegenerateGap
        If ``mu_1 - mu_2 < 1e-12``.
    """
    k = min(k, op.N)
    if eigenpairs is None:
        mu, u = top_eigenpairs(op, k)
    else:
        mu, u = (np.asarray(a, dtype=float) for a in eigenpairs)
    if mu.size > 1 and mu[0] - mu[1] < GAP_FLOOR:
        raise DegenerateGap(f"mu_1 - mu_2 = {mu[0] - mu[1]:.3e}")
    a = op.mass_weights
    s = op.sqrt_wm
    q = (op.v_matvec(s[:, None] * u) / mu[None, :]).T
    if op.is_dense:
        q[0] = _refine_ground_state(op, q[0], mu[0], mu[1] if mu.size > 1 else None)
    norms = np.sqrt(np.einsum("ni,i,ni->n", q, a, q))
    q /= norms[:, None]
    if np.sum(q[0]) < 0:
        q[0] = -q[0]
    return SpectralSolution(op, mu, 1.0 / mu, u, q)


def solve_spectrum(model, mass, r, grid=None, k=DEFAULT_K, pd=None):
    """Assemble the kernel and extract the leading ``k`` eigenpairs."""
    op = build_kernel(model, mass, r, grid, pd=pd)
    return solve_from_operator(op, k)


def survival_probability(sol, x, t, n_terms=None):
    """Spectral series for ``P(zeta_x > t)``.

    Returns the clamped partial sum over ``n_terms`` modes together with
    the truncation bound ``exp(-t lambda_n) * R_c * R_q(x)``, where ``R_c``
    and ``R_q`` are the residual norms of the coefficient and
    eigenfunction sequences on the grid.
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    n = sol.k if n_terms is None else int(n_terms)
    if not 1 <= n <= sol.k:
        raise ValueError(f"n_terms must lie in [1, {sol.k}]")
    if t == 0:
        return SurvivalSeries(1.0, 0.0)
    idx = sol.grid.locate(x)
    if idx is not None:
        qx = sol.q[:n, idx]
        a_x = sol.mass_weights[idx]
    else:
        qx = np.array([sol.eigenfunction(j, x) for j in range(n)])
        a_x = None
    lam = sol.lam[:n]
    keep = lam > 0
    terms = np.exp(-t * lam[keep]) * sol.coef[:n][keep] * qx[keep]
    value = float(np.clip(terms.sum(), 0.0, 1.0))
    if n >= sol.op.N:
        bound = 0.0
    else:
        rc = math.sqrt(max(float(np.sum(sol.mass_weights)) - float(np.sum(sol.coef[:n] ** 2)), 0.0))
        if a_x is not None and a_x > 0:
            rq = math.sqrt(max(1.0 / a_x - float(np.sum(qx ** 2)), 0.0))
        else:
            rq = math.inf
        bound = math.exp(-t * sol.lam[n - 1]) * rc * rq
    return SurvivalSeries(value, bound)


def survival_asymptote(sol, x):
    """Return ``(gamma, K(x))`` for ``P(zeta_x > t) ~ K(x) exp(-gamma t)``.

    ``K`` is computed as ``<m, q_1> q_1(x)`` and cross-checked against
    ``sqrt(l_1(x) / m(x)) * int sqrt(m l_1)``.
    """
    q1x = sol.eigenfunction(0, x)
    K = float(sol.coef[0] * q1x)
    alt = abs(q1x) * float(np.sum(sol.mass_weights * np.abs(sol.q1)))
    if not math.isclose(K, alt, rel_tol=1e-9, abs_tol=1e-300):
        raise AssertionError(f"prefactor forms disagree: {K} vs {alt}")
    return sol.gamma, K


@dataclass
class GibbsStateDensity:
    """Factorised density of ``k`` consecutive spins in infinite volume.

    ``l_k(y_1..y_k) = scale * e(y_1) v(y_2 - y_1) m(y_2) ... v(y_k - y_{k-1}) e'(y_k)``
    with endpoint vectors ``e = m q_1`` and ``scale = lambda_1^(k-1)``.
    The last mass factor is carried by the endpoint, so evaluation at a
    tuple of grid indices costs ``O(k)``.
    """

    sol: SpectralSolution
    k: int

    @property
    def scale(self):
        return self.sol.gamma ** (self.k - 1)

    @property
    def endpoint(self):
        return self.sol.m * self.sol.q1

    def at_indices(self, idx):
        idx = list(idx)
        if len(idx) != self.k:
            raise ValueError(f"expected {self.k} indices")
        sol = self.sol
        val = self.scale * sol.q1[idx[0]] * sol.q1[idx[-1]]
        val *= np.prod(sol.m[idx])
        v = sol.op.v_offsets
        for a, b in zip(idx[:-1], idx[1:]):
            val *= v[abs(b - a)]
        return float(val)

    def __call__(self, ys):
        ys = np.asarray(ys, dtype=float)
        if ys.size != self.k:
            raise ValueError(f"expected {self.k} coordinates")
        sol = self.sol
        if sol.op.pd is None or sol.op.mass is None:
            raise OutOfGrid("point evaluation needs the model and the mass")
        q_first = sol.eigenfunction(0, ys[0])
        q_last = sol.eigenfunction(0, ys[-1])
        mvals = np.asarray(sol.op.mass(ys), dtype=float)
        chain = np.prod(sol.op.pd(np.diff(ys))) if self.k > 1 else 1.0
        return float(self.scale * q_first * q_last * np.prod(mvals) * chain)

    def pair_matrix(self):
        """Tabulated two-spin density on the grid (``k == 2``)."""
        if self.k != 2:
            raise ValueError("pair_matrix needs k == 2")
        e = self.endpoint
        return self.scale * e[:, None] * self.sol.op.V * e[None, :]

    def expect_pair(self, f, g, dist):
        """``E[f(Y_0) g(Y_dist)]`` under the chain state, by contraction.

        Uses only ``lambda_1``, ``q_1`` and the bare kernel; independent
        of the higher eigenpairs.
        """
        sol = self.sol
        a = sol.mass_weights
        f = _tabulate(f, sol.x)
        g = _tabulate(g, sol.x)
        b = a * sol.q1 * f
        for _ in range(dist):
            b = sol.gamma * a * sol.op.v_matvec(b)
        return float(b @ (sol.q1 * g))


def _tabulate(f, x):
    if callable(f):
        return np.asarray(f(x), dtype=float) * np.ones_like(x)
    f = np.asarray(f, dtype=float)
    if f.ndim == 0:
        return np.full_like(x, float(f))
    return f


def gibbs_state_density(sol, k):
    """``l_1`` on the grid for ``k == 1``; a factorised density otherwise."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k == 1:
        return sol.ell1
    return GibbsStateDensity(sol, k)


def correlation(sol, f, g, k):
    """Spectral expansion of the distance-``k`` correlation ``C_k(f, g)``.

    Returns the sum over the retained modes ``n >= 2`` together with the
    prefactor ``B(f, g)`` of the slowest mode (all eigenvalues within
    :data:`MULTIPLICITY_TOL` of ``lambda_2``).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    f = _tabulate(f, sol.x)
    g = _tabulate(g, sol.x)
    base = sol.q * (sol.mass_weights * sol.q1)
    af = base[1:] @ f
    ag = base[1:] @ g
    ratios = sol.lam[0] / sol.lam[1:]
    value = float(np.sum(ratios ** k * af * ag))
    lead = np.abs(sol.lam[1:] - sol.lam[1]) <= MULTIPLICITY_TOL
    prefactor = float(np.sum(af[lead] * ag[lead]))
    return CorrelationResult(value, prefactor)


@dataclass
class TransitionKernel:
    """Row-stochastic ground-state chain on the grid."""

    matrix: np.ndarray = field(repr=False)
    raw_row_sums: np.ndarray = field(repr=False)
    stationary: np.ndarray = field(repr=False)

    @property
    def max_row_drift(self):
        return float(np.max(np.abs(self.raw_row_sums - 1.0)))


def groundstate_transition(sol, drift_limit=1e-2):
    """Transition matrix ``T_ij = lambda_1 v(x_j - x_i) m_j q1_j w_j / q1_i``.

    Raises
    ------
    RowMassError
        If a raw row sum differs from one by more than ``drift_limit``.
    """
    q1 = sol.q1
    a = sol.mass_weights
    T = sol.gamma * sol.op.V * (a * q1)[None, :] / q1[:, None]
    rows = T.sum(axis=1)
    drift = np.abs(rows - 1.0)
    if np.any(drift > drift_limit):
        worst = int(np.argmax(drift))
        raise RowMassError(
            f"row {worst} sums to {rows[worst]:.6f} (limit {drift_limit:g})")
    T /= rows[:, None]
    stat = a * q1 ** 2
    stat = stat / stat.sum()
    return TransitionKernel(T, rows, stat)
