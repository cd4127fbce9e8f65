"""Monte Carlo for the killed time-changed process and its spin dual.

Three samplers live here:

* path simulation of ``zeta_x = A_x(e_r)`` with the clock integrated by
  the trapezoid rule on a fixed mesh;
* the ground-state Markov chain on the Nystrom grid;
* single-site random-walk Metropolis for the ring spin system.

Every sampler takes an integer seed and derives independent
counter-based streams from it, so results do not depend on how work is
split across blocks.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AcceptanceOutOfRange, CapExceeded, InsufficientTail
from .levy_models import PotentialDensity
from .spectral_core import groundstate_transition

logger = logging.getLogger(__name__)

#: Wilson score quantile for 95% intervals.
Z95 = 1.959963984540054


def _streams(seed, count):
    """``count`` independent Philox generators spawned from ``seed``."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


# ----------------------------------------------------------------------
# path simulation
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class PathConfig:
    """Settings for :func:`simulate_zeta`.

    ``T_cap`` defaults to ``20 / r`` at simulation time when left at zero.
    """

    dt: float = 1e-2
    seed: int = 0
    n_paths: int = 200_000
    T_cap: float = 0.0
    block: int = 50_000

    def __post_init__(self):
        if not 0 < self.dt <= 1e-2:
            raise ValueError(f"dt must lie in (0, 0.01], got {self.dt}")
        if self.n_paths < 1:
            raise ValueError("n_paths must be positive")

    def cap(self, r):
        cap = self.T_cap if self.T_cap > 0 else 20.0 / r
        if cap < 20.0 / r:
            raise ValueError(f"T_cap must be at least 20/r = {20.0 / r:g}")
        return cap


def stable_increments(rng, alpha, size):
    """Standard symmetric stable variates, ``E exp(i y X) = exp(-|y|^alpha)``.

    Chambers-Mallows-Stuck construction for zero skewness.
    """
    if alpha == 2.0:
        return math.sqrt(2.0) * rng.standard_normal(size)
    V = rng.uniform(-0.5 * math.pi, 0.5 * math.pi, size)
    W = rng.standard_exponential(size)
    return (np.sin(alpha * V) / np.cos(V) ** (1.0 / alpha)
            * (np.cos((1.0 - alpha) * V) / W) ** ((1.0 - alpha) / alpha))


def levy_increments(model, rng, dt):
    """Return a sampler ``size -> increments`` over time steps ``dt``.

    ``dt`` may be an array matching ``size`` (used for the final partial
    step of each path).
    """
    def draw(size):
        step = np.broadcast_to(dt, size)
        out = np.zeros(size)
        if model.kind == "stable":
            scale = (model.c * step) ** (1.0 / model.alpha)
            out += scale * stable_increments(rng, model.alpha, size)
            return out
        out += np.sqrt(model.A * step) * rng.standard_normal(size)
        if model.kind == "brownian_jumps":
            counts = rng.poisson(model.jump_rate * step)
            out += model.jump.sample(rng, counts)
        return out

    return draw


@dataclass
class ZetaSample:
    """Samples of ``zeta_x`` together with the exponential clocks."""

    zeta: np.ndarray
    e_r: np.ndarray
    zeta_coarse: np.ndarray | None = None
    capped: int = 0

    def __len__(self):
        return self.zeta.size


def _simulate_block(model, mass, r, x, dt, n, rng, cap, coupled):
    e_r = rng.exponential(1.0 / r, n)
    n_capped = int(np.sum(e_r > cap))
    if n_capped:
        raise CapExceeded(f"{n_capped} clocks exceed T_cap={cap:g}")
    # longest clocks first, so the live paths always form a leading slice
    order = np.argsort(-e_r, kind="stable")
    e_sorted = e_r[order]
    steps = np.floor(e_sorted / dt).astype(np.int64)
    partial = e_sorted - steps * dt
    # live[k] = number of paths with more than k full steps
    live = np.searchsorted(-steps, -np.arange(int(steps[0]) + 1), side="left")
    zeta = np.zeros(n)
    coarse = np.zeros(n) if coupled else None
    pos = np.zeros(n)
    m_prev = np.asarray(mass(x + pos), dtype=float) * np.ones(n)
    m_pair = m_prev.copy()  # value at the last even mesh point
    draw = levy_increments(model, rng, dt)
    ended = n
    for k in range(int(steps[0]) + 1):
        n_live = int(live[k])
        # paths with exactly k full steps finish with their partial step
        if n_live < ended:
            sl = slice(n_live, ended)
            tail = partial[sl]
            pos_end = pos[sl] + levy_increments(model, rng, tail)(ended - n_live)
            m_end = np.asarray(mass(x + pos_end), dtype=float)
            zeta[sl] += 0.5 * tail * (m_prev[sl] + m_end)
            if coupled:
                rem = tail + (k % 2) * dt
                coarse[sl] += 0.5 * rem * (m_pair[sl] + m_end)
            ended = n_live
        if n_live == 0:
            break
        sl = slice(0, n_live)
        pos[sl] += draw(n_live)
        m_new = np.asarray(mass(x + pos[sl]), dtype=float)
        zeta[sl] += 0.5 * dt * (m_prev[sl] + m_new)
        if coupled and k % 2 == 1:
            coarse[sl] += dt * (m_pair[sl] + m_new)
            m_pair[sl] = m_new
        m_prev[sl] = m_new
    inv = np.empty(n, dtype=np.int64)
    inv[order] = np.arange(n)
    return zeta[inv], e_r, (coarse[inv] if coupled else None)


def simulate_zeta(model, mass, r, x, cfg, coupled_coarse=False):
    """Sample ``zeta_x = A_x(e_r)``.

    The clock ``A_x(s) = int_0^s m(x + xi(u)) du`` is integrated by the
    trapezoid rule on the ``dt`` mesh, with the last step shortened to end
    exactly at ``e_r``.  With ``coupled_coarse`` the same paths are also
    integrated on the ``2 dt`` mesh, which isolates the discretisation
    bias.

    Raises
    ------
    CapExceeded
        If an exponential clock exceeds ``T_cap``.
    """
    cap = cfg.cap(r)
    n_blocks = int(math.ceil(cfg.n_paths / cfg.block))
    rngs = _streams(cfg.seed, n_blocks)
    zs, es, cs = [], [], []
    remaining = cfg.n_paths
    for rng in rngs:
        n = min(cfg.block, remaining)
        remaining -= n
        z, e, c = _simulate_block(model, mass, r, x, cfg.dt, n, rng, cap,
                                  coupled_coarse)
        zs.append(z)
        es.append(e)
        cs.append(c)
    coarse = np.concatenate(cs) if coupled_coarse else None
    return ZetaSample(np.concatenate(zs), np.concatenate(es), coarse)


def wilson_interval(k, n, z=Z95):
    """Wilson score interval for ``k`` successes out of ``n``."""
    k = np.asarray(k, dtype=float)
    p = k / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    # the endpoints bracket p exactly; rounding can break that at p = 0 or 1
    return np.minimum(centre - half, p), np.maximum(centre + half, p)


@dataclass
class SurvivalEstimate:
    """Empirical survival curve with intervals and a fitted decay rate."""

    t: np.ndarray
    p: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    n: int
    gamma_hat: float = math.nan
    gamma_se: float = math.nan
    fit_window: tuple = field(default=(math.nan, math.nan))

    @property
    def stderr(self):
        return np.sqrt(self.p * (1.0 - self.p) / self.n)

    def rows(self):
        return zip(self.t, self.p, self.lo, self.hi)


def survival_from_samples(zeta, t_grid, window=None, min_tail=200):
    """Survival curve of ``zeta`` on ``t_grid`` and a WLS fit of the rate.

    The fit regresses ``log p`` on ``t`` over ``window`` with weights
    ``n p / (1 - p)``, the inverse delta-method variance of ``log p``.

    Raises
    ------
    InsufficientTail
        If fewer than ``min_tail`` samples exceed the largest ``t``.
    """
    zeta = np.sort(np.asarray(zeta))
    t_grid = np.asarray(t_grid, dtype=float)
    n = zeta.size
    survivors = n - np.searchsorted(zeta, t_grid, side="right")
    survivors = np.where(t_grid <= 0, n, survivors)
    if survivors[-1] < min_tail:
        raise InsufficientTail(
            f"only {survivors[-1]} survivors at t={t_grid[-1]:g}")
    p = survivors / n
    lo, hi = wilson_interval(survivors, n)
    est = SurvivalEstimate(t_grid, p, lo, hi, n)
    if window is not None:
        a, b = window
        sel = (t_grid >= a) & (t_grid <= b) & (p > 0) & (p < 1)
        if np.count_nonzero(sel) >= 2:
            tt, pp = t_grid[sel], p[sel]
            wts = n * pp / (1.0 - pp)
            X = np.column_stack([np.ones_like(tt), tt])
            XtW = X.T * wts
            cov = np.linalg.inv(XtW @ X)
            beta = cov @ (XtW @ np.log(pp))
            est.gamma_hat = float(-beta[1])
            est.gamma_se = float(math.sqrt(cov[1, 1]))
            est.fit_window = (float(a), float(b))
    return est


def estimate_survival(model, mass, r, x, t_grid, cfg, window=None):
    """Simulate ``zeta_x`` and summarise its survival function."""
    sample = simulate_zeta(model, mass, r, x, cfg)
    return survival_from_samples(sample.zeta, t_grid, window)


# ----------------------------------------------------------------------
# ground-state chain
# ----------------------------------------------------------------------

def _row_search(cdf, rows, u):
    """Vectorised ``searchsorted(cdf[rows[i]], u[i])`` by bisection."""
    lo = np.zeros(rows.size, dtype=np.int64)
    hi = np.full(rows.size, cdf.shape[1] - 1, dtype=np.int64)
    while True:
        open_ = lo < hi
        if not open_.any():
            return lo
        mid = (lo + hi) // 2
        go_right = cdf[rows, mid] < u
        lo = np.where(open_ & go_right, mid + 1, lo)
        hi = np.where(open_ & ~go_right, mid, hi)


def sample_groundstate_chain(sol, k, n_samples, seed, kernel=None):
    """Draw ``(Y_0, ..., Y_k)`` from the ground-state chain.

    ``Y_0`` follows ``l_1`` by inverse CDF over grid cells (uniform within
    each cell); each step samples the next cell from a row of the
    transition matrix.  The exponential holding times are not drawn since
    the kernel already integrates them out.

    Returns
    -------
    positions, indices : ndarray, shape (n_samples, k + 1)
    """
    if kernel is None:
        kernel = groundstate_transition(sol)
    rng = _streams(seed, 1)[0]
    grid = sol.grid
    cdf0 = np.cumsum(kernel.stationary)
    cdf0 /= cdf0[-1]
    rows_cdf = np.cumsum(kernel.matrix, axis=1)
    rows_cdf /= rows_cdf[:, -1:]
    idx = np.empty((n_samples, k + 1), dtype=np.int64)
    idx[:, 0] = np.minimum(np.searchsorted(cdf0, rng.random(n_samples)), grid.N - 1)
    for j in range(1, k + 1):
        idx[:, j] = _row_search(rows_cdf, idx[:, j - 1], rng.random(n_samples))
    h = grid.h
    pos = grid.nodes[idx] + rng.uniform(-0.5 * h, 0.5 * h, idx.shape)
    np.clip(pos, -grid.L, grid.L, out=pos)
    return pos, idx


# ----------------------------------------------------------------------
# ring Metropolis sampler
# ----------------------------------------------------------------------

def metropolis_accept_prob(log_ratio):
    """``min(1, exp(log_ratio))``, the Metropolis acceptance probability."""
    return np.exp(np.minimum(0.0, log_ratio))


def metropolis_matrix(log_target, proposal):
    """Transition matrix of Metropolis on a finite state space.

    ``proposal`` must be symmetric; used to test the acceptance rule.
    """
    log_target = np.asarray(log_target, dtype=float)
    Q = np.asarray(proposal, dtype=float)
    acc = metropolis_accept_prob(log_target[None, :] - log_target[:, None])
    P = Q * acc
    np.fill_diagonal(P, 0.0)
    np.fill_diagonal(P, 1.0 - P.sum(axis=1))
    return P


class RingPotentials:
    """Pair interaction ``-log v^r`` and pinning ``-log m`` for the ring.

    For Gaussian-type models without jumps the interaction is linear in
    ``|d|`` and evaluated exactly; otherwise ``-log v^r`` is tabulated on a
    fine grid in ``s = |d|^(alpha-1)`` (which straightens the cusp at the
    origin) and interpolated linearly, with a power-law continuation
    beyond the table.
    """

    def __init__(self, pd, mass, d_max=200.0, n_table=20_001):
        self.pd = pd
        self.mass = mass
        model = pd.model
        self.exact = pd.backend == "closed_form"
        if self.exact:
            self._kappa = pd.decay_rate()
            self._shift = -math.log(pd.v0)
        else:
            alpha = model.alpha if model.kind == "stable" else 2.0
            self._beta = alpha - 1.0
            s = np.linspace(0.0, d_max ** self._beta, n_table)
            d = s ** (1.0 / self._beta)
            self._s = s
            self._d_max = d_max
            self._table = -np.log(pd(d))
            self._tail_slope = (self._table[-1] - self._table[-2]) / (d[-1] - d[-2])

    def interaction(self, d):
        d = np.abs(d)
        if self.exact:
            return self._kappa * d + self._shift
        s = d ** self._beta
        out = np.interp(s, self._s, self._table)
        far = d > self._d_max
        if np.any(far):
            out = np.where(far, self._table[-1] + self._tail_slope * (d - self._d_max), out)
        return out

    def pinning(self, x):
        return -self.mass.log(x)

    def energy(self, omega):
        """Ring energy ``sum_j V(w_{j+1} - w_j) + U(w_j)`` (last axis = ring)."""
        omega = np.asarray(omega, dtype=float)
        nxt = np.roll(omega, -1, axis=-1)
        return np.sum(self.interaction(nxt - omega) + self.pinning(omega), axis=-1)


@dataclass(frozen=True)
class MCMCConfig:
    """Settings for :func:`gibbs_mcmc`.

    ``sweeps`` is the total number of post-burn-in sweeps, pooled over
    ``chains`` chains that run side by side.
    """

    sweeps: int = 1_000_000
    chains: int = 4
    burn_in: int = 10_000
    seed: int = 0
    target_accept: float = 0.4
    hist_range: float = 8.0
    hist_bins: int = 160
    batches: int = 50
    snapshot_every: int = 1000


@dataclass
class PairStats:
    """Per-chain batch sums of ``f``, ``g`` and ``f(w_j) g(w_{j+k})``.

    Arrays have shape ``(chains, batches)`` or ``(chains, batches, len(k))``;
    every entry is a site-and-sweep average within one batch.
    """

    f: object
    g: object
    k: np.ndarray
    mean_f: np.ndarray
    mean_g: np.ndarray
    mean_fg: np.ndarray


@dataclass
class SpinChainState:
    """Accumulated output of the ring sampler."""

    n: int
    omega: np.ndarray
    hist_counts: np.ndarray
    hist_edges: np.ndarray
    hist_overflow: int
    snapshots: np.ndarray = field(repr=False)
    sweeps: int = 0
    proposal_scale: float = 1.0
    acceptance: float = math.nan
    chains: int = 1
    pairs: PairStats | None = None

    @property
    def samples(self):
        return int(self.hist_counts.sum()) + self.hist_overflow

    def density(self):
        """Histogram estimate of the single-site density."""
        width = np.diff(self.hist_edges)
        return self.hist_counts / (self.samples * width)


def _half_sweep(omega, sites, pot, scale, rng):
    """Metropolis update of the given (mutually non-adjacent) sites."""
    n = omega.shape[1]
    cur = omega[:, sites]
    left = omega[:, (sites - 1) % n]
    right = omega[:, (sites + 1) % n]
    prop = cur + scale * rng.standard_normal(cur.shape)
    d_old = (pot.interaction(cur - left) + pot.interaction(right - cur)
             + pot.pinning(cur))
    d_new = (pot.interaction(prop - left) + pot.interaction(right - prop)
             + pot.pinning(prop))
    accept = rng.random(cur.shape) < metropolis_accept_prob(d_old - d_new)
    omega[:, sites] = np.where(accept, prop, cur)
    return int(np.count_nonzero(accept))


def _colour_classes(n):
    if n == 2:
        return [np.array([0]), np.array([1])]
    if n % 2 == 0:
        return [np.arange(0, n, 2), np.arange(1, n, 2)]
    return [np.arange(0, n - 1, 2), np.arange(1, n - 1, 2), np.array([n - 1])]


def _sweep(omega, classes, pot, scale, rng):
    return sum(_half_sweep(omega, c, pot, scale, rng) for c in classes)


def gibbs_mcmc(model, mass, r, n, cfg=None, pd=None, pair_stats=None):
    """Random-walk Metropolis for the ring Gibbs measure of ``n`` spins.

    Chains start at the all-zero configuration.  During burn-in the
    Gaussian proposal scale is adapted towards ``cfg.target_accept``; it
    is then frozen.  Sites of one colour are updated together (they do
    not interact), which keeps detailed balance for each partial sweep.

    Parameters
    ----------
    pair_stats : tuple (f, g, k_list), optional
        Observables and distances whose pair products are accumulated
        for :func:`mcmc_correlations`.

    Raises
    ------
    AcceptanceOutOfRange
        If the tuned acceptance rate is outside ``[0.15, 0.6]``.
    """
    if n < 2:
        raise ValueError("ring needs at least two spins")
    cfg = cfg or MCMCConfig()
    pd = pd or PotentialDensity(model, r)
    pot = RingPotentials(pd, mass)
    rng = _streams(cfg.seed, 1)[0]
    chains = cfg.chains
    omega = np.zeros((chains, n))
    classes = _colour_classes(n)
    scale = 1.0
    window = 100
    acc = 0
    for sweep in range(1, cfg.burn_in + 1):
        acc += _sweep(omega, classes, pot, scale, rng)
        if sweep % window == 0:
            rate = acc / (window * chains * n)
            scale *= math.exp(rate - cfg.target_accept)
            acc = 0
    per_chain = max(cfg.batches, int(math.ceil(cfg.sweeps / chains)))
    batch_len = per_chain // cfg.batches
    per_chain = batch_len * cfg.batches

    edges = np.linspace(-cfg.hist_range, cfg.hist_range, cfg.hist_bins + 1)
    counts = np.zeros(cfg.hist_bins, dtype=np.int64)
    overflow = 0
    inv_w = cfg.hist_bins / (2.0 * cfg.hist_range)
    snaps = []
    pairs = None
    if pair_stats is not None:
        f, g, k_list = pair_stats
        ks = np.asarray(list(k_list), dtype=int)
        pairs = PairStats(f, g, ks, np.zeros((chains, cfg.batches)),
                          np.zeros((chains, cfg.batches)),
                          np.zeros((chains, cfg.batches, ks.size)))
    acc = 0
    for sweep in range(per_chain):
        acc += _sweep(omega, classes, pot, scale, rng)
        bins = np.floor((omega.ravel() + cfg.hist_range) * inv_w).astype(np.int64)
        inside = (bins >= 0) & (bins < cfg.hist_bins)
        counts += np.bincount(bins[inside], minlength=cfg.hist_bins)
        overflow += int(inside.size - np.count_nonzero(inside))
        if pairs is not None:
            b = sweep // batch_len
            F = np.broadcast_to(pairs.f(omega), omega.shape)
            G = np.broadcast_to(pairs.g(omega), omega.shape)
            pairs.mean_f[:, b] += F.mean(axis=1)
            pairs.mean_g[:, b] += G.mean(axis=1)
            for i, k in enumerate(pairs.k):
                pairs.mean_fg[:, b, i] += (F * np.roll(G, -k, axis=1)).mean(axis=1)
        if sweep % cfg.snapshot_every == 0:
            snaps.append(omega.copy())
    if pairs is not None:
        pairs.mean_f /= batch_len
        pairs.mean_g /= batch_len
        pairs.mean_fg /= batch_len
    rate = acc / (per_chain * chains * n)
    if not 0.15 <= rate <= 0.6:
        raise AcceptanceOutOfRange(f"acceptance {rate:.3f} outside [0.15, 0.6]")
    logger.info("mcmc n=%d sweeps=%d scale=%.3f acceptance=%.3f", n,
                per_chain * chains, scale, rate)
    return SpinChainState(n, omega, counts, edges, overflow, np.array(snaps),
                          per_chain * chains, scale, rate, chains, pairs)


def ring_energy(model, mass, r, omega, pd=None):
    """Hamiltonian of a ring configuration (or a stack of them)."""
    pd = pd or PotentialDensity(model, r)
    return RingPotentials(pd, mass).energy(omega)


@dataclass
class MCMCCorrelations:
    """Plug-in correlations with batch-means errors."""

    k: np.ndarray
    value: np.ndarray
    err: np.ndarray
    between_chain_sd: np.ndarray

    def decay_rate(self, k_min=None, k_max=None):
        """Weighted least-squares slope of ``-log |C_k|`` against ``k``."""
        sel = np.abs(self.value) > 0
        if k_min is not None:
            sel &= self.k >= k_min
        if k_max is not None:
            sel &= self.k <= k_max
        v = np.abs(self.value[sel])
        # delta method: var(log|C|) = (err / C)^2
        w = (v / np.maximum(self.err[sel], 1e-300)) ** 2
        X = np.column_stack([np.ones(v.size), self.k[sel]])
        XtW = X.T * w
        beta = np.linalg.solve(XtW @ X, XtW @ np.log(v))
        return float(-beta[1])


def mcmc_correlations(state, f=None, g=None, k_list=None):
    """``C_k(f, g) = E[f(w_0) g(w_k)] - E f E g`` from accumulated statistics.

    The estimate pools all chains and batches; its error is the standard
    error over the ``chains * batches`` batch means (batches long enough
    to be nearly independent).  The spread of per-chain estimates is
    reported alongside.

    Raises
    ------
    ValueError
        If the state carries no pair statistics for the requested
        observables or distances.
    """
    pairs = state.pairs
    if pairs is None:
        raise ValueError("state was sampled without pair statistics")
    if (f is not None and f is not pairs.f) or (g is not None and g is not pairs.g):
        raise ValueError("pair statistics were accumulated for other observables")
    ks = pairs.k if k_list is None else np.asarray(list(k_list), dtype=int)
    cols = []
    for k in ks:
        hit = np.flatnonzero(pairs.k == k)
        if hit.size == 0:
            raise ValueError(f"no pair statistics at distance {k}")
        cols.append(int(hit[0]))
    mf = pairs.mean_f.mean()
    mg = pairs.mean_g.mean()
    vals, errs, spread = [], [], []
    for i in cols:
        batch = pairs.mean_fg[:, :, i] - mf * mg
        vals.append(float(batch.mean()))
        errs.append(float(batch.std(ddof=1) / math.sqrt(batch.size)))
        per_chain = (pairs.mean_fg[:, :, i].mean(axis=1)
                     - pairs.mean_f.mean(axis=1) * pairs.mean_g.mean(axis=1))
        spread.append(float(per_chain.std(ddof=1)) if per_chain.size > 1 else 0.0)
    return MCMCCorrelations(ks, np.array(vals), np.array(errs), np.array(spread))
