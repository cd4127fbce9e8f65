"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines are
repeated in the terminal summary.  ``python3 tests/test_acceptance.py``
runs the same checks without pytest and prints only the verdicts.
"""

import math
import time

import numpy as np
import pytest

from levyspin.levy_models import LevyModel, PotentialDensity, potential_l1_check
from levyspin.mass_functions import BUILTIN_NAMES, builtin_mass
from levyspin.monte_carlo import (MCMCConfig, PathConfig, gibbs_mcmc,
                                  mcmc_correlations, sample_groundstate_chain,
                                  simulate_zeta, survival_from_samples)
from levyspin.partition_functions import (eigen_bounds, fitted_exponent,
                                          log_zn_free, log_zn_trace,
                                          small_r_study, z2_direct,
                                          zeta_moments, zhat2_dual)
from levyspin.spectral_core import (Grid, build_kernel, gibbs_state_density,
                                    groundstate_transition, solve_from_operator,
                                    solve_spectrum, survival_asymptote)

VERDICTS = {}

R = 0.5
LOG2 = math.log(2.0)


def verdict(number, checks):
    """Record and print one line for a criterion, then assert every check.

    ``checks`` is a list of ``(label, passed, detail)``.
    """
    ok = all(passed for _, passed, _ in checks)
    parts = [f"{label}: {detail}{'' if passed else ' [x]'}"
             for label, passed, detail in checks]
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}  " + "; ".join(parts)
    VERDICTS[number] = line
    print(line)
    failed = [label for label, passed, _ in checks if not passed]
    assert not failed, f"criterion {number} failed: {', '.join(failed)}"


def within(label, value, target, tol, fmt=".6g"):
    err = abs(value - target)
    return (label, err < tol, f"{value:{fmt}} vs {target:{fmt}} (|err| {err:.2e} < {tol:g})")


@pytest.fixture(scope="module")
def bm():
    return LevyModel.brownian(1.0)


@pytest.fixture(scope="module")
def sol1(bm):
    return solve_spectrum(bm, builtin_mass("inv_linear"), R, Grid(60.0, 3001))


@pytest.fixture(scope="module")
def sol2(bm):
    return solve_spectrum(bm, builtin_mass("example2_rational"), R, Grid(40.0, 2001))


def test_criterion_01_example1_spectrum(bm):
    t0 = time.perf_counter()
    sol = solve_spectrum(bm, builtin_mass("inv_linear"), R, Grid(60.0, 3001))
    elapsed = time.perf_counter() - t0
    x = sol.x
    sel = np.abs(x) <= 10.0
    exact = math.sqrt(2.0 / 3.0) * (1.0 + np.abs(x[sel])) * np.exp(-np.abs(x[sel]))
    rel = float(np.max(np.abs(sol.q1[sel] - exact) / exact))
    _, K0 = survival_asymptote(sol, 0.0)
    verdict(1, [
        within("lambda_1", sol.gamma, 1.0, 1e-3),
        within("E", sol.free_energy, 0.0, 1e-3),
        ("q1 max rel err |x|<=10", rel < 1e-2, f"{rel:.2e} < 1e-2"),
        within("K(0)", K0, 4.0 / 3.0, 1e-2),
        ("runtime", elapsed < 60.0, f"{elapsed:.1f}s < 60s"),
    ])


def test_criterion_02_example2_spectrum(sol2):
    verdict(2, [
        within("lambda_1", sol2.gamma, 0.5, 1e-3),
        within("E", sol2.free_energy, -LOG2, 2e-3),
    ])


def test_criterion_03_trace_identities(bm):
    # the mass tail beyond |x| = L carries about 3.9 / L of ||m||_1, and the
    # kink of v^2 on the diagonal biases Z_2 by about 5 h^2
    mass = builtin_mass("example2_rational")
    grid = Grid(120.0, 8001)
    pd = PotentialDensity(bm, R)
    op = build_kernel(bm, mass, R, grid, pd=pd)
    mu = op.eigenvalues()
    trace_ref = pd.v0 * mass.l1_norm
    s1 = float(np.sum(mu))
    s2 = float(np.sum(mu ** 2))
    direct = z2_direct(bm, mass, R, grid, pd)
    dual = zhat2_dual(bm, mass, R)

    def rel(a, b):
        return abs(a - b) / abs(b)

    verdict(3, [
        ("sum mu = v0 ||m||_1", rel(s1, trace_ref) < 1e-2,
         f"{s1:.6f} vs {trace_ref:.6f} (rel {rel(s1, trace_ref):.2e})"),
        ("sum mu^2 vs direct", rel(s2, direct) < 5e-3,
         f"{s2:.6f} vs {direct:.6f} (rel {rel(s2, direct):.2e})"),
        ("sum mu^2 vs dual", rel(s2, dual) < 5e-3,
         f"{s2:.6f} vs {dual:.6f} (rel {rel(s2, dual):.2e})"),
        ("direct vs dual", rel(direct, dual) < 5e-3,
         f"rel {rel(direct, dual):.2e}"),
    ])


def test_criterion_04_bound_suite():
    models = {"brownian": LevyModel.brownian(1.0), "stable1.5": LevyModel.stable(1.5, 1.0)}
    masses = [builtin_mass(name) for name in BUILTIN_NAMES]
    masses = [m for m in masses if m.in_L1]
    checks = []
    worst = math.inf
    for mname, model in models.items():
        for mass in masses:
            for r in (0.25, 0.5, 1.0):
                sol = solve_spectrum(model, mass, r, Grid.for_mass(mass), k=2)
                b = eigen_bounds(sol.gamma, sol.v0, mass.l1_norm, sol.op.frobenius_sq())
                slack = min(b.lam1 - b.lower, b.upper - b.lam1)
                worst = min(worst, slack)
                if not b.passed:
                    checks.append((f"{mname}/{mass.name}/r={r}", False,
                                   f"{b.lower:.4g} <= {b.lam1:.4g} <= {b.upper:.4g}"))
    n_cases = len(models) * len(masses) * 3
    checks.insert(0, ("cases", len(checks) == 0,
                      f"{n_cases} cases over {len(masses)} L1 masses, min slack {worst:.3g}"))
    verdict(4, checks)


def test_criterion_05_free_energy(sol1, sol2):
    n = 64
    checks = []
    for name, sol in (("ex1", sol1), ("ex2", sol2)):
        E = sol.free_energy
        per = -log_zn_trace(sol.op, n) / n
        free = -log_zn_free(sol.op, n) / n
        checks.append(within(f"{name} periodic n=64", per, E, 1e-2))
        checks.append(within(f"{name} free n=64", free, E, 1e-2))
        ns = list(range(2, 17)) + [32, 64]
        ok = all(log_zn_trace(sol.op, k) <= math.log(sol.v0) + log_zn_free(sol.op, k) + 1e-12
                 for k in ns)
        checks.append((f"{name} Z_n <= v0 Z^f_n", ok, f"n in 2..16, 32, 64"))
    verdict(5, checks)


def test_criterion_06_small_r(bm):
    mass = builtin_mass("example2_rational")
    r_list = (1e-2, 1e-3, 1e-4)
    rows = small_r_study(bm, mass, r_list)
    ratios = [row.ratio for row in rows]
    gaps = [abs(q - 1.0) for q in ratios]
    mono = all(b < a for a, b in zip(gaps, gaps[1:]))
    stable_rows = small_r_study(LevyModel.stable(1.5, 1.0), mass, r_list)
    expo = fitted_exponent(stable_rows)
    s_ratios = [row.ratio for row in stable_rows]
    s_gaps = [abs(q - 1.0) for q in s_ratios]
    lr = np.log(r_list)
    slopes = np.diff(np.log([row.gamma for row in stable_rows])) / np.diff(lr)
    verdict(6, [
        ("brownian ratio r=1e-4", 0.9 <= ratios[-1] <= 1.1,
         f"{ratios[-1]:.4f} in [0.9, 1.1]"),
        ("monotone", mono, ", ".join(f"{q:.4f}" for q in ratios)),
        ("stable ratios monotone", all(b < a for a, b in zip(s_gaps, s_gaps[1:])),
         ", ".join(f"{q:.4f}" for q in s_ratios)),
        within("stable 1.5 exponent", expo, 1.0 / 3.0, 0.05, ".4f"),
        ("stable local slopes", True, ", ".join(f"{v:.4f}" for v in slopes)),
    ])


def test_criterion_07_monte_carlo(bm, sol1):
    mass = builtin_mass("inv_linear")
    cfg = PathConfig(dt=5e-3, seed=7, n_paths=200_000)
    sample = simulate_zeta(bm, mass, R, 0.0, cfg)
    t_grid = np.arange(0.0, 6.01, 0.5)
    est = survival_from_samples(sample.zeta, t_grid, window=(2.0, 6.0))
    i4 = int(np.argmin(np.abs(t_grid - 4.0)))
    target = 4.0 / 3.0 * math.exp(-4.0)
    se = float(est.stderr[i4])
    mean = float(sample.zeta.mean())
    quad_mean = zeta_moments(sol1.op, 0.0, 1).first_direct
    verdict(7, [
        ("P(zeta>4)", abs(est.p[i4] - target) < 3 * se,
         f"{est.p[i4]:.5f} vs {target:.5f} ({abs(est.p[i4] - target) / se:.2f} sigma)"),
        ("gamma_hat [2,6]", abs(est.gamma_hat - 1.0) < 0.05,
         f"{est.gamma_hat:.4f} +- {est.gamma_se:.4f} vs 1 (5%)"),
        ("E[zeta]", abs(mean / quad_mean - 1.0) < 0.02,
         f"{mean:.5f} vs {quad_mean:.5f} (rel {abs(mean / quad_mean - 1):.2e})"),
    ])


def test_criterion_08_spin_system(bm, sol1):
    mass = builtin_mass("inv_linear")
    ks = tuple(range(1, 11))
    cfg = MCMCConfig(sweeps=1_000_000, chains=4, burn_in=10_000, seed=2024)
    state = gibbs_mcmc(bm, mass, R, 64, cfg, pair_stats=(np.tanh, np.tanh, ks))
    edges = state.hist_edges
    emp = state.hist_counts / state.samples
    ell = sol1.ell1 * sol1.grid.weights
    # exact bin masses by interpolating the cumulative density at the edges
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (ell[1:] + ell[:-1]))])
    mid = np.concatenate([[sol1.x[0]], 0.5 * (sol1.x[1:] + sol1.x[:-1])])
    ref = np.diff(np.interp(edges, mid, cum))
    ref_total = cum[-1]
    tv = 0.5 * (float(np.abs(emp - ref / ref_total).sum())
                + abs(state.hist_overflow / state.samples
                      - (1.0 - ref.sum() / ref_total)))
    corr = mcmc_correlations(state)
    rate = corr.decay_rate(2, 8)
    C = sol1.corr_rate
    verdict(8, [
        ("single-site TV", tv < 0.05, f"{tv:.4f} < 0.05"),
        ("decay rate k=2..8", abs(rate / C - 1.0) < 0.15,
         f"{rate:.4f} vs C={C:.4f} (rel {abs(rate / C - 1):.3f} < 0.15)"),
        ("acceptance", 0.15 <= state.acceptance <= 0.6, f"{state.acceptance:.3f}"),
    ])


def _cell_pair_tv(sol, idx, cells=12, lim=6.0):
    """TV of sampled ``(Y_0, Y_1)`` against the pair density on whole-cell bins.

    Nodes with ``|x| > lim`` share one overflow bin per axis.
    """
    grid = sol.grid
    inner = np.abs(grid.nodes) <= lim
    first = int(np.argmax(inner))
    nb = int(np.ceil(inner.sum() / cells))
    label = np.where(inner, (np.arange(grid.N) - first) // cells, nb)
    P = gibbs_state_density(sol, 2).pair_matrix()
    P = P * grid.weights[:, None] * grid.weights[None, :]
    exact = np.zeros((nb + 1, nb + 1))
    np.add.at(exact, (label[:, None], label[None, :]), P)
    exact /= exact.sum()
    emp = np.zeros_like(exact)
    np.add.at(emp, (label[idx[:, 0]], label[idx[:, 1]]), 1.0)
    emp /= emp.sum()
    return 0.5 * float(np.abs(emp - exact).sum())


def test_criterion_09_groundstate_chain(sol1):
    kern = groundstate_transition(sol1)
    _, idx = sample_groundstate_chain(sol1, 1, 100_000, seed=11, kernel=kern)
    tv_pair = _cell_pair_tv(sol1, idx)
    pi = kern.stationary
    tv_stat = 0.5 * float(np.abs(pi @ kern.matrix - pi).sum())
    ell = sol1.ell1 * sol1.grid.weights
    tv_ell = 0.5 * float(np.abs(pi - ell / ell.sum()).sum())
    verdict(9, [
        ("pair TV", tv_pair < 0.05, f"{tv_pair:.4f} < 0.05"),
        ("l1 stationary", tv_stat < 1e-4, f"TV {tv_stat:.2e} < 1e-4"),
        ("stationary = l1", tv_ell < 1e-12, f"TV {tv_ell:.1e}"),
    ])


def test_criterion_10_properties(bm, sol1, sol2):
    checks = []
    for name, sol in (("ex1", sol1), ("ex2", sol2)):
        S = sol.op.matrix
        asym = float(np.max(np.abs(S - S.T)))
        gram = sol.gram()
        off = float(np.max(np.abs(gram - np.eye(gram.shape[0]))))
        ident = math.exp(sol.free_energy) * (math.exp(sol.corr_rate) - 1.0)
        checks += [
            (f"{name} symmetric", asym == 0.0, f"{asym:.1e}"),
            (f"{name} mu > 0", bool(np.all(sol.mu > 0)), f"min {sol.mu.min():.3g}"),
            (f"{name} simple top", sol.mu[0] - sol.mu[1] > 1e-8,
             f"mu1-mu2 {sol.mu[0] - sol.mu[1]:.3g}"),
            (f"{name} q1 > 0", bool(np.min(sol.q1) > 0), f"min {np.min(sol.q1):.2e}"),
            (f"{name} gram", off < 1e-8, f"{off:.1e}"),
            (f"{name} gap identity", math.isclose(sol.gap, ident, rel_tol=1e-12),
             f"{sol.gap:.6f}"),
        ]
    for r in (0.5, 2.0):
        l1 = potential_l1_check(PotentialDensity(bm, r))
        checks.append(within(f"int v^{r:g}", l1, 1.0 / r, 1e-4))
    l1s = potential_l1_check(PotentialDensity(LevyModel.stable(1.5, 1.0), 1.0))
    checks.append(within("int v stable", l1s, 1.0, 1e-4))
    for name in ("inv_linear", "example2_rational"):
        mass = builtin_mass(name)
        grid = Grid(40.0, 6001)
        a = solve_from_operator(build_kernel(bm, mass, R, grid), k=2).gamma
        b = solve_from_operator(build_kernel(bm, mass, R, grid.refined()), k=2).gamma
        drift = abs(b - a) / a
        checks.append((f"Richardson {name}", drift < 1e-4, f"{drift:.2e} < 1e-4"))
    verdict(10, checks)


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
