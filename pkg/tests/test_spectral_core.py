import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from levyspin.errors import DegenerateGap, OutOfGrid, RowMassError
from levyspin.levy_models import LevyModel
from levyspin.mass_functions import builtin_mass
from levyspin.spectral_core import (Grid, KernelOperator, build_kernel,
                                    correlation, gibbs_state_density,
                                    groundstate_transition, solve_from_operator,
                                    solve_spectrum, survival_asymptote,
                                    survival_probability, top_eigenpairs)


def bump(x):
    return np.exp(-(x - 1.0) ** 2)


# -- grid ----------------------------------------------------------

@given(L=st.floats(1.0, 200.0), half=st.integers(1, 3000))
@settings(max_examples=50, deadline=None)
def test_grid_invariants(L, half):
    g = Grid(L, 2 * half + 1)
    assert np.allclose(g.nodes, -g.nodes[::-1], rtol=0, atol=1e-12 * L)
    assert g.weights.sum() == pytest.approx(2 * L, rel=1e-12)
    assert g.nodes[half] == 0.0


def test_grid_rejects_even():
    with pytest.raises(ValueError):
        Grid(10.0, 100)


def test_grid_locate():
    g = Grid(60.0, 3001)
    assert g.locate(0.0) == 1500
    assert g.locate(1.0) == 1525
    assert g.locate(0.01) is None
    with pytest.raises(OutOfGrid):
        g.locate(100.0)
    assert g.refined() == Grid(75.0, 6001)


# -- kernel ----------------------------------------------------------

def test_kernel_corner_and_trace(brownian, m_inv):
    g = Grid(40.0, 2001)
    op = build_kernel(brownian, m_inv, 0.5, g)
    w0 = g.h / 2
    assert op.matrix[0, 0] == pytest.approx(w0 * m_inv(-40.0) * 1.0, rel=1e-14)
    assert op.trace() == pytest.approx(op.v0 * np.sum(g.weights * m_inv(g.nodes)), rel=1e-13)
    S = op.matrix
    assert np.array_equal(S, S.T)


def test_kernel_trace_example2(ex2):
    # the x^-2 tail beyond |x| = 40 holds 2 * 2 / 41 of the 16/3 total mass
    assert ex2.op.trace() == pytest.approx(16.0 / 3.0, rel=2.5e-2)


def test_matrix_free_agrees_with_dense(brownian, m_ex2):
    g = Grid(20.0, 801)
    dense = build_kernel(brownian, m_ex2, 0.5, g, dense=True)
    free = build_kernel(brownian, m_ex2, 0.5, g, dense=False)
    y = np.random.default_rng(0).standard_normal(g.N)
    assert np.allclose(dense.matvec(y), free.matvec(y), rtol=0, atol=1e-12)
    assert free.frobenius_sq() == pytest.approx(dense.frobenius_sq(), rel=1e-12)
    mu_d, _ = top_eigenpairs(dense, 6)
    mu_f, _ = top_eigenpairs(free, 6)
    assert np.allclose(mu_d, mu_f, rtol=1e-10)


def test_rank_one():
    u = np.array([1.0, 2.0, -0.5, 3.0])
    op = KernelOperator.from_matrix(np.outer(u, u))
    mu, vecs = top_eigenpairs(op, 2)
    assert mu[0] == pytest.approx(u @ u)
    assert abs(mu[1]) < 1e-12
    assert abs(abs(vecs[:, 0] @ u) - np.linalg.norm(u)) < 1e-12


def test_degenerate_gap():
    op = KernelOperator.from_matrix(np.diag([2.0, 2.0, 1.0]))
    with pytest.raises(DegenerateGap):
        solve_from_operator(op, 2)


def test_top_eigenvalues_examples(ex1, ex2):
    assert ex1.mu[0] == pytest.approx(1.0, abs=1e-3)
    assert ex2.mu[0] == pytest.approx(2.0, abs=2e-3)


def test_tampered_changes_trace(ex1):
    bad = ex1.op.tampered()
    assert bad.trace() != pytest.approx(ex1.op.trace(), rel=1e-6)
    assert np.array_equal(ex1.op.matrix, ex1.op.matrix.T)


# -- solution ----------------------------------------------------------

def test_example1_solution(ex1, ex1_q1):
    assert ex1.gamma == pytest.approx(1.0, abs=1e-3)
    assert ex1.free_energy == pytest.approx(0.0, abs=1e-3)
    assert ex1.eigenfunction(0, 0.0) == pytest.approx(math.sqrt(2 / 3), rel=1e-2)
    assert ex1.eigenfunction(0, 1.0) == pytest.approx(0.60075, rel=1e-2)
    g, K0 = survival_asymptote(ex1, 0.0)
    assert (g, K0) == pytest.approx((1.0, 4 / 3), rel=1e-2)
    assert survival_asymptote(ex1, 1.0)[1] == pytest.approx(0.98101, rel=1e-2)
    sel = np.abs(ex1.x) <= 10
    rel = np.abs(ex1.q1[sel] / ex1_q1(ex1.x[sel]) - 1)
    assert rel.max() < 1e-2


def test_example2_solution(ex2):
    assert ex2.gamma == pytest.approx(0.5, abs=1e-3)
    assert ex2.free_energy == pytest.approx(-math.log(2), abs=2e-3)


def test_example2_prefactor_resolution(brownian, m_ex2, ex2):
    coarse = survival_asymptote(ex2, 0.0)[1]
    fine_sol = solve_spectrum(brownian, m_ex2, 0.5, Grid(40.0, 4001), k=4)
    fine = survival_asymptote(fine_sol, 0.0)[1]
    finer_sol = solve_spectrum(brownian, m_ex2, 0.5, Grid(40.0, 8001), k=4)
    finer = survival_asymptote(finer_sol, 0.0)[1]
    # O(h^2): successive differences shrink by about 4
    d1, d2 = abs(fine - coarse), abs(finer - fine)
    assert d2 < 0.4 * d1 + 1e-9
    assert abs(finer - fine) < 1e-3


@pytest.mark.parametrize("which", ["ex1", "ex2"])
def test_solution_invariants(which, request):
    sol = request.getfixturevalue(which)
    assert np.all(sol.mu > 0)
    assert sol.lam[1] > sol.lam[0]
    assert np.min(sol.q1) > 0
    gram = sol.gram()
    assert np.max(np.abs(gram - np.eye(sol.k))) < 1e-6
    assert np.sum(sol.ell1 * sol.grid.weights) == pytest.approx(1.0, abs=1e-12)
    assert sol.gap == pytest.approx(math.exp(sol.E) * (math.exp(sol.C) - 1), rel=1e-13)
    assert sol.gamma >= 0.5 / sol.op.mass.sup_norm


@given(a=st.floats(0.2, 3.0), r=st.floats(0.1, 2.0))
@settings(max_examples=10, deadline=None)
def test_gaussian_mass_properties(a, r):
    m = builtin_mass("gaussian", a)
    sol = solve_spectrum(LevyModel.brownian(1.0), m, r, Grid(15.0, 601), k=5)
    assert np.min(sol.q1) > 0
    assert np.all(np.diff(sol.lam) > 0)
    assert sol.gamma >= r / m.sup_norm
    assert np.sum(sol.op.eigenvalues()) == pytest.approx(sol.op.trace(), rel=1e-10)


# -- survival ----------------------------------------------------------

def test_survival_series(ex1):
    val, bound = survival_probability(ex1, 0.0, 4.0)
    assert val == pytest.approx(4 / 3 * math.exp(-4), rel=1e-2)
    small, bound = survival_probability(ex1, 0.0, 1e-3, n_terms=ex1.k)
    assert abs(small - 1.0) <= bound + 1e-9
    assert survival_probability(ex1, 0.0, 0.0).value == 1.0
    with pytest.raises(OutOfGrid):
        survival_probability(ex1, 100.0, 1.0)


def test_survival_full_spectrum_starts_at_one(brownian, m_ex2):
    sol = solve_spectrum(brownian, m_ex2, 0.5, Grid(20.0, 401), k=401)
    val, bound = survival_probability(sol, 0.0, 1e-3)
    assert bound == 0.0
    assert val == pytest.approx(1.0, abs=2e-2)


# -- Gibbs state ----------------------------------------------------------

def test_gibbs_single_site(ex1):
    l1 = gibbs_state_density(ex1, 1)
    i0, i1 = ex1.grid.locate(0.0), ex1.grid.locate(1.0)
    assert l1[i0] == pytest.approx(2 / 3, rel=1e-2)
    assert l1[i1] == pytest.approx(4 / 3 * math.exp(-2), rel=1e-2)


def test_gibbs_pair_normalised(ex1):
    P = gibbs_state_density(ex1, 2).pair_matrix()
    w = ex1.grid.weights
    assert w @ P @ w == pytest.approx(1.0, abs=1e-3)


def test_gibbs_point_evaluation(ex1):
    g3 = gibbs_state_density(ex1, 3)
    idx = [ex1.grid.locate(x) for x in (0.0, 1.0, -0.48)]
    assert g3((0.0, 1.0, -0.48)) == pytest.approx(g3.at_indices(idx), rel=1e-9)


# -- correlations ----------------------------------------------------------

def test_correlation_constant_observable(ex1):
    for k in (1, 3, 10):
        assert abs(correlation(ex1, 1.0, 1.0, k).value) < 1e-10


def test_correlation_direct_oracle(ex1):
    g4 = gibbs_state_density(ex1, 4)
    mean = np.sum(ex1.ell1 * ex1.grid.weights * bump(ex1.x))
    direct = g4.expect_pair(bump, bump, 3) - mean ** 2
    assert correlation(ex1, bump, bump, 3).value == pytest.approx(direct, rel=1e-6)


def test_correlation_prefactor_limit(ex1):
    scaled = [math.exp(k * ex1.C) * correlation(ex1, bump, bump, k).value for k in (19, 20)]
    B = correlation(ex1, bump, bump, 20).prefactor
    assert abs(scaled[1] / scaled[0] - 1) < 1e-2
    assert scaled[1] == pytest.approx(B, rel=1e-2)


@pytest.mark.parametrize("obs", [bump, np.tanh], ids=["bump", "tanh"])
def test_correlation_rate(ex1, obs):
    ks = np.arange(10, 26)
    c = [correlation(ex1, obs, obs, int(k)).value for k in ks]
    slope = -np.polyfit(ks, np.log(np.abs(c)), 1)[0]
    assert slope == pytest.approx(ex1.C, abs=1e-3)


def test_centred_bump_misses_second_mode(ex1):
    # q_2 is odd for a symmetric mass, so an even observable has no weight on it
    even = lambda x: np.exp(-x * x)
    assert abs(correlation(ex1, even, even, 1).prefactor) < 1e-10


# -- ground-state chain ----------------------------------------------------

def test_transition_kernel(ex1):
    T = groundstate_transition(ex1)
    assert T.max_row_drift < 1e-3
    assert np.allclose(T.matrix.sum(axis=1), 1.0, rtol=0, atol=1e-13)
    # oracle: power iteration on T^T from the uniform vector
    p = np.full(ex1.grid.N, 1.0 / ex1.grid.N)
    for _ in range(400):
        p = p @ T.matrix
    assert 0.5 * np.abs(p - T.stationary).sum() < 1e-4
    assert 0.5 * np.abs(T.stationary @ T.matrix - T.stationary).sum() < 1e-4


def test_two_step_marginal(ex1):
    T = groundstate_transition(ex1)
    joint = T.stationary[:, None] * T.matrix
    w = ex1.grid.weights
    P = gibbs_state_density(ex1, 2).pair_matrix() * w[:, None] * w[None, :]
    assert 0.5 * np.abs(joint - P / P.sum()).sum() < 1e-3


def test_row_mass_error(ex1):
    with pytest.raises(RowMassError):
        groundstate_transition(ex1, drift_limit=1e-18)
