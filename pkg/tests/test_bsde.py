import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cylbsde.bsde import (BSDESolverError, DriverSpec, beta_weights, compute_gamma,
                          convergence_study, difference_norms, gamma_value, linear_driver,
                          mixed_driver, picard_solve, solve_bsde, step_residual,
                          tail_decomposition_error, weighted_norms, zero_driver)
from cylbsde.measures import (CovarianceKernel, FiniteMeasure, exp_distance_kernel,
                              time_modulated_kernel, uprime_norm_sq)
from cylbsde.tree import (Clock, build_tree, conditional_covariances, increments,
                          level_increments, martingale_path)


@pytest.fixture(scope="module")
def rank3():
    tree = build_tree(Clock.uniform(0.25, 4), 3)
    kernel = time_modulated_kernel([0.3, 0.2, 0.1], [0.0, 0.7, 2.0], modulation=0.1)
    M = martingale_path(tree, kernel, 1.0)[-1]
    xi = np.maximum(M, 0.0) + 0.5 * np.sin(3 * martingale_path(tree, kernel, 3.0)[-1])
    return tree, kernel, (0.5, 1.0, 2.0, 3.0), xi


def drivers():
    return [linear_driver(0.7), mixed_driver(0.5, 0.3, 0.8, 0.1),
            mixed_driver(-0.4, 0.6, 1.5, -0.2)]


# -- DriverSpec -------------------------------------------------------------

def test_alpha_and_K():
    d = mixed_driver(0.5, 0.3, 0.8)
    np.testing.assert_allclose(d.alpha_sq(2), [0.8 + 0.64] * 2)
    np.testing.assert_allclose(d.K(np.array([0.1, 0.2])), [0, 0.144, 0.432])
    # eta = theta = 0 is replaced by alpha^2 = 1, so K = A
    np.testing.assert_allclose(zero_driver().K(np.array([0.1, 0.2])), [0, 0.1, 0.3])


def test_declared_lipschitz_bound_holds():
    kernel = time_modulated_kernel([0.3, 0.2], [0.0, 1.0])
    d = mixed_driver(0.5, 0.3, 0.8, 0.1)
    rng = np.random.default_rng(3)
    for _ in range(200):
        y1, y2 = rng.normal(size=2) * 3
        h1 = FiniteMeasure.on([0.5, 2.0], rng.normal(size=2))
        h2 = FiniteMeasure.on([0.5, 2.0], rng.normal(size=2))
        lhs = abs(d.at(kernel, 0, 0, y1, h1) - d.at(kernel, 0, 0, y2, h2))
        rhs = 0.8 * abs(y1 - y2) + 0.8 * np.sqrt(uprime_norm_sq(kernel, h1 - h2))
        assert lhs <= rhs + 1e-12


# -- solve_bsde -------------------------------------------------------------

def test_zero_driver_constant_claim(rank3):
    tree, kernel, pts, _ = rank3
    sol = solve_bsde(tree, kernel, zero_driver(), np.full(tree.size(4), 2.5), pts)
    assert all(np.allclose(y, 2.5) for y in sol.Y)
    assert all(np.allclose(h, 0.0, atol=1e-14) for h in sol.H.coeffs)
    assert all(np.allclose(n, 0.0, atol=1e-14) for n in sol.N)


def test_linear_driver_closed_form():
    tree = build_tree(Clock.uniform(0.2, 5), 1)
    r = 0.3
    sol = solve_bsde(tree, CovarianceKernel(1, lambda s, n, x: np.ones((1, len(x)))),
                     linear_driver(r), np.ones(tree.size(5)), [1.0])
    assert sol.Y0 == pytest.approx((1 + r * 0.2) ** -5, rel=1e-14)


def test_martingale_claim_is_represented(rank3):
    tree, kernel, _, _ = rank3
    pts = (0.5, 1.0, 2.0)
    x = 1.0
    M = martingale_path(tree, kernel, x)
    sol = solve_bsde(tree, kernel, zero_driver(), M[-1], pts)
    for y, m in zip(sol.Y, M):
        np.testing.assert_allclose(y, m, atol=1e-13)
    for c in sol.H.coeffs:
        np.testing.assert_allclose(c, np.tile([0.0, 1.0, 0.0], (len(c), 1)), atol=1e-10)
    assert max(np.max(np.abs(n)) for n in sol.N) < 1e-10


def test_residual_and_orthogonality(rank3):
    tree, kernel, pts, xi = rank3
    for d in drivers():
        sol = solve_bsde(tree, kernel, d, xi, pts[:2])
        assert sol.residual < 1e-10
        assert step_residual(tree, kernel, d, sol) == sol.residual
        for t in range(tree.steps):
            dM = level_increments(tree, kernel, t, pts[:2])
            dN = increments(tree, sol.N, t)
            for i in range(2):
                assert np.max(np.abs(conditional_covariances(tree, t, dN, dM[:, i]))) < 1e-10


def test_stiff_driver_needs_finer_clock():
    tree = build_tree(Clock.uniform(0.25, 2), 1)
    k = CovarianceKernel(1, lambda s, n, x: np.ones((1, len(x))))
    with pytest.raises(BSDESolverError, match="finer clock"):
        solve_bsde(tree, k, linear_driver(-5.0), np.ones(tree.size(2)), [1.0])


def test_non_finite_driver_rejected():
    tree = build_tree(Clock.uniform(0.25, 2), 1)
    k = CovarianceKernel(1, lambda s, n, x: np.ones((1, len(x))))
    bad = DriverSpec(lambda t, nodes, y, z: np.full_like(y, np.nan), name="bad")
    with pytest.raises(BSDESolverError, match="non-finite"):
        solve_bsde(tree, k, bad, np.ones(tree.size(2)), [1.0])


def test_parallel_schedule_identical(rank3):
    tree, kernel, pts, xi = rank3
    a = solve_bsde(tree, kernel, drivers()[1], xi, pts, workers=1)
    b = solve_bsde(tree, kernel, drivers()[1], xi, pts, workers=3)
    for ya, yb in zip(a.Y, b.Y):
        np.testing.assert_array_equal(ya, yb)


# -- weighted norms ---------------------------------------------------------

def test_weights_and_beta_zero():
    dA = np.array([0.1, 0.2, 0.3])
    np.testing.assert_allclose(beta_weights(zero_driver(), dA, 2.0), np.exp(2 * np.array(
        [0.0, 0.1, 0.3])))
    np.testing.assert_array_equal(beta_weights(mixed_driver(1, 1, 1), dA, 0.0), 1.0)


def test_hand_computed_norm():
    tree = build_tree(Clock((0.5, 0.25)), 1)
    d = linear_driver(1.0)                 # alpha^2 = 1, K = (0, 0.5, 0.75)
    Y = [np.array([2.0]), np.array([1.0, 3.0]), np.zeros(4)]
    wn = weighted_norms(tree, d, 2.0, Y=Y)
    manual = 1.0 * 0.5 * 4.0 + np.exp(2 * 0.5) * 0.25 * (0.5 * 1 + 0.5 * 9)
    assert wn.y == pytest.approx(manual, rel=1e-14)
    assert wn.h == 0.0 and wn.n == 0.0


def test_beta_monotonicity(rank3):
    tree, kernel, pts, xi = rank3
    d = drivers()[1]
    sol = solve_bsde(tree, kernel, d, xi, pts)
    totals = [weighted_norms(tree, d, b, sol.Y, sol.Z, sol.N).total for b in (0, 1, 3.5, 4, 8)]
    assert all(a <= b for a, b in zip(totals, totals[1:]))


# -- Picard -----------------------------------------------------------------

def test_picard_zero_driver_one_step(rank3):
    tree, kernel, pts, xi = rank3
    pr = picard_solve(tree, kernel, zero_driver(), xi, pts, 4.0)
    assert pr.converged and pr.iterations == 2
    assert pr.distances[-1] == 0.0
    assert pr.ratios == [0.0]


@pytest.mark.parametrize("i", range(3))
def test_picard_contraction_and_agreement(rank3, i):
    tree, kernel, pts, xi = rank3
    d = drivers()[i]
    pr = picard_solve(tree, kernel, d, xi, pts, 4.0)
    assert pr.converged
    assert max(pr.ratios) <= 2 / 3 + 1e-8
    direct = solve_bsde(tree, kernel, d, xi, pts)
    assert difference_norms(tree, d, 4.0, pr.solution, direct).total <= 1e-9
    assert pr.solution.residual < 1e-10


def test_picard_linear_fixed_point(rank3):
    tree, kernel, pts, xi = rank3
    d = linear_driver(0.7)
    pr = picard_solve(tree, kernel, d, xi, pts, 5.0)
    direct = solve_bsde(tree, kernel, d, xi, pts)
    np.testing.assert_allclose(pr.solution.Y[0], direct.Y[0], atol=1e-10)


@pytest.mark.parametrize("beta", [3.0, 2.0, -1.0])
def test_picard_rejects_small_beta(rank3, beta):
    tree, kernel, pts, xi = rank3
    with pytest.raises(ValueError):
        picard_solve(tree, kernel, zero_driver(), xi, pts, beta)


@settings(max_examples=15, deadline=None)
@given(st.floats(-1, 1), st.floats(0, 1), st.floats(0, 2), st.floats(-0.5, 0.5),
       st.floats(3.2, 12))
def test_random_drivers_agree(rank3, rate, wobble, theta, offset, beta):
    tree, kernel, pts, xi = rank3
    d = mixed_driver(rate, wobble, theta, offset)
    pr = picard_solve(tree, kernel, d, xi, pts[:3], beta)
    direct = solve_bsde(tree, kernel, d, xi, pts[:3])
    assert difference_norms(tree, d, beta, pr.solution, direct).total <= 1e-9
    assert max(pr.ratios, default=0.0) <= 2 / (beta - 1) + 1e-8


# -- gamma ------------------------------------------------------------------

def test_gamma_reference_value():
    assert gamma_value(4.0, 1.5, 6.0) == pytest.approx(30.0)
    cert = compute_gamma(4.0)
    assert cert.admissible()
    assert cert.gamma <= 30.0
    assert cert.gamma == pytest.approx(gamma_value(4.0, cert.mu_sq, cert.lam_sq))


def test_gamma_grid_oracle():
    # brute-force dense grid on the admissible set never beats the optimizer
    cert = compute_gamma(4.0)
    mu = np.linspace(1.001, 1.999, 400)
    best = np.inf
    for a in mu:
        lam = a / (a - 1) + np.geomspace(1e-4, 1e3, 400)
        best = min(best, min(gamma_value(4.0, a, L) for L in lam))
    assert cert.gamma <= best * (1 + 1e-6)


def test_gamma_rejects_beta_3():
    with pytest.raises(ValueError):
        compute_gamma(3.0)


def test_gamma_decreases_with_beta():
    assert compute_gamma(10.0).gamma < compute_gamma(4.0).gamma
    assert gamma_value(4.0, 2.5, 6.0) == np.inf


# -- convergence study ------------------------------------------------------

def test_convergence_study_rank3(rank3):
    tree, kernel, pts, xi = rank3
    study = convergence_study(tree, kernel, drivers()[1], xi, pts, 4.0)
    rows = study.rows
    assert [r.n for r in rows] == [1, 2, 3, 4]
    assert rows[-1].s_beta_total <= 1e-10
    assert rows[0].s_beta_total >= rows[-1].s_beta_total
    assert all(r.bound_slack >= -1e-10 for r in rows)
    for n, part in study.partial.items():
        assert tail_decomposition_error(tree, kernel, study.full, part, n) <= 1e-9
    csv = study.to_csv()
    assert csv.splitlines()[0] == "n,norm_Y,norm_H,norm_N,s_beta_total,gamma,bound_slack"
    assert "\r" not in csv


def test_convergence_already_representable():
    tree = build_tree(Clock.uniform(0.25, 3), 2)
    kernel = time_modulated_kernel([0.3, 0.2], [0.0, 1.0])
    pts = (0.5, 1.0, 2.0)
    # the martingale of x_1 itself, so one maturity already represents it
    xi = 2.0 + martingale_path(tree, kernel, 0.5)[-1]
    study = convergence_study(tree, kernel, zero_driver(), xi, pts, 4.0)
    assert all(r.s_beta_total <= 1e-20 for r in study.rows)


def test_convergence_full_solution_order_independent():
    tree = build_tree(Clock.uniform(0.25, 3), 2)
    kernel = exp_distance_kernel([0.0, 2.0], scale=0.1)
    pts = (0.0, 1.0, 2.0)
    xi = np.maximum(martingale_path(tree, kernel, 1.0)[-1], 0.0)
    d = mixed_driver(0.5, 0.3, 0.8, 0.1)
    study = convergence_study(tree, kernel, d, xi, pts, 4.0)
    assert study.rows[0].s_beta_total >= study.rows[-1].s_beta_total
    permuted = solve_bsde(tree, kernel, d, xi, pts[::-1])
    assert difference_norms(tree, d, 4.0, study.full, permuted).total <= 1e-20
