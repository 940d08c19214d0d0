"""Acceptance criteria, one test per criterion, at the stated tolerances and time limits."""
import json
import time
from pathlib import Path

import numpy as np
import pytest

from cylbsde.bsde import (compute_gamma, convergence_study, difference_norms, gamma_value,
                          linear_driver, mixed_driver, picard_solve, solve_bsde)
from cylbsde.cli import main
from cylbsde.hedging import (attainable_claim, build_market, check_attainability, check_lrm,
                             correlated_cost_strategy, drifting_cost_strategy,
                             hedging_convergence, solve_hedge)
from cylbsde.measures import (FiniteMeasure, coefficients, constant_kernel,
                              exp_distance_kernel, gram_schmidt_frame, min_plus_one_kernel,
                              rank1_linear_kernel, tail_norm_sq, time_modulated_kernel,
                              uprime_inner)
from cylbsde.tree import (Clock, MeasureProcess, build_tree, conditional_covariances,
                          increments, level_increments, martingale_path, path_sum, represent,
                          stochastic_integral)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
TOL = 1e-10


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


def rank3_kernel():
    return time_modulated_kernel([0.3, 0.2, 0.1], [0.0, 0.7, 2.0], modulation=0.1)


@pytest.mark.criterion(1, "representation exactness over 20 randomized claims")
def test_criterion_1_representation_exactness():
    rng = np.random.default_rng(101)
    with Timer() as timer:
        tree = build_tree(Clock.uniform(0.25, 4), 2, "full-binary")
        kernel = time_modulated_kernel([0.4, 0.25], [0.1, 1.3], modulation=0.2)
        pts = [0.5, 1.0, 2.0]
        worst_res = worst_cov = 0.0
        for _ in range(20):
            xi = rng.normal(size=tree.size(4)) + np.maximum(
                martingale_path(tree, kernel, 1.0)[-1], 0) * rng.normal()
            rep = represent(tree, kernel, pts, xi)
            G = stochastic_integral(tree, rep.H, kernel)
            worst_res = max(worst_res, float(np.max(np.abs(rep.mean + G[-1] + rep.N[-1] - xi))))
            for t in range(tree.steps):
                dN = increments(tree, rep.N, t)
                dM = level_increments(tree, kernel, t, pts)
                for i in range(len(pts)):
                    worst_cov = max(worst_cov, float(np.max(np.abs(
                        conditional_covariances(tree, t, dN, dM[:, i])))))
    assert worst_res < TOL
    assert worst_cov < TOL
    assert timer.seconds < 5


@pytest.mark.criterion(2, "Picard ratios <= 2/3 at beta = 4 and agreement with solve_bsde")
def test_criterion_2_contraction():
    with Timer() as timer:
        tree = build_tree(Clock.uniform(0.25, 4), 3)
        kernel = rank3_kernel()
        pts = (0.5, 1.0, 2.0, 3.0)
        xi = np.maximum(martingale_path(tree, kernel, 1.0)[-1], 0.0) + 0.3
        drivers = [linear_driver(0.7), mixed_driver(0.5, 0.3, 0.8, 0.1),
                   mixed_driver(-0.4, 0.6, 1.5, -0.2)]
        ratios, gaps = [], []
        for d in drivers:
            pr = picard_solve(tree, kernel, d, xi, pts, 4.0)
            assert pr.converged and pr.ratios
            ratios.append(max(pr.ratios))
            direct = solve_bsde(tree, kernel, d, xi, pts)
            gaps.append(difference_norms(tree, d, 4.0, pr.solution, direct).total)
    assert max(ratios) <= 2 / 3 + 1e-8
    assert max(gaps) <= 1e-9
    assert timer.seconds < 10


@pytest.mark.criterion(3, "convergence over n with the gamma bound on a rank-3 kernel")
def test_criterion_3_convergence_and_gamma():
    with Timer() as timer:
        assert gamma_value(4.0, 1.5, 6.0) == pytest.approx(30.0)
        cert = compute_gamma(4.0)
        tree = build_tree(Clock.uniform(0.25, 4), 3)
        kernel = rank3_kernel()
        pts = (0.5, 1.0, 2.0, 3.0)
        xi = (np.maximum(martingale_path(tree, kernel, 1.0)[-1], 0.0)
              + 0.5 * np.sin(3 * martingale_path(tree, kernel, 3.0)[-1]))
        study = convergence_study(tree, kernel, mixed_driver(0.5, 0.3, 0.8, 0.1), xi, pts, 4.0)
    rows = study.rows
    assert cert.gamma <= 30.0 and study.certificate.gamma == cert.gamma
    assert rows[-1].n == 4 and rows[-1].s_beta_total <= TOL
    assert rows[0].s_beta_total >= rows[-1].s_beta_total
    assert all(r.bound_slack >= -TOL for r in rows)
    assert timer.seconds < 30


@pytest.mark.criterion(4, "attainability round trip on 10 forward and 5 unspanned claims")
def test_criterion_4_attainability():
    rng = np.random.default_rng(404)
    with Timer() as timer:
        tree = build_tree(Clock.uniform(0.25, 4), 3)
        kernel = time_modulated_kernel([0.3, 0.2], [0.0, 0.9], modulation=0.1)
        pts = (0.5, 1.0, 2.0)
        lam = [FiniteMeasure.from_atoms([(1.0, 0.4 + 0.1 * t)]) for t in range(4)]
        market = build_market(tree, kernel, lam)
        forward = []
        for _ in range(10):
            H = MeasureProcess(pts, [rng.normal(size=(tree.size(t), 3)) for t in range(4)])
            c = float(rng.normal())
            att = check_attainability(market, attainable_claim(market, H, c), pts)
            forward.append((att.attainable, att.residual, abs(att.Y0 - c)))
        unspanned = []
        W3 = path_sum(tree, [tree.dW[t][:, 2] for t in range(4)])
        for _ in range(5):
            H = MeasureProcess(pts, [rng.normal(size=(tree.size(t), 3)) for t in range(4)])
            xi = attainable_claim(market, H, 0.0) + (0.5 + rng.random()) * W3
            att = check_attainability(market, xi, pts)
            unspanned.append((att.attainable, att.residual))
    assert all(ok and res < TOL and err < TOL for ok, res, err in forward)
    assert all((not ok) and res > 1e-6 for ok, res in unspanned)
    assert timer.seconds < 20


@pytest.mark.criterion(5, "locally risk-minimizing characterization and counterexamples")
def test_criterion_5_lrm():
    with Timer() as timer:
        tree = build_tree(Clock.uniform(0.25, 4), 3)
        kernel = time_modulated_kernel([0.3, 0.2], [0.0, 0.9], modulation=0.1)
        pts = (0.5, 1.0, 2.0)
        market = build_market(tree, kernel, FiniteMeasure.dirac(1.0, 0.5))
        W3 = path_sum(tree, [tree.dW[t][:, 2] for t in range(4)])
        xi = np.maximum(market.prices([2.0])[-1][:, 0], 0.0) + 0.3 * W3
        verdicts = []
        hedges = [solve_hedge(market, xi, pts, n) for n in (1, 2, 3)]
        for hedge in hedges:
            verdicts.append(check_lrm(market, hedge.strategy))
        strategy = hedges[1].strategy
        drift = check_lrm(market, drifting_cost_strategy(market, strategy, 0.2))
        correlated = check_lrm(market, correlated_cost_strategy(market, strategy, 0.5))
    assert all(v == (True, True) for v in verdicts)
    assert drift[0] is False
    assert correlated == (True, False)
    assert timer.seconds < 10


@pytest.mark.criterion(6, "hedging convergence with the rescaled gamma bound")
def test_criterion_6_hedging_convergence():
    with Timer() as timer:
        tree = build_tree(Clock.uniform(0.25, 4), 3)
        kernel = rank3_kernel()
        pts = (0.5, 1.0, 2.0)
        lam = [FiniteMeasure.from_atoms([(1.0, 0.5 + 0.1 * t), (2.0, -0.2)]) for t in range(4)]
        market = build_market(tree, kernel, lam, mvt_cap=10.0)
        H = MeasureProcess(pts, [np.tile([1.0, -0.5, 0.7], (tree.size(t), 1)) * (1 + 0.1 * t)
                                 for t in range(4)])
        xi = attainable_claim(market, H, 0.3)
        study = hedging_convergence(market, xi, pts)
    rows = study.rows
    assert market.max_mvt() <= 10.0
    assert rows[-1].total_risk <= TOL
    assert rows[0].total_risk > 0
    for r in rows:
        d = study.hedges[r.n].diagnostics
        assert abs(d["total_risk"] - d["n_norm_sq"]) <= TOL
        assert r.bound_slack >= -TOL
    assert timer.seconds < 30


@pytest.mark.criterion(7, "kernel-space identities on 100 randomized configurations")
def test_criterion_7_kernel_suite():
    rng = np.random.default_rng(707)
    grid = np.round(np.linspace(0.0, 5.0, 21), 2)
    worst = {"frame": 0.0, "parseval": 0.0, "cs": 0.0, "tail": 0.0}
    with Timer() as timer:
        for i in range(100):
            kind = i % 5
            if kind == 0:
                anchors = rng.choice(grid, size=rng.integers(1, 5), replace=False)
                k = exp_distance_kernel(anchors, rng.uniform(0.2, 2), rng.uniform(0.3, 3))
            elif kind == 1:
                k = min_plus_one_kernel(rng.choice(grid, size=rng.integers(1, 5), replace=False))
            elif kind == 2:
                r = int(rng.integers(1, 5))
                k = time_modulated_kernel(rng.uniform(0.05, 1, r),
                                          rng.choice(np.linspace(0, 3, 13), r, replace=False),
                                          rng.uniform(0, 0.3))
            elif kind == 3:
                k = constant_kernel(rng.uniform(0.1, 3))
            else:
                k = rank1_linear_kernel(rng.uniform(0.1, 3))
            local = k.at(int(rng.integers(0, 4)), 0)
            pts = list(rng.choice(grid, size=rng.integers(1, 7), replace=False))
            frame = gram_schmidt_frame(local, pts)
            nz = [m for m in frame.members() if not m.is_zero()]
            F = np.array([[uprime_inner(local, a, b) for b in nz] for a in nz])
            if nz:
                worst["frame"] = max(worst["frame"], float(np.max(np.abs(F - np.eye(len(nz))))))
            mu = FiniteMeasure.on(pts, rng.normal(size=len(pts)))
            nu = FiniteMeasure.on(pts, rng.normal(size=len(pts)))
            c = coefficients(mu, frame)
            nsq = uprime_inner(local, mu, mu)
            worst["parseval"] = max(worst["parseval"], abs(nsq - float(c @ c)))
            worst["cs"] = max(worst["cs"], uprime_inner(local, mu, nu) ** 2
                              - nsq * uprime_inner(local, nu, nu))
            for n in range(len(pts) + 1):
                worst["tail"] = max(worst["tail"],
                                    abs(tail_norm_sq(mu, frame, n) - (nsq - float(c[:n] @ c[:n]))))
    assert worst["frame"] <= TOL
    assert worst["parseval"] <= TOL
    assert worst["cs"] <= 1e-12
    assert worst["tail"] <= TOL
    assert timer.seconds < 5


@pytest.mark.criterion(8, "reference config rerun is byte-identical")
def test_criterion_8_determinism(tmp_path):
    cfg = json.loads((CONFIGS / "reference.json").read_text())
    assert cfg["factors"] == 2 and cfg["beta"] == 4 and len(cfg["maturities"]) == 3
    assert cfg["clock"]["steps"] == 4
    outputs = []
    for name in ("first", "second"):
        assert main(["run", str(CONFIGS / "reference.json"), "--out",
                     str(tmp_path / name)]) == 0
        outputs.append(sorted((p.name, p.read_bytes()) for p in (tmp_path / name).glob("*.csv")))
    assert outputs[0] and outputs[0] == outputs[1]
