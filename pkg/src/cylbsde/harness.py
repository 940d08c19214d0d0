"""Study orchestration: build the objects a config describes, run it, collect checks."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import families
from .bsde import (RESIDUAL_TOL, convergence_study, picard_solve, solve_bsde, table_csv,
                   tail_decomposition_error)
from .config import ExperimentConfig
from .hedging import (HEDGING_COLUMNS, NotAttainable, build_market, check_attainability, check_lrm,
                      hedging_convergence, solve_hedge)
from .measures import (FiniteMeasure, coefficients, gram, gram_schmidt_frame, tail_norm_sq,
                       uprime_inner)
from .tree import (Clock, build_tree, conditional_covariances, cond_exp, level_increments,
                   represent, stochastic_integral)

TOL = 1e-10
SUMMARY_FORMAT = "cylbsde-result/1"


@dataclass
class Check:
    name: str
    value: float
    tolerance: float
    passed: bool

    def to_json(self) -> dict:
        return {"name": self.name, "value": float(self.value), "tolerance": self.tolerance,
                "passed": bool(self.passed)}


def at_most(name: str, value: float, tol: float = TOL) -> Check:
    value = float(value)
    return Check(name, value, tol, bool(np.isfinite(value) and value <= tol))


def at_least(name: str, value: float, tol: float = -TOL) -> Check:
    value = float(value)
    return Check(name, value, tol, bool(np.isfinite(value) and value >= tol))


@dataclass
class Setup:
    config: ExperimentConfig
    tree: object
    kernel: object
    driver: object
    market: object
    points: tuple
    xi: np.ndarray


@dataclass
class StudyResult:
    study: str
    tables: dict = field(default_factory=dict)       # file name -> CSV text
    documents: dict = field(default_factory=dict)    # file name -> JSON-able object
    checks: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def first_failure(self) -> Check | None:
        return next((c for c in self.checks if not c.passed), None)


def setup(conf: ExperimentConfig) -> Setup:
    tree = build_tree(Clock(tuple(conf.increments)), conf["factors"], conf.design,
                      cap=conf["cap"])
    kernel = families.build("kernel", conf["kernel"]["family"], conf["kernel"].get("params"))
    driver = families.build("driver", conf["driver"]["family"], conf["driver"].get("params"))
    mkt = conf["market"]
    lam = families.build("lambda", mkt["lambda"]["family"], mkt["lambda"].get("params"),
                         tree.steps)
    rate = mkt.get("initial_rate")
    curve = None if rate is None else (lambda T, r=float(rate): np.exp(-r * T))
    market = build_market(tree, kernel, lam, initial_curve=curve, tstar=conf["tstar"],
                          mvt_cap=mkt["mvt_cap"])
    points = conf.maturities
    ctx = families.ClaimContext(tree, kernel, points, market)
    xi = np.asarray(families.build("claim", conf["claim"]["family"],
                                   conf["claim"].get("params"), ctx), dtype=float)
    return Setup(conf, tree, kernel, driver, market, points, xi)


# ---------------------------------------------------------------------------
# studies

def _bsde_convergence(s: Setup, threads: int) -> StudyResult:
    conf = s.config
    study = convergence_study(s.tree, s.kernel, s.driver, s.xi, s.points, conf["beta"],
                              conf.n_values, workers=threads, row_workers=threads)
    res = StudyResult("bsde-convergence", {"bsde_convergence.csv": study.to_csv()})
    res.checks.append(at_most("solver.residual", study.full.residual, RESIDUAL_TOL))
    for row in study.rows:
        res.checks.append(at_least(f"gamma_bound.slack[n={row.n}]", row.bound_slack))
    nmax = len(s.points)
    last = {r.n: r for r in study.rows}
    if nmax in last:
        res.checks.append(at_most("distance.at_nmax", last[nmax].s_beta_total))
    first, final = study.rows[0], study.rows[-1]
    res.checks.append(at_least("distance.first_ge_last",
                               first.s_beta_total - final.s_beta_total))
    for n, part in study.partial.items():
        err = tail_decomposition_error(s.tree, s.kernel, study.full, part, n)
        res.checks.append(at_most(f"tail_identity[n={n}]", err))
    res.metrics = {"gamma": study.certificate.gamma, "mu_sq": study.certificate.mu_sq,
                   "lam_sq": study.certificate.lam_sq, "Y0": study.full.Y0}
    return res


def _picard(s: Setup, threads: int) -> StudyResult:
    conf = s.config
    beta = conf["beta"]
    pr = picard_solve(s.tree, s.kernel, s.driver, s.xi, s.points, beta,
                      max_iters=conf["picard"]["max_iters"], tol=conf["picard"]["tol"],
                      workers=threads)
    direct = solve_bsde(s.tree, s.kernel, s.driver, s.xi, s.points, workers=threads)
    from .bsde import difference_norms
    gap = difference_norms(s.tree, s.driver, beta, pr.solution, direct).total
    rows = []
    for k, d in enumerate(pr.distances):
        ratio = pr.ratios[k - 1] if 1 <= k <= len(pr.ratios) else float("nan")
        rows.append((k + 1, d, ratio))
    res = StudyResult("picard-diagnostics",
                      {"picard_diagnostics.csv": table_csv(("iteration", "distance", "ratio"),
                                                           rows)})
    bound = 2.0 / (beta - 1.0)
    worst = max(pr.ratios, default=0.0)
    res.checks.append(Check("picard.converged", float(pr.iterations), 0.0, pr.converged))
    res.checks.append(at_most("picard.max_ratio", worst, bound + 1e-8))
    res.checks.append(at_most("picard.agrees_with_direct", gap, 1e-9))
    res.metrics = {"contraction_bound": bound, "max_ratio": worst, "iterations": pr.iterations,
                   "Y0": pr.solution.Y0}
    return res


def _hedging(s: Setup, threads: int) -> StudyResult:
    conf = s.config
    try:
        study = hedging_convergence(s.market, s.xi, s.points, conf.n_values, conf.data.get("beta"),
                                    workers=threads, row_workers=threads)
    except NotAttainable as exc:
        res = StudyResult("hedging-convergence")
        res.checks.append(at_most("attainability.residual", exc.residual))
        return res
    res = StudyResult("hedging-convergence", {"hedging_convergence.csv": study.to_csv()})
    res.checks.append(at_most("attainability.residual", study.attainability.residual))
    for row in study.rows:
        res.checks.append(at_least(f"hedge_bound.slack[n={row.n}]", row.bound_slack))
    for n, hedge in study.hedges.items():
        d = hedge.diagnostics
        res.checks.append(at_most(f"replication[n={n}]", d["replication_error"]))
        res.checks.append(at_most(f"total_risk_identity[n={n}]",
                                  abs(d["total_risk"] - d["n_norm_sq"])))
        msf, orth = check_lrm(s.market, hedge.strategy)
        res.checks.append(Check(f"lrm.mean_self_financing[n={n}]", float(msf), 1.0, msf))
        res.checks.append(Check(f"lrm.orthogonal[n={n}]", float(orth), 1.0, orth))
        if conf["export_strategies"]:
            res.documents[f"strategy_n{n}.json"] = hedge.strategy.to_json()
    nmax = len(s.points)
    if nmax in study.hedges:
        res.checks.append(at_most("total_risk.at_nmax",
                                  study.hedges[nmax].diagnostics["total_risk"]))
    res.metrics = {"gamma_unweighted": study.gamma, "beta": study.beta,
                   "Y0": study.attainability.Y0, "max_mvt": s.market.max_mvt()}
    return res


def _attainability(s: Setup, threads: int) -> StudyResult:
    att = check_attainability(s.market, s.xi, s.points, workers=threads)
    table = table_csv(("is_attainable", "residual", "Y0"),
                      [(int(att.attainable), att.residual, att.Y0)])
    res = StudyResult("attainability-check", {"attainability.csv": table})
    if att.attainable:
        V = att.strategy.value(s.market)
        res.checks.append(at_most("replication", float(np.max(np.abs(V[-1] - s.xi)))))
    expected = s.config.data.get("expect_attainable")
    if expected is not None:
        res.checks.append(Check("attainability.expected", float(att.attainable),
                                float(expected), att.attainable == expected))
    res.metrics = {"is_attainable": att.attainable, "residual": att.residual, "Y0": att.Y0}
    return res


def kernel_checks(kernel, tree, points) -> list[Check]:
    """Frame, Parseval, Cauchy-Schwarz and tail identities on every distinct local kernel."""
    worst = {"gram.symmetry": 0.0, "gram.min_eigenvalue": 0.0, "frame.orthonormality": 0.0,
             "frame.parseval": 0.0, "uprime.cauchy_schwarz": 0.0, "frame.tail_identity": 0.0}
    probes = [FiniteMeasure.dirac(x) for x in points]
    probes.append(FiniteMeasure.on(points, np.cos(np.arange(1, len(points) + 1))))
    for t in range(tree.steps):
        nodes = range(tree.size(t)) if kernel.node_dependent else [0]
        for j in nodes:
            local = kernel.at(t, j)
            G = gram(local, points)
            scale = max(1.0, float(np.max(np.abs(np.diag(G)))))
            worst["gram.symmetry"] = max(worst["gram.symmetry"], float(np.max(np.abs(G - G.T))))
            worst["gram.min_eigenvalue"] = max(worst["gram.min_eigenvalue"],
                                               -float(np.min(np.linalg.eigvalsh(G))) / scale)
            frame = gram_schmidt_frame(local, points)
            E = frame.members()
            nz = [m for m in E if not m.is_zero()]
            F = np.array([[uprime_inner(local, a, b) for b in nz] for a in nz])
            if len(nz):
                worst["frame.orthonormality"] = max(worst["frame.orthonormality"],
                                                    float(np.max(np.abs(F - np.eye(len(nz))))))
            for mu in probes:
                c = coefficients(mu, frame)
                nsq = uprime_inner(local, mu, mu)
                worst["frame.parseval"] = max(worst["frame.parseval"],
                                              abs(nsq - float(c @ c)) / scale)
                for n in range(len(points) + 1):
                    err = abs(tail_norm_sq(mu, frame, n) - (nsq - float(c[:n] @ c[:n])))
                    worst["frame.tail_identity"] = max(worst["frame.tail_identity"], err / scale)
                for nu in probes:
                    cs = uprime_inner(local, mu, nu) ** 2 - nsq * uprime_inner(local, nu, nu)
                    worst["uprime.cauchy_schwarz"] = max(worst["uprime.cauchy_schwarz"],
                                                         cs / scale ** 2)
    return [at_most(name, value, 1e-10) for name, value in worst.items()]


def martingale_checks(tree, kernel, points) -> list[Check]:
    mean_err = cov_err = 0.0
    for t in range(tree.steps):
        dM = level_increments(tree, kernel, t, points)
        mean_err = max(mean_err, float(np.max(np.abs([cond_exp(tree, t, dM[:, i])
                                                      for i in range(len(points))]))))
        L = kernel.level_loadings(t, tree.size(t), points)
        Q = np.einsum("jki,jkl->jil", L, L) * tree.clock.dA[t]
        for i in range(len(points)):
            for k in range(len(points)):
                c = conditional_covariances(tree, t, dM[:, i], dM[:, k])
                cov_err = max(cov_err, float(np.max(np.abs(c - Q[:, i, k]))))
    e1, e2 = tree.moment_errors()
    return [at_most("tree.first_moments", e1, 1e-12), at_most("tree.second_moments", e2, 1e-12),
            at_most("martingale.zero_mean", mean_err, 1e-12),
            at_most("martingale.covariation", cov_err, 1e-12)]


def representation_checks(tree, kernel, points, xi, threads) -> list[Check]:
    rep = represent(tree, kernel, points, xi, workers=threads)
    G = stochastic_integral(tree, rep.H, kernel)
    resid = float(np.max(np.abs(rep.mean + G[-1] + rep.N[-1] - xi)))
    orth = 0.0
    for t in range(tree.steps):
        dN = rep.N[t + 1] - rep.N[t][tree.parent(t + 1)]
        dM = level_increments(tree, kernel, t, points)
        for i in range(len(points)):
            orth = max(orth, float(np.max(np.abs(conditional_covariances(tree, t, dN,
                                                                         dM[:, i])))))
    return [at_most("representation.residual", resid), at_most("representation.orthogonality",
                                                               orth)]


def _invariants(s: Setup, threads: int) -> StudyResult:
    checks = []
    checks += martingale_checks(s.tree, s.kernel, s.points)
    checks += kernel_checks(s.kernel, s.tree, s.points)
    checks += representation_checks(s.tree, s.kernel, s.points, s.xi, threads)
    sol = solve_bsde(s.tree, s.kernel, s.driver, s.xi, s.points, workers=threads)
    checks.append(at_most("solver.residual", sol.residual, RESIDUAL_TOL))
    hedge_rows = []
    for n in s.config.n_values:
        a = solve_hedge(s.market, s.xi, s.points, n, workers=1)
        b = solve_hedge(s.market, s.xi, s.points, n, workers=max(2, threads))
        d = a.diagnostics
        msf, orth = check_lrm(s.market, a.strategy)
        rebuilt = type(a.strategy).from_cost(s.market, a.strategy.H, a.strategy.cost())
        eta_gap = max(float(np.max(np.abs(x - y))) for x, y in zip(rebuilt.eta, a.strategy.eta))
        sched_gap = max(float(np.max(np.abs(x - y))) for x, y in zip(a.solution.Y, b.solution.Y))
        sched_gap = max(sched_gap, max(float(np.max(np.abs(x - y)))
                                       for x, y in zip(a.solution.H.coeffs, b.solution.H.coeffs)))
        checks += [at_most(f"fs.replication[n={n}]", d["replication_error"]),
                   at_most(f"fs.total_risk_identity[n={n}]",
                           abs(d["total_risk"] - d["n_norm_sq"])),
                   Check(f"lrm.mean_self_financing[n={n}]", float(msf), 1.0, msf),
                   Check(f"lrm.orthogonal[n={n}]", float(orth), 1.0, orth),
                   at_most(f"strategy.eta_uniqueness[n={n}]", eta_gap, 1e-12),
                   at_most(f"fs.schedule_independence[n={n}]", sched_gap, 1e-12)]
        hedge_rows.append((n, d["total_risk"], d["n_norm_sq"], d["replication_error"]))
    rows = [(c.name, c.value, c.tolerance, int(c.passed)) for c in checks]
    res = StudyResult("invariant-suite", {
        "invariants.csv": _check_table(rows),
        "hedges.csv": table_csv(("n", "total_risk", "n_norm_sq", "replication_error"),
                                hedge_rows),
    }, checks=checks)
    res.metrics = {"Y0": sol.Y0}
    return res


def _check_table(rows) -> str:
    lines = ["check,value,tolerance,passed"]
    for name, value, tol, ok in rows:
        lines.append(f"{name},{'%.17g' % value},{'%.17g' % tol},{ok}")
    return "\n".join(lines) + "\n"


STUDY_RUNNERS = {
    "bsde-convergence": _bsde_convergence,
    "picard-diagnostics": _picard,
    "hedging-convergence": _hedging,
    "attainability-check": _attainability,
    "invariant-suite": _invariants,
}


def run_config(conf: ExperimentConfig, threads: int | None = None) -> tuple[StudyResult, dict]:
    threads = conf["threads"] if threads is None else threads
    t0 = time.perf_counter()
    s = setup(conf)
    t1 = time.perf_counter()
    result = STUDY_RUNNERS[conf["study"]](s, threads)
    t2 = time.perf_counter()
    return result, {"setup_seconds": t1 - t0, "study_seconds": t2 - t1,
                    "nodes": s.tree.total_nodes, "leaves": s.tree.size(s.tree.steps)}


def write_bundle(conf: ExperimentConfig, result: StudyResult, timings: dict,
                 out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in result.tables.items():
        path = out / name
        with open(path, "w", newline="") as fh:
            fh.write(text)
        written.append(path)
    for name, doc in result.documents.items():
        path = out / name
        path.write_text(json.dumps(doc, indent=1) + "\n")
        written.append(path)
    failure = result.first_failure()
    summary = {
        "format": SUMMARY_FORMAT,
        "study": result.study,
        "passed": result.passed,
        "first_failure": None if failure is None else failure.name,
        "config": conf.echo(),
        "checks": [c.to_json() for c in result.checks],
        "metrics": {k: (float(v) if isinstance(v, (float, np.floating)) else v)
                    for k, v in result.metrics.items()},
        "outputs": [p.name for p in written],
        "timings": timings,
    }
    path = out / "summary.json"
    path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    written.append(path)
    return written
