"""Zero-coupon bond market on a scenario tree and quadratic hedging in small markets.

Discounted prices follow ``P^T_{t+1} - P^T_t = dM^T_t + b_t(T) dA_t`` with the
drift given by the market price of risk, ``b_t = Q_t lambda_t``.  A strategy
in the ``n``-th small market trades the bonds with the first ``n`` base
maturities and the bank account.

Holdings are predictable: the measure ``H_t`` chosen at a level-``t`` node is
held over step ``t``.  At level ``t >= 1`` the position in bonds is therefore
the parent's ``H_{t-1}``; at the root it is ``H_0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .bsde import (BSDESolution, DriverSpec, compute_gamma, solve_bsde, table_csv)
from .measures import CovarianceKernel, FiniteMeasure
from .tree import (Adapted, MeasureProcess, ScenarioTree, backward_expectations,
                   conditional_covariances, cond_exp, increments, level_increments)

ATTAINABILITY_TOL = 1e-10
LRM_TOL = 1e-10
HEDGING_COLUMNS = ("n", "v_dist", "h_dist", "total_risk", "gamma_unweighted", "bound_slack")


class NotAttainable(ValueError):
    def __init__(self, residual: float):
        super().__init__(f"claim is not approximately attainable: ||N||^2 = {residual:.6g}")
        self.residual = residual


@dataclass
class MarketModel:
    tree: ScenarioTree
    kernel: CovarianceKernel
    lam: MeasureProcess
    lam_exposure: list          # (n_t, rank) per step
    mvt: Adapted                # mean-variance tradeoff K-script at every level
    initial_curve: Callable[[np.ndarray], np.ndarray] | None = None
    tstar: float | None = None

    @property
    def steps(self) -> int:
        return self.tree.steps

    def drift(self, t: int, maturities: Sequence[float]) -> np.ndarray:
        """``b_t(T) = (Q_t lambda_t)(T)`` at each level-``t`` node, ``(n_t, n)``."""
        L = self.kernel.level_loadings(t, self.tree.size(t), maturities)
        return np.einsum("jki,jk->ji", L, self.lam_exposure[t])

    def lambda_norm_sq(self, t: int) -> np.ndarray:
        return np.sum(self.lam_exposure[t] ** 2, axis=1)

    def price_increments(self, t: int, maturities: Sequence[float]) -> np.ndarray:
        """``dP^{T_i}`` over step ``t`` on the level-``t+1`` nodes."""
        dM = level_increments(self.tree, self.kernel, t, maturities)
        b = self.drift(t, maturities)[self.tree.parent(t + 1)]
        return dM + b * self.tree.clock.dA[t]

    def prices(self, maturities: Sequence[float]) -> list[np.ndarray]:
        """Discounted prices of the listed bonds at every level, ``(n_t, n)``."""
        base = (np.zeros(len(maturities)) if self.initial_curve is None
                else np.asarray(self.initial_curve(np.asarray(maturities, dtype=float)),
                                dtype=float))
        out = [base[None, :].copy()]
        for t in range(self.steps):
            out.append(out[-1][self.tree.parent(t + 1)] + self.price_increments(t, maturities))
        return out

    def gains(self, H: MeasureProcess) -> Adapted:
        """Cumulative gains ``sum_{s<t} H_s . dP_s``."""
        G = [np.zeros(1)]
        for t in range(self.steps):
            par = self.tree.parent(t + 1)
            if H.points:
                dP = self.price_increments(t, H.points)
                g = np.sum(H.coeffs[t][par] * dP, axis=1)
            else:
                g = 0.0
            G.append(G[-1][par] + g)
        return G

    def max_mvt(self) -> float:
        return float(np.max(self.mvt[-1]))


def _lambda_process(tree: ScenarioTree, lam) -> MeasureProcess:
    if isinstance(lam, MeasureProcess):
        return lam
    if isinstance(lam, FiniteMeasure):
        return MeasureProcess.constant(tree, lam)
    measures = list(lam)
    if len(measures) != tree.steps:
        raise ValueError(f"need one lambda measure per step ({tree.steps}), got {len(measures)}")
    pts = sorted(set(x for mu in measures for x in mu.points))
    coeffs = [np.tile(mu.coefficients_on(pts), (tree.size(t), 1)) for t, mu in enumerate(measures)]
    return MeasureProcess(tuple(pts), coeffs)


def build_market(tree: ScenarioTree, kernel: CovarianceKernel, lam,
                 initial_curve=None, tstar: float | None = None,
                 mvt_cap: float = np.inf) -> MarketModel:
    """Market under the structure condition with market price of risk ``lam``.

    ``lam`` is a single measure (held constant), one measure per step, or a
    node-dependent :class:`MeasureProcess`.  Markets whose mean-variance
    tradeoff exceeds ``mvt_cap`` on some path are rejected.
    """
    lp = _lambda_process(tree, lam)
    if tstar is not None and any(not 0 <= x <= tstar for x in lp.points):
        raise ValueError("market price of risk charges maturities outside [0, T*]")
    z = lp.exposures(tree, kernel)
    mvt = [np.zeros(1)]
    for t in range(tree.steps):
        mvt.append(mvt[-1][tree.parent(t + 1)]
                   + (np.sum(z[t] ** 2, axis=1) * tree.clock.dA[t])[tree.parent(t + 1)])
    market = MarketModel(tree, kernel, lp, z, mvt, initial_curve, tstar)
    if market.max_mvt() > mvt_cap:
        raise ValueError(f"mean-variance tradeoff {market.max_mvt():.6g} exceeds the cap {mvt_cap}")
    return market


def hedging_driver(market: MarketModel) -> DriverSpec:
    """``f(t, y, h) = -h(b_t) = -(h, lambda_t)_{U'}`` with ``alpha^2 = 1 + |lambda|^2``.

    With node-dependent ``lambda`` the per-step Lipschitz constant is the
    largest ``|lambda_t|_{U'}`` over the level.
    """
    theta = np.array([float(np.sqrt(np.max(market.lambda_norm_sq(t))))
                      for t in range(market.steps)])

    def fn(t, nodes, y, z):
        return -np.sum(z * market.lam_exposure[t][nodes], axis=1)

    return DriverSpec(fn, eta=0.0, theta=theta, alpha_shift=1.0, name="hedging",
                      y_independent=True)


def attainable_claim(market: MarketModel, H: MeasureProcess, c: float) -> np.ndarray:
    """Leaf values of ``c + sum_t H_t . dP_t``."""
    tree = market.tree
    z = H.exposures(tree, market.kernel)
    acc = np.full(1, float(c))
    for t in range(tree.steps):
        par = tree.parent(t + 1)
        if H.points:
            dM = level_increments(tree, market.kernel, t, H.points)
            gain = np.sum(H.coeffs[t][par] * dM, axis=1)
        else:
            gain = np.zeros(tree.size(t + 1))
        drift = np.sum(z[t] * market.lam_exposure[t], axis=1) * tree.clock.dA[t]
        acc = acc[par] + gain + drift[par]
    return acc


# ---------------------------------------------------------------------------
# strategies

@dataclass
class GeneralizedStrategy:
    H: MeasureProcess
    C: Adapted

    def value(self, market: MarketModel) -> Adapted:
        G = market.gains(self.H)
        return [g + c for g, c in zip(G, self.C)]

    def is_self_financing(self, tol: float = LRM_TOL) -> bool:
        c0 = float(self.C[0][0])
        return all(np.max(np.abs(c - c0)) <= tol for c in self.C)


@dataclass
class Strategy:
    """``L^2``-strategy in a small market: bond holdings ``H`` and bank account ``eta``."""

    market: MarketModel
    H: MeasureProcess
    eta: Adapted

    @property
    def points(self) -> tuple[float, ...]:
        return self.H.points

    def holdings(self) -> list[np.ndarray]:
        """Bond position at each level: the measure held over the step ending there."""
        tree = self.market.tree
        out = [self.H.coeffs[0]]
        for t in range(1, tree.steps + 1):
            out.append(self.H.coeffs[t - 1][tree.parent(t)])
        return out

    def value(self) -> Adapted:
        P = self.market.prices(self.points)
        return [e + np.sum(h * p, axis=1) for e, h, p in zip(self.eta, self.holdings(), P)]

    def gains(self) -> Adapted:
        return self.market.gains(self.H)

    def cost(self) -> Adapted:
        return [v - g for v, g in zip(self.value(), self.gains())]

    def risk(self) -> Adapted:
        """``R_t = E[(C_S - C_t)^2 | F_t]``."""
        tree = self.market.tree
        C = self.cost()
        out = [None] * (tree.steps + 1)
        out[-1] = np.zeros(tree.size(tree.steps))
        leaf = C[-1]
        for t in range(tree.steps - 1, -1, -1):
            ancestors = _ancestor_values(tree, C[t], t)
            sq = (leaf - ancestors) ** 2
            for s in range(tree.steps - 1, t - 1, -1):
                sq = cond_exp(tree, s, sq)
            out[t] = sq
        return out

    def total_risk(self) -> float:
        tree = self.market.tree
        C = self.cost()
        return tree.expect(tree.steps, (C[-1] - float(C[0][0])) ** 2)

    @classmethod
    def from_cost(cls, market: MarketModel, H: MeasureProcess, C: Adapted) -> "Strategy":
        """The unique strategy with holdings ``H`` and cost process ``C``."""
        G = market.gains(H)
        P = market.prices(H.points)
        tmp = cls(market, H, [])
        eta = [g - np.sum(h * p, axis=1) + np.asarray(c, dtype=float)
               for g, h, p, c in zip(G, tmp.holdings(), P, C)]
        return cls(market, H, eta)

    @classmethod
    def for_claim(cls, market: MarketModel, H: MeasureProcess, xi: np.ndarray) -> "Strategy":
        """Mean-self-financing strategy with holdings ``H`` and terminal value ``xi``."""
        G = market.gains(H)
        C = backward_expectations(market.tree, np.asarray(xi, dtype=float) - G[-1])
        return cls.from_cost(market, H, C)

    def to_json(self) -> dict:
        hold = self.holdings()
        C = self.cost()
        levels = []
        for t in range(self.market.tree.steps + 1):
            levels.append([{
                "holdings": [float(v) for v in hold[t][j]],
                "bank": float(self.eta[t][j]),
                "cost": float(C[t][j]),
            } for j in range(self.market.tree.size(t))])
        return {"maturities": list(self.points), "levels": levels}


def _ancestor_values(tree: ScenarioTree, values: np.ndarray, t: int) -> np.ndarray:
    """Broadcast a level-``t`` variable to the leaves."""
    v = np.asarray(values)
    for s in range(t + 1, tree.steps + 1):
        v = v[tree.parent(s)]
    return v


@dataclass
class FSDecomposition:
    xi0: float
    H: MeasureProcess
    N: Adapted


@dataclass
class AttainabilityResult:
    attainable: bool
    residual: float
    strategy: GeneralizedStrategy
    solution: BSDESolution

    @property
    def Y0(self) -> float:
        return self.solution.Y0


def _h2_norm_sq(tree: ScenarioTree, N: Adapted) -> float:
    return sum(tree.expect(t + 1, increments(tree, N, t) ** 2) for t in range(tree.steps))


def check_attainability(market: MarketModel, xi: np.ndarray, points: Sequence[float],
                        tol: float = ATTAINABILITY_TOL, workers: int = 1) -> AttainabilityResult:
    """Solve the hedging BSDE on the full maturity set and test ``N = 0``."""
    sol = solve_bsde(market.tree, market.kernel, hedging_driver(market), xi, points,
                     workers=workers)
    residual = _h2_norm_sq(market.tree, sol.N)
    C = [np.full(market.tree.size(t), sol.Y0) for t in range(market.steps + 1)]
    return AttainabilityResult(residual <= tol, residual, GeneralizedStrategy(sol.H, C), sol)


@dataclass
class HedgeResult:
    decomposition: FSDecomposition
    strategy: Strategy
    solution: BSDESolution
    diagnostics: dict = field(default_factory=dict)


def solve_hedge(market: MarketModel, xi: np.ndarray, points: Sequence[float], n: int,
                workers: int = 1) -> HedgeResult:
    """Föllmer-Schweizer decomposition and locally risk-minimizing strategy for ``n`` bonds."""
    if not 1 <= n <= len(points):
        raise ValueError(f"n must lie in 1..{len(points)}")
    pts = tuple(float(x) for x in points[:n])
    xi = np.asarray(xi, dtype=float)
    sol = solve_bsde(market.tree, market.kernel, hedging_driver(market), xi, pts,
                     workers=workers)
    C = [sol.Y0 + N_t for N_t in sol.N]
    strategy = Strategy.from_cost(market, sol.H, C)
    V = strategy.value()
    diagnostics = {
        "replication_error": float(np.max(np.abs(V[-1] - xi))),
        "total_risk": strategy.total_risk(),
        "n_norm_sq": _h2_norm_sq(market.tree, sol.N),
        "residual": sol.residual,
    }
    return HedgeResult(FSDecomposition(sol.Y0, sol.H, sol.N), strategy, sol, diagnostics)


def check_lrm(market: MarketModel, strategy: Strategy, tol: float = LRM_TOL) -> tuple[bool, bool]:
    """Mean-self-financing and strong orthogonality of the cost to the traded bonds' martingales."""
    tree = market.tree
    C = strategy.cost()
    msf = orth = True
    for t in range(tree.steps):
        dC = increments(tree, C, t)
        if np.max(np.abs(cond_exp(tree, t, dC))) > tol:
            msf = False
        if strategy.points:
            dM = level_increments(tree, market.kernel, t, strategy.points)
            for i in range(dM.shape[1]):
                if np.max(np.abs(conditional_covariances(tree, t, dC, dM[:, i]))) > tol:
                    orth = False
    return msf, orth


def drifting_cost_strategy(market: MarketModel, strategy: Strategy,
                           drift: float) -> Strategy:
    """Same holdings, cost shifted by the deterministic drift ``drift * A_t``.

    The cost is no longer a martingale, so the strategy is not mean-self-financing.
    """
    A = market.tree.clock.cumulative()
    C = [c + drift * A[t] for t, c in enumerate(strategy.cost())]
    return Strategy.from_cost(market, strategy.H, C)


def correlated_cost_strategy(market: MarketModel, strategy: Strategy, kappa: float,
                             maturity: float | None = None) -> Strategy:
    """Same holdings, cost ``C_0 + kappa * M^x`` for a traded maturity ``x``.

    The cost is a martingale but its covariation with ``M^x`` is
    ``kappa * Q(x, x) dA`` per step, so it is not orthogonal to the traded bonds.
    """
    from .tree import martingale_path
    x = strategy.points[0] if maturity is None else maturity
    M = martingale_path(market.tree, market.kernel, x)
    c0 = float(strategy.cost()[0][0])
    return Strategy.from_cost(market, strategy.H, [c0 + kappa * m for m in M])


# ---------------------------------------------------------------------------
# convergence of small-market hedges

def unweighted_gamma(k_max: float, beta: float | None = None) -> tuple[float, float]:
    """Constant for the unweighted bound, ``gamma_beta * exp(beta * k_max)``.

    With ``beta=None`` the product is minimized over ``beta > 3``.  Returns
    ``(gamma, beta)``.
    """
    if beta is not None:
        return compute_gamma(beta).gamma * float(np.exp(beta * k_max)), float(beta)

    def objective(b):
        return np.log(compute_gamma(b).gamma) + b * k_max

    grid = 3.0 + np.logspace(-2, 2, 41)
    vals = [objective(b) for b in grid]
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    best_b, best_v = float(grid[i]), vals[i]
    if hi > lo:
        res = minimize_scalar(objective, bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-9})
        if res.fun < best_v:
            best_b = float(res.x)
    return compute_gamma(best_b).gamma * float(np.exp(best_b * k_max)), best_b


@dataclass
class HedgingRow:
    n: int
    v_dist: float
    h_dist: float
    total_risk: float
    gamma_unweighted: float

    @property
    def bound_slack(self) -> float:
        return self.gamma_unweighted * self.total_risk - (self.v_dist + self.h_dist)

    def values(self) -> tuple:
        return (self.n, self.v_dist, self.h_dist, self.total_risk, self.gamma_unweighted,
                self.bound_slack)


@dataclass
class HedgingStudy:
    gamma: float
    beta: float
    attainability: AttainabilityResult
    rows: list[HedgingRow]
    hedges: dict

    def to_csv(self) -> str:
        return table_csv(HEDGING_COLUMNS, [r.values() for r in self.rows])


def hedging_convergence(market: MarketModel, xi: np.ndarray, points: Sequence[float],
                        n_values: Sequence[int] | None = None, beta: float | None = None,
                        workers: int = 1, row_workers: int = 1) -> HedgingStudy:
    """Distances between the generalized hedge and the small-market hedges."""
    att = check_attainability(market, xi, points, workers=workers)
    if not att.attainable:
        raise NotAttainable(att.residual)
    tree = market.tree
    dA = tree.clock.dA
    driver = hedging_driver(market)
    k_max = float(driver.K(dA)[-1])
    gamma, beta_used = unweighted_gamma(k_max, beta)
    full = att.solution
    V_full = att.strategy.value(market)
    n_values = list(range(1, len(points) + 1)) if n_values is None else list(n_values)

    def one(n):
        hedge = solve_hedge(market, xi, points, n, workers=workers)
        V = hedge.strategy.value()
        v_dist = sum(dA[t] * tree.expect(t, (V_full[t] - V[t]) ** 2) for t in range(tree.steps))
        h_dist = sum(dA[t] * tree.expect(t, np.sum((full.Z[t] - hedge.solution.Z[t]) ** 2, axis=1))
                     for t in range(tree.steps))
        return n, hedge, HedgingRow(n, v_dist, h_dist, hedge.strategy.total_risk(), gamma)

    if row_workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=row_workers) as pool:
            results = list(pool.map(one, n_values))
    else:
        results = [one(n) for n in n_values]
    return HedgingStudy(gamma, beta_used, att, [r for _, _, r in results],
                        {n: h for n, h, _ in results})
