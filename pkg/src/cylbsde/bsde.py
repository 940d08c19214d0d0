"""Backward solvers for BSDEs driven by the cylindrical martingale on a scenario tree.

One step of the scheme at a level-``t`` node reads::

    Y_t + H_t . dM_t + dN_t = Y_{t+1} + f(t, Y_t, H_t) dA_t

``(H_t, dN_t)`` is the orthogonal projection of the innovation of ``Y_{t+1}``
on the increments of the chosen maturities, and ``Y_t`` solves the scalar
implicit equation ``Y_t = E[Y_{t+1} | F_t] + f(t, Y_t, H_t) dA_t``.

Drivers see the integrand through its factor exposure ``z = L h`` (shape
``(n_nodes, rank)``), for which ``|h|_{U'} = |z|``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq

from .measures import CovarianceKernel, FiniteMeasure, gram_schmidt_frame
from .tree import (Adapted, MeasureProcess, ScenarioTree, increments, level_increments,
                   local_projection)

RESIDUAL_TOL = 1e-10
CONVERGENCE_COLUMNS = ("n", "norm_Y", "norm_H", "norm_N", "s_beta_total", "gamma",
                       "bound_slack")

DriverFn = Callable[[int, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


class BSDESolverError(RuntimeError):
    pass


def _per_step(value, steps: int) -> np.ndarray:
    if callable(value):
        return np.array([float(value(t)) for t in range(steps)])
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(steps, float(arr))
    if len(arr) != steps:
        raise ValueError(f"per-step Lipschitz data has length {len(arr)}, expected {steps}")
    return arr


@dataclass
class DriverSpec:
    """Driver ``f(step, nodes, y, z)`` with deterministic Lipschitz data.

    ``eta`` and ``theta`` bound the sensitivity in ``y`` and in the U' norm of
    the integrand; each is a scalar, a per-step sequence or a callable of the
    step.  ``alpha_shift`` is added to ``eta + theta**2``; a vanishing
    ``alpha^2`` is replaced by 1 so the clock weights stay strictly positive.
    """

    fn: DriverFn
    eta: object = 0.0
    theta: object = 0.0
    alpha_shift: float = 0.0
    name: str = "custom"
    y_independent: bool = False

    def eta_steps(self, steps: int) -> np.ndarray:
        return _per_step(self.eta, steps)

    def theta_steps(self, steps: int) -> np.ndarray:
        return _per_step(self.theta, steps)

    def alpha_sq(self, steps: int) -> np.ndarray:
        a2 = self.eta_steps(steps) + self.theta_steps(steps) ** 2 + self.alpha_shift
        return np.where(a2 > 0.0, a2, 1.0)

    def K(self, dA: np.ndarray) -> np.ndarray:
        """``K`` at levels ``0..S``."""
        return np.concatenate([[0.0], np.cumsum(self.alpha_sq(len(dA)) * dA)])

    def __call__(self, step: int, nodes: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        out = np.asarray(self.fn(step, nodes, y, z), dtype=float)
        return np.broadcast_to(out, np.shape(y)).astype(float)

    def at(self, kernel: CovarianceKernel, step: int, node: int, y: float,
           h: FiniteMeasure) -> float:
        """Scalar evaluation ``f(step, node, y, h)`` for a measure ``h``."""
        z = kernel.at(step, node).exposure(h)
        return float(self(step, np.array([node]), np.array([y]), z[None, :])[0])


def zero_driver() -> DriverSpec:
    return DriverSpec(lambda t, nodes, y, z: np.zeros_like(y), name="zero",
                      y_independent=True)


def linear_driver(rate: float) -> DriverSpec:
    """``f = -rate * y``."""
    return DriverSpec(lambda t, nodes, y, z: -rate * y, eta=abs(rate), name="linear-discount")


def mixed_driver(rate: float = 0.0, wobble: float = 0.0, theta: float = 0.0,
                 offset: float = 0.0) -> DriverSpec:
    """``f = offset - rate*y + wobble*sin(y) + theta*(sqrt(1 + |h|^2) - 1)``."""
    def fn(t, nodes, y, z):
        return (offset - rate * y + wobble * np.sin(y)
                + theta * (np.sqrt(1.0 + np.sum(z * z, axis=-1)) - 1.0))
    return DriverSpec(fn, eta=abs(rate) + abs(wobble), theta=abs(theta), name="lipschitz-mixed")


@dataclass
class BSDESolution:
    Y: Adapted
    H: MeasureProcess
    N: Adapted
    Z: list                   # exposures of H per step, (n_t, rank)
    residual: float = 0.0
    iterations: int = 0

    @property
    def Y0(self) -> float:
        return float(self.Y[0][0])


def _solve_implicit(driver: DriverSpec, t: int, m: np.ndarray, z: np.ndarray, dA: float,
                    eta: float, max_iter: int = 500) -> tuple[np.ndarray, int]:
    nodes = np.arange(len(m))
    if driver.y_independent:
        f = driver(t, nodes, m, z)
        if not np.all(np.isfinite(f)):
            raise BSDESolverError(f"non-finite driver value at step {t}")
        return m + dA * f, 1
    y = m.copy()
    for it in range(1, max_iter + 1):
        f = driver(t, nodes, y, z)
        if not np.all(np.isfinite(f)):
            raise BSDESolverError(f"non-finite driver value at step {t}")
        y_new = m + dA * f
        err = np.abs(y_new - y)
        y = y_new
        if np.all(err <= 1e-15 * (1.0 + np.abs(y))):
            return y, it
        if not np.all(np.isfinite(y)):
            break
    if eta * dA >= 1.0:
        raise BSDESolverError(
            f"implicit step {t} diverged (eta*dA = {eta * dA:.3g} >= 1); use a finer clock")
    # bracketed fallback: g(y) = y - m - dA f(y) is increasing when eta*dA < 1
    y = np.empty_like(m)
    for j in range(len(m)):
        def g(v, j=j):
            return v - m[j] - dA * float(driver(t, nodes[j:j + 1], np.array([v]), z[j:j + 1])[0])
        f0 = g(m[j]) + 0.0
        width = abs(f0) / (1.0 - eta * dA) + 1e-12
        lo, hi = m[j] - 2 * width, m[j] + 2 * width
        y[j] = brentq(g, lo, hi, xtol=1e-15, rtol=4e-16, maxiter=500)
    return y, max_iter


def _exposures(kernel: CovarianceKernel, tree: ScenarioTree, t: int,
               points: Sequence[float], h: np.ndarray) -> np.ndarray:
    if len(points) == 0:
        return np.zeros((tree.size(t), kernel.rank))
    L = kernel.level_loadings(t, tree.size(t), points)
    return np.einsum("jki,ji->jk", L, h)


def _assemble_N(tree: ScenarioTree, dN: list) -> Adapted:
    N = [np.zeros(1)]
    for t in range(tree.steps):
        N.append(N[-1][tree.parent(t + 1)] + dN[t])
    return N


def step_residual(tree: ScenarioTree, kernel: CovarianceKernel, driver: DriverSpec,
                  sol: BSDESolution) -> float:
    """Largest one-step residual of the discrete BSDE over all branches."""
    worst = 0.0
    dA = tree.clock.dA
    for t in range(tree.steps):
        par = tree.parent(t + 1)
        f = driver(t, np.arange(tree.size(t)), sol.Y[t], sol.Z[t])
        if sol.H.points:
            dM = level_increments(tree, kernel, t, sol.H.points)
            gain = np.sum(sol.H.coeffs[t][par] * dM, axis=1)
        else:
            gain = 0.0
        lhs = sol.Y[t][par] + gain + increments(tree, sol.N, t)
        rhs = sol.Y[t + 1] + f[par] * dA[t]
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst


def solve_bsde(tree: ScenarioTree, kernel: CovarianceKernel, driver: DriverSpec,
               xi: np.ndarray, points: Sequence[float], workers: int = 1,
               check: bool = True) -> BSDESolution:
    """Backward recursion for the BSDE driven by ``M^{x_1}, ..., M^{x_n}``."""
    points = tuple(float(x) for x in points)
    S = tree.steps
    dA = tree.clock.dA
    eta = driver.eta_steps(S)
    Y = [None] * (S + 1)
    Y[S] = np.asarray(xi, dtype=float)
    coeffs, Z, dN = [None] * S, [None] * S, [None] * S
    iters = 0
    for t in range(S - 1, -1, -1):
        proj = local_projection(tree, kernel, t, points, Y[t + 1], workers=workers)
        z = _exposures(kernel, tree, t, points, proj.h)
        Y[t], it = _solve_implicit(driver, t, proj.mean, z, dA[t], eta[t])
        iters = max(iters, it)
        coeffs[t], Z[t], dN[t] = proj.h, z, proj.dN
    sol = BSDESolution(Y, MeasureProcess(points, coeffs), _assemble_N(tree, dN), Z,
                       iterations=iters)
    sol.residual = step_residual(tree, kernel, driver, sol)
    if check and sol.residual > RESIDUAL_TOL * max(1.0, max(np.max(np.abs(y)) for y in Y)):
        raise BSDESolverError(f"one-step residual {sol.residual:.3e} above tolerance")
    return sol


# ---------------------------------------------------------------------------
# weighted norms

@dataclass(frozen=True)
class WeightedNorms:
    beta: float
    y: float        # ||alpha Y||^2_{T,beta}
    h: float        # ||H||^2_{M,beta}
    n: float        # ||N||^2_{H^2_beta}

    @property
    def total(self) -> float:
        return self.y + self.h + self.n


def beta_weights(driver: DriverSpec, dA: np.ndarray, beta: float) -> np.ndarray:
    """Left-endpoint weights ``exp(beta K_t)`` for steps ``0..S-1``."""
    return np.exp(beta * driver.K(dA)[:-1])


def weighted_norms(tree: ScenarioTree, driver: DriverSpec, beta: float,
                   Y: Adapted | None = None, Z: list | None = None,
                   N: Adapted | None = None) -> WeightedNorms:
    """Squared ``S_beta`` component norms of ``(Y, H, N)``; ``H`` enters by its exposures.

    Any component left as ``None`` contributes zero.
    """
    dA = tree.clock.dA
    w = beta_weights(driver, dA, beta)
    a2 = driver.alpha_sq(tree.steps)
    ny = nh = nn = 0.0
    for t in range(tree.steps):
        if Y is not None:
            ny += w[t] * a2[t] * dA[t] * tree.expect(t, np.asarray(Y[t]) ** 2)
        if Z is not None:
            nh += w[t] * dA[t] * tree.expect(t, np.sum(np.asarray(Z[t]) ** 2, axis=1))
        if N is not None:
            nn += w[t] * tree.expect(t + 1, increments(tree, N, t) ** 2)
    return WeightedNorms(beta, ny, nh, nn)


def difference_norms(tree: ScenarioTree, driver: DriverSpec, beta: float,
                     a: BSDESolution, b: BSDESolution) -> WeightedNorms:
    """``S_beta`` component distances between two solutions."""
    return weighted_norms(
        tree, driver, beta,
        Y=[ya - yb for ya, yb in zip(a.Y, b.Y)],
        Z=[za - zb for za, zb in zip(a.Z, b.Z)],
        N=[na - nb for na, nb in zip(a.N, b.N)])


# ---------------------------------------------------------------------------
# Picard iteration

@dataclass
class PicardResult:
    solution: BSDESolution
    distances: list[float]          # squared S_beta distances of successive iterates
    ratios: list[float]
    converged: bool

    @property
    def iterations(self) -> int:
        return len(self.distances)


def picard_map(tree: ScenarioTree, kernel: CovarianceKernel, driver: DriverSpec,
               xi: np.ndarray, points: Sequence[float], current: BSDESolution,
               workers: int = 1) -> BSDESolution:
    """Solve the BSDE whose driver is frozen at ``(current.Y, current.H)``."""
    S = tree.steps
    dA = tree.clock.dA
    Y = [None] * (S + 1)
    Y[S] = np.asarray(xi, dtype=float)
    coeffs, Z, dN = [None] * S, [None] * S, [None] * S
    for t in range(S - 1, -1, -1):
        proj = local_projection(tree, kernel, t, points, Y[t + 1], workers=workers)
        f = driver(t, np.arange(tree.size(t)), current.Y[t], current.Z[t])
        if not np.all(np.isfinite(f)):
            raise BSDESolverError(f"non-finite driver value at step {t}")
        Y[t] = proj.mean + f * dA[t]
        coeffs[t] = proj.h
        Z[t] = _exposures(kernel, tree, t, points, proj.h)
        dN[t] = proj.dN
    return BSDESolution(Y, MeasureProcess(tuple(points), coeffs), _assemble_N(tree, dN), Z)


def _zero_solution(tree: ScenarioTree, kernel: CovarianceKernel,
                   points: Sequence[float]) -> BSDESolution:
    return BSDESolution([np.zeros(tree.size(t)) for t in range(tree.steps + 1)],
                        MeasureProcess.zeros(tree, points),
                        [np.zeros(tree.size(t)) for t in range(tree.steps + 1)],
                        [np.zeros((tree.size(t), kernel.rank)) for t in range(tree.steps)])


def picard_solve(tree: ScenarioTree, kernel: CovarianceKernel, driver: DriverSpec,
                 xi: np.ndarray, points: Sequence[float], beta: float,
                 max_iters: int = 200, tol: float = 1e-13,
                 workers: int = 1) -> PicardResult:
    """Iterate the frozen-driver map from ``(0, 0, 0)`` and record contraction ratios.

    Ratios are squared ``S_beta`` distances of consecutive differences.  They
    are only recorded while the previous distance is above ``1e-20`` relative
    to the iterate's size; below that, rounding dominates the quotient.
    """
    if not beta > 3:
        raise ValueError(f"beta must exceed 3, got {beta}")
    points = tuple(float(x) for x in points)
    prev = _zero_solution(tree, kernel, points)
    distances, ratios = [], []
    converged = False
    for _ in range(max_iters):
        nxt = picard_map(tree, kernel, driver, xi, points, prev, workers=workers)
        d = difference_norms(tree, driver, beta, nxt, prev).total
        size = weighted_norms(tree, driver, beta, nxt.Y, nxt.Z, nxt.N).total
        if distances and distances[-1] > 1e-20 * (1.0 + size):
            ratios.append(d / distances[-1])
        distances.append(d)
        prev = nxt
        if np.sqrt(d) <= tol * (1.0 + np.sqrt(size)):
            converged = True
            break
    prev.residual = step_residual(tree, kernel, driver, prev)
    prev.iterations = len(distances)
    return PicardResult(prev, distances, ratios, converged)


# ---------------------------------------------------------------------------
# gamma certificate

@dataclass(frozen=True)
class GammaCertificate:
    beta: float
    mu_sq: float
    lam_sq: float
    gamma: float

    def admissible(self) -> bool:
        return (self.beta - 2 - self.mu_sq > 0
                and 1 - 1 / self.mu_sq - 1 / self.lam_sq > 0
                and self.lam_sq > 1)


def gamma_value(beta: float, mu_sq: float, lam_sq: float) -> float:
    """The bound constant for admissible ``(mu^2, lambda^2)``, ``inf`` otherwise."""
    c1 = beta - 2 - mu_sq
    c2 = 1 - 1 / mu_sq - 1 / lam_sq
    if c1 <= 0 or c2 <= 0 or lam_sq <= 1:
        return float("inf")
    return (lam_sq - 1) * max(1 / c1, 1 / c2)


def compute_gamma(beta: float, rel_tol: float = 1e-6) -> GammaCertificate:
    """Minimize the constant over admissible ``(mu^2, lambda^2)`` by refined grid search.

    The search runs over ``mu^2 = 1 + (beta - 3) s`` with ``s`` in ``(0, 1)``
    and ``lambda^2 = mu^2/(mu^2 - 1) + exp(u)``, which maps the admissible set
    onto a box.
    """
    if not beta > 3:
        raise ValueError(f"beta must exceed 3, got {beta}")

    def to_params(s, u):
        a = 1.0 + (beta - 3.0) * s
        return a, a / (a - 1.0) + np.exp(u)

    def evaluate(s, u):
        a, L = to_params(s, u)
        with np.errstate(divide="ignore", invalid="ignore"):
            c1 = beta - 2 - a
            c2 = 1 - 1 / a - 1 / L
            g = (L - 1) * np.maximum(1 / c1, 1 / c2)
        return np.where((c1 > 0) & (c2 > 0) & (L > 1), g, np.inf)

    s_lo, s_hi, u_lo, u_hi = 1e-9, 1 - 1e-9, -20.0, 20.0
    best = np.inf
    best_su = (0.5, 0.0)
    for _ in range(100):
        s = np.linspace(s_lo, s_hi, 81)
        u = np.linspace(u_lo, u_hi, 81)
        G = evaluate(s[:, None], u[None, :])
        i, j = np.unravel_index(np.argmin(G), G.shape)
        previous = best
        if G[i, j] < best:
            best, best_su = float(G[i, j]), (float(s[i]), float(u[j]))
        # zoom to +-4 grid cells around the incumbent
        ds, du = (s_hi - s_lo) / 20, (u_hi - u_lo) / 20
        s_lo, s_hi = max(1e-12, best_su[0] - ds), min(1 - 1e-12, best_su[0] + ds)
        u_lo, u_hi = best_su[1] - du, best_su[1] + du
        if ds < 1e-12 and du < 1e-12 and previous - best <= rel_tol * best:
            break
    a, L = to_params(*best_su)
    cert = GammaCertificate(float(beta), float(a), float(L), float(gamma_value(beta, a, L)))
    if not cert.admissible():
        raise RuntimeError("gamma search produced an inadmissible pair")
    return cert


# ---------------------------------------------------------------------------
# convergence over the number of maturities

@dataclass
class ConvergenceRow:
    n: int
    norm_Y: float
    norm_H: float
    norm_N: float
    gamma: float

    @property
    def s_beta_total(self) -> float:
        return self.norm_Y + self.norm_H + self.norm_N

    @property
    def bound_slack(self) -> float:
        return self.gamma * self.norm_N - (self.norm_Y + self.norm_H)

    def values(self) -> tuple:
        return (self.n, self.norm_Y, self.norm_H, self.norm_N, self.s_beta_total,
                self.gamma, self.bound_slack)


@dataclass
class ConvergenceStudy:
    beta: float
    certificate: GammaCertificate
    full: BSDESolution
    rows: list[ConvergenceRow]
    partial: dict = field(default_factory=dict)   # n -> BSDESolution

    def to_csv(self) -> str:
        return table_csv(CONVERGENCE_COLUMNS, [r.values() for r in self.rows])


def format_number(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return "%.17g" % float(v)


def table_csv(columns: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_number(v) for v in row])
    return buf.getvalue()


def convergence_study(tree: ScenarioTree, kernel: CovarianceKernel, driver: DriverSpec,
                      xi: np.ndarray, points: Sequence[float], beta: float,
                      n_values: Sequence[int] | None = None, workers: int = 1,
                      row_workers: int = 1) -> ConvergenceStudy:
    """Distances between the full solution (all points) and the first-``n`` solutions."""
    if not beta > 3:
        raise ValueError(f"beta must exceed 3, got {beta}")
    points = tuple(float(x) for x in points)
    nmax = len(points)
    n_values = list(range(1, nmax + 1)) if n_values is None else list(n_values)
    if any(not 1 <= n <= nmax for n in n_values):
        raise ValueError(f"n must lie in 1..{nmax}")
    cert = compute_gamma(beta)
    full = solve_bsde(tree, kernel, driver, xi, points, workers=workers)

    def one(n):
        part = full if n == nmax else solve_bsde(tree, kernel, driver, xi, points[:n],
                                                 workers=workers)
        d = difference_norms(tree, driver, beta, full, part)
        return n, part, ConvergenceRow(n, d.y, d.h, d.n, cert.gamma)

    if row_workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=row_workers) as pool:
            results = list(pool.map(one, n_values))
    else:
        results = [one(n) for n in n_values]
    return ConvergenceStudy(beta, cert, full, [r for _, _, r in results],
                            {n: part for n, part, _ in results})


def tail_decomposition_error(tree: ScenarioTree, kernel: CovarianceKernel,
                             full: BSDESolution, partial: BSDESolution, n: int) -> float:
    """Largest per-node violation of ``|H - H^n|^2 = tail_n(H)^2 + |P_n H - H^n|^2``.

    ``P_n`` is the U' projection onto the span of the first ``n`` frame members
    built on the full solution's maturities.
    """
    pts = full.H.points
    worst = 0.0
    for t in range(tree.steps):
        n_t = tree.size(t)
        frame = None
        for j in range(n_t):
            if frame is None or kernel.node_dependent:
                frame = gram_schmidt_frame(kernel.at(t, j), pts)
                L = kernel.loadings(t, j, pts)
            c = frame.alpha @ (frame.gram @ full.H.coeffs[t][j])
            tail = float(np.sum(c[n:] ** 2))
            proj = c[:n] @ frame.alpha[:n]               # coefficients of P_n H on pts
            part = np.zeros(len(pts))
            part[:len(partial.H.points)] = partial.H.coeffs[t][j]
            gap = L @ (proj - part)
            diff = full.Z[t][j] - partial.Z[t][j]
            worst = max(worst, abs(float(diff @ diff) - tail - float(gap @ gap)))
    return worst
