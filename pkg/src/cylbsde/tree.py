"""Exhaustive scenario trees carrying a deterministic clock and factor increments.

Level ``t`` of a tree holds the nodes at time ``t`` (level 0 is the root).
Children of node ``j`` at level ``t`` occupy the contiguous block
``j*B, ..., j*B + B - 1`` of level ``t + 1``, where ``B`` is the branching of
step ``t``.  Adapted processes are lists of per-level arrays; predictable
quantities for step ``t`` live on the nodes of level ``t``.
"""
from __future__ import annotations

import itertools
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .measures import CovarianceKernel, FiniteMeasure

DEFAULT_NODE_CAP = 2_000_000
PINV_RCOND = 1e-12
TREE_FORMAT = "cylbsde-tree/1"

Adapted = list  # list[np.ndarray], one array per level
DESIGNS = ("full-binary", "simplex")


class NodeCapExceeded(RuntimeError):
    def __init__(self, count: int, cap: int):
        super().__init__(f"tree would have {count} nodes, above the cap of {cap}")
        self.count = count
        self.cap = cap


@dataclass(frozen=True)
class Clock:
    """Deterministic, strictly increasing clock given by its step increments."""

    increments: tuple[float, ...]

    def __post_init__(self):
        if len(self.increments) == 0:
            raise ValueError("clock needs at least one step")
        if any(not (d > 0) for d in self.increments):
            raise ValueError("clock increments must be strictly positive")

    @classmethod
    def uniform(cls, delta: float, steps: int) -> "Clock":
        return cls(tuple([float(delta)] * int(steps)))

    @property
    def steps(self) -> int:
        return len(self.increments)

    @property
    def dA(self) -> np.ndarray:
        return np.asarray(self.increments, dtype=float)

    def cumulative(self) -> np.ndarray:
        """``A`` at levels ``0..S``."""
        return np.concatenate([[0.0], np.cumsum(self.dA)])


def _branch_template(d: int, design: str) -> tuple[np.ndarray, np.ndarray]:
    """Unit branch design: probabilities and increments with identity covariance."""
    if design == "full-binary":
        w = np.array(list(itertools.product([1.0, -1.0], repeat=d)))
        p = np.full(len(w), 1.0 / len(w))
        return p, w
    if design in ("simplex", "orthogonal-array"):
        # Helmert basis of the sum-zero subspace of R^{d+1}
        basis = np.zeros((d + 1, d))
        for k in range(1, d + 1):
            basis[:k, k - 1] = 1.0
            basis[k, k - 1] = -float(k)
            basis[:, k - 1] /= np.sqrt(k * (k + 1))
        centered = np.eye(d + 1) - 1.0 / (d + 1)
        w = np.sqrt(d + 1.0) * centered @ basis
        p = np.full(d + 1, 1.0 / (d + 1))
        return p, w
    raise ValueError(f"unknown branching design {design!r}; expected one of {DESIGNS}")


def branching_of(d: int, design: str) -> int:
    return 2 ** d if design == "full-binary" else d + 1


def node_count(steps: int, branching: int) -> int:
    return sum(branching ** t for t in range(steps + 1))


@dataclass
class ScenarioTree:
    clock: Clock
    factors: int
    branching: list[int]
    prob: list[np.ndarray]          # prob[t]: branch probabilities into level t+1
    dW: list[np.ndarray]            # dW[t]: factor increments into level t+1, (n_{t+1}, d)
    design: str = "custom"
    _node_probs: list[np.ndarray] = field(default=None, init=False, repr=False)

    @property
    def steps(self) -> int:
        return self.clock.steps

    def size(self, t: int) -> int:
        return len(self.prob[t - 1]) if t > 0 else 1

    @property
    def total_nodes(self) -> int:
        return sum(self.size(t) for t in range(self.steps + 1))

    def parent(self, t: int) -> np.ndarray:
        """Parent index (at level ``t - 1``) of each level-``t`` node."""
        return np.repeat(np.arange(self.size(t - 1)), self.branching[t - 1])

    def node_probs(self) -> list[np.ndarray]:
        """Unconditional probability of every node, per level."""
        if self._node_probs is None:
            probs = [np.ones(1)]
            for t in range(self.steps):
                probs.append(probs[-1][self.parent(t + 1)] * self.prob[t])
            self._node_probs = probs
        return self._node_probs

    def expect(self, t: int, values: np.ndarray) -> float:
        """Unconditional expectation of a level-``t`` random variable."""
        return float(self.node_probs()[t] @ np.asarray(values, dtype=float))

    def moment_errors(self) -> tuple[float, float]:
        """Largest deviations of the per-node first and second branch moments."""
        e1 = e2 = 0.0
        for t in range(self.steps):
            B, d = self.branching[t], self.factors
            p = self.prob[t].reshape(-1, B)
            w = self.dW[t].reshape(-1, B, d)
            mean = np.einsum("jb,jbk->jk", p, w)
            cov = np.einsum("jb,jbk,jbl->jkl", p, w, w)
            e1 = max(e1, float(np.max(np.abs(mean))))
            e2 = max(e2, float(np.max(np.abs(cov - self.clock.dA[t] * np.eye(d)))))
        return e1, e2

    # -- serialization ------------------------------------------------------

    def to_json(self) -> dict:
        levels = []
        for t in range(self.steps):
            par = self.parent(t + 1)
            levels.append([
                {"parent": int(par[i]), "probability": float(self.prob[t][i]),
                 "dW": [float(v) for v in self.dW[t][i]]}
                for i in range(self.size(t + 1))
            ])
        return {"format": TREE_FORMAT, "factors": self.factors, "design": self.design,
                "increments": list(self.clock.increments), "levels": levels}

    def dumps(self) -> str:
        return json.dumps(self.to_json())

    @classmethod
    def from_json(cls, data: dict) -> "ScenarioTree":
        if data.get("format") != TREE_FORMAT:
            raise ValueError(f"unsupported tree format {data.get('format')!r}")
        clock = Clock(tuple(float(v) for v in data["increments"]))
        d = int(data["factors"])
        levels = data["levels"]
        if len(levels) != clock.steps:
            raise ValueError("number of levels does not match the clock")
        branching, prob, dW = [], [], []
        n_prev = 1
        for t, nodes in enumerate(levels):
            if len(nodes) % n_prev:
                raise ValueError(f"level {t + 1} is not a uniform branching of level {t}")
            B = len(nodes) // n_prev
            par = np.array([nd["parent"] for nd in nodes])
            if not np.array_equal(par, np.repeat(np.arange(n_prev), B)):
                raise ValueError(f"children at level {t + 1} must be contiguous per parent")
            branching.append(B)
            prob.append(np.array([float(nd["probability"]) for nd in nodes]))
            w = np.array([[float(v) for v in nd["dW"]] for nd in nodes]).reshape(len(nodes), d)
            dW.append(w)
            n_prev = len(nodes)
        return cls(clock, d, branching, prob, dW, design=data.get("design", "custom"))

    @classmethod
    def loads(cls, text: str) -> "ScenarioTree":
        return cls.from_json(json.loads(text))


def build_tree(clock: Clock, d: int, design: str = "full-binary",
               cap: int = DEFAULT_NODE_CAP) -> ScenarioTree:
    """Exhaustive tree whose branches match the clock's increments in mean and covariance."""
    if d < 1:
        raise ValueError("factor count must be at least 1")
    p_unit, w_unit = _branch_template(d, design)
    B = len(p_unit)
    count = node_count(clock.steps, B)
    if count > cap:
        raise NodeCapExceeded(count, cap)
    prob, dW = [], []
    n = 1
    for t in range(clock.steps):
        prob.append(np.tile(p_unit, n))
        dW.append(np.tile(np.sqrt(clock.dA[t]) * w_unit, (n, 1)))
        n *= B
    return ScenarioTree(clock, d, [B] * clock.steps, prob, dW, design=design)


def cond_exp(tree: ScenarioTree, t: int, values: np.ndarray) -> np.ndarray:
    """``E[V | F_t]`` for a level-``t+1`` random variable ``V``."""
    B = tree.branching[t]
    v = np.asarray(values, dtype=float).reshape(-1, B)
    return np.sum(tree.prob[t].reshape(-1, B) * v, axis=1)


def backward_expectations(tree: ScenarioTree, terminal: np.ndarray) -> Adapted:
    """The martingale ``E[xi | F_t]`` at every level."""
    out = [None] * (tree.steps + 1)
    out[-1] = np.asarray(terminal, dtype=float)
    for t in range(tree.steps - 1, -1, -1):
        out[t] = cond_exp(tree, t, out[t + 1])
    return out


def level_increments(tree: ScenarioTree, kernel: CovarianceKernel, t: int,
                     points: Sequence[float]) -> np.ndarray:
    """Increments of ``M^{x_i}`` over step ``t``, shape ``(n_{t+1}, len(points))``."""
    r = kernel.rank
    if r > tree.factors:
        raise ValueError(f"kernel rank {r} exceeds the tree's factor count {tree.factors}")
    L = kernel.level_loadings(t, tree.size(t), points)         # (n_t, r, n)
    B = tree.branching[t]
    w = tree.dW[t][:, :r].reshape(-1, B, r)
    return np.einsum("jki,jbk->jbi", L, w).reshape(tree.size(t + 1), len(points))


def martingale_path(tree: ScenarioTree, kernel: CovarianceKernel, x: float) -> Adapted:
    """The martingale ``M^x`` started at zero."""
    out = [np.zeros(1)]
    for t in range(tree.steps):
        dm = level_increments(tree, kernel, t, [x])[:, 0]
        out.append(out[-1][tree.parent(t + 1)] + dm)
    return out


@dataclass
class MeasureProcess:
    """Predictable measure-valued process on a fixed set of maturities.

    ``coeffs[t]`` has shape ``(n_t, len(points))`` and gives the measure held
    over step ``t`` at each level-``t`` node.
    """

    points: tuple[float, ...]
    coeffs: list[np.ndarray]

    @classmethod
    def zeros(cls, tree: ScenarioTree, points: Sequence[float]) -> "MeasureProcess":
        return cls(tuple(points), [np.zeros((tree.size(t), len(points)))
                                   for t in range(tree.steps)])

    @classmethod
    def constant(cls, tree: ScenarioTree, mu: FiniteMeasure) -> "MeasureProcess":
        c = np.asarray(mu.coefs, dtype=float)
        return cls(mu.points, [np.tile(c, (tree.size(t), 1)) for t in range(tree.steps)])

    def at(self, t: int, node: int) -> FiniteMeasure:
        return FiniteMeasure.on(self.points, self.coeffs[t][node])

    def exposures(self, tree: ScenarioTree, kernel: CovarianceKernel) -> list[np.ndarray]:
        """Factor exposures per step, ``(n_t, rank)``; ``|H_t|_{U'}`` is their norm."""
        out = []
        for t in range(tree.steps):
            if not self.points:
                out.append(np.zeros((tree.size(t), kernel.rank)))
                continue
            L = kernel.level_loadings(t, tree.size(t), self.points)
            out.append(np.einsum("jki,ji->jk", L, self.coeffs[t]))
        return out

    def on_points(self, points: Sequence[float]) -> "MeasureProcess":
        """Re-express on a superset of maturities (zero coefficients elsewhere)."""
        index = {x: i for i, x in enumerate(points)}
        if any(x not in index for x in self.points):
            raise ValueError("target points must contain the process's maturities")
        cols = [index[x] for x in self.points]
        out = []
        for c in self.coeffs:
            z = np.zeros((c.shape[0], len(points)))
            z[:, cols] = c
            out.append(z)
        return MeasureProcess(tuple(points), out)


def stochastic_integral(tree: ScenarioTree, H: MeasureProcess,
                        kernel: CovarianceKernel) -> Adapted:
    """Pathwise ``H . M`` started at zero."""
    out = [np.zeros(1)]
    for t in range(tree.steps):
        if H.points:
            dm = level_increments(tree, kernel, t, H.points)
            gain = np.sum(H.coeffs[t][tree.parent(t + 1)] * dm, axis=1)
        else:
            gain = np.zeros(tree.size(t + 1))
        out.append(out[-1][tree.parent(t + 1)] + gain)
    return out


@dataclass
class LocalProjection:
    """One-step martingale decomposition of a level-``t+1`` variable."""

    mean: np.ndarray        # (n_t,)  E[V | F_t]
    h: np.ndarray           # (n_t, n) coefficients on the maturities
    dN: np.ndarray          # (n_{t+1},) orthogonal residual increment


def _project_chunk(p, w, v, L):
    m = np.sum(p * v, axis=1)
    c = v - m[:, None]
    dM = np.einsum("jki,jbk->jbi", L, w)                             # (J, B, n)
    rhs = np.einsum("jb,jbi,jb->ji", p, dM, c)
    G = np.einsum("jb,jbi,jbl->jil", p, dM, dM)
    G = 0.5 * (G + np.swapaxes(G, 1, 2))
    h = np.einsum("jil,jl->ji", np.linalg.pinv(G, rcond=PINV_RCOND, hermitian=True), rhs)
    dN = c - np.einsum("jbi,ji->jb", dM, h)
    return m, h, dN


def local_projection(tree: ScenarioTree, kernel: CovarianceKernel, t: int,
                     points: Sequence[float], values: np.ndarray,
                     workers: int = 1) -> LocalProjection:
    """Regress the step-``t`` innovation of ``values`` on the increments of ``M^{x_i}``.

    The normal equations use the per-node branch moments of the tree, so the
    residual is exactly (up to rounding) uncorrelated with every ``M^{x_i}``.
    Rank-deficient Gram matrices get the minimum-norm solution.
    """
    n_t, B, r = tree.size(t), tree.branching[t], kernel.rank
    v = np.asarray(values, dtype=float).reshape(n_t, B)
    if len(points) == 0:
        m = cond_exp(tree, t, values)
        return LocalProjection(m, np.zeros((n_t, 0)), (v - m[:, None]).ravel())
    if r > tree.factors:
        raise ValueError(f"kernel rank {r} exceeds the tree's factor count {tree.factors}")
    p = tree.prob[t].reshape(n_t, B)
    w = tree.dW[t][:, :r].reshape(n_t, B, r)
    L = kernel.level_loadings(t, n_t, points)
    if workers <= 1 or n_t < 2 * workers:
        m, h, dN = _project_chunk(p, w, v, L)
    else:
        bounds = np.linspace(0, n_t, workers + 1).astype(int)
        parts = [(p[a:b], w[a:b], v[a:b], L[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda args: _project_chunk(*args), parts))
        m = np.concatenate([r_[0] for r_ in results])
        h = np.concatenate([r_[1] for r_ in results])
        dN = np.concatenate([r_[2] for r_ in results])
    return LocalProjection(m, h, dN.ravel())


@dataclass
class Representation:
    mean: float
    H: MeasureProcess
    N: Adapted
    martingale: Adapted     # E[xi | F_t]


def represent(tree: ScenarioTree, kernel: CovarianceKernel, points: Sequence[float],
              xi: np.ndarray, workers: int = 1) -> Representation:
    """Decompose ``xi = E[xi] + (H . M^n)_S + N_S`` with ``N`` orthogonal to ``M^n``."""
    if len(set(points)) != len(points):
        raise ValueError("maturities must be pairwise distinct")
    V = backward_expectations(tree, xi)
    coeffs = [None] * tree.steps
    dN = [None] * tree.steps
    for t in range(tree.steps):
        proj = local_projection(tree, kernel, t, points, V[t + 1], workers=workers)
        coeffs[t] = proj.h
        dN[t] = proj.dN
    N = [np.zeros(1)]
    for t in range(tree.steps):
        N.append(N[-1][tree.parent(t + 1)] + dN[t])
    return Representation(float(V[0][0]), MeasureProcess(tuple(points), coeffs), N, V)


def conditional_covariances(tree: ScenarioTree, t: int, a: np.ndarray,
                            b: np.ndarray) -> np.ndarray:
    """Per-node ``Cov(a, b | F_t)`` of two level-``t+1`` variables."""
    B = tree.branching[t]
    p = tree.prob[t].reshape(-1, B)
    a = np.asarray(a, dtype=float).reshape(-1, B)
    b = np.asarray(b, dtype=float).reshape(-1, B)
    ma = np.sum(p * a, axis=1, keepdims=True)
    mb = np.sum(p * b, axis=1, keepdims=True)
    return np.sum(p * (a - ma) * (b - mb), axis=1)


def increments(tree: ScenarioTree, X: Adapted, t: int) -> np.ndarray:
    """``X_{t+1} - X_t`` on the level-``t+1`` nodes."""
    return np.asarray(X[t + 1]) - np.asarray(X[t])[tree.parent(t + 1)]


def leaf_values(tree: ScenarioTree, X: Adapted) -> np.ndarray:
    return np.asarray(X[tree.steps])


def path_sum(tree: ScenarioTree, per_step: Sequence[np.ndarray]) -> np.ndarray:
    """Accumulate step quantities attached to level-``t+1`` nodes into leaf values."""
    acc = np.zeros(1)
    for t in range(tree.steps):
        acc = acc[tree.parent(t + 1)] + per_step[t]
    return acc
