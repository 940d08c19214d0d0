"""Finite Dirac measures on the maturity interval and finite-rank covariance kernels.

Integrands, frame members and market prices of risk are all finite linear
combinations of Dirac masses.  A kernel is stored through its factor
loadings, ``Q(x, y) = sum_k l_k(x) l_k(y)``, so the U' scalar product of two
measures is the Euclidean product of their factor exposures.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

# relative threshold on squared Gram-Schmidt residuals
ZERO_THRESHOLD = 1e-12


@dataclass(frozen=True)
class FiniteMeasure:
    """Finite signed combination of Dirac masses, atoms sorted by point."""

    points: tuple[float, ...] = ()
    coefs: tuple[float, ...] = ()

    def __post_init__(self):
        if len(self.points) != len(self.coefs):
            raise ValueError("points and coefs must have equal length")
        if len(set(self.points)) != len(self.points):
            raise ValueError("atoms of a FiniteMeasure must sit at distinct points")

    @classmethod
    def from_atoms(cls, atoms: Iterable[tuple[float, float]]) -> "FiniteMeasure":
        merged: dict[float, float] = {}
        for x, c in atoms:
            x = float(x)
            merged[x] = merged.get(x, 0.0) + float(c)
        items = sorted((x, c) for x, c in merged.items() if c != 0.0)
        return cls(tuple(x for x, _ in items), tuple(c for _, c in items))

    @classmethod
    def dirac(cls, x: float, c: float = 1.0) -> "FiniteMeasure":
        return cls.from_atoms([(x, c)])

    @classmethod
    def on(cls, points: Sequence[float], coefs: Sequence[float]) -> "FiniteMeasure":
        """Measure with the given coefficients on the given (distinct) points."""
        if len(set(points)) != len(points):
            raise ValueError("duplicate points")
        return cls.from_atoms(zip(points, coefs))

    @property
    def atoms(self) -> list[tuple[float, float]]:
        return list(zip(self.points, self.coefs))

    def is_zero(self) -> bool:
        return not self.points

    def __add__(self, other: "FiniteMeasure") -> "FiniteMeasure":
        return FiniteMeasure.from_atoms(self.atoms + other.atoms)

    def __sub__(self, other: "FiniteMeasure") -> "FiniteMeasure":
        return self + (-1.0) * other

    def __neg__(self) -> "FiniteMeasure":
        return (-1.0) * self

    def __mul__(self, a: float) -> "FiniteMeasure":
        return FiniteMeasure.from_atoms((x, a * c) for x, c in self.atoms)

    __rmul__ = __mul__

    def coefficients_on(self, points: Sequence[float]) -> np.ndarray:
        """Coefficient vector with respect to ``points``.

        Raises ValueError if the measure charges a point outside ``points``.
        """
        index = {float(x): i for i, x in enumerate(points)}
        out = np.zeros(len(points))
        for x, c in self.atoms:
            if x not in index:
                raise ValueError(f"measure has an atom at {x!r} outside the base points")
            out[index[x]] += c
        return out


LoadingFn = Callable[[int, int, np.ndarray], np.ndarray]


class CovarianceKernel:
    """Finite-rank, possibly time and node dependent covariance kernel.

    ``loading_fn(step, node, points)`` returns an array of shape
    ``(rank, len(points))``.  Kernels flagged ``node_dependent=False`` ignore
    the node argument, which lets tree code evaluate loadings once per step.
    Loadings at a node may only use information available at that node.
    """

    def __init__(self, rank: int, loading_fn: LoadingFn, *, node_dependent: bool = False,
                 name: str = "custom"):
        if rank < 1:
            raise ValueError("kernel rank must be positive")
        self.rank = int(rank)
        self._loading_fn = loading_fn
        self.node_dependent = node_dependent
        self.name = name

    def loadings(self, step: int, node: int, points: Sequence[float]) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        out = np.asarray(self._loading_fn(step, node, pts), dtype=float)
        if out.shape != (self.rank, len(pts)):
            raise ValueError(f"loading function returned shape {out.shape}, "
                             f"expected {(self.rank, len(pts))}")
        return out

    def level_loadings(self, step: int, n_nodes: int, points: Sequence[float]) -> np.ndarray:
        """Loadings for every node of a level, shape ``(n_nodes, rank, n)``."""
        if not self.node_dependent:
            block = self.loadings(step, 0, points)
            return np.broadcast_to(block, (n_nodes,) + block.shape)
        return np.stack([self.loadings(step, j, points) for j in range(n_nodes)])

    def at(self, step: int = 0, node: int = 0) -> "LocalKernel":
        return LocalKernel(self, step, node)

    def __call__(self, x: float, y: float, step: int = 0, node: int = 0) -> float:
        return self.at(step, node)(x, y)

    def __repr__(self):
        return f"CovarianceKernel(name={self.name!r}, rank={self.rank})"


@dataclass(frozen=True)
class LocalKernel:
    """A kernel frozen at one (step, node)."""

    kernel: CovarianceKernel
    step: int = 0
    node: int = 0

    @property
    def rank(self) -> int:
        return self.kernel.rank

    def loadings(self, points: Sequence[float]) -> np.ndarray:
        return self.kernel.loadings(self.step, self.node, points)

    def exposure(self, mu: FiniteMeasure) -> np.ndarray:
        """Factor exposure ``sum_i c_i l(x_i)`` of a measure."""
        if mu.is_zero():
            return np.zeros(self.rank)
        return self.loadings(mu.points) @ np.asarray(mu.coefs)

    def __call__(self, x: float, y: float) -> float:
        lx = self.loadings([x])[:, 0]
        ly = self.loadings([y])[:, 0]
        return float(lx @ ly)


def _local(kernel) -> LocalKernel:
    return kernel if isinstance(kernel, LocalKernel) else kernel.at()


def _check_distinct(points: Sequence[float]) -> None:
    if len(set(float(x) for x in points)) != len(points):
        raise ValueError("points must be pairwise distinct")


def gram(kernel, points: Sequence[float]) -> np.ndarray:
    """Gram matrix ``Q(x_i, x_j)`` of a point set at one (step, node)."""
    _check_distinct(points)
    L = _local(kernel).loadings(points)
    G = L.T @ L
    return 0.5 * (G + G.T)


def uprime_inner(kernel, mu: FiniteMeasure, nu: FiniteMeasure) -> float:
    """U' scalar product ``sum_ij c_i d_j Q(x_i, y_j)``."""
    k = _local(kernel)
    return float(k.exposure(mu) @ k.exposure(nu))


def uprime_norm_sq(kernel, mu: FiniteMeasure) -> float:
    z = _local(kernel).exposure(mu)
    return float(z @ z)


def apply_q(kernel, mu: FiniteMeasure, query: Sequence[float]) -> np.ndarray:
    """Evaluate the function ``(Q mu)(x) = sum_i c_i Q(x, x_i)`` at query points."""
    k = _local(kernel)
    if len(query) == 0:
        return np.zeros(0)
    return k.loadings(query).T @ k.exposure(mu)


@dataclass(frozen=True)
class OrthonormalFrame:
    """Gram-Schmidt frame of a base point sequence at one (step, node).

    Row ``m`` of ``alpha`` holds the coefficients of ``e^{m+1}`` on the base
    points; it is lower triangular and zero rows mark zero frame members.
    """

    points: tuple[float, ...]
    alpha: np.ndarray
    nonzero: np.ndarray
    gram: np.ndarray

    @property
    def size(self) -> int:
        return len(self.points)

    def member(self, m: int) -> FiniteMeasure:
        """Frame member ``e^{m+1}`` (0-based index ``m``) as a measure."""
        return FiniteMeasure.on(self.points, self.alpha[m])

    def members(self) -> list[FiniteMeasure]:
        return [self.member(m) for m in range(self.size)]


def gram_schmidt_frame(kernel, points: Sequence[float]) -> OrthonormalFrame:
    """Orthonormalize ``delta_{x_1}, ..., delta_{x_n}`` in U', in the given order.

    Candidates whose squared residual falls below ``ZERO_THRESHOLD`` times the
    largest diagonal Gram entry become zero members.
    """
    _check_distinct(points)
    pts = tuple(float(x) for x in points)
    L = _local(kernel).loadings(pts)
    G = 0.5 * (L.T @ L + (L.T @ L).T)
    n = len(pts)
    scale = float(np.max(np.diag(G))) if n else 0.0
    alpha = np.zeros((n, n))
    nonzero = np.zeros(n, dtype=bool)
    # exposures of accepted members, used for the projections
    basis: list[np.ndarray] = []
    for m in range(n):
        a = np.zeros(n)
        a[m] = 1.0
        # two passes of modified Gram-Schmidt keep orthogonality near machine precision
        for _ in range(2):
            for j, e in zip(np.flatnonzero(nonzero), basis):
                a = a - float((L @ a) @ e) * alpha[j]
        z = L @ a
        r2 = float(z @ z)
        if scale <= 0.0 or r2 < ZERO_THRESHOLD * scale:
            continue
        a = a / np.sqrt(r2)
        alpha[m] = a
        nonzero[m] = True
        basis.append(L @ a)
    return OrthonormalFrame(pts, alpha, nonzero, G)


def coefficients(mu: FiniteMeasure, frame: OrthonormalFrame) -> np.ndarray:
    """Expansion coefficients ``(mu, e^m)_{U'}`` of ``mu`` in the frame."""
    c = mu.coefficients_on(frame.points)
    return frame.alpha @ (frame.gram @ c)


def tail_norm_sq(mu: FiniteMeasure, frame: OrthonormalFrame, n: int) -> float:
    """Squared U' norm of the part of ``mu`` beyond the first ``n`` frame members."""
    coef = coefficients(mu, frame)
    return float(np.sum(coef[n:] ** 2))


# ---------------------------------------------------------------------------
# kernel constructors

def constant_kernel(value: float = 1.0) -> CovarianceKernel:
    if value < 0:
        raise ValueError("constant kernel value must be nonnegative")
    s = np.sqrt(value)
    return CovarianceKernel(1, lambda step, node, x: np.full((1, len(x)), s), name="constant")


def rank1_linear_kernel(scale: float = 1.0) -> CovarianceKernel:
    """``Q(x, y) = scale * x * y``."""
    s = np.sqrt(scale)
    return CovarianceKernel(1, lambda step, node, x: s * x[None, :], name="rank1-linear")


def nystrom_kernel(fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
                   anchors: Sequence[float], name: str = "nystrom") -> CovarianceKernel:
    """Finite-rank kernel agreeing with ``fn`` whenever one argument is an anchor.

    ``fn`` must be a positive-definite kernel evaluated on broadcast arrays.
    The loadings are ``C^{-1} fn(anchors, x)`` with ``C`` the Cholesky factor of
    the anchor Gram matrix, hence continuous in ``x``.
    """
    a = np.asarray(anchors, dtype=float)
    _check_distinct(list(a))
    G = fn(a[:, None], a[None, :])
    C = np.linalg.cholesky(G)

    def loading(step, node, x):
        from scipy.linalg import solve_triangular
        return solve_triangular(C, fn(a[:, None], x[None, :]), lower=True)

    return CovarianceKernel(len(a), loading, name=name)


def exp_distance_kernel(anchors: Sequence[float], scale: float = 1.0,
                        length: float = 1.0) -> CovarianceKernel:
    """Finite-rank realization of ``scale * exp(-|x - y| / length)`` on anchors."""
    return nystrom_kernel(lambda x, y: scale * np.exp(-np.abs(x - y) / length), anchors,
                          name="exp-distance")


def min_plus_one_kernel(anchors: Sequence[float]) -> CovarianceKernel:
    """Finite-rank realization of ``min(x, y) + 1`` on anchors."""
    return nystrom_kernel(lambda x, y: np.minimum(x, y) + 1.0, anchors, name="min-plus-one")


def time_modulated_kernel(sigmas: Sequence[float], kappas: Sequence[float],
                          modulation: float = 0.0) -> CovarianceKernel:
    """Exponentially damped factor loadings with a per-step volatility level.

    ``l_k(step, x) = sigma_k * (1 + modulation * step) * exp(-kappa_k * x)``.
    Distinct ``kappas`` give a kernel of full rank ``len(sigmas)``.
    """
    s = np.asarray(sigmas, dtype=float)
    k = np.asarray(kappas, dtype=float)
    if s.shape != k.shape or s.ndim != 1 or len(s) == 0:
        raise ValueError("sigmas and kappas must be equal-length nonempty sequences")

    def loading(step, node, x):
        return (1.0 + modulation * step) * s[:, None] * np.exp(-k[:, None] * x[None, :])

    return CovarianceKernel(len(s), loading, name="time-modulated")
