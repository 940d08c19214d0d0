"""Catalog of built-in kernel, driver, market-price-of-risk and claim families.

Every family is looked up by name and built from a flat parameter mapping.
Unknown parameters are rejected so that configuration typos surface early.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import bsde, measures
from .measures import FiniteMeasure
from .tree import MeasureProcess, ScenarioTree, martingale_path, path_sum


@dataclass(frozen=True)
class Param:
    default: object
    doc: str
    required: bool = False


@dataclass(frozen=True)
class Family:
    kind: str
    name: str
    summary: str
    params: Mapping[str, Param]
    build: Callable = field(compare=False, repr=False)

    def resolve(self, given: Mapping | None) -> dict:
        given = dict(given or {})
        unknown = sorted(set(given) - set(self.params))
        if unknown:
            raise KeyError(f"unknown parameter(s) for {self.kind} family '{self.name}': "
                           + ", ".join(unknown))
        out = {}
        for key, spec in self.params.items():
            if key in given:
                out[key] = given[key]
            elif spec.required:
                raise KeyError(f"{self.kind} family '{self.name}' requires parameter '{key}'")
            else:
                out[key] = spec.default
        return out


@dataclass
class ClaimContext:
    tree: ScenarioTree
    kernel: measures.CovarianceKernel
    points: tuple
    market: object = None        # hedging.MarketModel or None


_REGISTRY: dict[tuple[str, str], Family] = {}


def _register(kind, name, summary, params, build):
    _REGISTRY[(kind, name)] = Family(kind, name, summary, params, build)


def get_family(kind: str, name: str) -> Family:
    try:
        return _REGISTRY[(kind, name)]
    except KeyError:
        known = ", ".join(sorted(n for k, n in _REGISTRY if k == kind))
        raise KeyError(f"unknown {kind} family '{name}' (known: {known})") from None


def family_names(kind: str) -> list[str]:
    return sorted(n for k, n in _REGISTRY if k == kind)


def build(kind: str, name: str, params: Mapping | None = None, *args):
    fam = get_family(kind, name)
    return fam.build(*args, **fam.resolve(params))


def list_families() -> list[Family]:
    """All families sorted by kind, then name."""
    return [_REGISTRY[key] for key in sorted(_REGISTRY)]


def describe_families() -> str:
    lines = []
    for fam in list_families():
        lines.append(f"{fam.kind:<7} {fam.name:<20} {fam.summary}")
        for key in sorted(fam.params):
            p = fam.params[key]
            default = "required" if p.required else f"default {p.default!r}"
            lines.append(f"{'':<29}{key} ({default}): {p.doc}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# kernels

_register("kernel", "constant", "Q(x, y) = value; rank one",
          {"value": Param(1.0, "constant covariance level")},
          lambda value: measures.constant_kernel(value))
_register("kernel", "rank1-linear", "Q(x, y) = scale * x * y; rank one",
          {"scale": Param(1.0, "multiplier of x * y")},
          lambda scale: measures.rank1_linear_kernel(scale))
_register("kernel", "exp-distance",
          "scale * exp(-|x - y| / length), exact whenever one argument is an anchor",
          {"anchors": Param(None, "anchor maturities; the rank is their count", True),
           "scale": Param(1.0, "variance level"),
           "length": Param(1.0, "correlation length")},
          lambda anchors, scale, length: measures.exp_distance_kernel(anchors, scale, length))
_register("kernel", "min-plus-one", "min(x, y) + 1, exact whenever one argument is an anchor",
          {"anchors": Param(None, "anchor maturities; the rank is their count", True)},
          lambda anchors: measures.min_plus_one_kernel(anchors))
_register("kernel", "time-modulated",
          "l_k = sigma_k (1 + modulation * step) exp(-kappa_k x); rank len(sigmas)",
          {"sigmas": Param([0.3, 0.2, 0.1], "factor volatilities"),
           "kappas": Param([0.0, 0.7, 2.0], "factor decay rates (distinct for full rank)"),
           "modulation": Param(0.0, "linear growth of the volatility level per step")},
          lambda sigmas, kappas, modulation: measures.time_modulated_kernel(
              sigmas, kappas, modulation))

# ---------------------------------------------------------------------------
# drivers

_register("driver", "zero", "f = 0", {}, lambda: bsde.zero_driver())
_register("driver", "linear-discount", "f = -rate * y",
          {"rate": Param(0.05, "discount rate")},
          lambda rate: bsde.linear_driver(rate))
_register("driver", "lipschitz-mixed",
          "f = offset - rate*y + wobble*sin(y) + theta*(sqrt(1 + |h|^2) - 1)",
          {"rate": Param(0.5, "linear coefficient in y"),
           "wobble": Param(0.3, "amplitude of the sin(y) term"),
           "theta": Param(0.8, "Lipschitz constant in the integrand"),
           "offset": Param(0.1, "constant forcing")},
          lambda rate, wobble, theta, offset: bsde.mixed_driver(rate, wobble, theta, offset))

# ---------------------------------------------------------------------------
# market price of risk


def _lambda_zero(steps):
    return [FiniteMeasure.from_atoms([]) for _ in range(steps)]


def _lambda_constant(steps, point, value):
    return [FiniteMeasure.from_atoms([(point, value)]) for _ in range(steps)]


def _lambda_steps(steps, point, start, slope, values):
    if values is not None:
        if len(values) != steps:
            raise ValueError(f"step-varying lambda needs {steps} values, got {len(values)}")
        coefs = [float(v) for v in values]
    else:
        coefs = [start + slope * t for t in range(steps)]
    return [FiniteMeasure.from_atoms([(point, c)]) for c in coefs]


_register("lambda", "zero", "lambda = 0 (martingale market)", {}, _lambda_zero)
_register("lambda", "constant-dirac", "lambda_t = value * delta_point",
          {"point": Param(1.0, "maturity carrying the mass"),
           "value": Param(0.5, "mass")},
          _lambda_constant)
_register("lambda", "step-varying", "lambda_t = c_t * delta_point with c_t = start + slope*t "
                                    "or an explicit list",
          {"point": Param(1.0, "maturity carrying the mass"),
           "start": Param(0.5, "mass at step 0"),
           "slope": Param(0.1, "increase per step"),
           "values": Param(None, "explicit per-step masses (overrides start/slope)")},
          _lambda_steps)

# ---------------------------------------------------------------------------
# claims


def _claim_constant(ctx: ClaimContext, value):
    return np.full(ctx.tree.size(ctx.tree.steps), float(value))


def _forward_holdings(ctx: ClaimContext, weights, growth):
    w = np.asarray(weights, dtype=float)
    if len(w) > len(ctx.points):
        raise ValueError("attainable-forward has more weights than base maturities")
    pts = ctx.points[:len(w)]
    return MeasureProcess(tuple(pts), [np.tile(w * (1.0 + growth * t), (ctx.tree.size(t), 1))
                                       for t in range(ctx.tree.steps)])


def _claim_forward(ctx: ClaimContext, weights, growth, cash):
    from .hedging import attainable_claim, build_market
    market = ctx.market
    if market is None:
        market = build_market(ctx.tree, ctx.kernel, FiniteMeasure.from_atoms([]))
    return attainable_claim(market, _forward_holdings(ctx, weights, growth), cash)


def _claim_unspanned(ctx: ClaimContext, factor, scale, cash):
    tree = ctx.tree
    if not ctx.kernel.rank <= factor < tree.factors:
        raise ValueError(f"unspanned-factor needs kernel rank ({ctx.kernel.rank}) <= factor "
                         f"< tree factors ({tree.factors}); got factor {factor}")
    return cash + scale * path_sum(tree, [tree.dW[t][:, factor] for t in range(tree.steps)])


def _claim_call(ctx: ClaimContext, maturity, strike, scale):
    if ctx.market is not None:
        price = ctx.market.prices([maturity])[-1][:, 0]
    else:
        price = martingale_path(ctx.tree, ctx.kernel, maturity)[-1]
    return scale * np.maximum(price - strike, 0.0)


_register("claim", "constant", "xi = value", {"value": Param(1.0, "claim value")},
          _claim_constant)
_register("claim", "attainable-forward",
          "xi = cash + sum_t H_t . dP_t with H_t = weights * (1 + growth*t) on the first "
          "len(weights) base maturities",
          {"weights": Param([1.0, -0.5, 0.7], "holdings per base maturity"),
           "growth": Param(0.1, "relative growth of the holdings per step"),
           "cash": Param(0.3, "initial capital c")},
          _claim_forward)
_register("claim", "unspanned-factor",
          "xi = cash + scale * W^factor_S for a tree factor no maturity loads",
          {"factor": Param(None, "index of an unloaded tree factor", True),
           "scale": Param(1.0, "exposure to the factor"),
           "cash": Param(0.0, "constant part")},
          _claim_unspanned)
_register("claim", "bond-call", "xi = scale * max(P^maturity_S - strike, 0)",
          {"maturity": Param(1.0, "bond maturity"),
           "strike": Param(0.0, "strike on the discounted price"),
           "scale": Param(1.0, "notional")},
          _claim_call)
