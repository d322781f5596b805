"""Finite discrete distributions on the real line and the functionals evaluated on them.

Every expectation in the package is an exact finite sum over a
:class:`DiscreteDistribution`; nothing here samples.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import EmptySupport, NegativeProbability, NonFiniteValue, ZeroTotalMass

PROB_TOL = 1e-12
EXPECTILE_TOL = 1e-12


class DiscreteDistribution:
    """Probability distribution with finitely many atoms.

    Instances are immutable: ``support`` is strictly increasing, ``probs``
    are positive and sum to one within ``PROB_TOL``. Build them through
    :func:`make_discrete`, which sorts, merges duplicates and normalizes.
    """

    __slots__ = ("_support", "_probs", "_cdf")

    def __init__(self, support, probs):
        support = np.array(support, dtype=float)
        probs = np.array(probs, dtype=float)
        if support.ndim != 1 or support.shape != probs.shape:
            raise ValueError("support and probs must be 1-D arrays of equal length")
        if support.size == 0:
            raise EmptySupport("distribution needs at least one atom")
        if not np.all(np.isfinite(support)):
            raise NonFiniteValue("support contains non-finite values")
        if np.any(probs <= 0):
            raise NegativeProbability("probabilities must be strictly positive")
        if abs(probs.sum() - 1.0) > PROB_TOL:
            raise ValueError(f"probabilities sum to {probs.sum()!r}, not 1")
        if np.any(np.diff(support) <= 0):
            raise ValueError("support must be strictly increasing")
        support.setflags(write=False)
        probs.setflags(write=False)
        cdf = np.cumsum(probs)
        cdf.setflags(write=False)
        self._support = support
        self._probs = probs
        self._cdf = cdf

    @property
    def support(self) -> np.ndarray:
        return self._support

    @property
    def probs(self) -> np.ndarray:
        return self._probs

    @property
    def cdf_values(self) -> np.ndarray:
        """F evaluated at each support point."""
        return self._cdf

    def __len__(self) -> int:
        return self._support.size

    def key(self) -> tuple:
        return (tuple(self._support.tolist()), tuple(self._probs.tolist()))

    def __eq__(self, other) -> bool:
        if not isinstance(other, DiscreteDistribution):
            return NotImplemented
        return self.key() == other.key()

    def __hash__(self) -> int:
        return hash(self.key())

    def __repr__(self) -> str:
        return f"DiscreteDistribution(support={self._support.tolist()}, probs={self._probs.tolist()})"

    def cdf(self, y) -> np.ndarray:
        """F(y) = P(Y <= y), vectorized over ``y``."""
        idx = np.searchsorted(self._support, np.asarray(y, dtype=float), side="right")
        padded = np.concatenate(([0.0], self._cdf))
        return padded[idx]

    def mean(self) -> float:
        return float(self._probs @ self._support)

    def shifted(self, shift: float, scale: float = 1.0) -> "DiscreteDistribution":
        """Distribution of ``shift + scale * Y`` for ``scale > 0``."""
        if scale <= 0:
            raise ValueError("scale must be positive")
        return DiscreteDistribution(shift + scale * self._support, self._probs)


def make_discrete(support: Sequence[float], probs: Sequence[float]) -> DiscreteDistribution:
    """Build a validated distribution: sort, merge duplicate atoms, renormalize.

    >>> make_discrete([1, 1, 2], [0.25, 0.25, 0.5]).probs.tolist()
    [0.5, 0.5]
    """
    support = np.asarray(support, dtype=float).ravel()
    probs = np.asarray(probs, dtype=float).ravel()
    if support.size == 0 or probs.size == 0:
        raise EmptySupport("empty support")
    if support.shape != probs.shape:
        raise ValueError("support and probs must have equal length")
    if not np.all(np.isfinite(support)) or not np.all(np.isfinite(probs)):
        raise NonFiniteValue("support and probs must be finite")
    if np.any(probs < 0):
        raise NegativeProbability("negative probability")
    total = probs.sum()
    if total <= 0:
        raise ZeroTotalMass("total mass is zero")
    uniq, inverse = np.unique(support, return_inverse=True)
    merged = np.zeros(uniq.size)
    np.add.at(merged, inverse, probs)
    keep = merged > 0
    uniq, merged = uniq[keep], merged[keep]
    return DiscreteDistribution(uniq, merged / merged.sum())


def point_mass(c: float) -> DiscreteDistribution:
    return DiscreteDistribution([float(c)], [1.0])


def mixture(dists: Sequence[DiscreteDistribution], weights: Sequence[float]) -> DiscreteDistribution:
    """Finite mixture sum_j w_j F_j (weights renormalized)."""
    support = np.concatenate([d.support for d in dists])
    probs = np.concatenate([w * d.probs for d, w in zip(dists, weights)])
    return make_discrete(support, probs)


def expectation(dist: DiscreteDistribution, f: Callable[[np.ndarray], np.ndarray]) -> float:
    """E_F[f(Y)] as the finite sum sum_i p_i f(y_i).

    ``f`` is called once on the whole support array (numpy broadcasting).
    """
    values = np.broadcast_to(np.asarray(f(dist.support), dtype=float), dist.support.shape)
    if not np.all(np.isfinite(values)):
        raise NonFiniteValue("f is not finite on the support")
    return float(dist.probs @ values)


# ---------------------------------------------------------------------------
# functionals


@dataclass(frozen=True)
class Functional:
    """A target functional Gamma with its action dimension ``k``.

    ``kind`` is one of ``mean``, ``quantile``, ``expectile``, ``vares``;
    ``level`` is alpha (quantile, vares) or tau (expectile).
    """

    kind: str
    level: float | None = None

    def __post_init__(self):
        if self.kind not in ("mean", "quantile", "expectile", "vares"):
            raise ValueError(f"unknown functional kind {self.kind!r}")
        if self.kind == "mean":
            if self.level is not None:
                raise ValueError("mean takes no level")
        else:
            if self.level is None or not (0.0 < self.level < 1.0):
                raise ValueError(f"{self.kind} level must lie strictly inside (0, 1)")

    @property
    def k(self) -> int:
        return 2 if self.kind == "vares" else 1

    @property
    def key(self) -> str:
        if self.kind == "mean":
            return "mean"
        name = "tau" if self.kind == "expectile" else "alpha"
        return f"{self.kind}:{name}={self.level:g}"

    def __call__(self, dist: DiscreteDistribution) -> np.ndarray:
        return eval_functional(self, dist)


def Mean() -> Functional:
    return Functional("mean")


def Quantile(alpha: float) -> Functional:
    return Functional("quantile", float(alpha))


def Expectile(tau: float) -> Functional:
    return Functional("expectile", float(tau))


def VarEs(alpha: float) -> Functional:
    return Functional("vares", float(alpha))


_FUNCTIONAL_RE = re.compile(r"^(mean|quantile|expectile|vares|varvs)(?::(alpha|tau)=([-+0-9.eE]+))?$")


def parse_functional(key: str) -> Functional:
    """Parse ``mean``, ``quantile:alpha=0.1``, ``expectile:tau=0.7``, ``vares:alpha=0.25``."""
    m = _FUNCTIONAL_RE.match(key.strip())
    if m is None:
        raise ValueError(f"malformed functional key {key!r}")
    kind, pname, value = m.groups()
    if kind == "varvs":
        kind = "vares"
    if kind == "mean":
        if value is not None:
            raise ValueError("mean takes no parameter")
        return Mean()
    if value is None:
        raise ValueError(f"{kind} needs a level")
    expected = "tau" if kind == "expectile" else "alpha"
    if pname != expected:
        raise ValueError(f"{kind} is parameterized by {expected}, got {pname}")
    return Functional(kind, float(value))


def lower_quantile(dist: DiscreteDistribution, alpha: float) -> float:
    """inf{y : F(y) >= alpha}; always a support point."""
    idx = int(np.searchsorted(dist.cdf_values, alpha - PROB_TOL, side="left"))
    idx = min(idx, len(dist) - 1)
    return float(dist.support[idx])


def expected_shortfall(dist: DiscreteDistribution, alpha: float) -> float:
    """Lower-tail ES: (1/alpha) * integral_0^alpha of the quantile function.

    The quantile function is piecewise constant, equal to y_i on
    (F(y_{i-1}), F(y_i)], so the integral is an exact finite sum.
    """
    upper = np.minimum(dist.cdf_values, alpha)
    lower = np.concatenate(([0.0], dist.cdf_values[:-1]))
    widths = np.clip(upper - lower, 0.0, None)
    return float(widths @ dist.support) / alpha


def _expectile_score(dist: DiscreteDistribution, tau: float, xi: float) -> float:
    y, p = dist.support, dist.probs
    w = np.where(y <= xi, 1.0 - tau, tau)
    return float(p @ (w * (y - xi)))


def expectile(dist: DiscreteDistribution, tau: float, tol: float = EXPECTILE_TOL) -> float:
    """tau-expectile by bisection on [min support, max support]."""
    lo, hi = float(dist.support[0]), float(dist.support[-1])
    if lo == hi:
        return lo
    # score is decreasing in xi: >= 0 at lo, <= 0 at hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if _expectile_score(dist, tau, mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def eval_functional(g: Functional, dist: DiscreteDistribution) -> np.ndarray:
    """Gamma(F) as an array of shape ``(g.k,)``."""
    if g.kind == "mean":
        return np.array([dist.mean()])
    if g.kind == "quantile":
        return np.array([lower_quantile(dist, g.level)])
    if g.kind == "expectile":
        return np.array([expectile(dist, g.level)])
    return np.array([lower_quantile(dist, g.level), expected_shortfall(dist, g.level)])


def crossing_margin(dist: DiscreteDistribution, alpha: float) -> float:
    """min_i |F(y_i) - alpha|; positive means the lower and upper alpha-quantiles agree."""
    return float(np.min(np.abs(dist.cdf_values - alpha)))
