"""Loss families: Bregman, generalized piecewise linear, asymmetric squared, joint (VaR, ES).

Conventions
-----------
Loss objects take ``xi`` with a trailing axis of length ``k`` and broadcast
``y`` against ``xi[..., 0]``. The module-level ``*_eval`` helpers are plain
elementwise functions of scalars or arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .distributions import DiscreteDistribution, Expectile, Functional, Mean, Quantile, VarEs
from .errors import DomainError, KinkPoint

KINK_TOL = 1e-9
EXP_MAX = 700.0

Kappa = Optional[Callable[[np.ndarray], np.ndarray]]


def _kappa_values(kappa: Kappa, y) -> np.ndarray:
    if kappa is None:
        return np.zeros_like(np.asarray(y, dtype=float))
    return np.asarray(kappa(np.asarray(y, dtype=float)), dtype=float)


# ---------------------------------------------------------------------------
# convex functions for Bregman losses


@dataclass(frozen=True)
class ConvexSpec:
    """Convex ``phi`` with derivative (a subgradient at kinks) and second derivative.

    kinds: ``square`` (x^2), ``exp`` (e^x), ``abspow`` (|x|^p, p > 1),
    ``pwlinear`` (piecewise linear with ``slopes[j]`` left of ``knots[j]``
    and ``slopes[-1]`` right of the last knot).
    """

    kind: str
    p: float = 2.0
    knots: tuple = ()
    slopes: tuple = ()

    def __post_init__(self):
        if self.kind not in ("square", "exp", "abspow", "pwlinear"):
            raise ValueError(f"unknown convex kind {self.kind!r}")
        if self.kind == "abspow" and not self.p > 1:
            raise ValueError("abspow exponent must exceed 1")
        if self.kind == "pwlinear":
            knots = tuple(float(k) for k in self.knots)
            slopes = tuple(float(s) for s in self.slopes)
            if len(knots) == 0 or len(slopes) != len(knots) + 1:
                raise ValueError("pwlinear needs m knots and m+1 slopes")
            if any(b <= a for a, b in zip(knots, knots[1:])):
                raise ValueError("pwlinear knots must be strictly increasing")
            if any(b < a for a, b in zip(slopes, slopes[1:])):
                raise ValueError("pwlinear slopes must be nondecreasing")
            object.__setattr__(self, "knots", knots)
            object.__setattr__(self, "slopes", slopes)

    @property
    def strictly_convex(self) -> bool:
        return self.kind != "pwlinear"

    @property
    def key(self) -> str:
        if self.kind == "abspow":
            return f"abspow:p={self.p:g}"
        if self.kind == "pwlinear":
            return "pwlinear:knots={}:slopes={}".format(
                "|".join(f"{k:g}" for k in self.knots), "|".join(f"{s:g}" for s in self.slopes)
            )
        return self.kind

    def _check(self, x):
        if self.kind == "exp" and np.any(np.asarray(x) > EXP_MAX):
            raise DomainError("exp argument too large")

    def phi(self, x):
        x = np.asarray(x, dtype=float)
        self._check(x)
        if self.kind == "square":
            return x * x
        if self.kind == "exp":
            return np.exp(x)
        if self.kind == "abspow":
            return np.abs(x) ** self.p
        s = self.slopes
        out = s[0] * x
        for j, k in enumerate(self.knots):
            out = out + (s[j + 1] - s[j]) * np.maximum(x - k, 0.0)
        return out

    def dphi(self, x):
        x = np.asarray(x, dtype=float)
        self._check(x)
        if self.kind == "square":
            return 2.0 * x
        if self.kind == "exp":
            return np.exp(x)
        if self.kind == "abspow":
            return self.p * np.sign(x) * np.abs(x) ** (self.p - 1.0)
        s = self.slopes
        out = np.full_like(x, s[0])
        for j, k in enumerate(self.knots):
            out = out + (s[j + 1] - s[j]) * (x >= k)
        return out

    def d2phi(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "square":
            return np.full_like(x, 2.0)
        if self.kind == "exp":
            return np.exp(x)
        if self.kind == "abspow":
            with np.errstate(divide="ignore"):
                return self.p * (self.p - 1.0) * np.abs(x) ** (self.p - 2.0)
        return np.zeros_like(x)

    def kinks(self) -> np.ndarray:
        if self.kind == "pwlinear":
            return np.asarray(self.knots)
        if self.kind == "abspow" and self.p < 2:
            return np.array([0.0])
        return np.empty(0)


Square = ConvexSpec("square")
Exp = ConvexSpec("exp")


def AbsPow(p: float) -> ConvexSpec:
    return ConvexSpec("abspow", p=float(p))


def PiecewiseLinear(knots, slopes) -> ConvexSpec:
    return ConvexSpec("pwlinear", knots=tuple(knots), slopes=tuple(slopes))


# ---------------------------------------------------------------------------
# increasing functions for GPL losses


@dataclass(frozen=True)
class IncreasingSpec:
    """Nondecreasing ``g`` for generalized piecewise linear losses.

    kinds: ``identity``, ``log`` (positive arguments only), ``power``
    (sign(x)|x|^beta), ``step`` (number of knots <= x).
    """

    kind: str
    beta: float = 1.0
    knots: tuple = ()

    def __post_init__(self):
        if self.kind not in ("identity", "log", "power", "step"):
            raise ValueError(f"unknown increasing kind {self.kind!r}")
        if self.kind == "power" and not self.beta > 0:
            raise ValueError("power exponent must be positive")
        if self.kind == "step":
            knots = tuple(float(k) for k in self.knots)
            if len(knots) == 0 or list(knots) != sorted(knots):
                raise ValueError("step knots must be a sorted, nonempty list")
            object.__setattr__(self, "knots", knots)

    @property
    def strictly_increasing(self) -> bool:
        return self.kind != "step"

    @property
    def key(self) -> str:
        if self.kind == "power":
            return f"power:beta={self.beta:g}"
        if self.kind == "step":
            return "step:knots=" + "|".join(f"{k:g}" for k in self.knots)
        return self.kind

    def g(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "identity":
            return x
        if self.kind == "log":
            if np.any(x <= 0):
                raise DomainError("log-GPL needs positive arguments")
            return np.log(x)
        if self.kind == "power":
            return np.sign(x) * np.abs(x) ** self.beta
        out = np.zeros_like(x)
        for k in self.knots:
            out = out + (x >= k)
        return out

    def dg(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "identity":
            return np.ones_like(x)
        if self.kind == "log":
            if np.any(x <= 0):
                raise DomainError("log-GPL needs positive arguments")
            return 1.0 / x
        if self.kind == "power":
            with np.errstate(divide="ignore"):
                return self.beta * np.abs(x) ** (self.beta - 1.0)
        return np.zeros_like(x)

    def kinks(self) -> np.ndarray:
        if self.kind == "step":
            return np.asarray(self.knots)
        if self.kind == "power" and self.beta < 1:
            return np.array([0.0])
        return np.empty(0)


Identity = IncreasingSpec("identity")
Log = IncreasingSpec("log")


def Power(beta: float) -> IncreasingSpec:
    return IncreasingSpec("power", beta=float(beta))


def Step(knots) -> IncreasingSpec:
    return IncreasingSpec("step", knots=tuple(knots))


# ---------------------------------------------------------------------------
# elementwise formulas


def bregman_eval(spec: ConvexSpec, kappa: Kappa, y, xi):
    """phi(y) - phi(xi) + phi'(xi)(xi - y) + kappa(y)."""
    y = np.asarray(y, dtype=float)
    xi = np.asarray(xi, dtype=float)
    return spec.phi(y) - spec.phi(xi) + spec.dphi(xi) * (xi - y) + _kappa_values(kappa, y)


def gpl_eval(alpha: float, spec: IncreasingSpec, kappa: Kappa, y, xi):
    """(1{y <= xi} - alpha)(g(xi) - g(y)) + kappa(y)."""
    y = np.asarray(y, dtype=float)
    xi = np.asarray(xi, dtype=float)
    return ((y <= xi) - alpha) * (spec.g(xi) - spec.g(y)) + _kappa_values(kappa, y)


def expectile_eval(tau: float, y, xi):
    """|tau - 1{y <= xi}| (y - xi)^2."""
    y = np.asarray(y, dtype=float)
    xi = np.asarray(xi, dtype=float)
    return np.abs(tau - (y <= xi)) * (y - xi) ** 2


def joint_var_es_eval(alpha: float, y, v, e, g1: str = "identity"):
    """Joint loss for (VaR_alpha, ES_alpha) under the lower-tail convention.

    rho = (1{y<=v} - alpha)(G1(v) - G1(y)) + exp(e)(e - v + 1{y<=v}(v - y)/alpha) - exp(e)

    with G1 the identity (``g1="identity"``) or zero (``g1="zero"``). The
    exp(e) weight is strictly increasing with a strictly convex antiderivative,
    which makes the loss strictly consistent with no sign restriction on (v, e).
    """
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    e = np.asarray(e, dtype=float)
    if np.any(e > EXP_MAX) or not (np.all(np.isfinite(v)) and np.all(np.isfinite(e))):
        raise DomainError("(v, e) outside the finite domain of the VaR/ES loss")
    hit = y <= v
    w = np.exp(e)
    out = w * (e - v + hit * (v - y) / alpha) - w
    if g1 == "identity":
        out = out + (hit - alpha) * (v - y)
    return out


# ---------------------------------------------------------------------------
# loss objects


def _split(xi, k):
    xi = np.asarray(xi, dtype=float)
    if xi.ndim == 0 or xi.shape[-1] != k:
        raise ValueError(f"xi must have a trailing axis of length {k}, got shape {xi.shape}")
    return xi


@dataclass(frozen=True)
class Loss:
    """Common interface. ``xi`` always carries a trailing axis of length ``k``."""

    kappa: Kappa = field(default=None, compare=False)

    k = 1

    def core(self, y, xi):
        raise NotImplementedError

    def __call__(self, y, xi):
        xi = _split(xi, self.k)
        y = np.asarray(y, dtype=float)
        out = self.core(y, xi)
        if self.kappa is not None:
            out = out + _kappa_values(self.kappa, y)
        return out

    def excess(self, y, xi, xi_ref):
        """rho(y, xi) - rho(y, xi_ref) with all y-only terms cancelled."""
        return self.core(y, _split(xi, self.k)) - self.core(y, _split(xi_ref, self.k))

    def grad(self, y, xi):
        raise NotImplementedError

    def at_kink(self, y, xi) -> np.ndarray:
        return np.zeros(np.broadcast_shapes(np.shape(y), np.shape(xi)[:-1]), dtype=bool)

    def with_kappa(self, kappa: Kappa) -> "Loss":
        return replace(self, kappa=kappa)

    @property
    def strict(self) -> bool:
        return True

    def natural_functional(self) -> Functional:
        raise NotImplementedError

    @property
    def key(self) -> str:
        raise NotImplementedError


@dataclass(frozen=True)
class BregmanLoss(Loss):
    spec: ConvexSpec = Square

    def core(self, y, xi):
        x = xi[..., 0]
        return self.spec.phi(y) - self.spec.phi(x) + self.spec.dphi(x) * (x - y)

    def excess(self, y, xi, xi_ref):
        x = _split(xi, 1)[..., 0]
        r = _split(xi_ref, 1)[..., 0]
        s = self.spec
        return s.phi(r) - s.phi(x) + s.dphi(x) * (x - y) - s.dphi(r) * (r - y)

    def grad(self, y, xi):
        x = _split(xi, 1)[..., 0]
        return (self.spec.d2phi(x) * (x - y))[..., None]

    def at_kink(self, y, xi):
        x = _split(xi, 1)[..., 0]
        kinks = self.spec.kinks()
        mask = np.zeros(np.broadcast_shapes(np.shape(y), x.shape), dtype=bool)
        for k in kinks:
            mask = mask | (np.abs(x - k) < KINK_TOL)
        return mask

    @property
    def strict(self) -> bool:
        return self.spec.strictly_convex

    def natural_functional(self) -> Functional:
        return Mean()

    @property
    def key(self) -> str:
        return f"bregman:{self.spec.key}"


@dataclass(frozen=True)
class GPLLoss(Loss):
    alpha: float = 0.5
    spec: IncreasingSpec = Identity

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")

    def core(self, y, xi):
        x = xi[..., 0]
        return ((y <= x) - self.alpha) * (self.spec.g(x) - self.spec.g(y))

    def grad(self, y, xi):
        x = _split(xi, 1)[..., 0]
        return (((y <= x) - self.alpha) * self.spec.dg(x))[..., None]

    def at_kink(self, y, xi):
        x = _split(xi, 1)[..., 0]
        mask = np.abs(x - np.asarray(y, dtype=float)) < KINK_TOL
        for k in self.spec.kinks():
            mask = mask | (np.abs(x - k) < KINK_TOL)
        return mask

    @property
    def strict(self) -> bool:
        return self.spec.strictly_increasing

    def natural_functional(self) -> Functional:
        return Quantile(self.alpha)

    @property
    def key(self) -> str:
        return f"gpl:{self.spec.key}:alpha={self.alpha:g}"


@dataclass(frozen=True)
class ExpectileLoss(Loss):
    tau: float = 0.5

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")

    def core(self, y, xi):
        return expectile_eval(self.tau, y, xi[..., 0])

    def grad(self, y, xi):
        x = _split(xi, 1)[..., 0]
        y = np.asarray(y, dtype=float)
        return (-2.0 * np.abs(self.tau - (y <= x)) * (y - x))[..., None]

    def natural_functional(self) -> Functional:
        return Expectile(self.tau)

    @property
    def key(self) -> str:
        return f"expectile:tau={self.tau:g}"


@dataclass(frozen=True)
class VarEsLoss(Loss):
    alpha: float = 0.25
    g1: str = "identity"

    k = 2

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.g1 not in ("identity", "zero"):
            raise ValueError("g1 must be 'identity' or 'zero'")

    def core(self, y, xi):
        return joint_var_es_eval(self.alpha, y, xi[..., 0], xi[..., 1], self.g1)

    def grad(self, y, xi):
        xi = _split(xi, 2)
        v, e = xi[..., 0], xi[..., 1]
        y = np.asarray(y, dtype=float)
        hit = y <= v
        w = np.exp(e)
        dv = w * (hit / self.alpha - 1.0)
        if self.g1 == "identity":
            dv = dv + (hit - self.alpha)
        de = w * (e - v + hit * (v - y) / self.alpha)
        dv, de = np.broadcast_arrays(dv, de)
        return np.stack([dv, de], axis=-1)

    def at_kink(self, y, xi):
        v = _split(xi, 2)[..., 0]
        return np.abs(v - np.asarray(y, dtype=float)) < KINK_TOL

    def natural_functional(self) -> Functional:
        return VarEs(self.alpha)

    @property
    def key(self) -> str:
        base = f"varvs:alpha={self.alpha:g}"
        return base if self.g1 == "identity" else base + ":g1=zero"


def loss_subgradient(loss: Loss, y: float, xi) -> np.ndarray:
    """Gradient of rho(y, .) at xi; raises KinkPoint on the loss's kink set."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if np.any(loss.at_kink(y, xi)):
        raise KinkPoint(f"{loss.key} is not differentiable at xi={xi.tolist()} for y={y}")
    return np.asarray(loss.grad(y, xi), dtype=float)


def expected_loss(loss: Loss, dist: DiscreteDistribution, xi) -> np.ndarray:
    """E_F[rho(Y, xi)] for a batch of actions ``xi`` of shape ``(n, k)``."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    values = loss(dist.support[:, None], xi[None, :, :])
    return dist.probs @ values


def expected_excess(loss: Loss, dist: DiscreteDistribution, xi, xi_ref) -> np.ndarray:
    """E_F[rho(Y, xi) - rho(Y, xi_ref)] for ``xi`` of shape ``(n, k)``."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    ref = np.asarray(xi_ref, dtype=float).reshape(1, 1, -1)
    values = loss.excess(dist.support[:, None], xi[None, :, :], ref)
    return dist.probs @ values


# ---------------------------------------------------------------------------
# string keys


def _parse_params(tokens):
    params = {}
    rest = []
    for tok in tokens:
        if "=" in tok:
            name, value = tok.split("=", 1)
            params[name.strip()] = value.strip()
        else:
            rest.append(tok.strip())
    return rest, params


def _floats(text: str):
    return tuple(float(v) for v in text.split("|") if v != "")


def _take(params, name, cast=float, default=None):
    if name in params:
        return cast(params.pop(name))
    if default is None:
        raise ValueError(f"missing parameter {name!r}")
    return default


def parse_loss(key: str) -> Loss:
    """Build a loss from a key such as ``bregman:square`` or ``gpl:identity:alpha=0.9``.

    Accepted families: ``bregman:{square,exp,abspow:p=..,pwlinear[:knots=a|b:slopes=..]}``,
    ``squared``, ``gpl:{identity,log,power:beta=..,step[:knots=..]}:alpha=..``,
    ``pinball:alpha=..``, ``expectile:tau=..``, ``varvs:alpha=..[:g1=zero]``
    (``vares`` is an alias).
    """
    tokens = [t for t in key.strip().split(":") if t]
    if not tokens:
        raise ValueError("empty loss key")
    family, tokens = tokens[0], tokens[1:]
    rest, params = _parse_params(tokens)
    if family == "squared":
        family, rest = "bregman", ["square"]
    if family == "pinball":
        family, rest = "gpl", ["identity"]

    if family == "bregman":
        if len(rest) != 1:
            raise ValueError(f"bregman loss needs one convex kind: {key!r}")
        kind = rest[0]
        if kind in ("square", "exp"):
            spec = ConvexSpec(kind)
        elif kind == "abspow":
            spec = AbsPow(_take(params, "p"))
        elif kind == "pwlinear":
            knots = _take(params, "knots", _floats, (-1.0, 1.0))
            slopes = _take(params, "slopes", _floats, (-1.0, 0.0, 1.0))
            spec = PiecewiseLinear(knots, slopes)
        else:
            raise ValueError(f"unknown convex function {kind!r}")
        loss = BregmanLoss(spec=spec)
    elif family == "gpl":
        if len(rest) != 1:
            raise ValueError(f"gpl loss needs one increasing kind: {key!r}")
        kind = rest[0]
        alpha = _take(params, "alpha")
        if kind in ("identity", "log"):
            spec = IncreasingSpec(kind)
        elif kind == "power":
            spec = Power(_take(params, "beta"))
        elif kind == "step":
            spec = Step(_take(params, "knots", _floats, (-1.0, 0.0, 1.0)))
        else:
            raise ValueError(f"unknown increasing function {kind!r}")
        loss = GPLLoss(alpha=alpha, spec=spec)
    elif family == "expectile":
        if rest:
            raise ValueError(f"unexpected tokens in {key!r}")
        loss = ExpectileLoss(tau=_take(params, "tau"))
    elif family in ("varvs", "vares"):
        if rest:
            raise ValueError(f"unexpected tokens in {key!r}")
        loss = VarEsLoss(alpha=_take(params, "alpha"), g1=_take(params, "g1", str, "identity"))
    else:
        raise ValueError(f"unknown loss family {family!r}")
    if params:
        raise ValueError(f"unused parameters {sorted(params)} in {key!r}")
    return loss
