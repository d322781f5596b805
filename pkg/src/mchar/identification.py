"""Identification functions, instrument matrices and the moment functions built from them.

An identification function phi(y, xi) in R^k has expectation zero exactly at
Gamma(F). For the quantile the expectation F(xi) - alpha jumps over zero at
atoms, so every identification function also has a *left* version (the
indicator 1{y < xi} instead of 1{y <= xi}); "zero" then means that the
interval between the left and right expectations contains 0. For the other
functionals both versions coincide.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dgp import ConditionalDGP, ParametricModel
from .distributions import DiscreteDistribution, Functional
from .errors import DimensionMismatch, NonFiniteJacobian, SingularTransform

RANK_TOL = 1e-8
SINGULAR_TOL = 1e-12
FD_STEP = 1e-6


def _k_array(xi, k):
    xi = np.asarray(xi, dtype=float)
    if xi.ndim == 0 or xi.shape[-1] != k:
        raise ValueError(f"xi must have trailing axis {k}, got shape {xi.shape}")
    return xi


class IdentificationFunction:
    """phi: (y, xi) -> R^k. Subclasses implement ``_eval(y, xi, left)``."""

    k = 1
    tag = "abstract"

    def _eval(self, y, xi, left: bool):
        raise NotImplementedError

    def __call__(self, y, xi) -> np.ndarray:
        return self._eval(np.asarray(y, dtype=float), _k_array(xi, self.k), False)

    def left(self, y, xi) -> np.ndarray:
        return self._eval(np.asarray(y, dtype=float), _k_array(xi, self.k), True)

    def validate_on(self, xi_points) -> None:
        """Audit-time hook; transformed functions check their matrix here."""

    def expected(self, dist: DiscreteDistribution, xi) -> tuple[np.ndarray, np.ndarray]:
        """(E_F[phi_left(Y, xi)], E_F[phi(Y, xi)]) for ``xi`` of shape ``(n, k)``."""
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        y = dist.support[:, None]
        right = np.einsum("s,snk->nk", dist.probs, self._eval(y, xi[None], False))
        left = np.einsum("s,snk->nk", dist.probs, self._eval(y, xi[None], True))
        return left, right


class _Canonical(IdentificationFunction):
    def __init__(self, functional: Functional):
        self.functional = functional
        self.k = functional.k
        self.tag = f"canonical:{functional.key}"

    def _eval(self, y, xi, left):
        g = self.functional
        x = xi[..., 0]
        if g.kind == "mean":
            out = x - y
            return np.broadcast_to(out, out.shape)[..., None]
        hit = (y < x) if left else (y <= x)
        if g.kind == "quantile":
            return (hit - g.level)[..., None].astype(float)
        if g.kind == "expectile":
            # the weight is continuous across y == xi once multiplied by (xi - y)
            w = np.abs(g.level - (y <= x))
            return (w * (x - y))[..., None]
        e = xi[..., 1]
        first = (hit - g.level).astype(float)
        second = e - x + (y <= x) * (x - y) / g.level
        first, second = np.broadcast_arrays(first, second)
        return np.stack([first, second], axis=-1)

    def __reduce__(self):
        return (_Canonical, (self.functional,))


def canonical_identification(g: Functional) -> IdentificationFunction:
    """mean: xi - y; quantile: 1{y<=xi} - alpha; expectile: |tau - 1{y<=xi}|(xi - y);
    (VaR, ES): (1{y<=v} - alpha, e - v + 1{y<=v}(v - y)/alpha)."""
    return _Canonical(g)


def _normalize_h(h, xi, k):
    mat = np.asarray(h(xi), dtype=float)
    target = xi.shape[:-1] + (k, k)
    if k == 1 and mat.shape in (xi.shape[:-1], xi.shape):
        mat = mat.reshape(target)
    return np.broadcast_to(mat, target)


class TransformedIdentification(IdentificationFunction):
    """(y, xi) -> h(xi) phi(y, xi).

    ``h`` maps an array of actions ``(..., k)`` to matrices ``(..., k, k)``;
    for k = 1 it may return ``(...)`` or ``(..., 1)``.
    """

    def __init__(self, h: Callable, phi: IdentificationFunction, tag: str = "transformed"):
        self.h = h
        self.phi = phi
        self.k = phi.k
        self.tag = f"{tag}({phi.tag})"

    def _eval(self, y, xi, left):
        base = self.phi._eval(y, xi, left)
        mat = _normalize_h(self.h, xi, self.k)
        return np.einsum("...ij,...j->...i", mat, base)

    def validate_on(self, xi_points) -> None:
        xi = np.atleast_2d(np.asarray(xi_points, dtype=float))
        det = np.linalg.det(_normalize_h(self.h, xi, self.k))
        bad = np.flatnonzero(~(np.abs(det) >= SINGULAR_TOL))
        if bad.size:
            raise SingularTransform(f"det h(xi) ~ 0 at xi={xi[bad[0]].tolist()}")
        self.phi.validate_on(xi)


def transform_identification(h: Callable, phi: IdentificationFunction) -> IdentificationFunction:
    return TransformedIdentification(h, phi)


# ---------------------------------------------------------------------------
# instruments


@dataclass(frozen=True)
class InstrumentMatrix:
    """A(x, theta) in R^{q x k}.

    tags: ``ones`` (all-ones q x k), ``zero``, ``covariate`` (block-diagonal
    copies of x, q = k p), ``covariate-affine`` (block-diagonal copies of
    (1, x), q = k (p + 1)), ``custom`` (``fn(x, theta)`` broadcasting to
    ``(..., q, k)``).
    """

    tag: str
    q: int
    k: int
    fn: Callable | None = None

    def eval(self, x, theta) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        theta = np.asarray(theta, dtype=float)
        batch = np.broadcast_shapes(x.shape[:-1], theta.shape[:-1])
        if self.tag == "ones":
            return np.ones(batch + (self.q, self.k))
        if self.tag == "zero":
            return np.zeros(batch + (self.q, self.k))
        if self.tag in ("covariate", "covariate-affine"):
            col = x
            if self.tag == "covariate-affine":
                col = np.concatenate([np.ones(x.shape[:-1] + (1,)), x], axis=-1)
            r = col.shape[-1]
            if r * self.k != self.q:
                raise DimensionMismatch(f"{self.tag} instrument gives {r * self.k} rows, q={self.q}")
            out = np.zeros(batch + (self.q, self.k))
            col = np.broadcast_to(col, batch + (r,))
            for j in range(self.k):
                out[..., j * r:(j + 1) * r, j] = col
            return out
        out = np.asarray(self.fn(x, theta), dtype=float)
        return np.broadcast_to(out, batch + (self.q, self.k))


def parse_instrument(key: str, q: int, k: int) -> InstrumentMatrix:
    """``ones``, ``zero``, ``covariate``, ``covariate-affine``."""
    if key not in ("ones", "zero", "covariate", "covariate-affine"):
        raise ValueError(f"unknown instrument key {key!r}")
    return InstrumentMatrix(key, q, k)


def scaled_instrument(A: InstrumentMatrix, h: Callable, model: ParametricModel) -> InstrumentMatrix:
    """A'(x, theta) = A(x, theta) h(m(x, theta))^{-1}: pairs with phi' = h phi."""
    def fn(x, theta):
        xi = model.eval(x, theta)
        mat = _normalize_h(h, xi, A.k)
        return A.eval(x, theta) @ np.linalg.inv(mat)

    return InstrumentMatrix("custom", A.q, A.k, fn)


# ---------------------------------------------------------------------------
# model identification functions


class ModelIdentification:
    """psi(y, x, theta) in R^dim. ``provenance`` records how it was built."""

    def __init__(self, dim: int, fn: Callable, left_fn: Callable | None = None, provenance: str = "raw"):
        self.dim = dim
        self._fn = fn
        self._left = left_fn or fn
        self.provenance = provenance

    @property
    def q(self) -> int:
        return self.dim

    def __call__(self, y, x, theta) -> np.ndarray:
        return np.asarray(self._fn(y, x, theta), dtype=float)

    def left(self, y, x, theta) -> np.ndarray:
        return np.asarray(self._left(y, x, theta), dtype=float)

    def conditional_moment(self, dist: DiscreteDistribution, x, thetas) -> tuple[np.ndarray, np.ndarray]:
        """Per-theta interval [lo, hi] of E[psi(Y, x, theta) | X = x], shape ``(n, dim)`` each."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        y = dist.support[:, None]
        x = np.asarray(x, dtype=float)[None, None, :]
        r = np.einsum("s,snd->nd", dist.probs, self(y, x, thetas[None]))
        l = np.einsum("s,snd->nd", dist.probs, self.left(y, x, thetas[None]))
        return np.minimum(l, r), np.maximum(l, r)

    def rows(self, y, X, theta) -> np.ndarray:
        """psi evaluated on data rows: y ``(T,)``, X ``(T, p)`` -> ``(T, dim)``."""
        return self(np.asarray(y, dtype=float), np.asarray(X, dtype=float), np.asarray(theta, dtype=float)[None, :])


class _Composed:
    def __init__(self, A, phi, model, left):
        self.A, self.phi, self.model, self.left = A, phi, model, left

    def __call__(self, y, x, theta):
        xi = self.model.eval(x, theta)
        val = self.phi._eval(np.asarray(y, dtype=float), xi, self.left)
        if self.A is None:
            return val
        return np.einsum("...ij,...j->...i", self.A.eval(x, theta), val)


def compose_instrument(A: InstrumentMatrix, phi: IdentificationFunction, m: ParametricModel) -> ModelIdentification:
    """psi_A(y, x, theta) = A(x, theta) phi(y, m(x, theta)); output dimension q."""
    if A.k != phi.k or phi.k != m.k:
        raise DimensionMismatch(f"A is {A.q}x{A.k}, phi has k={phi.k}, model has k={m.k}")
    if A.q != m.q:
        raise DimensionMismatch(f"A has {A.q} rows but the model has q={m.q} parameters")
    return ModelIdentification(
        A.q, _Composed(A, phi, m, False), _Composed(A, phi, m, True),
        provenance=f"composed(A={A.tag}, phi={phi.tag}, m={m.key})",
    )


def compose_model(phi: IdentificationFunction, m: ParametricModel) -> ModelIdentification:
    """(y, x, theta) -> phi(y, m(x, theta)); output dimension k."""
    if phi.k != m.k:
        raise DimensionMismatch(f"phi has k={phi.k}, model has k={m.k}")
    return ModelIdentification(
        phi.k, _Composed(None, phi, m, False), _Composed(None, phi, m, True),
        provenance=f"composed(phi={phi.tag}, m={m.key})",
    )


# ---------------------------------------------------------------------------
# rank conditions


def conditional_jacobian(phi: IdentificationFunction, dgp: ConditionalDGP, theta, step: float = FD_STEP) -> np.ndarray:
    """D(x_j, theta) = grad_theta E[phi(Y, m(x_j, theta)) | x_j] for every atom, ``(n, k, q)``.

    Central finite differences of the exact conditional expectation.
    """
    theta = np.asarray(theta, dtype=float).ravel()
    q = theta.size
    shifts = np.vstack([theta + step * e for e in np.eye(q)] + [theta - step * e for e in np.eye(q)])
    out = np.empty((dgp.n_atoms, phi.k, q))
    for j, (x, cond) in enumerate(zip(dgp.atoms, dgp.conditionals)):
        xi = dgp.model.eval(x[None, :], shifts)
        _, vals = phi.expected(cond, xi)
        out[j] = ((vals[:q] - vals[q:]) / (2 * step)).T
    if not np.all(np.isfinite(out)):
        raise NonFiniteJacobian("conditional Jacobian is not finite")
    return out


@dataclass(frozen=True)
class RankReport:
    full_rank: bool
    matrix: np.ndarray
    min_singular_value: float


def rank_condition_s2(A: InstrumentMatrix, dgp: ConditionalDGP, theta, theta_prime,
                      phi: IdentificationFunction | None = None) -> RankReport:
    """Full-rank check of E[A(X, theta) D(X, theta')] (q x q) for an instrumented moment."""
    phi = phi or canonical_identification(dgp.functional)
    D = conditional_jacobian(phi, dgp, theta_prime)
    Amat = A.eval(dgp.atoms, np.asarray(theta, dtype=float)[None, :])  # (n, q, k)
    M = np.einsum("n,nqk,nkr->qr", dgp.probs, Amat, D)
    if not np.all(np.isfinite(M)):
        raise NonFiniteJacobian("E[A D] is not finite")
    if M.shape[0] != M.shape[1]:
        raise DimensionMismatch(f"E[A D] has shape {M.shape}; exact identification needs q x q")
    sv = np.linalg.svd(M, compute_uv=False)
    smin = float(sv.min()) if sv.size else 0.0
    return RankReport(smin > RANK_TOL, M, smin)


def rank_as_condition_s3(A: InstrumentMatrix, dgp: ConditionalDGP) -> bool:
    """rank A(x, theta0) == k at every covariate atom."""
    Amat = A.eval(dgp.atoms, dgp.theta0[None, :])
    for mat in Amat:
        sv = np.linalg.svd(mat, compute_uv=False)
        if np.sum(sv > RANK_TOL) < A.k:
            return False
    return True


def rank_condition_along_segments(A: InstrumentMatrix, dgp: ConditionalDGP, thetas, lambdas=(0.0, 0.5, 1.0),
                                  phi: IdentificationFunction | None = None) -> RankReport:
    """Worst case of :func:`rank_condition_s2` over theta in ``thetas`` and
    theta' = (1 - lambda) theta0 + lambda theta."""
    worst = None
    for theta in np.atleast_2d(np.asarray(thetas, dtype=float)):
        for lam in lambdas:
            rep = rank_condition_s2(A, dgp, theta, (1 - lam) * dgp.theta0 + lam * theta, phi)
            if worst is None or rep.min_singular_value < worst.min_singular_value:
                worst = rep
    return worst
