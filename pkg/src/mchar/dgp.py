"""Semiparametric conditional data-generating processes with finite covariate support.

A :class:`ConditionalDGP` is a covariate law on finitely many atoms, one
conditional response distribution per atom, and a correctly specified
parametric model ``m(x, theta0) = Gamma(F_{Y|X=x})``. Because the covariate
support is finite, every "almost surely" statement reduces to "at every atom"
and every expectation is an exact sum.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize as _scipy_minimize
from scipy.spatial import cKDTree

from .distributions import DiscreteDistribution, Functional, eval_functional
from .errors import BoundaryParameter, DimensionMismatch, Misspecified, NonUnique, NullEvent
from .grids import Grid, lattice

SPEC_TOL = 1e-10
MATCH_TOL = 1e-8
CLOSURE_CAP = 12

_LINKS = {
    "identity": lambda z: z,
    "exp": np.exp,
    "tanh": np.tanh,
}


@dataclass(frozen=True)
class ParametricModel:
    """Parametric model m(x, theta) with an axis-aligned parameter box.

    kinds
      ``linear``  k=1, m = x'theta (plus theta[0] when ``intercept``)
      ``link``    k=1, m = link(x'theta) with a strictly monotone link
      ``twodim``  k=2, m = (x'theta_v, x'theta_e), theta = (theta_v, theta_e)
    """

    kind: str
    p: int
    theta_box: tuple
    intercept: bool = False
    link: str = "identity"

    def __post_init__(self):
        if self.kind not in ("linear", "link", "twodim"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.link not in _LINKS:
            raise ValueError(f"unknown link {self.link!r}")
        box = np.asarray(self.theta_box, dtype=float).reshape(-1, 2)
        if box.shape[0] != self.q:
            raise DimensionMismatch(f"theta_box has {box.shape[0]} rows, model has q={self.q}")
        if np.any(box[:, 1] <= box[:, 0]):
            raise ValueError("theta_box needs nonempty interior")
        object.__setattr__(self, "theta_box", tuple(map(tuple, box.tolist())))

    @property
    def k(self) -> int:
        return 2 if self.kind == "twodim" else 1

    @property
    def q(self) -> int:
        per = self.p + (1 if self.intercept else 0)
        return 2 * per if self.kind == "twodim" else per

    @property
    def box(self) -> np.ndarray:
        return np.asarray(self.theta_box, dtype=float)

    @property
    def key(self) -> str:
        name = {"linear": "linear", "link": f"link:{self.link}", "twodim": "twodim"}[self.kind]
        return name + ("-intercept" if self.intercept else "")

    def _linear(self, x, theta):
        if self.intercept:
            return theta[..., 0] + np.sum(x * theta[..., 1:], axis=-1)
        return np.sum(x * theta, axis=-1)

    def eval(self, x, theta) -> np.ndarray:
        """m(x, theta) with broadcasting: x ``(..., p)``, theta ``(..., q)`` -> ``(..., k)``."""
        x = np.asarray(x, dtype=float)
        theta = np.asarray(theta, dtype=float)
        if x.shape[-1] != self.p or theta.shape[-1] != self.q:
            raise DimensionMismatch(f"model expects x in R^{self.p}, theta in R^{self.q}")
        if self.kind == "twodim":
            half = self.q // 2
            v = self._linear(x, theta[..., :half])
            e = self._linear(x, theta[..., half:])
            v, e = np.broadcast_arrays(v, e)
            return np.stack([v, e], axis=-1)
        out = self._linear(x, theta)
        if self.kind == "link":
            out = _LINKS[self.link](out)
        return out[..., None]

    def interior(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        box = self.box
        return bool(np.all(theta > box[:, 0]) and np.all(theta < box[:, 1]))


def parse_model(key: str, p: int, theta_box) -> ParametricModel:
    """``linear``, ``linear-intercept``, ``link:exp``, ``link:tanh``, ``twodim``."""
    key = key.strip()
    intercept = key.endswith("-intercept")
    if intercept:
        key = key[: -len("-intercept")]
    if key == "linear":
        return ParametricModel("linear", p, theta_box, intercept=intercept)
    if key.startswith("link:"):
        return ParametricModel("link", p, theta_box, intercept=intercept, link=key[5:])
    if key == "twodim":
        return ParametricModel("twodim", p, theta_box, intercept=intercept)
    raise ValueError(f"unknown model key {key!r}")


# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ConditionalDGP:
    """One element Z = (Y, X) of the class; construct via :func:`make_dgp`."""

    atoms: np.ndarray
    probs: np.ndarray
    conditionals: tuple
    model: ParametricModel
    functional: Functional
    theta0: np.ndarray
    theta_grid: Grid = field(repr=False)

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[0]

    def key(self) -> tuple:
        return (
            self.atoms.tobytes(),
            self.probs.tobytes(),
            tuple(c.key() for c in self.conditionals),
            self.theta0.tobytes(),
        )

    def same_as(self, other: "ConditionalDGP") -> bool:
        return self.key() == other.key() and self.model == other.model and self.functional == other.functional

    def model_values(self, theta) -> np.ndarray:
        """m(x_j, theta) for every atom j: shape ``(n_atoms, ..., k)``."""
        theta = np.asarray(theta, dtype=float)
        x = self.atoms.reshape((self.n_atoms,) + (1,) * (theta.ndim - 1) + (self.model.p,))
        return self.model.eval(x, theta[None])


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def default_theta_grid(model: ParametricModel, mesh: float, theta0=None) -> Grid:
    return lattice(model.box, mesh, anchor=theta0)


def _max_deviation(atoms, model, theta, theta0) -> np.ndarray:
    target = model.eval(atoms, theta0[None, :])  # (n, k)
    vals = model.eval(atoms[:, None, :], np.atleast_2d(theta)[None, :, :])  # (n, N, k)
    return np.max(np.abs(vals - target[:, None, :]), axis=(0, 2))


def _check_unique(atoms, model, theta0, grid: Grid) -> None:
    pts = grid.points
    dev = _max_deviation(atoms, model, pts, theta0)
    far = np.max(np.abs(pts - theta0), axis=1) > grid.mesh
    hits = np.flatnonzero(far & (dev < MATCH_TOL))
    if hits.size:
        raise NonUnique(
            f"theta={pts[hits[0]].tolist()} reproduces m(x, theta0) at every atom; "
            "the parameter is not identified"
        )
    # refine around the closest off-ball near-matches before accepting uniqueness
    cand = np.flatnonzero(far)
    if cand.size == 0:
        return
    best = cand[np.argsort(dev[cand])[:5]]
    box = model.box
    for i in best:
        start = pts[i]
        lo = np.maximum(start - grid.mesh, box[:, 0])
        hi = np.minimum(start + grid.mesh, box[:, 1])
        res = _scipy_minimize(
            lambda th: float(_max_deviation(atoms, model, th, theta0)[0]),
            start,
            method="Nelder-Mead",
            bounds=list(zip(lo, hi)),
            options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 400},
        )
        if res.fun < MATCH_TOL and np.max(np.abs(res.x - theta0)) > grid.mesh:
            raise NonUnique(f"theta={res.x.tolist()} (refined) reproduces m(x, theta0) at every atom")


def make_dgp(
    covariate_law,
    conditionals: Sequence[DiscreteDistribution],
    model: ParametricModel,
    functional: Functional,
    theta0,
    theta_grid: Grid | None = None,
    theta_mesh: float = 0.05,
) -> ConditionalDGP:
    """Validate a finite-support DGP (model holds at theta0 on every atom) and return it.

    ``covariate_law`` is ``(atoms, probs)`` with atoms of shape ``(n, p)``.
    Probabilities are renormalized. Raises :class:`Misspecified` when the
    functional of some conditional differs from the model at theta0,
    :class:`NonUnique` when another parameter on ``theta_grid`` (or a local
    refinement of it) also matches, :class:`BoundaryParameter` when theta0 is
    not interior to the parameter box.
    """
    atoms, probs = covariate_law
    atoms = np.array(atoms, dtype=float)
    if atoms.ndim == 1:
        atoms = atoms[:, None]
    probs = np.array(probs, dtype=float).ravel()
    theta0 = np.array(theta0, dtype=float).ravel()
    if atoms.shape[0] != probs.size or len(conditionals) != probs.size:
        raise DimensionMismatch("atoms, probs and conditionals must have equal length")
    if atoms.shape[1] != model.p:
        raise DimensionMismatch(f"atoms have dimension {atoms.shape[1]}, model expects p={model.p}")
    if theta0.size != model.q:
        raise DimensionMismatch(f"theta0 has length {theta0.size}, model expects q={model.q}")
    if functional.k != model.k:
        raise DimensionMismatch(f"functional has k={functional.k}, model has k={model.k}")
    if probs.size == 0 or np.any(probs <= 0):
        raise NullEvent("covariate probabilities must be positive")
    if np.unique(atoms, axis=0).shape[0] != atoms.shape[0]:
        raise ValueError("covariate atoms must be distinct")
    probs = probs / probs.sum()
    if not model.interior(theta0):
        raise BoundaryParameter(f"theta0={theta0.tolist()} is not interior to {model.theta_box}")

    fitted = model.eval(atoms, theta0[None, :])
    for j, cond in enumerate(conditionals):
        gamma = eval_functional(functional, cond)
        if np.max(np.abs(gamma - fitted[j])) > SPEC_TOL:
            raise Misspecified(
                f"atom {atoms[j].tolist()}: Gamma(F)={gamma.tolist()} but m(x, theta0)={fitted[j].tolist()}"
            )

    if theta_grid is None:
        theta_grid = default_theta_grid(model, theta_mesh)
    _check_unique(atoms, model, theta0, theta_grid)

    return ConditionalDGP(
        atoms=_frozen(atoms),
        probs=_frozen(probs),
        conditionals=tuple(conditionals),
        model=model,
        functional=functional,
        theta0=_frozen(theta0),
        theta_grid=theta_grid,
    )


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SurjectivityReport:
    atom: np.ndarray
    covered: np.ndarray
    distance: np.ndarray

    @property
    def fraction(self) -> float:
        return float(np.mean(self.covered)) if self.covered.size else 1.0

    @property
    def passed(self) -> bool:
        return bool(np.all(self.covered))


def verify_surjectivity(model: ParametricModel, x_atom, xi_grid, theta_grid: Grid | None = None,
                        tol: float | None = None) -> SurjectivityReport:
    """Grid probe of theta -> m(x, theta) being onto the points of ``xi_grid``.

    A point xi counts as covered when some theta on the parameter grid has
    sup-norm distance |m(x, theta) - xi| below ``tol`` (default: the xi mesh).
    """
    if theta_grid is None:
        theta_grid = default_theta_grid(model, 0.01)
    xi_pts = xi_grid.points if isinstance(xi_grid, Grid) else np.atleast_2d(np.asarray(xi_grid, dtype=float))
    if xi_pts.shape[1] != model.k and xi_pts.shape[0] == model.k:
        xi_pts = xi_pts.T
    if tol is None:
        tol = xi_grid.mesh if isinstance(xi_grid, Grid) else 1e-8
    x = np.asarray(x_atom, dtype=float).ravel()
    image = model.eval(x[None, :], theta_grid.points)
    dist, _ = cKDTree(image).query(xi_pts, p=np.inf)
    return SurjectivityReport(atom=x, covered=dist < tol, distance=dist)


def reweight(dgp: ConditionalDGP, event) -> ConditionalDGP:
    """Condition the covariate law on an event (a set of atom indices or a mask).

    Conditionals of surviving atoms are kept unchanged, so theta0 is preserved;
    the result is revalidated against the model with the same theta0.
    """
    event = np.asarray(event)
    if event.dtype == bool:
        idx = np.flatnonzero(event)
    else:
        idx = np.unique(event.astype(int))
    if idx.size == 0 or dgp.probs[idx].sum() <= 0:
        raise NullEvent("event has zero probability")
    if np.any(idx < 0) or np.any(idx >= dgp.n_atoms):
        raise IndexError("event refers to non-existent atoms")
    if idx.size == dgp.n_atoms:
        return dgp
    return make_dgp(
        (dgp.atoms[idx], dgp.probs[idx]),
        [dgp.conditionals[i] for i in idx],
        dgp.model,
        dgp.functional,
        dgp.theta0,
        theta_grid=dgp.theta_grid,
    )


@dataclass(frozen=True)
class DGPClass:
    """A finite class of DGPs sharing model, functional and parameter box.

    ``origins[i]`` is ``None`` for declared members and ``(parent, atoms)``
    for members added by :func:`close_under_reweighting`.
    """

    members: tuple
    closed: bool = False
    origins: tuple = ()

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise ValueError("a DGP class needs at least one member")
        first = members[0]
        for d in members[1:]:
            if d.model != first.model or d.functional != first.functional:
                raise ValueError("all members must share model, functional and parameter box")
        object.__setattr__(self, "members", members)
        origins = tuple(self.origins) if self.origins else (None,) * len(members)
        if len(origins) != len(members):
            raise ValueError("origins must match members")
        object.__setattr__(self, "origins", origins)

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __getitem__(self, i) -> ConditionalDGP:
        return self.members[i]

    @property
    def model(self) -> ParametricModel:
        return self.members[0].model

    @property
    def functional(self) -> Functional:
        return self.members[0].functional

    def index_of(self, dgp: ConditionalDGP) -> int | None:
        for i, d in enumerate(self.members):
            if d.same_as(dgp):
                return i
        return None


def closure_events(n_atoms: int, cap: int = CLOSURE_CAP):
    """Events used by :func:`close_under_reweighting`: all proper nonempty subsets,
    or singletons plus one half-split when there are more than ``cap`` atoms."""
    if n_atoms <= cap:
        for size in range(1, n_atoms):
            yield from itertools.combinations(range(n_atoms), size)
    else:
        for i in range(n_atoms):
            yield (i,)
        yield tuple(range(n_atoms // 2))


def close_under_reweighting(cls: DGPClass, cap: int = CLOSURE_CAP) -> DGPClass:
    """Add every reweighting of every declared member (closure under reweighting, made finite)."""
    if cls.closed:
        return cls
    members = list(cls.members)
    origins = list(cls.origins)
    keys = {d.key() for d in members}
    for parent, dgp in enumerate(cls.members):
        for event in closure_events(dgp.n_atoms, cap):
            new = reweight(dgp, list(event))
            if new.key() in keys:
                continue
            keys.add(new.key())
            members.append(new)
            origins.append((parent, tuple(event)))
    return DGPClass(tuple(members), closed=True, origins=tuple(origins))


@dataclass(frozen=True)
class Dataset:
    y: np.ndarray
    x: np.ndarray
    seed: int
    atom_index: np.ndarray = field(repr=False, default=None)

    def __len__(self) -> int:
        return self.y.size


def sample(dgp: ConditionalDGP, T: int, seed: int) -> Dataset:
    """T i.i.d. draws: an atom from the covariate law, then Y from its conditional."""
    if T < 1:
        raise ValueError("T must be at least 1")
    rng = np.random.default_rng(seed)
    idx = rng.choice(dgp.n_atoms, size=T, p=dgp.probs)
    y = np.empty(T)
    for j, cond in enumerate(dgp.conditionals):
        rows = np.flatnonzero(idx == j)
        if rows.size:
            y[rows] = rng.choice(cond.support, size=rows.size, p=cond.probs)
    return Dataset(y=y, x=dgp.atoms[idx], seed=seed, atom_index=idx)


def extract_conditional_family(cls: DGPClass) -> list[DiscreteDistribution]:
    """Deduplicated union of all per-atom conditional distributions in the class."""
    return [d for d, _ in conditional_provenance(cls)]


def conditional_provenance(cls: DGPClass) -> list[tuple[DiscreteDistribution, list[tuple[int, int]]]]:
    """Each distinct conditional together with the (member, atom) pairs it comes from."""
    seen: dict = {}
    out: list = []
    for i, dgp in enumerate(cls.members):
        for j, cond in enumerate(dgp.conditionals):
            key = cond.key()
            if key not in seen:
                seen[key] = len(out)
                out.append((cond, []))
            out[seen[key]][1].append((i, j))
    return out
