"""Generators for random distribution families and the standard audit classes.

Noise distributions are normalized so that the target functional of the noise
is exactly the neutral value (0 for location, 1 for scale, (0, -1) for the
(VaR, ES) location-scale family); conditionals built from them satisfy the
model at theta0 up to rounding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dgp import DGPClass, ParametricModel, close_under_reweighting, make_dgp
from .distributions import (
    DiscreteDistribution,
    Functional,
    Mean,
    crossing_margin,
    expected_shortfall,
    expectile,
    lower_quantile,
    make_discrete,
)
from .grids import Grid, lattice


def _levels(g: Functional | None, extra=()) -> tuple:
    out = list(extra)
    if g is not None and g.kind in ("quantile", "vares"):
        out.append(g.level)
    return tuple(out)


def random_distribution(rng: np.random.Generator, n_atoms=(3, 6), low: float = -3.0, high: float = 3.0,
                        alphas=(), margin: float = 0.02, min_prob: float = 0.02) -> DiscreteDistribution:
    """Random finite distribution whose CDF stays ``margin`` away from every level in ``alphas``."""
    lo_n, hi_n = n_atoms
    while True:
        n = int(rng.integers(lo_n, hi_n + 1))
        support = np.sort(rng.uniform(low, high, n))
        if np.min(np.diff(support)) < 1e-3:
            continue
        probs = rng.dirichlet(np.full(n, 2.0))
        if probs.min() < min_prob:
            continue
        dist = make_discrete(support, probs)
        if all(crossing_margin(dist, a) >= margin for a in alphas):
            return dist


def random_family(seed: int, count: int, **kw) -> list[DiscreteDistribution]:
    rng = np.random.default_rng(seed)
    return [random_distribution(rng, **kw) for _ in range(count)]


def xi_grid_for(family, k: int = 1, mesh: float = 1e-3, pad: float = 1.0) -> Grid:
    """Lattice covering all supports with ``pad`` on each side (kept positive for positive families)."""
    lo = min(float(d.support[0]) for d in family)
    hi = max(float(d.support[-1]) for d in family)
    lower = lo - pad if lo <= 0 else max(lo - pad, 0.5 * lo)
    if k == 1:
        return lattice([[lower, hi + pad]], mesh)
    # (v, e): the ES coordinate sits below the VaR coordinate
    return lattice([[lower, hi + pad], [lower - pad, hi + pad]], mesh)


# ---------------------------------------------------------------------------
# noise


def location_noise(g: Functional, rng: np.random.Generator, margin: float = 0.05, **kw) -> DiscreteDistribution:
    """Noise with Gamma(noise) = 0, or (VaR, ES) = (0, -1) for the pair."""
    while True:
        raw = random_distribution(rng, alphas=_levels(g), margin=margin, **kw)
        s = raw.support
        if g.kind == "mean":
            return DiscreteDistribution(s - raw.mean(), raw.probs)
        if g.kind == "quantile":
            return DiscreteDistribution(s - lower_quantile(raw, g.level), raw.probs)
        if g.kind == "expectile":
            return DiscreteDistribution(s - expectile(raw, g.level), raw.probs)
        v = lower_quantile(raw, g.level)
        e = expected_shortfall(raw, g.level)
        # keep the normalized upper tail moderate so xi grids stay small
        if v - e < 0.2 or (s[-1] - v) / (v - e) > 4.0:
            continue
        return DiscreteDistribution((s - v) / (v - e), raw.probs)


def scale_noise(g: Functional, rng: np.random.Generator, margin: float = 0.05, **kw) -> DiscreteDistribution:
    """Positive noise with Gamma(noise) = 1 (positively homogeneous functionals)."""
    if g.kind == "vares":
        raise ValueError("scale noise is only built for one-dimensional functionals")
    kw.setdefault("low", 0.2)
    kw.setdefault("high", 3.0)
    raw = random_distribution(rng, alphas=_levels(g), margin=margin, **kw)
    s = raw.support
    if g.kind == "mean":
        c = raw.mean()
    elif g.kind == "quantile":
        c = lower_quantile(raw, g.level)
    else:
        c = expectile(raw, g.level)
    return DiscreteDistribution(s / c, raw.probs)


def location_conditional(xi, noise: DiscreteDistribution) -> DiscreteDistribution:
    """Y = xi + noise, or Y = v + (v - e) noise for a (VaR, ES) target ``xi = (v, e)``."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if xi.size == 1:
        return noise.shifted(float(xi[0]))
    v, e = float(xi[0]), float(xi[1])
    if not v > e:
        raise ValueError("the (VaR, ES) target needs ES below VaR")
    return noise.shifted(v, v - e)


def scale_conditional(xi, noise: DiscreteDistribution) -> DiscreteDistribution:
    return noise.shifted(0.0, float(np.atleast_1d(xi)[0]))


# ---------------------------------------------------------------------------
# DGPs and classes


@dataclass(frozen=True)
class ClassSpec:
    """Recipe for a class: one model, covariate law, theta0 and ``members`` noise draws."""

    name: str
    model: ParametricModel
    atoms: tuple
    probs: tuple
    theta0: tuple
    members: int = 2
    noise: str = "location"
    theta_mesh: float = 0.05


def build_dgp(spec: ClassSpec, g: Functional, rng: np.random.Generator, theta_grid: Grid | None = None):
    atoms = np.asarray(spec.atoms, dtype=float).reshape(len(spec.atoms), -1)
    theta0 = np.asarray(spec.theta0, dtype=float)
    fitted = spec.model.eval(atoms, theta0[None, :])
    conds = []
    for xi in fitted:
        if spec.noise == "scale":
            conds.append(scale_conditional(xi, scale_noise(g, rng)))
        else:
            conds.append(location_conditional(xi, location_noise(g, rng)))
    grid = theta_grid or lattice(spec.model.box, spec.theta_mesh, anchor=theta0)
    return make_dgp((atoms, spec.probs), conds, spec.model, g, theta0, theta_grid=grid)


def build_class(spec: ClassSpec, g: Functional, seed: int, closed: bool = True) -> DGPClass:
    rng = np.random.default_rng(seed)
    grid = lattice(spec.model.box, spec.theta_mesh, anchor=np.asarray(spec.theta0, float))
    members = tuple(build_dgp(spec, g, rng, grid) for _ in range(spec.members))
    cls = DGPClass(members)
    return close_under_reweighting(cls) if closed else cls


def standard_class_specs(g: Functional) -> list[ClassSpec]:
    """Three classes per functional, each with one parameter per model output
    so that every single covariate atom identifies theta0 (needed for closure)."""
    if g.kind == "vares":
        return [
            ClassSpec("twodim-3", ParametricModel("twodim", 1, ((-1.0, 3.0), (-3.0, 1.0))),
                      (0.5, 1.0, 2.0), (0.3, 0.3, 0.4), (1.0, -0.5)),
            ClassSpec("twodim-2", ParametricModel("twodim", 1, ((-2.0, 1.0), (-3.5, 0.0))),
                      (1.0, 2.0), (0.5, 0.5), (-0.5, -1.5)),
            ClassSpec("twodim-wide", ParametricModel("twodim", 1, ((-1.0, 2.0), (-2.0, 1.0))),
                      (0.8, 1.6, 2.4), (0.2, 0.5, 0.3), (0.5, -0.25), members=1),
        ]
    return [
        ClassSpec("linear-3", ParametricModel("linear", 1, ((-1.0, 4.0),)),
                  (-1.0, 0.5, 2.0), (0.3, 0.3, 0.4), (1.5,)),
        ClassSpec("linear-2", ParametricModel("linear", 1, ((-3.0, 2.0),)),
                  (1.0, 2.5), (0.5, 0.5), (-0.7,)),
        ClassSpec("exp-link", ParametricModel("link", 1, ((-1.5, 2.0),), link="exp"),
                  (0.5, 1.0, 1.5), (0.25, 0.35, 0.4), (0.4,), noise="scale"),
    ]


def standard_classes(g: Functional, seed: int = 0) -> list[tuple[str, DGPClass]]:
    return [(s.name, build_class(s, g, seed + i)) for i, s in enumerate(standard_class_specs(g))]


def example_s1_dgp(theta0: float = 1.5, spread: float = 1.0, atoms=(-1.0, 1.0), probs=(0.5, 0.5),
                   box=((-5.0, 5.0),), theta_mesh: float = 0.05):
    """Linear mean model with Y | X = x uniform on {x theta0 - spread, x theta0 + spread}.

    With the default symmetric covariates E[X] = 0.
    """
    model = ParametricModel("linear", 1, box)
    atoms = np.asarray(atoms, dtype=float)[:, None]
    conds = [make_discrete([x * theta0 - spread, x * theta0 + spread], [0.5, 0.5]) for x in atoms[:, 0]]
    grid = lattice(model.box, theta_mesh, anchor=[theta0])
    return make_dgp((atoms, probs), conds, model, Mean(), [theta0], theta_grid=grid)


def linear_mean_dgp(rng: np.random.Generator, theta0, atoms, probs=None, noise_atoms: int = 4,
                    intercept: bool = False, box_halfwidth: float = 5.0, theta_mesh: float = 0.1):
    """Linear mean DGP with random centred noise at each atom (for estimator tests)."""
    atoms = np.asarray(atoms, dtype=float)
    if atoms.ndim == 1:
        atoms = atoms[:, None]
    theta0 = np.asarray(theta0, dtype=float)
    box = tuple((t - box_halfwidth, t + box_halfwidth) for t in theta0)
    model = ParametricModel("linear", atoms.shape[1], box, intercept=intercept)
    probs = np.full(atoms.shape[0], 1.0 / atoms.shape[0]) if probs is None else probs
    fitted = model.eval(atoms, theta0[None, :])
    conds = [location_conditional(xi, location_noise(Mean(), rng, n_atoms=(noise_atoms, noise_atoms)))
             for xi in fitted]
    grid = lattice(model.box, theta_mesh, anchor=theta0)
    return make_dgp((atoms, probs), conds, model, Mean(), theta0, theta_grid=grid)
