"""Brute-force certificates for consistency, model-consistency and identification.

Every statement is checked on finite grids with exact expectations. A gap in
``(-tol, tol]`` counts as equality. Strictness means that no grid point
outside the exclusion ball (radius ``BALL_FACTOR * mesh`` in sup-norm) around
the target attains equality. Certificates therefore name the grid they were
produced on.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .dgp import (
    ConditionalDGP,
    DGPClass,
    conditional_provenance,
    extract_conditional_family,
    reweight,
    verify_surjectivity,
)
from .distributions import DiscreteDistribution, Functional, eval_functional
from .errors import DimensionMismatch, DomainError, NonFiniteLoss, NonFiniteValue, NonUnique, NoViolatingEvent
from .grids import Grid, lattice, outside_ball
from .identification import (
    IdentificationFunction,
    InstrumentMatrix,
    ModelIdentification,
    canonical_identification,
    compose_instrument,
    compose_model,
    rank_as_condition_s3,
)
from .losses import Loss, expected_excess

DEFAULT_TOL = 1e-9
BALL_FACTOR = 1.5


class Status(enum.Enum):
    STRICT = "StrictlyConsistent"
    NOT_STRICT = "ConsistentNotStrict"
    INCONSISTENT = "Inconsistent"

    @property
    def severity(self) -> int:
        return _SEVERITY[self]

    @property
    def consistent(self) -> bool:
        return self is not Status.INCONSISTENT


_SEVERITY = {Status.STRICT: 0, Status.NOT_STRICT: 1, Status.INCONSISTENT: 2}


@dataclass(frozen=True)
class Witness:
    """Where a certificate failed.

    ``index`` is the distribution (or class member) index, ``atom`` the
    covariate atom for per-atom failures, ``point`` the offending xi or theta,
    ``reference`` the target Gamma(F) or theta0, ``gap`` the expected-loss
    difference (or moment value) that triggered the verdict.
    """

    index: int
    point: np.ndarray
    reference: np.ndarray
    gap: float
    atom: int | None = None

    def describe(self) -> str:
        where = f"#{self.index}" + (f" atom {self.atom}" if self.atom is not None else "")
        return f"{where} at {np.round(self.point, 12).tolist()} vs {np.round(self.reference, 12).tolist()}, gap {self.gap:.3e}"


@dataclass(frozen=True)
class Verdict:
    status: Status
    witness: Witness | None = None
    grid: str = ""
    checked: int = 0

    def __post_init__(self):
        if self.status is not Status.STRICT and self.witness is None:
            raise ValueError("non-strict verdicts must carry a witness")


def worse(a: Verdict, b: Verdict) -> Verdict:
    """Severity join; on ties the first argument wins, so folds are deterministic."""
    return b if b.status.severity > a.status.severity else a


def reduce_verdicts(verdicts: Iterable[Verdict]) -> Verdict:
    out = None
    total = 0
    for v in verdicts:
        total += v.checked
        out = v if out is None else worse(out, v)
    if out is None:
        raise ValueError("nothing to reduce")
    return Verdict(out.status, out.witness, out.grid, total)


def _finite(values, what: str):
    if not np.all(np.isfinite(values)):
        raise NonFiniteLoss(f"non-finite expected loss in {what}")


def _classify(gaps, pts, ref, mesh, tol, index, atom=None) -> tuple[Status, Witness | None]:
    """Shared rule: gaps are E[rho(point)] - E[rho(reference)] over grid points."""
    i = int(np.argmin(gaps))
    if gaps[i] < -tol:
        return Status.INCONSISTENT, Witness(index, pts[i].copy(), np.asarray(ref, float).copy(), float(gaps[i]), atom)
    far = outside_ball(pts, ref, BALL_FACTOR * mesh)
    flat = np.flatnonzero(far & (gaps <= tol))
    if flat.size:
        j = flat[np.argmin(gaps[flat])]
        return Status.NOT_STRICT, Witness(index, pts[j].copy(), np.asarray(ref, float).copy(), float(gaps[j]), atom)
    return Status.STRICT, None


# ---------------------------------------------------------------------------
# forecast consistency


def consistency_gaps(loss: Loss, dist: DiscreteDistribution, g: Functional, xi_grid: Grid):
    """(grid points incl. Gamma(F), Gamma(F), E[rho(Y, xi)] - E[rho(Y, Gamma(F))])."""
    gamma = eval_functional(g, dist)
    grid = xi_grid.with_point(gamma)
    gaps = expected_excess(loss, dist, grid.points, gamma)
    return grid.points, gamma, gaps


def check_consistency(loss: Loss, g: Functional, family: Sequence[DiscreteDistribution],
                      xi_grid: Grid, tol: float = DEFAULT_TOL) -> Verdict:
    """Grid certificate of (strict) consistency of ``loss`` for ``g`` on ``family``."""
    if loss.k != g.k:
        raise DimensionMismatch(f"loss has k={loss.k}, functional has k={g.k}")
    if xi_grid.dim != g.k:
        raise DimensionMismatch(f"xi grid has dimension {xi_grid.dim}, functional has k={g.k}")
    verdicts = []
    for i, dist in enumerate(family):
        pts, gamma, gaps = consistency_gaps(loss, dist, g, xi_grid)
        _finite(gaps, f"distribution #{i}")
        status, wit = _classify(gaps, pts, gamma, xi_grid.mesh, tol, i)
        verdicts.append(Verdict(status, wit, xi_grid.describe(), len(pts)))
        if status is Status.INCONSISTENT:
            break
    return reduce_verdicts(verdicts)


def witness_gap(loss: Loss, family: Sequence[DiscreteDistribution], w: Witness) -> float:
    """Re-evaluate a consistency witness from scratch."""
    return float(expected_excess(loss, family[w.index], w.point[None, :], w.reference)[0])


# ---------------------------------------------------------------------------
# model-consistency


def _theta_grid(dgp: ConditionalDGP, theta_grid: Grid | None) -> Grid:
    return (theta_grid or dgp.theta_grid).with_point(dgp.theta0)


def atom_gaps(loss: Loss, dgp: ConditionalDGP, thetas) -> np.ndarray:
    """E[rho(Y, m(x_j, theta)) - rho(Y, m(x_j, theta0)) | X = x_j], shape ``(n_atoms, N)``."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    out = np.empty((dgp.n_atoms, thetas.shape[0]))
    for j, (x, cond) in enumerate(zip(dgp.atoms, dgp.conditionals)):
        xi = dgp.model.eval(x[None, :], thetas)
        ref = dgp.model.eval(x, dgp.theta0)
        out[j] = expected_excess(loss, cond, xi, ref)
    return out


def unconditional_gap(loss: Loss, dgp: ConditionalDGP, thetas) -> np.ndarray:
    """E[rho(Y, m(X, theta))] - E[rho(Y, m(X, theta0))] for each theta."""
    return dgp.probs @ atom_gaps(loss, dgp, thetas)


def _members(obj) -> list[ConditionalDGP]:
    return list(obj.members) if isinstance(obj, DGPClass) else [obj]


def _check_loss_dims(loss: Loss, dgp: ConditionalDGP):
    if loss.k != dgp.model.k:
        raise DimensionMismatch(f"loss has k={loss.k}, model has k={dgp.model.k}")


def check_conditional_mc(loss: Loss, dgp, theta_grid: Grid | None = None, tol: float = DEFAULT_TOL) -> Verdict:
    """Conditional model-consistency: the inequality must hold at every covariate atom.

    Strict when no theta outside the ball around theta0 attains equality at
    all atoms simultaneously. ``dgp`` may be a single DGP or a class.
    """
    verdicts = []
    for i, d in enumerate(_members(dgp)):
        _check_loss_dims(loss, d)
        grid = _theta_grid(d, theta_grid)
        pts = grid.points
        gaps = atom_gaps(loss, d, pts)
        _finite(gaps, f"DGP #{i}")
        j, n = np.unravel_index(np.argmin(gaps), gaps.shape)
        if gaps[j, n] < -tol:
            wit = Witness(i, pts[n].copy(), d.theta0.copy(), float(gaps[j, n]), int(j))
            verdicts.append(Verdict(Status.INCONSISTENT, wit, grid.describe(), gaps.size))
            break
        worst = gaps.max(axis=0)
        status, wit = _classify(worst, pts, d.theta0, grid.mesh, tol, i)
        verdicts.append(Verdict(status, wit, grid.describe(), gaps.size))
    return reduce_verdicts(verdicts)


def check_unconditional_mc(loss: Loss, cls, theta_grid: Grid | None = None, tol: float = DEFAULT_TOL) -> Verdict:
    """Unconditional model-consistency with the covariate-averaged expected loss."""
    verdicts = []
    for i, d in enumerate(_members(cls)):
        _check_loss_dims(loss, d)
        grid = _theta_grid(d, theta_grid)
        gaps = unconditional_gap(loss, d, grid.points)
        _finite(gaps, f"DGP #{i}")
        status, wit = _classify(gaps, grid.points, d.theta0, grid.mesh, tol, i)
        verdicts.append(Verdict(status, wit, grid.describe(), gaps.size))
        if status is Status.INCONSISTENT:
            break
    return reduce_verdicts(verdicts)


def violating_event(loss: Loss, dgp: ConditionalDGP, theta_bad, tol: float = DEFAULT_TOL,
                    strict_sign: bool = False) -> np.ndarray:
    """Atoms where the conditional gap at ``theta_bad`` is <= tol (or < -tol)."""
    gaps = atom_gaps(loss, dgp, np.asarray(theta_bad, float)[None, :])[:, 0]
    return np.flatnonzero(gaps < -tol) if strict_sign else np.flatnonzero(gaps <= tol)


def construct_counterexample_dgp(loss: Loss, dgp: ConditionalDGP, theta_bad, tol: float = DEFAULT_TOL,
                                 strict_sign: bool = False) -> ConditionalDGP:
    """Condition ``dgp`` on the atoms where theta_bad does at least as well as theta0.

    On the reweighted DGP the unconditional gap at ``theta_bad`` is a
    probability-weighted average of gaps that are all <= tol, hence itself
    <= tol; this is re-verified before returning.
    """
    event = violating_event(loss, dgp, theta_bad, tol, strict_sign)
    if event.size == 0:
        raise NoViolatingEvent(f"theta={np.asarray(theta_bad).tolist()} is beaten by theta0 at every atom")
    out = reweight(dgp, event)
    gap = float(unconditional_gap(loss, out, np.asarray(theta_bad, float)[None, :])[0])
    bound = -tol if strict_sign else tol
    if not gap <= bound:
        raise AssertionError(f"reweighted unconditional gap {gap} exceeds {bound}")
    return out


# ---------------------------------------------------------------------------
# identification


def _bracket_zero(lo, hi, tol) -> np.ndarray:
    """Per row: does every coordinate interval [lo, hi] meet [-tol, tol]?"""
    return np.all((lo <= tol) & (hi >= -tol), axis=-1)


def _bracket_distance(lo, hi) -> np.ndarray:
    """Sup-norm distance of the intervals from zero (0 when they contain it)."""
    return np.max(np.maximum(np.maximum(lo, -hi), 0.0), axis=-1)


def check_identification(phi: IdentificationFunction, g: Functional, family: Sequence[DiscreteDistribution],
                         xi_grid: Grid, tol: float = DEFAULT_TOL) -> Verdict:
    """Is ``phi`` a (strict) identification function for ``g`` on ``family``?

    Status reuse: STRICT = strict identification, NOT_STRICT = zero at
    Gamma(F) but also elsewhere, INCONSISTENT = no zero at Gamma(F).
    """
    if phi.k != g.k or xi_grid.dim != g.k:
        raise DimensionMismatch("identification function, functional and grid must share k")
    verdicts = []
    for i, dist in enumerate(family):
        gamma = eval_functional(g, dist)
        grid = xi_grid.with_point(gamma)
        phi.validate_on(grid.points)
        left, right = phi.expected(dist, grid.points)
        lo, hi = np.minimum(left, right), np.maximum(left, right)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise NonFiniteValue(f"non-finite moment for distribution #{i}")
        verdicts.append(_classify_zero(lo, hi, grid.points, gamma, grid.mesh, tol, i, grid.describe()))
    return reduce_verdicts(verdicts)


def _classify_zero(lo, hi, pts, ref, mesh, tol, index, desc, atom_ref_idx=None) -> Verdict:
    zero = _bracket_zero(lo, hi, tol)
    dist = _bracket_distance(lo, hi)
    r = np.flatnonzero(np.all(pts == np.asarray(ref, float)[None, :], axis=1))[0]
    if not zero[r]:
        return Verdict(Status.INCONSISTENT, Witness(index, pts[r].copy(), np.asarray(ref, float).copy(), float(dist[r])),
                       desc, len(pts))
    far = outside_ball(pts, ref, BALL_FACTOR * mesh)
    bad = np.flatnonzero(far & zero)
    if bad.size:
        j = bad[np.argmin(dist[bad])]
        return Verdict(Status.NOT_STRICT, Witness(index, pts[j].copy(), np.asarray(ref, float).copy(), float(dist[j])),
                       desc, len(pts))
    return Verdict(Status.STRICT, None, desc, len(pts))


def conditional_moments(psi: ModelIdentification, dgp: ConditionalDGP, thetas) -> tuple[np.ndarray, np.ndarray]:
    """Per-atom moment intervals, each of shape ``(n_atoms, N, dim)``."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    lo = np.empty((dgp.n_atoms, thetas.shape[0], psi.dim))
    hi = np.empty_like(lo)
    for j, (x, cond) in enumerate(zip(dgp.atoms, dgp.conditionals)):
        lo[j], hi[j] = psi.conditional_moment(cond, x, thetas)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise NonFiniteValue("non-finite conditional moment")
    return lo, hi


def unconditional_moment(psi: ModelIdentification, dgp: ConditionalDGP, thetas) -> tuple[np.ndarray, np.ndarray]:
    """Covariate-averaged moment interval, shape ``(N, dim)`` each."""
    lo, hi = conditional_moments(psi, dgp, thetas)
    return np.einsum("n,nkd->kd", dgp.probs, lo), np.einsum("n,nkd->kd", dgp.probs, hi)


def check_conditional_identification(psi: ModelIdentification, cls, theta_grid: Grid | None = None,
                                     tol: float = DEFAULT_TOL) -> Verdict:
    """Zero conditional moment at theta0 at every atom; strict if no other grid theta does the same."""
    verdicts = []
    for i, d in enumerate(_members(cls)):
        grid = _theta_grid(d, theta_grid)
        pts = grid.points
        lo, hi = conditional_moments(psi, d, pts)
        zero = np.all(_bracket_zero(lo, hi, tol), axis=0)
        dist = np.max(_bracket_distance(lo, hi), axis=0)
        r = np.flatnonzero(np.all(pts == d.theta0[None, :], axis=1))[0]
        if not zero[r]:
            atom = int(np.argmax(_bracket_distance(lo[:, r], hi[:, r])))
            wit = Witness(i, pts[r].copy(), d.theta0.copy(), float(dist[r]), atom)
            verdicts.append(Verdict(Status.INCONSISTENT, wit, grid.describe(), lo.size))
            continue
        far = outside_ball(pts, d.theta0, BALL_FACTOR * grid.mesh)
        bad = np.flatnonzero(far & zero)
        if bad.size:
            j = bad[np.argmin(dist[bad])]
            wit = Witness(i, pts[j].copy(), d.theta0.copy(), float(dist[j]))
            verdicts.append(Verdict(Status.NOT_STRICT, wit, grid.describe(), lo.size))
        else:
            verdicts.append(Verdict(Status.STRICT, None, grid.describe(), lo.size))
    return reduce_verdicts(verdicts)


def check_unconditional_identification(psi: ModelIdentification, cls, theta_grid: Grid | None = None,
                                       tol: float = DEFAULT_TOL) -> Verdict:
    """Zero averaged moment at theta0; strict if no other grid theta zeroes it."""
    verdicts = []
    for i, d in enumerate(_members(cls)):
        grid = _theta_grid(d, theta_grid)
        lo, hi = unconditional_moment(psi, d, grid.points)
        verdicts.append(_classify_zero(lo, hi, grid.points, d.theta0, grid.mesh, tol, i, grid.describe()))
    return reduce_verdicts(verdicts)


# ---------------------------------------------------------------------------
# implication audit


CONFIRMED = "Confirmed"
COUNTEREXAMPLE = "CounterexampleFound"
NOT_APPLICABLE = "NotApplicable"


@dataclass(frozen=True)
class ArrowOutcome:
    kind: str
    detail: str = ""
    data: dict = field(default_factory=dict)

    def __str__(self) -> str:
        return f"{self.kind}({self.detail})" if self.detail else self.kind


@dataclass(frozen=True)
class AuditGrids:
    """Grids for one audit cell.

    ``xi`` is used for the forecast-consistency check on the extracted
    conditional family; ``theta`` (optional) overrides the members' own
    parameter grids; ``window`` is the half-width, in xi-mesh units, of the
    local action window probed for the modified-family arrow.
    """

    xi: Grid
    theta: Grid | None = None
    window: int = 25


@dataclass
class ImplicationReport:
    loss: str
    functional: str
    n_members: int
    closed: bool
    verdicts: dict
    arrows: dict

    @property
    def violations(self) -> list[str]:
        return [name for name, a in self.arrows.items() if a.kind == COUNTEREXAMPLE]

    def render(self) -> str:
        v = self.verdicts

        def s(name):
            x = v.get(name)
            return x.status.value if isinstance(x, Verdict) else str(x)

        lines = [
            f"loss {self.loss} | functional {self.functional} | {self.n_members} DGPs"
            + (" (reweight-closed)" if self.closed else ""),
            f"  consistent on conditional family : {s('consistency')}",
            f"  conditionally model-consistent   : {s('conditional')}",
            f"  unconditionally model-consistent : {s('unconditional')}",
        ]
        for name, a in self.arrows.items():
            lines.append(f"  {name:<6} {a}")
        return "\n".join(lines)


def _arrow_forward(premise: Verdict, conclusion: Verdict, label_p: str, label_c: str) -> ArrowOutcome:
    """(strict) premise => (strict) conclusion; inconsistency of the premise makes the arrow vacuous."""
    if premise.status is Status.INCONSISTENT:
        return ArrowOutcome(NOT_APPLICABLE, f"premise false: {label_p} inconsistent")
    if premise.status is Status.STRICT and conclusion.status is not Status.STRICT:
        return ArrowOutcome(COUNTEREXAMPLE, f"{label_p} strict but {label_c} {conclusion.status.value}",
                            {"witness": conclusion.witness})
    if conclusion.status is Status.INCONSISTENT:
        return ArrowOutcome(COUNTEREXAMPLE, f"{label_p} consistent but {label_c} inconsistent",
                            {"witness": conclusion.witness})
    return ArrowOutcome(CONFIRMED, f"{label_c} {conclusion.status.value}")


def _lipschitz_sup(model, x, theta0, step=1e-6) -> float:
    """Sum over theta coordinates of |dm/dtheta_i| at theta0, max over outputs."""
    q = theta0.size
    total = np.zeros(model.k)
    for e in np.eye(q):
        d = (model.eval(x, theta0 + step * e) - model.eval(x, theta0 - step * e)) / (2 * step)
        total += np.abs(d)
    return float(total.max())


def _arrow_modified_family(loss, g, cls, cond: Verdict, grids: AuditGrids, tol) -> ArrowOutcome:
    """Conditional model-consistency => (non-strict) consistency on the family seen through the model.

    Each extracted conditional F is probed on a local window around Gamma(F)
    that must be covered by the image of the parameter grid at the atom F came
    from; only the non-strict conclusion is tested.
    """
    if cond.status is Status.INCONSISTENT:
        return ArrowOutcome(NOT_APPLICABLE, "premise false: not conditionally model-consistent")
    h = grids.xi.mesh
    checked = 0
    for dist, sources in conditional_provenance(cls):
        member, atom = sources[0]
        d = cls[member]
        x = d.atoms[atom]
        gamma = eval_functional(g, dist)
        half = grids.window * h
        window = lattice(np.column_stack([gamma - half, gamma + half]), h, anchor=gamma)
        theta_grid = _theta_grid(d, grids.theta)
        spacing = 0.5 * theta_grid.mesh * _lipschitz_sup(d.model, x, d.theta0)
        rep = verify_surjectivity(d.model, x, window, theta_grid, tol=spacing * (1 + 1e-6) + 1e-12)
        if not rep.passed:
            return ArrowOutcome(NOT_APPLICABLE, f"surjectivity fails at atom {x.tolist()} "
                                                f"(coverage {rep.fraction:.3f})")
        v = check_consistency(loss, g, [dist], window, tol)
        checked += 1
        if v.status is Status.INCONSISTENT:
            return ArrowOutcome(COUNTEREXAMPLE, "loss beaten near Gamma(F) on the modified family",
                                {"witness": v.witness})
    return ArrowOutcome(CONFIRMED, f"consistent on {checked} windows (non-strict conclusion only)")


def _arrow_reweighting(loss, cls, cond: Verdict, uncond: Verdict, theta_grid, tol) -> ArrowOutcome:
    if not cls.closed:
        return ArrowOutcome(NOT_APPLICABLE, "class not closed under reweighting")
    if uncond.status is Status.INCONSISTENT:
        return ArrowOutcome(NOT_APPLICABLE, "premise false: not unconditionally model-consistent")
    if cond.status is Status.STRICT:
        return ArrowOutcome(CONFIRMED, "conditional strict")
    w = cond.witness
    parent = cls[w.index]
    strict_sign = cond.status is Status.INCONSISTENT
    try:
        cex = construct_counterexample_dgp(loss, parent, w.point, tol, strict_sign=strict_sign)
    except NonUnique as exc:
        return ArrowOutcome(NOT_APPLICABLE, f"reweighted DGP not identified: {exc}")
    gap = float(unconditional_gap(loss, cex, w.point[None, :])[0])
    member = cls.index_of(cex)
    data = {"parent": w.index, "theta_bad": w.point, "gap": gap, "member": member,
            "atoms": cex.atoms.tolist()}
    if member is None:
        return ArrowOutcome(COUNTEREXAMPLE, "constructed DGP is missing from a closed class", data)
    if strict_sign:
        # the class contains a DGP with a negative unconditional gap, yet the
        # unconditional check reported consistency
        return ArrowOutcome(COUNTEREXAMPLE, f"unconditional check missed member {member} (gap {gap:.3e})", data)
    if uncond.status is Status.STRICT:
        return ArrowOutcome(COUNTEREXAMPLE, f"unconditional strict but member {member} has gap {gap:.3e}", data)
    return ArrowOutcome(CONFIRMED, f"counterexample DGP #{member} has unconditional gap {gap:.3e}", data)


def _prop_s1(g, cls, theta_grid, xi_grid, tol) -> tuple[ArrowOutcome, ArrowOutcome, dict]:
    phi = canonical_identification(g)
    fam = extract_conditional_family(cls)
    v_fam = check_identification(phi, g, fam, xi_grid, tol)
    psi = compose_model(phi, cls.model)
    v_cond = check_conditional_identification(psi, cls, theta_grid, tol)
    first = _arrow_forward(v_fam, v_cond, "phi on family", "phi(y, m(x, theta))")
    if v_cond.status is Status.INCONSISTENT:
        second = ArrowOutcome(NOT_APPLICABLE, "premise false: composed phi not a conditional identification function")
    elif v_fam.status is Status.INCONSISTENT:
        second = ArrowOutcome(COUNTEREXAMPLE, "composed phi identifies but phi fails on the family",
                              {"witness": v_fam.witness})
    else:
        second = ArrowOutcome(CONFIRMED, f"phi {v_fam.status.value} on family")
    return first, second, {"identification": v_fam, "conditional_identification": v_cond}


def _prop_s3(g, cls, theta_grid, tol, cond_ident: Verdict) -> tuple[ArrowOutcome, dict]:
    model = cls.model
    if model.q < model.k:
        return ArrowOutcome(NOT_APPLICABLE, "q < k"), {}
    if not cls.closed:
        return ArrowOutcome(NOT_APPLICABLE, "class not closed under reweighting"), {}
    A = InstrumentMatrix("covariate", model.k * model.p, model.k)
    phi = canonical_identification(g)
    try:
        psi_a = compose_instrument(A, phi, model)
    except DimensionMismatch as exc:
        return ArrowOutcome(NOT_APPLICABLE, f"covariate instrument: {exc}"), {}
    if not all(rank_as_condition_s3(A, d) for d in cls):
        return ArrowOutcome(NOT_APPLICABLE, "instrument rank condition fails"), {}
    v = check_unconditional_identification(psi_a, cls, theta_grid, tol)
    extra = {"instrumented_unconditional": v}
    if v.status is not Status.STRICT:
        return ArrowOutcome(NOT_APPLICABLE, f"premise false: psi_A {v.status.value}"), extra
    if cond_ident.status is not Status.STRICT:
        return ArrowOutcome(COUNTEREXAMPLE, f"psi_A strict but composed phi {cond_ident.status.value}",
                            {"witness": cond_ident.witness}), extra
    return ArrowOutcome(CONFIRMED, "psi_A strict and composed phi strict"), extra


def theorem1_audit(loss: Loss, g: Functional, cls: DGPClass, grids: AuditGrids,
                   tol: float = DEFAULT_TOL, identification: bool = True) -> ImplicationReport:
    """Audit the four loss arrows (and the identification counterparts) on one class.

    Arrow labels: ``(i)`` consistency => conditional model-consistency,
    ``(ii)`` conditional model-consistency => consistency on the modified
    family, ``(iii)`` conditional => unconditional, ``(iv)`` unconditional =>
    conditional under reweight closure; ``S1(i)``, ``S1(ii)`` and ``S3`` for
    identification functions.
    """
    if cls.functional != g:
        raise ValueError(f"class targets {cls.functional.key}, audit asked for {g.key}")
    arrows: dict = {}
    verdicts: dict = {}
    report = ImplicationReport(loss.key, g.key, len(cls), cls.closed, verdicts, arrows)
    skip = None
    if loss.k != g.k:
        skip = f"loss has k={loss.k}, functional has k={g.k}"
    else:
        try:
            family = extract_conditional_family(cls)
            verdicts["consistency"] = check_consistency(loss, g, family, grids.xi, tol)
            verdicts["conditional"] = check_conditional_mc(loss, cls, grids.theta, tol)
            verdicts["unconditional"] = check_unconditional_mc(loss, cls, grids.theta, tol)
        except DomainError as exc:
            skip = f"loss undefined on the class: {exc}"
    if skip is not None:
        for name in ("(i)", "(ii)", "(iii)", "(iv)"):
            arrows[name] = ArrowOutcome(NOT_APPLICABLE, skip)
    else:
        v1, v2, v3 = verdicts["consistency"], verdicts["conditional"], verdicts["unconditional"]
        arrows["(i)"] = _arrow_forward(v1, v2, "consistency", "conditional")
        arrows["(ii)"] = _arrow_modified_family(loss, g, cls, v2, grids, tol)
        arrows["(iii)"] = _arrow_forward(v2, v3, "conditional", "unconditional")
        arrows["(iv)"] = _arrow_reweighting(loss, cls, v2, v3, grids.theta, tol)
    if identification:
        s1i, s1ii, extra = _prop_s1(g, cls, grids.theta, grids.xi, tol)
        arrows["S1(i)"] = s1i
        arrows["S1(ii)"] = s1ii
        arrows["S3"], extra3 = _prop_s3(g, cls, grids.theta, tol, extra["conditional_identification"])
        verdicts.update(extra)
        verdicts.update(extra3)
    return report
