from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mchar.checkers import (
    CONFIRMED,
    NOT_APPLICABLE,
    AuditGrids,
    Status,
    Verdict,
    Witness,
    check_conditional_identification,
    check_conditional_mc,
    check_consistency,
    check_identification,
    check_unconditional_identification,
    check_unconditional_mc,
    construct_counterexample_dgp,
    reduce_verdicts,
    theorem1_audit,
    unconditional_gap,
    witness_gap,
)
from mchar.dgp import DGPClass, ParametricModel, close_under_reweighting, make_dgp, reweight
from mchar.distributions import Mean, Quantile, make_discrete, point_mass
from mchar.errors import DimensionMismatch, NonFiniteLoss, NoViolatingEvent
from mchar.families import example_s1_dgp, random_family, standard_classes, xi_grid_for
from mchar.grids import lattice
from mchar.identification import canonical_identification, compose_instrument, compose_model, parse_instrument
from mchar.losses import Loss, parse_loss
from strategies import separated_distributions

SQUARED = parse_loss("squared")
PINBALL = parse_loss("pinball:alpha=0.5")
LIN = ParametricModel("linear", 1, ((-3.0, 3.0),))

# mean zero, median 0.5, with an atom at 0
Z = make_discrete([-2.0, 0.0, 0.5, 1.8], [0.3, 0.15, 0.3, 0.25])


def symmetric_mean_dgp(theta0=0.5):
    """Atoms x = +1 and x = -1, both with noise Z; the conditional medians
    correspond to theta0 + 0.5 and theta0 - 0.5 in parameter units."""
    c1 = Z.shifted(theta0)
    c2 = Z.shifted(-theta0)
    return make_dgp(([[1.0], [-1.0]], [0.5, 0.5]), [c1, c2], LIN, Mean(), [theta0])


class TestVerdicts:
    def test_non_strict_needs_witness(self):
        with pytest.raises(ValueError):
            Verdict(Status.NOT_STRICT)

    @given(st.lists(st.sampled_from(list(Status)), min_size=1, max_size=6))
    def test_reduce_takes_worst(self, statuses):
        vs = [Verdict(s, None if s is Status.STRICT else Witness(i, np.zeros(1), np.zeros(1), 0.0), checked=1)
              for i, s in enumerate(statuses)]
        out = reduce_verdicts(vs)
        assert out.status.severity == max(s.severity for s in statuses)
        assert out.checked == len(statuses)
        if out.witness is not None:
            first = next(i for i, s in enumerate(statuses) if s is out.status)
            assert out.witness.index == first


class TestConsistency:
    def test_squared_two_point(self):
        fam = random_family(3, 50, n_atoms=(2, 2))
        v = check_consistency(SQUARED, Mean(), fam, xi_grid_for(fam, 1, 1e-3))
        assert v.status is Status.STRICT and v.witness is None

    def test_pinball_on_mean_witness(self):
        d = make_discrete([0, 1, 5], [1, 1, 1])
        grid = lattice([[-1.0, 6.0]], 1e-3)
        v = check_consistency(PINBALL, Mean(), [d], grid)
        assert v.status is Status.INCONSISTENT
        assert v.witness.point[0] == pytest.approx(1.0, abs=1e-9)
        assert v.witness.reference[0] == pytest.approx(2.0)
        # exact expectations: E|Y - 1| = 5/3 < E|Y - 2| = 2
        assert witness_gap(PINBALL, [d], v.witness) == pytest.approx(0.5 * (5 / 3 - 2.0), abs=1e-12)

    def test_step_gpl_flat(self):
        fam = random_family(4, 20, alphas=(0.5,))
        v = check_consistency(parse_loss("gpl:step:alpha=0.5"), Quantile(0.5), fam, xi_grid_for(fam, 1, 1e-3))
        assert v.status is Status.NOT_STRICT
        assert abs(v.witness.gap) <= 1e-9
        assert np.max(np.abs(v.witness.point - v.witness.reference)) > 1.5e-3

    def test_dimension_checks(self):
        with pytest.raises(DimensionMismatch):
            check_consistency(parse_loss("varvs:alpha=0.2"), Mean(), [point_mass(0.0)], lattice([[0, 1]], 0.1))
        with pytest.raises(DimensionMismatch):
            check_consistency(SQUARED, Mean(), [point_mass(0.0)], lattice([[0, 1], [0, 1]], 0.1))

    def test_non_finite_loss(self):
        @dataclass(frozen=True)
        class Broken(Loss):
            def core(self, y, xi):
                return np.full(np.broadcast_shapes(np.shape(y), xi.shape[:-1]), np.nan)

        with pytest.raises(NonFiniteLoss):
            check_consistency(Broken(), Mean(), [point_mass(0.0)], lattice([[-1, 1]], 0.1))

    @settings(max_examples=30, deadline=None)
    @given(separated_distributions())
    def test_squared_strict_property(self, d):
        v = check_consistency(SQUARED, Mean(), [d], xi_grid_for([d], 1, 1e-2))
        assert v.status is Status.STRICT


class TestModelConsistency:
    def test_squared_strict(self):
        d = example_s1_dgp()
        assert check_conditional_mc(SQUARED, d).status is Status.STRICT
        assert check_unconditional_mc(SQUARED, d).status is Status.STRICT

    def test_pinball_skewed_inconsistent_at_atom(self):
        v = check_conditional_mc(PINBALL, symmetric_mean_dgp())
        assert v.status is Status.INCONSISTENT
        assert v.witness.atom is not None and v.witness.gap < -1e-9

    def test_single_atom_matches_consistency(self):
        cond = make_discrete([-1.0, 0.5, 2.0], [0.3, 0.4, 0.3])
        m = ParametricModel("linear", 1, ((-3.0, 3.0),))
        theta0 = cond.mean()
        grid = lattice(m.box, 0.01, anchor=[theta0])
        d = make_dgp(([[1.0]], [1.0]), [cond], m, Mean(), [theta0], theta_grid=grid)
        for loss in (SQUARED, PINBALL, parse_loss("bregman:pwlinear")):
            a = check_conditional_mc(loss, d)
            b = check_consistency(loss, Mean(), [cond], grid)
            c = check_unconditional_mc(loss, DGPClass((d,)))
            assert a.status is b.status is c.status

    def test_unconditional_strict_but_conditional_fails(self):
        d = symmetric_mean_dgp()
        assert check_unconditional_mc(PINBALL, d).status is Status.STRICT
        closed = close_under_reweighting(DGPClass((d,)))
        assert check_unconditional_mc(PINBALL, closed).status is Status.INCONSISTENT


class TestCounterexample:
    def test_reweights_to_violating_atom(self):
        d = symmetric_mean_dgp()
        theta_bad = np.array([1.0])  # the first atom's conditional median in parameter units
        cex = construct_counterexample_dgp(PINBALL, d, theta_bad, strict_sign=True)
        assert cex.n_atoms == 1 and cex.atoms[0, 0] == 1.0
        assert unconditional_gap(PINBALL, cex, theta_bad[None, :])[0] < -1e-9
        # the full DGP does not show it
        assert unconditional_gap(PINBALL, d, theta_bad[None, :])[0] > 0

    def test_all_atoms_returns_input(self):
        d = example_s1_dgp(atoms=(1.0, 2.0))
        flat = parse_loss("bregman:pwlinear:knots=-10|10:slopes=-1|0|1")  # affine phi on the data range
        cex = construct_counterexample_dgp(flat, d, np.array([1.0]))
        assert cex is d

    def test_empty_event(self):
        with pytest.raises(NoViolatingEvent):
            construct_counterexample_dgp(SQUARED, example_s1_dgp(), np.array([0.0]))


class TestIdentification:
    def test_family_check(self):
        fam = random_family(5, 20, alphas=(0.3,))
        grid = xi_grid_for(fam, 1, 1e-3)
        assert check_identification(canonical_identification(Quantile(0.3)), Quantile(0.3), fam, grid).status \
            is Status.STRICT
        v = check_identification(canonical_identification(Mean()), Quantile(0.3), fam, grid)
        assert v.status is Status.INCONSISTENT

    def test_example_s1(self):
        d = example_s1_dgp()
        phi = canonical_identification(Mean())
        psi = compose_model(phi, d.model)
        assert check_conditional_identification(psi, d).status is Status.STRICT
        v = check_unconditional_identification(psi, d)
        assert v.status is Status.NOT_STRICT
        psi_a = compose_instrument(parse_instrument("covariate", 1, 1), phi, d.model)
        assert check_unconditional_identification(psi_a, d).status is Status.STRICT

    def test_uninstrumented_zero_everywhere(self):
        from mchar.checkers import unconditional_moment

        d = example_s1_dgp()
        lo, hi = unconditional_moment(compose_model(canonical_identification(Mean()), d.model), d,
                                      d.theta_grid.points)
        assert np.max(np.abs(lo)) < 1e-12 and np.max(np.abs(hi)) < 1e-12

    def test_point_mass_covariate(self):
        d = example_s1_dgp(atoms=(1.0,), probs=(1.0,))
        psi = compose_model(canonical_identification(Mean()), d.model)
        assert check_unconditional_identification(psi, d).status is Status.STRICT
        assert check_conditional_identification(psi, d).status is check_unconditional_identification(psi, d).status


class TestAudit:
    def test_squared_mean_all_confirmed(self):
        (name, cls), *_ = standard_classes(Mean(), 0)
        from mchar.dgp import extract_conditional_family

        xi = xi_grid_for(extract_conditional_family(cls), 1, 1e-3)
        rep = theorem1_audit(SQUARED, Mean(), cls, AuditGrids(xi))
        assert all(a.kind == CONFIRMED for a in rep.arrows.values()), rep.render()
        assert "(iv)" in rep.render()

    def test_pinball_for_mean(self):
        (name, cls), *_ = standard_classes(Mean(), 0)
        from mchar.dgp import extract_conditional_family

        xi = xi_grid_for(extract_conditional_family(cls), 1, 1e-3)
        rep = theorem1_audit(PINBALL, Mean(), cls, AuditGrids(xi))
        assert rep.arrows["(i)"].kind == NOT_APPLICABLE
        assert rep.verdicts["conditional"].status is Status.INCONSISTENT
        assert not rep.violations

    def test_unclosed_class_arrow_iv_not_applicable(self):
        cls = DGPClass((symmetric_mean_dgp(),))
        xi = lattice([[-3.0, 3.0]], 1e-3)
        rep = theorem1_audit(PINBALL, Mean(), cls, AuditGrids(xi))
        assert rep.verdicts["unconditional"].status is Status.STRICT
        assert rep.verdicts["conditional"].status is Status.INCONSISTENT
        assert rep.arrows["(iv)"].kind == NOT_APPLICABLE
        assert not rep.violations

    def test_closed_version_counterexample_confirmed(self):
        cls = close_under_reweighting(DGPClass((symmetric_mean_dgp(),)))
        rep = theorem1_audit(PINBALL, Mean(), cls, AuditGrids(lattice([[-3.0, 3.0]], 1e-3)))
        assert rep.arrows["(iv)"].kind == NOT_APPLICABLE  # premise false once closed
        assert not rep.violations

    def test_flat_loss_counterexample_reconstructed(self):
        (name, cls), *_ = standard_classes(Mean(), 0)
        from mchar.dgp import extract_conditional_family

        xi = xi_grid_for(extract_conditional_family(cls), 1, 1e-3)
        rep = theorem1_audit(parse_loss("bregman:pwlinear"), Mean(), cls, AuditGrids(xi))
        iv = rep.arrows["(iv)"]
        assert iv.kind == CONFIRMED and iv.data["gap"] <= 1e-9
        assert cls.index_of(cls[iv.data["member"]]) == iv.data["member"]
        assert rep.arrows["(i)"].kind == CONFIRMED

    def test_functional_mismatch(self):
        (name, cls), *_ = standard_classes(Mean(), 0)
        with pytest.raises(ValueError):
            theorem1_audit(SQUARED, Quantile(0.5), cls, AuditGrids(lattice([[0, 1]], 0.1)))
