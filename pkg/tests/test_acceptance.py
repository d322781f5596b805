"""Acceptance criteria, each run at its stated tolerance. One PASS/FAIL line per criterion
is printed in the pytest terminal summary."""
import json
import time
from pathlib import Path

import numpy as np
import pytest

from mchar import cli
from mchar.checkers import (
    COUNTEREXAMPLE,
    CONFIRMED,
    NOT_APPLICABLE,
    AuditGrids,
    Status,
    check_consistency,
    check_unconditional_identification,
    theorem1_audit,
    unconditional_moment,
    witness_gap,
)
from mchar.dgp import extract_conditional_family, reweight, sample
from mchar.distributions import Expectile, Mean, Quantile, VarEs, eval_functional, lower_quantile
from mchar.estimators import EstimatorSpec, OptimizerConfig, m_estimate, monte_carlo, normal_equations, z_estimate
from mchar.families import build_dgp, example_s1_dgp, linear_mean_dgp, random_family, standard_class_specs, \
    standard_classes, xi_grid_for
from mchar.identification import (
    canonical_identification,
    compose_instrument,
    compose_model,
    parse_instrument,
    rank_condition_along_segments,
)
from mchar.losses import parse_loss

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
TOL = 1e-9

K1_LOSSES = [
    "bregman:square", "bregman:exp", "bregman:abspow:p=1.5", "bregman:pwlinear",
    "gpl:identity:alpha=0.25", "gpl:power:beta=2:alpha=0.25", "gpl:step:alpha=0.25", "gpl:log:alpha=0.25",
    "expectile:tau=0.25", "pinball:alpha=0.5",
]
K2_LOSSES = ["varvs:alpha=0.25", "varvs:alpha=0.25:g1=zero", "varvs:alpha=0.5"]
FUNCTIONALS = [Mean(), Quantile(0.25), Expectile(0.25), VarEs(0.25)]


def test_criterion_1_characterization_positives(criterion):
    t0 = time.perf_counter()
    failures = []
    n_checked = 0
    mean_family = random_family(101, 50, n_atoms=(3, 6))
    grid = xi_grid_for(mean_family, 1, 1e-3)
    for key in ("bregman:square", "bregman:exp", "bregman:abspow:p=1.5", "bregman:abspow:p=3"):
        v = check_consistency(parse_loss(key), Mean(), mean_family, grid, TOL)
        n_checked += 1
        if v.status is not Status.STRICT:
            failures.append(f"{key}: {v.status.value}")
    for alpha in (0.1, 0.5, 0.9):
        fam = random_family(200 + int(alpha * 10), 50, n_atoms=(3, 6), alphas=(alpha,))
        positive = random_family(300 + int(alpha * 10), 50, n_atoms=(3, 6), low=0.5, high=4.0, alphas=(alpha,))
        for key, f in ((f"gpl:identity:alpha={alpha}", fam), (f"gpl:power:beta=2:alpha={alpha}", fam),
                       (f"gpl:power:beta=0.5:alpha={alpha}", fam), (f"gpl:log:alpha={alpha}", positive)):
            v = check_consistency(parse_loss(key), Quantile(alpha), f, xi_grid_for(f, 1, 1e-3), TOL)
            n_checked += 1
            if v.status is not Status.STRICT:
                failures.append(f"{key}: {v.status.value}")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 30.0
    criterion(1, ok, f"{n_checked} loss/functional pairs x 50 distributions strict, {elapsed:.1f}s"
              + (f"; failures {failures}" if failures else ""))
    assert not failures
    assert elapsed < 30.0


def test_criterion_2_characterization_negatives(criterion):
    notes = []
    ok = True

    # pinball on the mean: the witness distribution has median != mean
    fam = random_family(7, 50, n_atoms=(3, 6), alphas=(0.5,))
    grid = xi_grid_for(fam, 1, 1e-3)
    v = check_consistency(parse_loss("pinball:alpha=0.5"), Mean(), fam, grid, TOL)
    d = fam[v.witness.index] if v.witness else None
    good = (v.status is Status.INCONSISTENT and d is not None
            and abs(lower_quantile(d, 0.5) - d.mean()) > 1e-6
            and witness_gap(parse_loss("pinball:alpha=0.5"), fam, v.witness) < -TOL)
    ok &= good
    notes.append(f"pinball/mean {v.status.value}")

    # squared loss on the 0.25-quantile
    fam = random_family(8, 50, n_atoms=(3, 6), alphas=(0.25,))
    v = check_consistency(parse_loss("squared"), Quantile(0.25), fam, xi_grid_for(fam, 1, 1e-3), TOL)
    good = v.status is Status.INCONSISTENT and witness_gap(parse_loss("squared"), fam, v.witness) < -TOL
    ok &= good
    notes.append(f"squared/quantile(0.25) {v.status.value}")

    # flat pieces: the witness and the target lie in one linear piece of phi (or one step of g)
    fam = random_family(9, 50, n_atoms=(3, 6), low=-0.9, high=0.9, alphas=(0.25,))
    grid = xi_grid_for(fam, 1, 1e-3, pad=0.05)
    loss = parse_loss("bregman:pwlinear")
    v = check_consistency(loss, Mean(), fam, grid, TOL)
    w = v.witness
    good = (v.status is Status.NOT_STRICT and abs(w.gap) <= TOL
            and -1 < min(w.point[0], w.reference[0]) and max(w.point[0], w.reference[0]) < 1)
    ok &= good
    notes.append(f"pwlinear-bregman/mean {v.status.value}")

    loss = parse_loss("gpl:step:knots=-1|0|1:alpha=0.25")
    v = check_consistency(loss, Quantile(0.25), fam, grid, TOL)
    w = v.witness
    same_step = w is not None and loss.spec.g(w.point[0]) == loss.spec.g(w.reference[0])
    good = v.status is Status.NOT_STRICT and abs(w.gap) <= TOL and same_step
    ok &= good
    notes.append(f"step-gpl/quantile(0.25) {v.status.value}")

    criterion(2, ok, "; ".join(notes))
    assert ok


def _independent_unconditional_gap(loss, dgp, theta_bad):
    total = 0.0
    for x, px, cond in zip(dgp.atoms, dgp.probs, dgp.conditionals):
        xi_bad = dgp.model.eval(x, theta_bad)
        xi_0 = dgp.model.eval(x, dgp.theta0)
        for y, py in zip(cond.support, cond.probs):
            total += px * py * (float(loss(y, xi_bad)) - float(loss(y, xi_0)))
    return total


def test_criterion_3_theorem1_matrix(criterion):
    t0 = time.perf_counter()
    violations, missing_forward, bad_cex = [], [], []
    n_cells = n_cex = 0
    losses_per_functional = {}
    for g in FUNCTIONALS:
        keys = K2_LOSSES if g.k == 2 else K1_LOSSES
        losses_per_functional[g.key] = len(keys)
        for name, cls in standard_classes(g, 0):
            assert cls.closed
            xi = xi_grid_for(extract_conditional_family(cls), g.k, 1e-3 if g.k == 1 else 0.02)
            for key in keys:
                loss = parse_loss(key)
                rep = theorem1_audit(loss, g, cls, AuditGrids(xi), TOL)
                n_cells += 1
                violations += [(g.key, name, key, a) for a in rep.violations]
                applicable = rep.verdicts.get("consistency") is not None and \
                    rep.verdicts["consistency"].status is not Status.INCONSISTENT
                for a in ("(i)", "(iii)"):
                    if applicable and rep.arrows[a].kind != CONFIRMED:
                        missing_forward.append((g.key, name, key, a, rep.arrows[a].kind))
                data = rep.arrows["(iv)"].data
                if "gap" in data:
                    n_cex += 1
                    cex = cls[data["member"]]
                    gap = _independent_unconditional_gap(loss, cex, data["theta_bad"])
                    if not (data["gap"] <= TOL and gap <= TOL):
                        bad_cex.append((g.key, name, key, data["gap"], gap))
    elapsed = time.perf_counter() - t0
    ok = (not violations and not missing_forward and not bad_cex and n_cex > 0
          and min(losses_per_functional.values()) >= 3 and elapsed < 300)
    criterion(3, ok, f"{n_cells} cells, {len(violations)} arrow violations, {n_cex} counterexamples re-verified "
              f"(gap <= 1e-9), {elapsed:.1f}s")
    assert not violations
    assert not missing_forward
    assert not bad_cex and n_cex > 0
    assert elapsed < 300


def test_criterion_4_example_s1(criterion):
    t0 = time.perf_counter()
    dgp = example_s1_dgp()
    assert abs(float(dgp.probs @ dgp.atoms[:, 0])) < 1e-15
    phi = canonical_identification(Mean())
    grid = dgp.theta_grid.points

    plain = compose_model(phi, dgp.model)
    ones = compose_instrument(parse_instrument("ones", 1, 1), phi, dgp.model)
    inst = compose_instrument(parse_instrument("covariate", 1, 1), phi, dgp.model)

    max_plain = max(float(np.max(np.abs(np.concatenate(unconditional_moment(p, dgp, grid))))) for p in (plain, ones))
    v_plain = check_unconditional_identification(plain, dgp)
    v_inst = check_unconditional_identification(inst, dgp)
    rank_x = rank_condition_along_segments(parse_instrument("covariate", 1, 1), dgp, grid[::10])
    rank_1 = rank_condition_along_segments(parse_instrument("ones", 1, 1), dgp, grid[::10])

    opt = OptimizerConfig.for_model(dgp.model, seed=0)
    rep = monte_carlo(dgp, EstimatorSpec("z", dgp.model, psi=inst, optimizer=opt), (1000, 4000), 200, 12345)
    ratio = float(rep.rmse[1, 0] / rep.rmse[0, 0])
    elapsed = time.perf_counter() - t0

    ok = (max_plain < 1e-12 and v_plain.status is not Status.STRICT and v_inst.status is Status.STRICT
          and rank_x.full_rank and not rank_1.full_rank and 0.38 <= ratio <= 0.62 and elapsed < 120)
    criterion(4, ok, f"max|moment| uninstrumented {max_plain:.1e}, psi {v_plain.status.value} vs psi_A "
              f"{v_inst.status.value}, rank A=x {rank_x.full_rank} / A=1 {rank_1.full_rank}, "
              f"RMSE ratio {ratio:.3f}, {elapsed:.1f}s")
    assert max_plain < 1e-12
    assert v_plain.status is not Status.STRICT
    assert v_inst.status is Status.STRICT
    assert rank_x.full_rank and not rank_1.full_rank
    assert 0.38 <= ratio <= 0.62
    assert elapsed < 120


def test_criterion_5_estimator_oracle_equivalence(criterion):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        theta0 = rng.uniform(-1.5, 1.5, 2)
        atoms = np.sort(rng.uniform(-2, 2, 5))
        dgp = linear_mean_dgp(rng, theta0, atoms, intercept=True, box_halfwidth=3.0)
        data = sample(dgp, 10_000, 1000 + seed)
        ols = normal_equations(data.x, data.y, intercept=True)
        cfg = OptimizerConfig.for_model(dgp.model, seed=seed)
        m = m_estimate(parse_loss("squared"), dgp.model, data, cfg).theta
        psi = compose_instrument(parse_instrument("covariate-affine", 2, 1), canonical_identification(Mean()),
                                 dgp.model)
        z = z_estimate(psi, data, cfg).theta
        worst = max(worst, float(np.max(np.abs(m - ols))), float(np.max(np.abs(z - ols))),
                    float(np.max(np.abs(m - z))))
    ok = worst <= 1e-6
    criterion(5, ok, f"20 datasets, T=1e4: max inf-norm disagreement {worst:.2e} (tol 1e-6)")
    assert ok


FD_FAMILIES = {
    "bregman:square": (-3, 3), "bregman:exp": (-3, 3), "bregman:abspow:p=1.5": (-3, 3),
    "bregman:abspow:p=3": (-3, 3), "bregman:pwlinear": (-3, 3),
    "gpl:identity:alpha=0.3": (-3, 3), "gpl:power:beta=2:alpha=0.3": (-3, 3),
    "gpl:log:alpha=0.3": (0.2, 4), "gpl:step:alpha=0.3": (-3, 3),
    "expectile:tau=0.3": (-3, 3), "varvs:alpha=0.25": (-3, 3), "varvs:alpha=0.25:g1=zero": (-3, 3),
}


def _off_kink_points(loss, rng, lo, hi, n, margin=1e-3):
    from mchar.losses import BregmanLoss, GPLLoss

    kinks = []
    if isinstance(loss, BregmanLoss):
        kinks = list(loss.spec.kinks())
    elif isinstance(loss, GPLLoss):
        kinks = list(loss.spec.kinks())
    out = []
    while len(out) < n:
        y = rng.uniform(lo, hi)
        xi = rng.uniform(lo, hi, loss.k)
        if loss.k == 2:
            xi[1] = rng.uniform(-3, 1)
        if abs(y - xi[0]) < margin or any(abs(xi[0] - k) < margin for k in kinks):
            continue
        if loss.key.startswith("bregman:abspow") and abs(xi[0]) < margin:
            continue
        out.append((y, xi))
    return out


def _hygiene_subgradients():
    from mchar.losses import loss_subgradient

    rng = np.random.default_rng(2024)
    h = 1e-6
    worst = 0.0
    for key, (lo, hi) in FD_FAMILIES.items():
        loss = parse_loss(key)
        for y, xi in _off_kink_points(loss, rng, lo, hi, 1000):
            g = loss_subgradient(loss, y, xi)
            for i in range(loss.k):
                e = np.zeros(loss.k)
                e[i] = h
                fd = (float(loss(y, xi + e)) - float(loss(y, xi - e))) / (2 * h)
                worst = max(worst, abs(g[i] - fd) / max(1.0, abs(fd)))
    return worst


def _hygiene_kappa():
    rng = np.random.default_rng(5)
    dgp = linear_mean_dgp(rng, [0.7], [-1.0, 0.5, 2.0])
    data = sample(dgp, 2000, 3)
    same = True
    for key in ("squared", "bregman:exp", "pinball:alpha=0.5", "expectile:tau=0.3"):
        loss = parse_loss(key)
        a = m_estimate(loss, dgp.model, data).theta
        for kappa in (lambda y: 3.0 * y ** 2, lambda y: np.sin(y) + 100.0):
            b = m_estimate(loss.with_kappa(kappa), dgp.model, data).theta
            same &= a.tobytes() == b.tobytes()
    return same


def _hygiene_replay(tmp_path):
    runs = [
        ["check-consistency", "--config", str(CONFIGS / "bregman_mean.toml")],
        ["check-identification", "--config", str(CONFIGS / "identification.toml")],
        ["theorem1", "--config", str(CONFIGS / "theorem1_unclosed.toml")],
        ["estimate", "--config", str(CONFIGS / "ols.toml")],
        ["monte-carlo", "--config", str(CONFIGS / "monte_carlo.toml")],
        ["example-s1", "--T", "200,800", "--replications", "20"],
    ]
    ok = True
    for i, argv in enumerate(runs):
        out = tmp_path / f"run{i}"
        ok &= cli.main(argv + ["--out", str(out)]) == 0
        replay_dir = tmp_path / f"replay{i}"
        ok &= cli.main(["replay", str(out / "manifest.json"), "--out", str(replay_dir)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        for name in manifest["outputs"]:
            ok &= (out / name).read_bytes() == (replay_dir / name).read_bytes()
    return ok, len(runs)


def test_criterion_6_numerical_hygiene(criterion, tmp_path):
    worst = _hygiene_subgradients()
    kappa_ok = _hygiene_kappa()
    replay_ok, n_runs = _hygiene_replay(tmp_path)
    ok = worst <= 1e-4 and kappa_ok and replay_ok
    criterion(6, ok, f"subgradient vs FD max rel err {worst:.1e} over {len(FD_FAMILIES)} families x 1000 points; "
              f"kappa shift bitwise {'unchanged' if kappa_ok else 'CHANGED'}; "
              f"{n_runs} CLI runs {'replayed bitwise' if replay_ok else 'NOT reproduced'}")
    assert worst <= 1e-4
    assert kappa_ok
    assert replay_ok


def test_criterion_7_reweighting_invariant(criterion):
    rng = np.random.default_rng(77)
    worst = 0.0
    pairs = 0
    while pairs < 100:
        g = FUNCTIONALS[int(rng.integers(len(FUNCTIONALS)))]
        specs = standard_class_specs(g)
        spec = specs[int(rng.integers(len(specs)))]
        dgp = build_dgp(spec, g, rng)
        size = int(rng.integers(1, dgp.n_atoms + 1))
        event = np.sort(rng.choice(dgp.n_atoms, size=size, replace=False))
        new = reweight(dgp, event)
        assert np.array_equal(new.theta0, dgp.theta0)
        expected_probs = dgp.probs[event] / dgp.probs[event].sum()
        assert np.allclose(new.probs, expected_probs, rtol=0, atol=1e-15)
        for x, cond in zip(new.atoms, new.conditionals):
            dev = np.max(np.abs(eval_functional(g, cond) - dgp.model.eval(x, dgp.theta0)))
            worst = max(worst, float(dev))
        pairs += 1
    ok = worst <= 1e-10
    criterion(7, ok, f"{pairs} (DGP, event) pairs revalidated, max |Gamma(F_x) - m(x, theta0)| = {worst:.1e}")
    assert ok
