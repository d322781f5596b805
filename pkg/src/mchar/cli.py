"""Command-line front end: ``mchar <command> [--config PATH] [--out DIR] [--seed N] [--jobs N]``.

Exit codes: 0 when every declared expectation holds, 1 on a verdict or
acceptance mismatch, 2 on a configuration error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .checkers import (
    COUNTEREXAMPLE,
    AuditGrids,
    Status,
    Verdict,
    check_conditional_identification,
    check_conditional_mc,
    check_consistency,
    check_unconditional_identification,
    check_unconditional_mc,
    theorem1_audit,
    unconditional_moment,
)
from .config import ExperimentConfig, load_config
from .dgp import sample
from .errors import ConfigError, MCharError
from .estimators import EstimatorSpec, OptimizerConfig, monte_carlo, normal_equations, resolve_jobs
from .families import example_s1_dgp
from .identification import (
    canonical_identification,
    compose_instrument,
    compose_model,
    parse_instrument,
    rank_as_condition_s3,
    rank_condition_along_segments,
)

OK, MISMATCH, CONFIG_ERROR = 0, 1, 2
DEFAULT_OUT = "mchar_out"


def fmt(value) -> str:
    """CSV cell: floats with 17 significant digits, arrays joined by '|'."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return "%.17g" % value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, np.ndarray) or isinstance(value, (list, tuple)):
        return "|".join(fmt(v) for v in np.asarray(value, dtype=float).ravel())
    if isinstance(value, Status):
        return value.value
    return str(value)


class Outputs:
    """Collects files for one run and writes them together with the manifest."""

    def __init__(self, out_dir: Path):
        self.dir = out_dir
        self.files: dict[str, str] = {}

    def csv(self, name: str, header, rows):
        lines = []

        class _Sink:
            def write(self, s):
                lines.append(s)

        w = csv.writer(_Sink(), lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
        self.files[name] = "".join(lines)

    def text(self, name: str, body: str):
        self.files[name] = body if body.endswith("\n") else body + "\n"

    def flush(self, manifest: dict):
        self.dir.mkdir(parents=True, exist_ok=True)
        hashes = {}
        for name, body in self.files.items():
            (self.dir / name).write_text(body)
            hashes[name] = hashlib.sha256(body.encode()).hexdigest()
        manifest = dict(manifest, outputs=hashes)
        (self.dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return hashes


def _witness_cells(v: Verdict):
    w = v.witness
    if w is None:
        return [None, None, None, None, None]
    return [w.index, w.atom, w.point, w.reference, w.gap]


def _match(status: Status, expect: Status | None) -> bool:
    return expect is None or status is expect


# ---------------------------------------------------------------------------
# commands


def cmd_check_consistency(cfg: ExperimentConfig, out: Outputs, args) -> int:
    if not cfg.consistency:
        raise ConfigError("config has no [[consistency]] blocks")
    rows, lines, ok = [], [], True
    for t in cfg.consistency:
        v = check_consistency(t.loss, t.functional, t.family, t.xi_grid, cfg.tol)
        good = _match(v.status, t.expect)
        ok &= good
        rows.append([t.label, t.loss.key, t.functional.key, len(t.family), v.grid, v.status,
                     t.expect, good] + _witness_cells(v))
        lines.append(f"{'ok ' if good else 'BAD'} {t.label}: {t.loss.key} for {t.functional.key} -> {v.status.value}"
                     + (f" [witness {v.witness.describe()}]" if v.witness else ""))
    out.csv("consistency.csv", ["label", "loss", "functional", "n_distributions", "grid", "status", "expected",
                                "match", "witness_index", "witness_atom", "witness_point", "witness_reference",
                                "witness_gap"], rows)
    out.text("report.txt", "\n".join(lines))
    print("\n".join(lines))
    return OK if ok else MISMATCH


def cmd_check_model_consistency(cfg: ExperimentConfig, out: Outputs, args) -> int:
    if not cfg.model_consistency:
        raise ConfigError("config has no [[model_consistency]] blocks")
    rows, lines, ok = [], [], True
    for t in cfg.model_consistency:
        cls = cfg.classes[t.class_name]
        for scope, fn, expect in (("conditional", check_conditional_mc, t.expect_conditional),
                                  ("unconditional", check_unconditional_mc, t.expect_unconditional)):
            v = fn(t.loss, cls, None, cfg.tol)
            good = _match(v.status, expect)
            ok &= good
            rows.append([t.loss.key, t.class_name, scope, v.status, expect, good] + _witness_cells(v))
            lines.append(f"{'ok ' if good else 'BAD'} {t.loss.key} on {t.class_name} ({scope}) -> {v.status.value}")
    out.csv("model_consistency.csv", ["loss", "class", "scope", "status", "expected", "match", "witness_index",
                                      "witness_atom", "witness_point", "witness_reference", "witness_gap"], rows)
    out.text("report.txt", "\n".join(lines))
    print("\n".join(lines))
    return OK if ok else MISMATCH


def _psi_for(cls, instrument: str | None):
    phi = canonical_identification(cls.functional)
    m = cls.model
    if instrument is None:
        return compose_model(phi, m), None
    A = parse_instrument(instrument, m.q, m.k)
    return compose_instrument(A, phi, m), A


def cmd_check_identification(cfg: ExperimentConfig, out: Outputs, args) -> int:
    if not cfg.identification:
        raise ConfigError("config has no [[identification]] blocks")
    rows, lines, ok = [], [], True
    for t in cfg.identification:
        cls = cfg.classes[t.class_name]
        psi, A = _psi_for(cls, t.instrument)
        label = t.instrument or "none"
        for scope, fn, expect in (("conditional", check_conditional_identification, t.expect_conditional),
                                  ("unconditional", check_unconditional_identification, t.expect_unconditional)):
            v = fn(psi, cls, None, cfg.tol)
            good = _match(v.status, expect)
            ok &= good
            rows.append([t.class_name, label, scope, v.status, expect, good, None, None] + _witness_cells(v))
            lines.append(f"{'ok ' if good else 'BAD'} {t.class_name} instrument={label} ({scope}) -> {v.status.value}")
        if A is not None:
            s3 = all(rank_as_condition_s3(A, d) for d in cls)
            reps = [rank_condition_along_segments(A, d, d.theta_grid.points[:: max(1, len(d.theta_grid) // 25)])
                    for d in cls]
            s2 = all(r.full_rank for r in reps)
            smin = min(r.min_singular_value for r in reps)
            good = t.expect_rank is None or s2 == t.expect_rank
            ok &= good
            rows.append([t.class_name, label, "rank", None, t.expect_rank, good, s2, s3, None, None, None, None, smin])
            lines.append(f"{'ok ' if good else 'BAD'} {t.class_name} instrument={label} rank: full={s2} "
                         f"(min singular value {smin:.3e}), rank at theta0 = k: {s3}")
    out.csv("identification.csv", ["class", "instrument", "scope", "status", "expected", "match", "rank_full",
                                   "rank_at_theta0", "witness_index", "witness_atom", "witness_point",
                                   "witness_reference", "witness_gap"], rows)
    out.text("report.txt", "\n".join(lines))
    print("\n".join(lines))
    return OK if ok else MISMATCH


def _audit_cell(args):
    cell, window, identification, tol = args
    return theorem1_audit(cell.loss, cell.functional, cell.cls, AuditGrids(cell.xi_grid, None, window), tol,
                          identification=identification)


ARROWS = ("(i)", "(ii)", "(iii)", "(iv)", "S1(i)", "S1(ii)", "S3")


def cmd_theorem1(cfg: ExperimentConfig, out: Outputs, args) -> int:
    task = cfg.theorem1
    if task is None:
        raise ConfigError("config has no [theorem1] table")
    work = [(c, task.window, task.identification, cfg.tol) for c in task.cells]
    jobs = resolve_jobs(args.jobs)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_audit_cell, work))
    else:
        reports = [_audit_cell(w) for w in work]
    rows, blocks = [], []
    tally = {a: {} for a in ARROWS}
    violations = 0
    for cell, rep in zip(task.cells, reports):
        v = rep.verdicts
        cex = rep.arrows.get("(iv)")
        gap = cex.data.get("gap") if cex is not None else None
        rows.append([cell.functional.key, cell.class_name, cell.loss.key]
                    + [v[n].status if n in v else "n/a" for n in ("consistency", "conditional", "unconditional")]
                    + [rep.arrows[a].kind if a in rep.arrows else "" for a in ARROWS] + [gap])
        for a, o in rep.arrows.items():
            tally[a][o.kind] = tally[a].get(o.kind, 0) + 1
        violations += len(rep.violations)
        blocks.append(f"[{cell.class_name}]\n" + rep.render())
    summary = ["Implication audit", "=================",
               "consistency --(i)--> conditional model-consistency --(iii)--> unconditional model-consistency",
               "conditional model-consistency --(ii)--> consistency on the modified family",
               "unconditional --(iv), reweight-closed class--> conditional", ""]
    for a in ARROWS:
        if tally[a]:
            summary.append(f"{a:<7} " + ", ".join(f"{k}: {n}" for k, n in sorted(tally[a].items())))
    summary.append(f"cells: {len(reports)}, arrow violations: {violations}")
    out.csv("theorem1.csv", ["functional", "class", "loss", "consistency", "conditional", "unconditional"]
            + list(ARROWS) + ["counterexample_gap"], rows)
    out.text("report.txt", "\n".join(summary) + "\n\n" + "\n\n".join(blocks))
    print("\n".join(summary))
    return OK if violations == 0 else MISMATCH


def _t_list(text: str) -> tuple:
    try:
        vals = tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise ConfigError(f"bad T list {text!r}") from exc
    if not vals or min(vals) < 1:
        raise ConfigError("T list must be non-empty and positive")
    return vals


def cmd_example_s1(cfg: ExperimentConfig | None, out: Outputs, args) -> int:
    variant = args.variant
    if variant == "point-mass":
        dgp = example_s1_dgp(atoms=(1.0,), probs=(1.0,))
    else:
        dgp = example_s1_dgp()
    T_list = _t_list(args.T)
    R = args.replications
    if R < 2:
        raise ConfigError("replications must be at least 2")
    phi = canonical_identification(dgp.functional)
    opt = OptimizerConfig.for_model(dgp.model, seed=args.seed)
    rows, lines = [], []
    results = {}
    for label, inst in (("A=1", "ones"), ("A=x", "covariate")):
        A = parse_instrument(inst, dgp.model.q, dgp.model.k)
        psi = compose_instrument(A, phi, dgp.model)
        cond = check_conditional_identification(compose_model(phi, dgp.model), dgp)
        unc = check_unconditional_identification(psi, dgp)
        lo, hi = unconditional_moment(psi, dgp, dgp.theta_grid.points)
        max_moment = float(np.max(np.abs(np.concatenate([lo, hi]))))
        rank = rank_condition_along_segments(A, dgp, dgp.theta_grid.points[::10])
        rep = monte_carlo(dgp, EstimatorSpec("z", dgp.model, psi=psi, optimizer=opt, label=label),
                          T_list, R, args.seed, jobs=args.jobs)
        rmse = rep.rmse[:, 0]
        results[label] = (unc.status, rank.full_rank, rmse)
        for i, T in enumerate(T_list):
            rows.append([variant, label, cond.status, unc.status, max_moment, rank.full_rank,
                         rank.min_singular_value, T, R, rep.bias[i, 0], rmse[i]])
        lines.append(f"{label}: conditional {cond.status.value}, unconditional {unc.status.value}, "
                     f"max |moment| {max_moment:.3e}, full rank {rank.full_rank}, RMSE "
                     + ", ".join(f"T={T}: {r:.4g}" for T, r in zip(T_list, rmse)))
    ratio = None
    if len(T_list) >= 2:
        ratio = float(results["A=x"][2][-1] / results["A=x"][2][0])
        lines.append(f"A=x RMSE ratio T={T_list[-1]} vs T={T_list[0]}: {ratio:.4f}")
    if variant == "point-mass":
        ok = results["A=1"][0] is Status.STRICT and results["A=x"][0] is Status.STRICT
    else:
        ok = (results["A=1"][0] is Status.NOT_STRICT and results["A=x"][0] is Status.STRICT
              and not results["A=1"][1] and results["A=x"][1])
        if ratio is not None and T_list[-1] == 4 * T_list[0]:
            ok &= 0.38 <= ratio <= 0.62
    out.csv("example_s1.csv", ["variant", "instrument", "conditional_identification",
                               "unconditional_identification", "max_abs_moment", "rank_full", "min_singular_value",
                               "T", "replications", "bias", "rmse"], rows)
    out.text("report.txt", "\n".join(lines))
    print("\n".join(lines))
    return OK if ok else MISMATCH


def cmd_estimate(cfg: ExperimentConfig, out: Outputs, args) -> int:
    t = cfg.estimate
    if t is None:
        raise ConfigError("config has no [estimate] table")
    dgp = cfg.classes[t.class_name][t.member]
    rows, lines, ok = [], [], True
    for i, T in enumerate(t.T_list):
        data = sample(dgp, T, t.seed + i)
        res = t.estimator.fit(data)
        oracle = None
        if t.oracle == "ols":
            oracle = normal_equations(data.x, data.y, intercept=dgp.model.intercept)
        err = np.abs(res.theta - dgp.theta0)
        for c in range(res.theta.size):
            rows.append([T, t.seed + i, c, res.theta[c], dgp.theta0[c], err[c],
                         None if oracle is None else oracle[c], res.objective, res.converged, res.flat])
        line = f"T={T}: theta_hat={np.round(res.theta, 6).tolist()} max|err|={err.max():.4g}"
        if oracle is not None:
            gap = float(np.max(np.abs(res.theta - oracle)))
            line += f" max|theta_hat - oracle|={gap:.3e}"
            if t.expect_oracle_tol is not None and gap > t.expect_oracle_tol:
                ok = False
        lines.append(line)
    if t.expect_max_abs_error is not None and err.max() >= t.expect_max_abs_error:
        ok = False
    out.csv("estimate.csv", ["T", "seed", "coord", "estimate", "theta0", "abs_error", "oracle", "objective",
                             "converged", "flat"], rows)
    out.text("report.txt", "\n".join(lines))
    print("\n".join(lines))
    return OK if ok else MISMATCH


def cmd_monte_carlo(cfg: ExperimentConfig, out: Outputs, args) -> int:
    t = cfg.monte_carlo
    if t is None:
        raise ConfigError("config has no [monte_carlo] table")
    dgp = cfg.classes[t.class_name][t.member]
    rep = monte_carlo(dgp, t.estimator, t.T_list, t.replications, t.seed, jobs=args.jobs)
    rows = []
    for i, T in enumerate(rep.T_list):
        for r in range(rep.replications):
            for c in range(dgp.theta0.size):
                est = rep.estimates[i, r, c]
                rows.append([T, r, c, est, dgp.theta0[c], abs(est - dgp.theta0[c])])
    summary = [[T, c, rep.bias[i, c], rep.rmse[i, c]] for i, T in enumerate(rep.T_list) for c in range(dgp.theta0.size)]
    out.csv("monte_carlo.csv", ["T", "replication", "coord", "estimate", "theta0", "abs_error"], rows)
    out.csv("monte_carlo_summary.csv", ["T", "coord", "bias", "rmse"], summary)
    lines = [f"T={T}: bias={np.round(rep.bias[i], 6).tolist()} rmse={np.round(rep.rmse[i], 6).tolist()}"
             for i, T in enumerate(rep.T_list)]
    ok = True
    if t.expect_max_abs_error is not None:
        ok = float(np.max(np.abs(rep.bias[-1]))) < t.expect_max_abs_error
    out.text("report.txt", "\n".join(lines))
    print("\n".join(lines))
    return OK if ok else MISMATCH


COMMANDS = {
    "check-consistency": cmd_check_consistency,
    "check-model-consistency": cmd_check_model_consistency,
    "check-identification": cmd_check_identification,
    "theorem1": cmd_theorem1,
    "example-s1": cmd_example_s1,
    "estimate": cmd_estimate,
    "monte-carlo": cmd_monte_carlo,
}


# ---------------------------------------------------------------------------


def _global_flags(p: argparse.ArgumentParser, suppress: bool):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), help="experiment config (TOML)")
    p.add_argument("--out", default=d(None), help="output directory")
    p.add_argument("--seed", type=int, default=d(None), help="override the config seed")
    p.add_argument("--jobs", type=int, default=d(None), help="worker processes (fallback: MCHAR_JOBS)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mchar", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mchar {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        _global_flags(sp, suppress=True)
        if name == "example-s1":
            sp.add_argument("--T", default="1000,4000", help="comma separated sample sizes")
            sp.add_argument("--replications", type=int, default=200)
            sp.add_argument("--variant", choices=("zero-mean", "point-mass"), default="zero-mean")
    rp = sub.add_parser("replay", help="re-run a manifest and compare output hashes")
    rp.add_argument("manifest")
    _global_flags(rp, suppress=True)
    return parser


def _manifest(args, cfg: ExperimentConfig | None, argv) -> dict:
    return {
        "tool": "mchar",
        "version": __version__,
        "command": args.command,
        "argv": list(argv),
        "seed": None if cfg is None and args.seed is None else (cfg.seed if cfg is not None else args.seed),
        "config_text": cfg.text if cfg is not None else None,
        "config_sha256": cfg.sha256 if cfg is not None else None,
        "jobs": resolve_jobs(args.jobs),
    }


def _replay(args) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read manifest: {exc}") from exc
    out_dir = Path(args.out or Path(args.manifest).parent / "replay")
    out_dir.mkdir(parents=True, exist_ok=True)
    argv = [a for a in manifest["argv"]]
    # drop the original --config/--out values; point at the embedded config instead
    cleaned, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a in ("--config", "--out"):
            skip = True
            continue
        if a.startswith("--config=") or a.startswith("--out="):
            continue
        cleaned.append(a)
    if manifest.get("config_text") is not None:
        cfg_path = out_dir / "replayed_config.toml"
        cfg_path.write_text(manifest["config_text"])
        cleaned += ["--config", str(cfg_path)]
    if manifest.get("seed") is not None and "--seed" not in cleaned:
        cleaned += ["--seed", str(manifest["seed"])]
    cleaned += ["--out", str(out_dir)]
    code = main(cleaned)
    new = json.loads((out_dir / "manifest.json").read_text())["outputs"]
    same = new == manifest["outputs"]
    print(f"replay {'reproduced' if same else 'DIFFERS FROM'} {args.manifest}")
    if not same:
        return MISMATCH
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "replay":
            return _replay(args)
        cfg = None
        if args.command != "example-s1" or args.config is not None:
            if args.config is None:
                raise ConfigError(f"{args.command} needs --config")
            cfg = load_config(args.config, seed=args.seed)
        if args.command == "example-s1" and args.seed is None:
            args.seed = cfg.seed if cfg is not None else 0
        out_dir = Path(args.out or (cfg.out if cfg is not None and cfg.out else DEFAULT_OUT))
        out = Outputs(out_dir)
        code = COMMANDS[args.command](cfg, out, args)
        out.flush(_manifest(args, cfg, argv))
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return CONFIG_ERROR
    except MCharError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
