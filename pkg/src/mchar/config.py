"""Experiment configuration files (TOML).

Every key is resolved against the library catalogs while loading, so a
config either loads completely or raises :class:`ConfigError` before any
computation starts. The grammar is documented in ``configs/README.md``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .checkers import DEFAULT_TOL, Status
from .dgp import DGPClass, ParametricModel, close_under_reweighting, extract_conditional_family, make_dgp, parse_model
from .distributions import DiscreteDistribution, Functional, make_discrete, parse_functional
from .errors import ConfigError, MCharError
from .estimators import EstimatorSpec, OptimizerConfig
from .families import ClassSpec, build_class, random_family, standard_classes, xi_grid_for
from .grids import Grid, lattice
from .identification import canonical_identification, compose_instrument, compose_model, parse_instrument
from .losses import Loss, parse_loss

_STATUS = {s.value: s for s in Status}


@dataclass
class ConsistencyTask:
    label: str
    loss: Loss
    functional: Functional
    family: list
    xi_grid: Grid
    expect: Status | None


@dataclass
class ModelConsistencyTask:
    loss: Loss
    class_name: str
    expect_conditional: Status | None
    expect_unconditional: Status | None


@dataclass
class IdentificationTask:
    class_name: str
    instrument: str | None
    expect_conditional: Status | None
    expect_unconditional: Status | None
    expect_rank: bool | None


@dataclass
class Theorem1Cell:
    functional: Functional
    class_name: str
    cls: DGPClass
    loss: Loss
    xi_grid: Grid


@dataclass
class Theorem1Task:
    cells: list
    window: int
    identification: bool


@dataclass
class EstimationTask:
    class_name: str
    member: int
    estimator: EstimatorSpec
    T_list: tuple
    seed: int
    replications: int = 0
    oracle: str | None = None
    expect_max_abs_error: float | None = None
    expect_oracle_tol: float | None = None


@dataclass
class ExperimentConfig:
    text: str
    sha256: str
    seed: int
    tol: float
    out: str | None
    classes: dict = field(default_factory=dict)
    consistency: list = field(default_factory=list)
    model_consistency: list = field(default_factory=list)
    identification: list = field(default_factory=list)
    theorem1: Theorem1Task | None = None
    estimate: EstimationTask | None = None
    monte_carlo: EstimationTask | None = None


# ---------------------------------------------------------------------------
# helpers


def _req(table: dict, key: str, where: str):
    if key not in table:
        raise ConfigError(f"{where}: missing key {key!r}")
    return table[key]


def _positive(value, name: str) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be a number") from exc
    if not v > 0:
        raise ConfigError(f"{name} must be positive, got {value!r}")
    return v


def _status(value, where: str) -> Status | None:
    if value is None:
        return None
    if value not in _STATUS:
        raise ConfigError(f"{where}: unknown verdict {value!r}; expected one of {sorted(_STATUS)}")
    return _STATUS[value]


def _catalog(fn, key, where):
    try:
        return fn(key)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _distribution(table: dict, where: str) -> DiscreteDistribution:
    try:
        return make_discrete(_req(table, "support", where), _req(table, "probs", where))
    except MCharError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _family(block: dict, functional: Functional, seed: int, where: str) -> list:
    fam = [_distribution(d, f"{where}.distributions[{i}]") for i, d in enumerate(block.get("distributions", []))]
    rnd = block.get("random")
    if rnd is not None:
        count = int(_req(rnd, "count", f"{where}.random"))
        if count < 1:
            raise ConfigError(f"{where}.random.count must be positive")
        alphas = tuple(rnd.get("alphas", [functional.level] if functional.kind in ("quantile", "vares") else []))
        atoms = tuple(rnd.get("atoms", [3, 6]))
        fam += random_family(
            seed + int(rnd.get("seed", 0)), count, n_atoms=atoms,
            low=float(rnd.get("low", -3.0)), high=float(rnd.get("high", 3.0)),
            alphas=alphas, margin=float(rnd.get("margin", 0.02)),
        )
    if not fam:
        raise ConfigError(f"{where}: needs 'distributions' or a 'random' table")
    return fam


def _xi_grid(block: dict, family, k: int, where: str) -> Grid:
    mesh = _positive(block.get("xi_mesh", 1e-3 if k == 1 else 0.02), f"{where}.xi_mesh")
    if "xi_box" in block:
        box = np.asarray(block["xi_box"], dtype=float).reshape(-1, 2)
        if box.shape[0] != k:
            raise ConfigError(f"{where}.xi_box must have {k} rows")
        return lattice(box, mesh)
    return xi_grid_for(family, k, mesh, float(block.get("xi_pad", 1.0)))


def _model(table: dict, where: str) -> ParametricModel:
    p = int(table.get("p", 1))
    box = _req(table, "theta_box", where)
    try:
        return parse_model(_req(table, "model", where), p, box)
    except (ValueError, MCharError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _class(table: dict, seed: int, where: str) -> DGPClass:
    g = _catalog(parse_functional, _req(table, "functional", where), where)
    model = _model(table, where)
    mesh = _positive(table.get("theta_mesh", 0.05), f"{where}.theta_mesh")
    closed = bool(table.get("closed", False))
    try:
        if "generate" in table:
            gen = table["generate"]
            spec = ClassSpec(
                name=table.get("name", "generated"), model=model,
                atoms=tuple(_req(table, "covariates", where)), probs=tuple(_req(table, "covariate_probs", where)),
                theta0=tuple(_req(table, "theta0", where)), members=int(gen.get("members", 1)),
                noise=gen.get("noise", "location"), theta_mesh=mesh,
            )
            return build_class(spec, g, seed + int(gen.get("seed", 0)), closed=closed)
        members = []
        for i, d in enumerate(_req(table, "dgps", where)):
            w = f"{where}.dgps[{i}]"
            theta0 = np.asarray(_req(d, "theta0", w), dtype=float)
            grid = lattice(model.box, mesh, anchor=theta0)
            conds = [_distribution(c, f"{w}.conditionals[{j}]") for j, c in enumerate(_req(d, "conditionals", w))]
            members.append(make_dgp((_req(d, "covariates", w), _req(d, "covariate_probs", w)),
                                    conds, model, g, theta0, theta_grid=grid))
        cls = DGPClass(tuple(members))
        return close_under_reweighting(cls) if closed else cls
    except ConfigError:
        raise
    except (MCharError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _optimizer(table: dict | None, model: ParametricModel, where: str) -> OptimizerConfig:
    table = table or {}
    allowed = {"nodes_per_dim", "max_starts", "n_jitter", "n_local", "maxiter", "fatol", "xatol", "flat_tol", "seed"}
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown optimizer keys {sorted(unknown)}")
    try:
        return OptimizerConfig.for_model(model, **table)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _estimation(block: dict, cfg: ExperimentConfig, where: str, mc: bool) -> EstimationTask:
    name = _req(block, "class", where)
    if name not in cfg.classes:
        raise ConfigError(f"{where}: unknown class {name!r}")
    cls = cfg.classes[name]
    member = int(block.get("member", 0))
    if not 0 <= member < len(cls):
        raise ConfigError(f"{where}: member {member} out of range")
    model = cls.model
    kind = block.get("estimator", "m")
    opt = _optimizer(block.get("optimizer"), model, f"{where}.optimizer")
    if kind == "m":
        loss = _catalog(parse_loss, _req(block, "loss", where), where)
        if loss.k != model.k:
            raise ConfigError(f"{where}: loss has k={loss.k}, model has k={model.k}")
        spec = EstimatorSpec("m", model, loss=loss, optimizer=opt, label=loss.key)
    elif kind == "z":
        inst = block.get("instrument", "covariate")
        phi = canonical_identification(cls.functional)
        try:
            A = parse_instrument(inst, model.q, model.k)
            psi = compose_instrument(A, phi, model)
        except (ValueError, MCharError) as exc:
            raise ConfigError(f"{where}: {exc}") from exc
        spec = EstimatorSpec("z", model, psi=psi, optimizer=opt, label=f"z:{inst}")
    else:
        raise ConfigError(f"{where}: estimator must be 'm' or 'z'")
    T_list = block.get("T_list", [block["T"]] if "T" in block else [])
    if not T_list:
        raise ConfigError(f"{where}: T_list must not be empty")
    if any(int(t) < 1 for t in T_list):
        raise ConfigError(f"{where}: every T must be at least 1")
    reps = int(block.get("replications", 0))
    if mc and reps < 2:
        raise ConfigError(f"{where}: replications must be at least 2")
    oracle = block.get("oracle")
    if oracle not in (None, "ols"):
        raise ConfigError(f"{where}: unknown oracle {oracle!r}")
    if oracle == "ols" and model.kind != "linear":
        raise ConfigError(f"{where}: the least-squares oracle needs a linear model")
    return EstimationTask(
        class_name=name, member=member, estimator=spec, T_list=tuple(int(t) for t in T_list),
        seed=cfg.seed + int(block.get("seed", 0)), replications=reps, oracle=oracle,
        expect_max_abs_error=block.get("expect_max_abs_error"), expect_oracle_tol=block.get("expect_oracle_tol"),
    )


# ---------------------------------------------------------------------------


def parse_config(text: str, seed: int | None = None) -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"not valid TOML: {exc}") from exc
    run = data.get("run", {})
    cfg = ExperimentConfig(
        text=text,
        sha256=hashlib.sha256(text.encode()).hexdigest(),
        seed=int(seed if seed is not None else run.get("seed", 0)),
        tol=_positive(run.get("tol", DEFAULT_TOL), "run.tol"),
        out=run.get("out"),
    )

    for i, table in enumerate(data.get("classes", [])):
        name = _req(table, "name", f"classes[{i}]")
        if name in cfg.classes:
            raise ConfigError(f"duplicate class name {name!r}")
        cfg.classes[name] = _class(table, cfg.seed + 1000 * (i + 1), f"classes[{i}] ({name})")

    for i, block in enumerate(data.get("consistency", [])):
        where = f"consistency[{i}]"
        g = _catalog(parse_functional, _req(block, "functional", where), where)
        for key in (block["losses"] if "losses" in block else [_req(block, "loss", where)]):
            loss = _catalog(parse_loss, key, where)
            if loss.k != g.k:
                raise ConfigError(f"{where}: loss {key!r} has k={loss.k}, functional has k={g.k}")
        fam = _family(block, g, cfg.seed, where)
        grid = _xi_grid(block, fam, g.k, where)
        expect = _status(block.get("expect"), where)
        for key in (block["losses"] if "losses" in block else [block["loss"]]):
            cfg.consistency.append(ConsistencyTask(block.get("label", where), parse_loss(key), g, fam, grid, expect))

    for i, block in enumerate(data.get("model_consistency", [])):
        where = f"model_consistency[{i}]"
        loss = _catalog(parse_loss, _req(block, "loss", where), where)
        name = _req(block, "class", where)
        if name not in cfg.classes:
            raise ConfigError(f"{where}: unknown class {name!r}")
        if loss.k != cfg.classes[name].model.k:
            raise ConfigError(f"{where}: loss dimension does not match class {name!r}")
        cfg.model_consistency.append(ModelConsistencyTask(
            loss, name, _status(block.get("expect_conditional"), where),
            _status(block.get("expect_unconditional"), where)))

    for i, block in enumerate(data.get("identification", [])):
        where = f"identification[{i}]"
        name = _req(block, "class", where)
        if name not in cfg.classes:
            raise ConfigError(f"{where}: unknown class {name!r}")
        inst = block.get("instrument")
        if inst is not None:
            m = cfg.classes[name].model
            try:
                compose_instrument(parse_instrument(inst, m.q, m.k), canonical_identification(cfg.classes[name].functional), m)
            except (ValueError, MCharError) as exc:
                raise ConfigError(f"{where}: {exc}") from exc
        rank = block.get("expect_rank")
        cfg.identification.append(IdentificationTask(
            name, inst, _status(block.get("expect_conditional"), where),
            _status(block.get("expect_unconditional"), where), None if rank is None else bool(rank)))

    if "theorem1" in data:
        cfg.theorem1 = _theorem1(data["theorem1"], cfg)
    if "estimate" in data:
        cfg.estimate = _estimation(data["estimate"], cfg, "estimate", mc=False)
    if "monte_carlo" in data:
        cfg.monte_carlo = _estimation(data["monte_carlo"], cfg, "monte_carlo", mc=True)
    return cfg


def _theorem1(block: dict, cfg: ExperimentConfig) -> Theorem1Task:
    where = "theorem1"
    losses_k1 = [_catalog(parse_loss, k, where) for k in block.get("losses", [])]
    losses_k2 = [_catalog(parse_loss, k, where) for k in block.get("losses_k2", [])]
    for loss in losses_k1:
        if loss.k != 1:
            raise ConfigError(f"{where}: {loss.key} belongs in losses_k2")
    for loss in losses_k2:
        if loss.k != 2:
            raise ConfigError(f"{where}: {loss.key} belongs in losses")
    mesh1 = _positive(block.get("xi_mesh", 1e-3), f"{where}.xi_mesh")
    mesh2 = _positive(block.get("xi_mesh_k2", 0.02), f"{where}.xi_mesh_k2")
    pairs = []
    for key in block.get("standard_functionals", []):
        g = _catalog(parse_functional, key, where)
        try:
            for name, cls in standard_classes(g, cfg.seed):
                pairs.append((g, f"{g.key}/{name}", cls))
        except MCharError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
    for name in block.get("classes", []):
        if name not in cfg.classes:
            raise ConfigError(f"{where}: unknown class {name!r}")
        cls = cfg.classes[name]
        pairs.append((cls.functional, name, cls))
    if not pairs:
        raise ConfigError(f"{where}: no classes to audit")
    cells = []
    for g, name, cls in pairs:
        fam = extract_conditional_family(cls)
        grid = xi_grid_for(fam, g.k, mesh1 if g.k == 1 else mesh2)
        for loss in (losses_k1 if g.k == 1 else losses_k2):
            cells.append(Theorem1Cell(g, name, cls, loss, grid))
    if not cells:
        raise ConfigError(f"{where}: no (loss, class) cells")
    return Theorem1Task(cells, int(block.get("window", 25)), bool(block.get("identification", True)))


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, seed)
