"""M- and Z-estimation on sampled data, and a Monte Carlo harness around them."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize as _nelder_mead

from .dgp import ConditionalDGP, Dataset, ParametricModel, sample
from .errors import AllStartsNonFinite, DomainError
from .identification import ModelIdentification
from .losses import Loss, _kappa_values


@dataclass(frozen=True)
class OptimizerConfig:
    """Multistart Nelder-Mead settings.

    Parameters
    ----------
    box : array_like, shape (q, 2)
        Parameter box; every iterate is kept inside it.
    nodes_per_dim : int
        Start lattice density (interior nodes per coordinate).
    max_starts : int
        Cap on lattice starts; the density is lowered to respect it.
    n_jitter : int
        Extra uniformly drawn starts, reproducible through ``seed``.
    n_local : int
        Number of best starts that get a local simplex search.
    maxiter, fatol, xatol : local search stopping rules.
    flat_tol : float
        Objective range over the starts below which the objective is flagged flat.
    """

    box: tuple
    nodes_per_dim: int = 5
    max_starts: int = 625
    n_jitter: int = 2
    n_local: int = 3
    maxiter: int = 500
    fatol: float = 1e-10
    xatol: float = 1e-8
    flat_tol: float = 1e-10
    seed: int = 0

    def __post_init__(self):
        box = np.asarray(self.box, dtype=float).reshape(-1, 2)
        if np.any(box[:, 1] <= box[:, 0]):
            raise ValueError("optimizer box needs nonempty interior")
        if min(self.nodes_per_dim, self.max_starts, self.n_local, self.maxiter) < 1 or self.n_jitter < 0:
            raise ValueError("optimizer caps must be positive")
        if min(self.fatol, self.xatol, self.flat_tol) <= 0:
            raise ValueError("optimizer tolerances must be positive")
        object.__setattr__(self, "box", tuple(map(tuple, box.tolist())))

    @classmethod
    def for_model(cls, model: ParametricModel, **kw) -> "OptimizerConfig":
        return cls(box=model.theta_box, **kw)


@dataclass(frozen=True)
class EstimateResult:
    theta: np.ndarray
    objective: float
    starts: int
    converged: bool
    flat: bool = False
    nfev: int = 0


def start_points(cfg: OptimizerConfig) -> np.ndarray:
    box = np.asarray(cfg.box)
    q = box.shape[0]
    n = cfg.nodes_per_dim
    while n > 1 and n ** q > cfg.max_starts:
        n -= 1
    frac = (np.arange(n) + 1.0) / (n + 1.0)
    axes = [lo + (hi - lo) * frac for lo, hi in box]
    nodes = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
    if cfg.n_jitter:
        rng = np.random.default_rng(cfg.seed)
        jitter = box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random((cfg.n_jitter, q))
        nodes = np.vstack([nodes, jitter])
    return nodes


def _safe(objective):
    def f(theta):
        try:
            val = float(objective(theta))
        except DomainError:
            return np.inf
        return val if np.isfinite(val) else np.inf
    return f


def _local(f, x0, box, step, cfg):
    q = x0.size
    simplex = np.tile(x0, (q + 1, 1))
    for i in range(q):
        s = step[i] if x0[i] + step[i] <= box[i, 1] else -step[i]
        simplex[i + 1, i] += s
    return _nelder_mead(
        f, x0, method="Nelder-Mead", bounds=[tuple(b) for b in box],
        options={"initial_simplex": simplex, "xatol": cfg.xatol, "fatol": cfg.fatol, "maxiter": cfg.maxiter},
    )


def minimize(objective: Callable[[np.ndarray], float], cfg: OptimizerConfig) -> EstimateResult:
    """Multistart bounded Nelder-Mead.

    The objective is evaluated on every start; the ``n_local`` best starts are
    refined by a simplex search followed by one restart with a smaller
    simplex. Ties keep the first candidate, so results are deterministic.
    """
    box = np.asarray(cfg.box)
    f = _safe(objective)
    starts = start_points(cfg)
    values = np.array([f(s) for s in starts])
    finite = np.isfinite(values)
    if not finite.any():
        raise AllStartsNonFinite("objective is non-finite at every start")
    fv = values[finite]
    if fv.max() - fv.min() < cfg.flat_tol:
        i = int(np.flatnonzero(finite)[0])
        return EstimateResult(starts[i].copy(), float(values[i]), len(starts), True, True, len(starts))

    width = box[:, 1] - box[:, 0]
    step = width / (2 * cfg.nodes_per_dim)
    order = np.argsort(values, kind="stable")[: cfg.n_local]
    best = None
    nfev = len(starts)
    for i in order:
        if not np.isfinite(values[i]):
            continue
        res = _local(f, starts[i], box, step, cfg)
        res2 = _local(f, np.clip(res.x, box[:, 0], box[:, 1]), box, step * 1e-2, cfg)
        nfev += res.nfev + res2.nfev
        cand = res2 if res2.fun <= res.fun else res
        ok = bool(res.success and res2.success)
        if best is None or cand.fun < best[0].fun:
            best = (cand, ok)
    res, ok = best
    theta = np.clip(np.asarray(res.x, dtype=float), box[:, 0], box[:, 1])
    return EstimateResult(theta, float(f(theta)), len(starts), ok, False, nfev)


# ---------------------------------------------------------------------------


class _MObjective:
    def __init__(self, loss: Loss, model: ParametricModel, data: Dataset):
        self.loss, self.model, self.y, self.x = loss, model, data.y, data.x

    def __call__(self, theta):
        xi = self.model.eval(self.x, np.asarray(theta, dtype=float)[None, :])
        return float(np.mean(self.loss.core(self.y, xi)))


def m_estimate(loss: Loss, model: ParametricModel, data: Dataset, cfg: OptimizerConfig | None = None) -> EstimateResult:
    """argmin over the box of the empirical mean loss.

    Terms that depend on y only (kappa) do not move the minimizer; they are
    left out of the search and added back to the reported objective.
    """
    cfg = cfg or OptimizerConfig.for_model(model)
    res = minimize(_MObjective(loss, model, data), cfg)
    if loss.kappa is not None:
        res = replace(res, objective=res.objective + float(np.mean(_kappa_values(loss.kappa, data.y))))
    return res


def empirical_loss(loss: Loss, model: ParametricModel, data: Dataset, theta) -> float:
    """(1/T) sum rho(Y_t, m(X_t, theta)) including kappa."""
    xi = model.eval(data.x, np.asarray(theta, dtype=float)[None, :])
    return float(np.mean(loss(data.y, xi)))


class _ZObjective:
    def __init__(self, psi: ModelIdentification, data: Dataset):
        self.psi, self.y, self.x = psi, data.y, data.x

    def __call__(self, theta):
        m = self.psi.rows(self.y, self.x, theta).mean(axis=0)
        return float(m @ m)


def z_estimate(psi: ModelIdentification, data: Dataset, cfg: OptimizerConfig) -> EstimateResult:
    """argmin of the squared Euclidean norm of the averaged moment (identity weighting)."""
    return minimize(_ZObjective(psi, data), cfg)


def normal_equations(X, y, intercept: bool = False) -> np.ndarray:
    """Least-squares coefficients solving X'X b = X'y."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if intercept:
        X = np.column_stack([np.ones(X.shape[0]), X])
    return np.linalg.solve(X.T @ X, X.T @ np.asarray(y, dtype=float))


# ---------------------------------------------------------------------------
# Monte Carlo


@dataclass(frozen=True)
class EstimatorSpec:
    """``kind='m'`` uses ``loss``; ``kind='z'`` uses ``psi``."""

    kind: str
    model: ParametricModel
    loss: Loss | None = None
    psi: ModelIdentification | None = None
    optimizer: OptimizerConfig | None = None
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("m", "z"):
            raise ValueError("estimator kind must be 'm' or 'z'")
        if self.kind == "m" and self.loss is None:
            raise ValueError("M-estimator needs a loss")
        if self.kind == "z" and self.psi is None:
            raise ValueError("Z-estimator needs a moment function")

    @property
    def cfg(self) -> OptimizerConfig:
        return self.optimizer or OptimizerConfig.for_model(self.model)

    def fit(self, data: Dataset) -> EstimateResult:
        if self.kind == "m":
            return m_estimate(self.loss, self.model, data, self.cfg)
        return z_estimate(self.psi, data, self.cfg)


@dataclass(frozen=True)
class MonteCarloReport:
    T_list: tuple
    replications: int
    base_seed: int
    theta0: np.ndarray
    estimates: np.ndarray  # (len(T_list), R, q)
    objectives: np.ndarray  # (len(T_list), R)
    converged: np.ndarray  # (len(T_list), R)
    seeds: tuple = field(default=())

    @property
    def errors(self) -> np.ndarray:
        return self.estimates - self.theta0

    @property
    def bias(self) -> np.ndarray:
        return self.errors.mean(axis=1)

    @property
    def rmse(self) -> np.ndarray:
        return np.sqrt(np.mean(self.errors ** 2, axis=1))

    def rmse_norm(self) -> np.ndarray:
        """Root mean squared Euclidean error per T."""
        return np.sqrt(np.mean(np.sum(self.errors ** 2, axis=2), axis=1))


def _replicate(args):
    dgp, spec, T, seed = args
    res = spec.fit(sample(dgp, T, seed))
    return res.theta, res.objective, res.converged


def resolve_jobs(jobs: int | None) -> int:
    if jobs is None:
        jobs = int(os.environ.get("MCHAR_JOBS", "1") or 1)
    return max(1, int(jobs))


def monte_carlo(dgp: ConditionalDGP, spec: EstimatorSpec, T_list: Sequence[int], R: int, base_seed: int,
                jobs: int | None = 1) -> MonteCarloReport:
    """Replication r at every T uses the dataset drawn with seed ``base_seed + r``.

    Results are folded in (T, r) order, so the report does not depend on ``jobs``.
    """
    T_list = tuple(int(t) for t in T_list)
    if not T_list:
        raise ValueError("T_list must not be empty")
    if R < 2:
        raise ValueError("need at least two replications")
    seeds = tuple(base_seed + r for r in range(R))
    tasks = [(dgp, spec, T, s) for T in T_list for s in seeds]
    jobs = resolve_jobs(jobs)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            out = list(pool.map(_replicate, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        out = [_replicate(t) for t in tasks]
    q = dgp.theta0.size
    est = np.array([o[0] for o in out]).reshape(len(T_list), R, q)
    obj = np.array([o[1] for o in out]).reshape(len(T_list), R)
    conv = np.array([o[2] for o in out]).reshape(len(T_list), R)
    return MonteCarloReport(T_list, R, base_seed, dgp.theta0.copy(), est, obj, conv, seeds)
