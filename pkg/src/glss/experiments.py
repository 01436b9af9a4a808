"""Monte Carlo harness: named model suites, spiked scenarios, replication control.

A run is described by an ExperimentConfig (JSON-serializable, lossless round
trip).  Replication i draws its data from replication_rng(seed, i, stream=0),
so results are identical for any thread count and any execution order; model
setup randomness (Wigner ancillaries) lives on stream 2.  Replications that
fail numerically are recorded, and the run aborts once more than 1% of them
fail.
"""

from __future__ import annotations

import dataclasses
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .clt import (CltModel, EmpiricalPoolProvider, GeometryError, MatrixError,
                  TestFunction)
from .fptest import VarianceError, fp_zscores
from .models import (CovMatrix, build_ancillary, build_population,
                     fourth_moment_constants, replication_rng,
                     sample_covariance, sample_data, spiked_alternative,
                     wigner_matrix)
from .stieltjes import DomainError, QuadratureError

EXPERIMENTS = tuple(f"model_{k}" for k in range(1, 9)) + (
    "scenario_I", "scenario_II", "scenario_III", "custom")
DISTS = ("gaussian", "student_t")
PROVIDERS = ("fixed_point", "empirical_pool")
DESK_SCALE = {"model": (500, 500, 500), "scenario": (300, 300, 500)}
PAPER_SCALE = {"model": (1000, 1000, 1000), "scenario": (500, 500, 1000)}
FAILURE_BUDGET = 0.01

_NUMERIC_ERRORS = (DomainError, QuadratureError, GeometryError, MatrixError,
                   VarianceError, np.linalg.LinAlgError, FloatingPointError,
                   ZeroDivisionError, OverflowError)


class NumericBudgetError(RuntimeError):
    """More than the tolerated share of replications failed numerically."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Complete description of one Monte Carlo run.

    n, N, M left unset fall back to the desk-scale defaults of the experiment
    kind (models 500/500/500, scenarios 300/300/500); paper_scale switches
    those fallbacks to the publication sizes (models 1000/1000/1000,
    scenarios 500/500/1000).  Explicit values always win.  phi_grid entries
    are fractions of pi/2.
    """

    experiment: str = "custom"
    n: int | None = None
    N: int | None = None
    M: int | None = None
    seed: int = 0
    fs: tuple[str, ...] = ("z^2",)
    alpha: float = 0.1
    delta: float = 0.1
    phi_grid: tuple[float, ...] | None = None
    r_grid: tuple[int, ...] | None = None
    dist: str | None = None
    mbar: str = "fixed_point"
    threads: int = 1
    paper_scale: bool = False
    figures: bool = True
    out: str | None = None

    def __post_init__(self):
        coerce = {
            "fs": lambda v: tuple(str(x) for x in ([v] if isinstance(v, str) else v)),
            "phi_grid": lambda v: None if v is None else tuple(float(x) for x in v),
            "r_grid": lambda v: None if v is None else tuple(int(x) for x in v),
        }
        for name, fn in coerce.items():
            object.__setattr__(self, name, fn(getattr(self, name)))
        for name in ("n", "N", "M"):
            v = getattr(self, name)
            object.__setattr__(self, name, None if v is None else int(v))
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "threads", int(self.threads))

    def validate(self) -> "ExperimentConfig":
        if self.experiment not in EXPERIMENTS:
            raise DomainError(f"unknown experiment {self.experiment!r} "
                              f"(expected one of {EXPERIMENTS})")
        for name in ("n", "N", "M"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise DomainError(f"{name} must be a positive integer")
        if not self.fs:
            raise DomainError("need at least one test function")
        for s in self.fs:
            TestFunction.from_name(s)
        if not 0.0 < self.alpha < 1.0:
            raise DomainError("alpha must lie strictly between 0 and 1")
        if self.delta <= 0.0:
            raise DomainError("shrinkage buffer delta must be positive")
        if self.dist is not None and self.dist not in DISTS:
            raise DomainError(f"unknown dist {self.dist!r} (expected one of {DISTS})")
        if self.mbar not in PROVIDERS:
            raise DomainError(f"unknown companion-transform provider {self.mbar!r} "
                              f"(expected one of {PROVIDERS})")
        if self.threads < 1:
            raise DomainError("threads must be at least 1")
        if self.phi_grid is not None and any(
                not 0.0 <= p <= 1.0 for p in self.phi_grid):
            raise DomainError("phi_grid holds fractions of pi/2 in [0, 1]")
        if self.r_grid is not None and any(r < 1 for r in self.r_grid):
            raise DomainError("r_grid entries must be positive integers")
        return self

    def effective_scale(self) -> tuple[int, int, int]:
        kind = "scenario" if self.experiment.startswith("scenario") else "model"
        base = PAPER_SCALE[kind] if self.paper_scale else DESK_SCALE[kind]
        return (base[0] if self.n is None else self.n,
                base[1] if self.N is None else self.N,
                base[2] if self.M is None else self.M)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key in ("fs", "phi_grid", "r_grid"):
            if out[key] is not None:
                out[key] = list(out[key])
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "f" in d and "fs" not in d:
            d["fs"] = d.pop("f")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise DomainError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise DomainError(f"config is not valid JSON: {e}") from e
        if not isinstance(d, dict):
            raise DomainError("config JSON must be an object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class EmpiricalMoments:
    """Summary of one standardized-statistic sample across replications.

    mean_hat and var_hat are the plain 1/M averages (the variance is not
    bias-corrected); ks compares against the standard normal; histogram
    counts sum to the number of records; qq pairs match sorted records with
    standard normal quantiles at (i - 1/2)/M.
    """

    count: int
    mean_hat: float
    var_hat: float
    ks_stat: float
    ks_p: float
    hist_edges: tuple[float, ...]
    hist_counts: tuple[int, ...]
    qq_theoretical: tuple[float, ...]
    qq_empirical: tuple[float, ...]

    @classmethod
    def from_records(cls, values, bins: int | None = None) -> "EmpiricalMoments":
        v = np.sort(np.asarray(values, dtype=float).ravel())
        M = v.size
        if M == 0:
            raise DomainError("no records to summarize")
        mean = float(v.mean())
        var = float(np.mean((v - mean) ** 2))
        ks = stats.kstest(v, "norm")
        if bins is None:
            bins = min(40, max(10, math.ceil(math.sqrt(M))))
        counts, edges = np.histogram(v, bins=bins)
        qq_th = stats.norm.ppf((np.arange(1, M + 1) - 0.5) / M)
        return cls(count=M, mean_hat=mean, var_hat=var,
                   ks_stat=float(ks.statistic), ks_p=float(ks.pvalue),
                   hist_edges=tuple(float(x) for x in edges),
                   hist_counts=tuple(int(x) for x in counts),
                   qq_theoretical=tuple(float(x) for x in qq_th),
                   qq_empirical=tuple(float(x) for x in v))


@dataclass(frozen=True)
class PowerCell:
    """Rejection rate at one grid point for one test function."""

    grid: float
    phi: float
    r: int
    f: str
    power: float
    mc_se: float
    rejections: int
    count: int


@dataclass
class RunResult:
    """Everything a run produced, ready for the output writers."""

    config: ExperimentConfig
    meta: dict
    records: dict[str, np.ndarray]
    moments: dict[str, EmpiricalMoments]
    failures: list[tuple[int, str, str]] = field(default_factory=list)
    power: list[PowerCell] = field(default_factory=list)


def _replicate(worker, M: int, threads: int, failures: list, label: str = "-"):
    """Run worker(0..M-1), folding results in index order.

    Numeric failures are appended to failures as (replication, label,
    message); other exceptions propagate.  Output order and content do not
    depend on the thread count.
    """

    def safe(i):
        try:
            return worker(i), None
        except _NUMERIC_ERRORS as e:
            return None, f"{type(e).__name__}: {e}"

    if threads <= 1:
        outcomes = [safe(i) for i in range(M)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(safe, range(M)))
    rows = []
    for i, (value, err) in enumerate(outcomes):
        if err is None:
            rows.append(value)
        else:
            failures.append((i, label, err))
    return rows


def _check_budget(failed: int, attempted: int) -> None:
    if failed > FAILURE_BUDGET * attempted:
        raise NumericBudgetError(
            f"{failed} of {attempted} replications failed numerically, over "
            f"the {FAILURE_BUDGET:.0%} budget")


def build_model(k: int, n: int, seed: int):
    """(population, ancillary, data distribution) for model suite entry k.

    1: identity population, diagonal weights i/n + 1, gaussian data;
    2: model 1 with student-t data;
    3: ar1(0.5) population, weights equal to the population matrix, gaussian;
    4: diagonal ramp population, diagonal weights i/n + 0.2, student-t;
    5: ar1(0.5) population, Wigner weight matrix, gaussian;
    6: model 5 with student-t data;
    7: identity population, rank-5 diagonal weights i/2, gaussian;
    8: ar1(0.5) population, rank-10 projection onto the top Wigner
    eigenvectors, student-t.

    Wigner draws come from stream 2 of the run seed, so the weight matrix is
    a fixed function of (k, n, seed).
    """
    if k not in range(1, 9):
        raise DomainError("model number must lie in 1..8")
    i = np.arange(1, n + 1)
    if k in (1, 2):
        pop = build_population("identity", n)
        anc = build_ancillary("diagonal", n, diagonal=i / n + 1.0)
    elif k == 3:
        pop = build_population("ar1", n)
        anc = build_ancillary("dense", n, matrix=pop.matrix())
    elif k == 4:
        pop = build_population("diag_ramp", n)
        anc = build_ancillary("diagonal", n, diagonal=i / n + 0.2)
    elif k in (5, 6):
        pop = build_population("ar1", n)
        W = wigner_matrix(n, replication_rng(seed, 0, stream=2))
        anc = build_ancillary("dense", n, matrix=W)
    elif k == 7:
        pop = build_population("identity", n)
        anc = build_ancillary("lowrank", n, weights=np.arange(1, 6) / 2.0,
                              vectors=np.eye(n)[:, :5])
    else:
        pop = build_population("ar1", n)
        W = wigner_matrix(n, replication_rng(seed, 0, stream=2))
        _, vecs = np.linalg.eigh(W)
        anc = build_ancillary("lowrank", n, weights=np.ones(10),
                              vectors=np.ascontiguousarray(vecs[:, -10:]))
    dist = "student_t" if k in (2, 4, 6, 8) else "gaussian"
    return pop, anc, dist


def run_model(k: int, config: ExperimentConfig) -> RunResult:
    """Replicated standardized statistics for model suite entry k.

    Each test function is standardized marginally: (theta - omega) over the
    square root of its own limit variance.
    """
    config.validate()
    n, N, M = config.effective_scale()
    pop, anc, dist = build_model(k, n, config.seed)
    if config.dist is not None:
        dist = config.dist
    provider = None
    if config.mbar == "empirical_pool":
        provider = EmpiricalPoolProvider(pop, N, dist, seed=config.seed)
    model = CltModel(pop, anc, N, list(config.fs), dist=dist, provider=provider)
    omega = model.omega_vector()
    scale = np.sqrt(np.diag(model.covariance_matrix()))
    for idx in range(len(model.fs)):
        model.centering(idx)  # prime every cache before threads share the model

    def one(i):
        X = sample_data(dist, n, N, replication_rng(config.seed, i, stream=0))
        S = sample_covariance(pop, X)
        return (model.theta_vector(S) - omega) / scale

    failures: list = []
    rows = _replicate(one, M, config.threads, failures)
    _check_budget(len(failures), M)
    arr = np.asarray(rows, dtype=float).reshape(len(rows), len(model.fs))
    records = {f.name: arr[:, j] for j, f in enumerate(model.fs)}
    moments = {name: EmpiricalMoments.from_records(vals)
               for name, vals in records.items()}
    meta = {"experiment": f"model_{k}", "n": n, "N": N, "M": M,
            "seed": config.seed, "dist": dist, "mode": model.mode}
    return RunResult(config=config, meta=meta, records=records,
                     moments=moments, failures=failures)


def scenario_spikes(which: str, r: int) -> tuple[float, ...]:
    """Spike strengths for scenario grids: I is (9, 5, 2) at rank 3; II and
    III use a strength-9 lead plus strength-4 spikes up to rank r."""
    if which == "I":
        return (9.0, 5.0, 2.0)
    if which in ("II", "III"):
        return (9.0,) + (4.0,) * (r - 1)
    raise DomainError(f"unknown scenario {which!r} (expected I, II or III)")


def _scenario_points(which: str, config: ExperimentConfig):
    """(grid value, phi fraction, rank) triples to sweep."""
    if which == "I":
        phis = config.phi_grid if config.phi_grid is not None else (0.0,)
        return [(phi, phi, 3) for phi in phis]
    if which == "II":
        rs = config.r_grid if config.r_grid is not None else (7, 11)
        return [(float(r), 0.0, r) for r in rs]
    if which == "III":
        rs = config.r_grid if config.r_grid is not None else tuple(range(1, 16))
        phis = config.phi_grid if config.phi_grid is not None else (0.0, 0.25)
        return [(float(r), phi, r) for phi in phis for r in rs]
    raise DomainError(f"unknown scenario {which!r} (expected I, II or III)")


def run_scenario(which: str, config: ExperimentConfig) -> RunResult:
    """Projection-test sizes/powers over a scenario grid.

    Scenario I sweeps the rotation angle of the lead spike direction (grid =
    phi as a fraction of pi/2, rank 3 hypothesis); scenario II sweeps the
    hypothesis rank at phi = 0; scenario III sweeps rank for each phi in the
    grid (defaults 0 and 1/4).  Rejection is two-sided at level alpha.
    Records for the first grid point feed the moment summaries.
    """
    config.validate()
    n, N, M = config.effective_scale()
    dist = config.dist if config.dist is not None else "gaussian"
    mu_x = fourth_moment_constants(dist)[0]
    fs = [TestFunction.from_name(s) for s in config.fs]
    z_crit = float(stats.norm.ppf(1.0 - config.alpha / 2.0))

    power: list[PowerCell] = []
    failures: list = []
    records: dict[str, np.ndarray] | None = None
    attempted = 0
    for grid, phi, r in _scenario_points(which, config):
        if r >= n:
            raise DomainError("hypothesis rank must stay below the dimension")
        pop = build_population("spiked", n, spikes=scenario_spikes(which, r))
        pop_data = spiked_alternative(pop, phi * np.pi / 2.0) if phi > 0 else pop
        basis = np.eye(n)[:, :r]

        def one(i, pop_data=pop_data, basis=basis):
            X = sample_data(dist, n, N, replication_rng(config.seed, i, stream=0))
            S = CovMatrix.from_matrix(sample_covariance(pop_data, X), N)
            return fp_zscores(S, basis, fs, mu_x, delta=config.delta)

        label = f"r={r},phi={phi:g}"
        rows = _replicate(one, M, config.threads, failures, label=label)
        attempted += M
        for f in fs:
            z = np.array([row[f.name] for row in rows])
            rejections = int(np.sum(np.abs(z) > z_crit))
            rate = rejections / len(rows) if rows else float("nan")
            se = math.sqrt(rate * (1.0 - rate) / len(rows)) if rows else float("nan")
            power.append(PowerCell(grid=grid, phi=phi, r=r, f=f.name,
                                   power=rate, mc_se=se,
                                   rejections=rejections, count=len(rows)))
        if records is None:
            records = {f.name: np.array([row[f.name] for row in rows])
                       for f in fs}
    _check_budget(len(failures), attempted)
    moments = {name: EmpiricalMoments.from_records(vals)
               for name, vals in records.items()}
    meta = {"experiment": f"scenario_{which}", "n": n, "N": N, "M": M,
            "seed": config.seed, "dist": dist, "alpha": config.alpha}
    return RunResult(config=config, meta=meta, records=records,
                     moments=moments, failures=failures, power=power)


def run_experiment(config: ExperimentConfig) -> RunResult:
    """Dispatch on config.experiment (model_1..model_8, scenario_I/II/III)."""
    config.validate()
    name = config.experiment
    if name.startswith("model_"):
        return run_model(int(name.split("_", 1)[1]), config)
    if name.startswith("scenario_"):
        return run_scenario(name.split("_", 1)[1], config)
    raise DomainError("custom experiments are assembled through the library "
                      "(build_population / build_ancillary / CltModel)")
