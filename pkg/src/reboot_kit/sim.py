"""Scenario definitions, data generation, sharding, metrics, and the Monte
Carlo driver.

Replication ``r`` of a scenario owns the stream ``(master_seed, r)``:
substream 0 generates the dataset (shared by every shard count so methods
are compared on common data), and substream ``m`` namespaces the randomness
of the aggregators run at shard count ``m``.  The driver may fan
replications out over threads; the reduction is order-fixed, so its output
is a pure function of the scenario.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from . import aggregate, glm, phase_retrieval
from .aggregate import (
    Ar1,
    BootstrapPlan,
    EmptyInput,
    LocalFit,
    SolverFailure,
    StdNormal,
    Uniform01,
)
from .glm import Dataset, FitStatus, LinearPredictorOverflow
from .numerics import (
    NoConvergence,
    NotPositiveDefinite,
    SeededRng,
    Vector,
    ar1_cholesky,
    as_vector,
)
from .phase_retrieval import BadSpectrum, PrConfig


class IndivisibleSplit(Exception):
    """The shard count does not divide the number of observations."""


class ScenarioKind(str, Enum):
    LOGISTIC_ISO = "logistic_iso"
    LOGISTIC_AR1 = "logistic_ar1"
    POISSON_UNIFORM = "poisson_uniform"
    PHASE_RETRIEVAL = "phase_retrieval"


# Fixed substream slots under (master_seed, rep, m) for the methods that
# consume randomness beyond the dataset itself.
_STREAM_REBOOT = 0
_STREAM_SAVGM = 1
_STREAM_REBOOT_I = 2
_STREAM_REBOOT_S = 3


@dataclass(frozen=True, eq=False)
class Scenario:
    """One simulation design: model, sizes, grids, and scheme parameters."""

    name: str
    kind: ScenarioKind
    n_total: int
    p: int
    beta_star: Vector
    m_grid: tuple[int, ...]
    replications: int
    master_seed: int
    n_tilde_factor: float = 100.0
    savgm_rate: float = 0.5
    csl_rounds: tuple[int, ...] = (1, 2)
    rho: float = 0.0
    pr_t_max: int = 500
    pr_mu: float = 0.002
    pr_refit_mu: float = 0.01
    reboot_features: str = "true"

    def __post_init__(self):
        object.__setattr__(self, "kind", ScenarioKind(self.kind))
        object.__setattr__(self, "beta_star", as_vector(self.beta_star))
        object.__setattr__(self, "m_grid", tuple(int(m) for m in self.m_grid))
        object.__setattr__(self, "csl_rounds", tuple(int(r) for r in self.csl_rounds))
        if self.n_total < 1 or self.p < 1:
            raise ValueError("n_total and p must be positive")
        if self.beta_star.shape[0] != self.p:
            raise ValueError(
                f"beta_star has length {self.beta_star.shape[0]} but p = {self.p}"
            )
        if not self.m_grid:
            raise ValueError("m_grid must be nonempty")
        for m in self.m_grid:
            if m < 1 or self.n_total % m != 0:
                raise ValueError(f"shard count {m} does not divide N = {self.n_total}")
        if self.replications < 1:
            raise ValueError("replications must be positive")
        if not 0.0 < self.savgm_rate < 1.0:
            raise ValueError("savgm_rate must lie in (0, 1)")
        if not set(self.csl_rounds) <= {1, 2}:
            raise ValueError("csl_rounds may only contain 1 and 2")
        if not abs(self.rho) < 1.0:
            raise ValueError("rho must satisfy |rho| < 1")
        if not self.n_tilde_factor > 0.0:
            raise ValueError("n_tilde_factor must be positive")
        if self.reboot_features not in ("true", "std_normal"):
            raise ValueError("reboot_features must be 'true' or 'std_normal'")
        if self.pr_t_max < 0 or not self.pr_mu > 0.0 or not self.pr_refit_mu > 0.0:
            raise ValueError("invalid gradient-descent configuration")


@dataclass(frozen=True)
class MetricsRow:
    """One (shard count, method) cell of the output table."""

    scenario: str
    method: str
    m: int
    n: int
    mse: float
    bias: float
    mse_se: float
    replications_used: int
    failures: int

    def __post_init__(self):
        if math.isfinite(self.mse) and math.isfinite(self.bias):
            slack = 1e-12 * max(1.0, self.bias**2)
            if self.mse < self.bias**2 - slack:
                raise ValueError("mse may not fall below bias squared")


@dataclass(eq=False)
class ReplicationRecord:
    """Per-method estimates (None marks a failure) for one replication."""

    m: int
    rep_index: int
    estimates: dict[str, Optional[Vector]]
    local_failures: int


def generate_dataset(scenario: Scenario, rng: SeededRng) -> Dataset:
    """Draw one dataset of ``scenario.n_total`` rows from the scenario's model."""
    n, p = scenario.n_total, scenario.p
    beta = scenario.beta_star
    kind = scenario.kind
    if kind is ScenarioKind.LOGISTIC_ISO:
        design = rng.generator.standard_normal((n, p))
        response = glm.draw_responses(glm.logistic(), rng, design @ beta)
    elif kind is ScenarioKind.LOGISTIC_AR1:
        design = rng.generator.standard_normal((n, p))
        if scenario.rho != 0.0:
            design = design @ ar1_cholesky(p, scenario.rho).T
        response = glm.draw_responses(glm.logistic(), rng, design @ beta)
    elif kind is ScenarioKind.POISSON_UNIFORM:
        design = rng.generator.random((n, p))
        response = glm.draw_responses(glm.poisson(), rng, design @ beta)
    elif kind is ScenarioKind.PHASE_RETRIEVAL:
        design = rng.generator.standard_normal((n, p))
        response = phase_retrieval.draw_pr_responses(rng, design, beta)
    else:  # pragma: no cover
        raise ValueError(f"unhandled scenario kind {kind}")
    return Dataset(design, response)


def split_uniform(data: Dataset, m: int) -> list[Dataset]:
    """Split into ``m`` contiguous shards of equal size, in generation order."""
    if m < 1 or data.n_rows % m != 0:
        raise IndivisibleSplit(f"{m} shards do not divide {data.n_rows} rows")
    n = data.n_rows // m
    return [
        Dataset(data.design[k * n : (k + 1) * n], data.response[k * n : (k + 1) * n])
        for k in range(m)
    ]


def _stacked(estimates: Sequence[Vector], beta_star: Vector) -> tuple[np.ndarray, Vector]:
    if not estimates:
        raise EmptyInput("no estimates supplied")
    beta_star = as_vector(beta_star)
    return np.stack([as_vector(e) for e in estimates]), beta_star


def mse(estimates: Sequence[Vector], beta_star: Vector) -> float:
    """Mean squared distance ``mean ||est - beta_star||^2``."""
    stacked, beta_star = _stacked(estimates, beta_star)
    return float(np.mean(np.sum((stacked - beta_star) ** 2, axis=1)))


def bias(estimates: Sequence[Vector], beta_star: Vector) -> float:
    """Norm of the mean error ``||mean(est) - beta_star||``."""
    stacked, beta_star = _stacked(estimates, beta_star)
    return float(np.linalg.norm(stacked.mean(axis=0) - beta_star))


def _sign_aligned(stacked: np.ndarray, beta_star: Vector) -> np.ndarray:
    """Flip each row toward ``beta_star``: keep the sign whose distance is smaller."""
    dist_minus = np.sum((stacked - beta_star) ** 2, axis=1)
    dist_plus = np.sum((stacked + beta_star) ** 2, axis=1)
    signs = np.where(dist_plus < dist_minus, -1.0, 1.0)
    return signs[:, None] * stacked


def mse_dagger(estimates: Sequence[Vector], beta_star: Vector) -> float:
    """Sign-invariant MSE: ``mean min(||est - b||^2, ||est + b||^2)``."""
    stacked, beta_star = _stacked(estimates, beta_star)
    aligned = _sign_aligned(stacked, beta_star)
    return float(np.mean(np.sum((aligned - beta_star) ** 2, axis=1)))


def bias_dagger(estimates: Sequence[Vector], beta_star: Vector) -> float:
    """Sign-invariant bias: align each estimate's sign toward the truth first."""
    stacked, beta_star = _stacked(estimates, beta_star)
    aligned = _sign_aligned(stacked, beta_star)
    return float(np.linalg.norm(aligned.mean(axis=0) - beta_star))


_GLM_METHODS = ("full", "averaging", "savgm", "csl1", "csl2", "reboot")
_AR1_METHODS = ("full", "averaging", "csl1", "csl2", "reboot_i", "reboot_s")
_PR_METHODS = ("full", "averaging", "csl1", "csl2", "reboot")


def methods_for(scenario: Scenario) -> tuple[str, ...]:
    """The canonical method set (and output order) for a scenario."""
    if scenario.kind in (ScenarioKind.LOGISTIC_ISO, ScenarioKind.POISSON_UNIFORM):
        base = _GLM_METHODS
    elif scenario.kind is ScenarioKind.LOGISTIC_AR1:
        base = _AR1_METHODS
    else:
        base = _PR_METHODS
    enabled = {f"csl{r}" for r in scenario.csl_rounds}
    return tuple(m for m in base if not m.startswith("csl") or m in enabled)


def _select_methods(scenario: Scenario, methods: Optional[Sequence[str]]) -> tuple[str, ...]:
    registry = methods_for(scenario)
    if methods is None:
        return registry
    requested = set(methods) | {"full"}
    unknown = requested - set(registry)
    if unknown:
        raise ValueError(f"unknown methods for scenario {scenario.name!r}: {sorted(unknown)}")
    return tuple(m for m in registry if m in requested)


def _glm_family(scenario: Scenario) -> glm.GlmFamily:
    if scenario.kind is ScenarioKind.POISSON_UNIFORM:
        return glm.poisson()
    return glm.logistic()


def _true_feature_sampler(scenario: Scenario):
    kind = scenario.kind
    if kind is ScenarioKind.POISSON_UNIFORM:
        return Uniform01()
    if kind is ScenarioKind.LOGISTIC_AR1:
        return Ar1(scenario.rho)
    return StdNormal()


def _plan(scenario: Scenario, n: int, sampler, stream_key: int) -> BootstrapPlan:
    n_tilde = max(1, int(round(scenario.n_tilde_factor * n)))
    return BootstrapPlan(n_tilde=n_tilde, feature_sampler=sampler, stream_key=stream_key)


_METHOD_FAILURES = (
    EmptyInput,
    SolverFailure,
    LinearPredictorOverflow,
    NotPositiveDefinite,
    NoConvergence,
    BadSpectrum,
)


def _fit_pr_local(data: Dataset, cfg: PrConfig):
    init = phase_retrieval.spectral_init(data)
    return phase_retrieval.wirtinger_flow(data, init, cfg)


def run_replication(
    scenario: Scenario,
    m: int,
    rep_index: int,
    methods: Optional[Sequence[str]] = None,
) -> ReplicationRecord:
    """One Monte Carlo experiment: generate, split, fit locally, aggregate.

    Failures are recorded per method (estimate ``None``); the replication
    itself never raises on a failed method.
    """
    selected = _select_methods(scenario, methods)
    rep_rng = SeededRng(scenario.master_seed, (int(rep_index),))
    data = generate_dataset(scenario, rep_rng.substream(0))
    shards = split_uniform(data, m)
    n = data.n_rows // m
    method_rng = rep_rng.substream(m)
    is_pr = scenario.kind is ScenarioKind.PHASE_RETRIEVAL

    if is_pr:
        local_cfg = PrConfig(scenario.pr_t_max, scenario.pr_mu)
        refit_cfg = PrConfig(scenario.pr_t_max, scenario.pr_refit_mu)
        fits = []
        for k, shard in enumerate(shards):
            try:
                out = _fit_pr_local(shard, local_cfg)
                fits.append(LocalFit(k, out.beta, out.status))
            except (BadSpectrum, NoConvergence):
                fits.append(LocalFit(k, np.zeros(scenario.p), FitStatus.DIVERGED))
        family = None
    else:
        family = _glm_family(scenario)
        fits = []
        for k, shard in enumerate(shards):
            out = glm.fit_mle(family, shard)
            fits.append(LocalFit(k, out.beta, out.status))
    local_failures = sum(1 for f in fits if f.status is FitStatus.DIVERGED)

    def output_or_fail(out) -> Vector:
        if out.status is FitStatus.DIVERGED:
            raise SolverFailure("estimator diverged")
        return out.beta

    def compute(method: str) -> Vector:
        if method == "full":
            if is_pr:
                return output_or_fail(_fit_pr_local(data, local_cfg))
            return output_or_fail(glm.fit_mle(family, data))
        if method == "averaging":
            if is_pr:
                return aggregate.sign_calibrated_average(fits)
            return aggregate.naive_average(fits)
        if method == "savgm":
            sub_size = math.ceil(scenario.savgm_rate * n)
            sub_fits = []
            for k, shard in enumerate(shards):
                idx = method_rng.substream(_STREAM_SAVGM, k).permutation(n)[:sub_size]
                sub = Dataset(shard.design[idx], shard.response[idx])
                out = glm.fit_mle(family, sub)
                sub_fits.append(LocalFit(k, out.beta, out.status))
            return aggregate.savgm(fits, sub_fits, scenario.savgm_rate)
        if method in ("csl1", "csl2"):
            rounds = int(method[-1])
            if is_pr:
                anchor = aggregate.sign_calibrated_average(fits)
                return aggregate.csl_pr(anchor, shards, rounds, local_cfg)
            anchor = aggregate.naive_average(fits)
            return aggregate.csl(anchor, shards, family, rounds)
        if method == "reboot":
            if is_pr:
                plan = _plan(scenario, n, StdNormal(), _STREAM_REBOOT)
                out = aggregate.reboot_pr(fits, plan, method_rng, refit_cfg)
            else:
                plan = _plan(scenario, n, _true_feature_sampler(scenario), _STREAM_REBOOT)
                out = aggregate.reboot(fits, family, plan, method_rng)
            return output_or_fail(out)
        if method == "reboot_i":
            plan = _plan(scenario, n, StdNormal(), _STREAM_REBOOT_I)
            return output_or_fail(aggregate.reboot(fits, family, plan, method_rng))
        if method == "reboot_s":
            plan = _plan(scenario, n, _true_feature_sampler(scenario), _STREAM_REBOOT_S)
            return output_or_fail(aggregate.reboot(fits, family, plan, method_rng))
        raise ValueError(f"unhandled method {method!r}")  # pragma: no cover

    estimates: dict[str, Optional[Vector]] = {}
    for method in selected:
        try:
            estimates[method] = compute(method)
        except _METHOD_FAILURES:
            estimates[method] = None
    return ReplicationRecord(m, rep_index, estimates, local_failures)


def replication_records(
    scenario: Scenario,
    m: int,
    methods: Optional[Sequence[str]] = None,
    threads: int = 0,
) -> list[ReplicationRecord]:
    """All replication records for one shard count, in replication order."""
    workers = threads if threads > 0 else (os.cpu_count() or 1)
    reps = range(scenario.replications)
    if workers == 1:
        return [run_replication(scenario, m, r, methods) for r in reps]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_replication, scenario, m, r, methods) for r in reps]
        return [f.result() for f in futures]


def summarize(
    scenario: Scenario,
    m: int,
    records: Sequence[ReplicationRecord],
    methods: Optional[Sequence[str]] = None,
) -> list[MetricsRow]:
    """Reduce replication records into one MetricsRow per method."""
    selected = _select_methods(scenario, methods)
    dagger = scenario.kind is ScenarioKind.PHASE_RETRIEVAL
    beta_star = scenario.beta_star
    n = scenario.n_total // m
    rows = []
    for method in selected:
        estimates = [r.estimates[method] for r in records]
        good = [e for e in estimates if e is not None]
        failures = len(estimates) - len(good)
        if good:
            stacked = np.stack(good)
            if dagger:
                stacked = _sign_aligned(stacked, beta_star)
            sq_errors = np.sum((stacked - beta_star) ** 2, axis=1)
            mse_val = float(np.mean(sq_errors))
            bias_val = float(np.linalg.norm(stacked.mean(axis=0) - beta_star))
            se_val = (
                float(np.std(sq_errors, ddof=1) / math.sqrt(len(good)))
                if len(good) > 1
                else 0.0
            )
        else:
            mse_val = bias_val = se_val = math.nan
        rows.append(
            MetricsRow(
                scenario=scenario.name,
                method=method,
                m=m,
                n=n,
                mse=mse_val,
                bias=bias_val,
                mse_se=se_val,
                replications_used=len(good),
                failures=failures,
            )
        )
    return rows


def monte_carlo(
    scenario: Scenario,
    methods: Optional[Sequence[str]] = None,
    threads: int = 0,
) -> list[MetricsRow]:
    """Run the full replication sweep and reduce it to metric rows.

    Rows come out ordered by the scenario's m grid and the canonical method
    order; the result does not depend on ``threads``.
    """
    rows = []
    for m in scenario.m_grid:
        records = replication_records(scenario, m, methods, threads)
        rows.extend(summarize(scenario, m, records, methods))
    return rows
