"""Aggregators that combine locally fitted models into one estimate.

The bootstrap-refit aggregator draws, for every local model, a fresh feature
sample from a declared feature distribution and responses from that local
model, pools everything machine-major, and refits once on the pooled sample.
The competing aggregators (plain and sign-calibrated averaging, subsample
debiased averaging, surrogate-likelihood refinement with one or two gradient
rounds, and the federated round-based loop) share the same input structures
so simulation code can drive them uniformly.

Randomness discipline: every bootstrap draw comes from a substream addressed
by ``(plan.stream_key, machine_id, purpose)`` of the caller's stream, with
purpose 0 for features and 1 for responses.  Feature draws therefore never
depend on the local parameter values, and a fixed seed makes each aggregate
a deterministic function of its inputs regardless of scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import glm
from .glm import Dataset, EstimatorOutput, FitStatus, GlmFamily, LinearPredictorOverflow
from .numerics import Matrix, SeededRng, Vector, ar1_cholesky, as_matrix, as_vector
from .phase_retrieval import PrConfig, draw_pr_responses, pr_gradient, wirtinger_flow


class EmptyInput(Exception):
    """No usable local fits (or shards) were supplied."""


class SolverFailure(Exception):
    """An inner refit reported divergence."""


@dataclass(frozen=True, eq=False)
class LocalFit:
    """One machine's fitted parameter vector and its convergence status."""

    machine_id: int
    beta: Vector
    status: FitStatus = FitStatus.CONVERGED

    def __post_init__(self):
        object.__setattr__(self, "beta", as_vector(self.beta))


@dataclass(frozen=True)
class StdNormal:
    """Independent standard normal features."""

    def draw(self, rng: SeededRng, n: int, p: int) -> Matrix:
        return rng.generator.standard_normal((n, p))


@dataclass(frozen=True)
class Ar1:
    """Gaussian features with AR(1) correlation ``rho**|i-j|``."""

    rho: float

    def __post_init__(self):
        if not abs(self.rho) < 1.0:
            raise ValueError("AR(1) correlation must satisfy |rho| < 1")

    def draw(self, rng: SeededRng, n: int, p: int) -> Matrix:
        z = rng.generator.standard_normal((n, p))
        if self.rho == 0.0:
            return z
        return z @ ar1_cholesky(p, self.rho).T


@dataclass(frozen=True)
class Uniform01:
    """Features uniform on [0, 1]^p."""

    def draw(self, rng: SeededRng, n: int, p: int) -> Matrix:
        return rng.generator.random((n, p))


@dataclass(frozen=True, eq=False)
class ExternalPool:
    """Features resampled (with replacement) from a provided unlabeled pool."""

    pool: Matrix

    def __post_init__(self):
        object.__setattr__(self, "pool", as_matrix(self.pool))

    def draw(self, rng: SeededRng, n: int, p: int) -> Matrix:
        if self.pool.shape[1] != p:
            raise ValueError(f"pool has {self.pool.shape[1]} columns, expected {p}")
        idx = rng.generator.integers(0, self.pool.shape[0], size=n)
        return self.pool[idx]


FeatureSampler = Union[StdNormal, Ar1, Uniform01, ExternalPool]


@dataclass(frozen=True, eq=False)
class BootstrapPlan:
    """How to draw the bootstrap sample: size per machine, feature source,
    and the stream key that namespaces this aggregation's randomness."""

    n_tilde: int
    feature_sampler: FeatureSampler = StdNormal()
    stream_key: int = 0

    def __post_init__(self):
        if self.n_tilde < 1:
            raise ValueError("n_tilde must be at least 1")


def _usable(fits: Sequence[LocalFit]) -> list[LocalFit]:
    """Non-divergent fits in canonical (machine_id) order.

    Sorting makes every aggregate exactly invariant to permutations of the
    input list.  Divergent fits are dropped rather than aborting; callers
    track the drop count through the fit statuses they already hold.
    """
    usable = sorted(
        (f for f in fits if f.status is not FitStatus.DIVERGED),
        key=lambda f: f.machine_id,
    )
    if usable:
        p = usable[0].beta.shape[0]
        for fit in usable:
            if fit.beta.shape[0] != p:
                raise ValueError("local fits do not share a common dimension")
    return usable


def naive_average(fits: Sequence[LocalFit]) -> Vector:
    """Arithmetic mean of the usable local parameter vectors."""
    usable = _usable(fits)
    if not usable:
        raise EmptyInput("no usable local fits to average")
    return np.stack([f.beta for f in usable]).mean(axis=0)


def sign_calibrated_average(fits: Sequence[LocalFit]) -> Vector:
    """Average after flipping each fit so its first entry is positive.

    When some first entry is exactly zero, every fit is instead calibrated
    against the first usable fit by inner-product sign.
    """
    usable = _usable(fits)
    if not usable:
        raise EmptyInput("no usable local fits to average")
    stacked = np.stack([f.beta for f in usable])
    first_entries = stacked[:, 0]
    if np.all(first_entries != 0.0):
        signs = np.sign(first_entries)
    else:
        signs = np.sign(stacked @ stacked[0])
        signs[signs == 0.0] = 1.0
    return (signs[:, None] * stacked).mean(axis=0)


def savgm(fits_full: Sequence[LocalFit], fits_sub: Sequence[LocalFit], r: float) -> Vector:
    """Subsample-debiased average ``(mean_full - r * mean_sub) / (1 - r)``.

    ``fits_sub`` holds the per-machine fits on without-replacement subsamples
    of rate ``r``; both lists must cover the same machines.
    """
    if not 0.0 < r < 1.0:
        raise ValueError(f"subsampling rate {r} outside (0, 1)")
    if len(fits_full) != len(fits_sub):
        raise ValueError("full-sample and subsample fit lists differ in machine count")
    mean_full = naive_average(fits_full)
    mean_sub = naive_average(fits_sub)
    return (mean_full - r * mean_sub) / (1.0 - r)


def csl(
    anchor: Vector,
    shards: Sequence[Dataset],
    family: GlmFamily,
    rounds: int,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> Vector:
    """Surrogate-likelihood refinement with one or two gradient rounds.

    Each round forms the global gradient at the anchor, then minimizes on
    shard 1 the local loss shifted by ``<local_grad(anchor) - global_grad,
    beta>``; the minimizer becomes the next anchor.  With a single shard the
    shift vanishes and the result is shard 1's own MLE.
    """
    if rounds not in (1, 2):
        raise ValueError("rounds must be 1 or 2")
    if not shards:
        raise EmptyInput("no shards supplied")
    anchor = as_vector(anchor)
    for _ in range(rounds):
        grads = [glm.gradient(family, shard, anchor) for shard in shards]
        global_grad = np.stack(grads).mean(axis=0)
        shift = grads[0] - global_grad
        out = glm.fit_mle(
            family, shards[0], init=anchor, tol=tol, max_iter=max_iter, gradient_shift=shift
        )
        if out.status is FitStatus.DIVERGED:
            raise SolverFailure("surrogate minimization diverged")
        anchor = out.beta
    return anchor


def csl_pr(
    anchor: Vector,
    shards: Sequence[Dataset],
    rounds: int,
    cfg: PrConfig,
) -> Vector:
    """Surrogate refinement for the quadratic-measurement model.

    Same construction as :func:`csl` but the shifted shard-1 surrogate is
    minimized by ``cfg.t_max`` fixed-step gradient iterations from the
    anchor, matching how the local estimators themselves are computed.
    """
    if rounds not in (1, 2):
        raise ValueError("rounds must be 1 or 2")
    if not shards:
        raise EmptyInput("no shards supplied")
    anchor = as_vector(anchor)
    for _ in range(rounds):
        grads = [pr_gradient(shard, anchor) for shard in shards]
        global_grad = np.stack(grads).mean(axis=0)
        shift = grads[0] - global_grad
        beta = anchor.copy()
        for _ in range(cfg.t_max):
            beta = beta - cfg.mu * (pr_gradient(shards[0], beta) - shift)
            if float(np.linalg.norm(beta)) > glm.DIVERGENCE_NORM:
                raise SolverFailure("surrogate gradient descent diverged")
        anchor = beta
    return anchor


def _pooled_features(
    fits: Sequence[LocalFit], plan: BootstrapPlan, rng: SeededRng
) -> tuple[list[LocalFit], list[Matrix]]:
    usable = _usable(fits)
    if not usable:
        raise EmptyInput("no usable local fits to bootstrap from")
    p = usable[0].beta.shape[0]
    features = [
        plan.feature_sampler.draw(rng.substream(plan.stream_key, fit.machine_id, 0), plan.n_tilde, p)
        for fit in usable
    ]
    return usable, features


def draw_pooled_bootstrap(
    fits: Sequence[LocalFit],
    family: GlmFamily,
    plan: BootstrapPlan,
    rng: SeededRng,
) -> Dataset:
    """Pooled parametric bootstrap sample, machine-major.

    For each usable fit, ``plan.n_tilde`` feature rows are drawn from the
    plan's feature distribution and responses from the family conditional on
    that machine's parameters.  Feature substreams depend only on machine
    ids, never on the fitted values, so two aggregations with equal seeds
    share feature draws bit for bit even when their local fits differ.
    """
    usable, features = _pooled_features(fits, plan, rng)
    responses = []
    for fit, block in zip(usable, features):
        resp_rng = rng.substream(plan.stream_key, fit.machine_id, 1)
        responses.append(glm.draw_responses(family, resp_rng, block @ fit.beta))
    return Dataset(np.vstack(features), np.concatenate(responses))


def reboot(
    fits: Sequence[LocalFit],
    family: GlmFamily,
    plan: BootstrapPlan,
    rng: SeededRng,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> EstimatorOutput:
    """Refit the family on the pooled bootstrap sample of all local models.

    The refit is warm-started at the plain average of the local fits; for
    the convex losses handled here the Newton fixed point does not depend on
    that choice.
    """
    pooled = draw_pooled_bootstrap(fits, family, plan, rng)
    init = naive_average(fits)
    return glm.fit_mle(family, pooled, init=init, tol=tol, max_iter=max_iter)


def draw_pooled_bootstrap_pr(
    fits: Sequence[LocalFit],
    plan: BootstrapPlan,
    rng: SeededRng,
) -> Dataset:
    """Pooled bootstrap sample for the quadratic-measurement model:
    responses are squared measurements under each local fit plus fresh
    standard normal noise."""
    usable, features = _pooled_features(fits, plan, rng)
    responses = [
        draw_pr_responses(rng.substream(plan.stream_key, fit.machine_id, 1), block, fit.beta)
        for fit, block in zip(usable, features)
    ]
    return Dataset(np.vstack(features), np.concatenate(responses))


def reboot_pr(
    fits: Sequence[LocalFit],
    plan: BootstrapPlan,
    rng: SeededRng,
    cfg: PrConfig,
) -> EstimatorOutput:
    """Gradient-descent refit on the pooled bootstrap sample, started from
    the first usable local fit."""
    usable = _usable(fits)
    if not usable:
        raise EmptyInput("no usable local fits to bootstrap from")
    pooled = draw_pooled_bootstrap_pr(fits, plan, rng)
    return wirtinger_flow(pooled, usable[0].beta, cfg)


def fed_reboot(
    shards: Sequence[Dataset],
    family: GlmFamily,
    epochs: int,
    rounds: int,
    plan: BootstrapPlan,
    rng: SeededRng,
    learning_rate: float,
    init: Optional[Vector] = None,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> Vector:
    """Round-based federated variant of the bootstrap-refit aggregator.

    Each round, every shard takes ``epochs`` full-data gradient steps of size
    ``learning_rate`` from the current global estimate; the server then
    refits on a pooled bootstrap sample of the updated local models and the
    result seeds the next round.  Round ``t`` draws from ``rng.substream(t)``.
    """
    if epochs < 1:
        raise ValueError("epochs must be at least 1")
    if rounds < 1:
        raise ValueError("rounds must be at least 1")
    if not learning_rate > 0.0:
        raise ValueError("learning_rate must be positive")
    if not shards:
        raise EmptyInput("no shards supplied")
    p = shards[0].n_features
    global_beta = np.zeros(p) if init is None else as_vector(init).copy()
    for round_idx in range(1, rounds + 1):
        fits = []
        for machine_id, shard in enumerate(shards):
            beta = global_beta.copy()
            ok = True
            for _ in range(epochs):
                try:
                    beta = beta - learning_rate * glm.gradient(family, shard, beta)
                except LinearPredictorOverflow:
                    ok = False
                    break
                if not np.all(np.isfinite(beta)) or float(np.linalg.norm(beta)) > glm.DIVERGENCE_NORM:
                    ok = False
                    break
            if ok:
                fits.append(LocalFit(machine_id, beta, FitStatus.CONVERGED))
            else:
                fits.append(LocalFit(machine_id, global_beta, FitStatus.DIVERGED))
        out = reboot(fits, family, plan, rng.substream(round_idx), tol=tol, max_iter=max_iter)
        if out.status is FitStatus.DIVERGED:
            raise SolverFailure(f"pooled refit diverged in round {round_idx}")
        global_beta = out.beta
    return global_beta
