"""Canonical-link exponential-family regression.

Provides the per-family log-partition calculus (loss, gradient, Hessian of
the averaged negative log-likelihood), a damped Newton maximum-likelihood
solver, and conditional response sampling, which is what the bootstrap-refit
aggregator uses to generate synthetic responses from a fitted model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .numerics import (
    Matrix,
    NotPositiveDefinite,
    SeededRng,
    Vector,
    as_matrix,
    as_vector,
    cholesky_solve,
)

# Parameter norm beyond which a fit is declared divergent (e.g. logistic
# separation walking off to infinity).
DIVERGENCE_NORM = 1e6

_MIN_LINE_SEARCH_STEP = 2.0 ** -30


class LinearPredictorOverflow(Exception):
    """A linear predictor is too large to evaluate the loss safely."""


class FitStatus(Enum):
    CONVERGED = "converged"
    MAX_ITER = "max_iter"
    DIVERGED = "diverged"


@dataclass(frozen=True, eq=False)
class Dataset:
    """A design matrix paired with its response vector."""

    design: Matrix
    response: Vector

    def __post_init__(self):
        object.__setattr__(self, "design", as_matrix(self.design))
        object.__setattr__(self, "response", as_vector(self.response))
        if self.design.shape[0] != self.response.shape[0]:
            raise ValueError(
                f"design has {self.design.shape[0]} rows but response has "
                f"{self.response.shape[0]} entries"
            )

    @property
    def n_rows(self) -> int:
        return self.design.shape[0]

    @property
    def n_features(self) -> int:
        return self.design.shape[1]


@dataclass(frozen=True, eq=False)
class EstimatorOutput:
    """A fitted parameter vector plus convergence diagnostics."""

    beta: Vector
    iterations: int
    grad_norm: float
    status: FitStatus


@dataclass(frozen=True, eq=False)
class GlmFamily:
    """One exponential family with canonical link.

    ``b`` is the log-partition function; its derivative is the mean function
    and its second derivative (times the dispersion) the conditional
    variance.  ``draw`` maps an array of linear predictors to sampled
    responses.  Construction probe-checks that ``b_prime`` differentiates
    ``b`` and that the variance function stays positive at bounded
    predictors.  ``eta_max`` is the largest linear predictor at which the
    loss may be evaluated; beyond it the calculus raises
    :class:`LinearPredictorOverflow`.
    """

    name: str
    b: Callable[[np.ndarray], np.ndarray]
    b_prime: Callable[[np.ndarray], np.ndarray]
    b_double_prime: Callable[[np.ndarray], np.ndarray]
    draw: Callable[[SeededRng, np.ndarray], np.ndarray]
    dispersion: float = 1.0
    eta_max: float = math.inf

    def __post_init__(self):
        if not self.dispersion > 0.0:
            raise ValueError("dispersion must be positive")
        probes = np.linspace(-3.0, 3.0, 10)
        step = 1e-6
        finite_diff = (self.b(probes + step) - self.b(probes - step)) / (2.0 * step)
        if not np.allclose(finite_diff, self.b_prime(probes), rtol=1e-6, atol=1e-6):
            raise ValueError(f"family {self.name!r}: b_prime is not the derivative of b")
        if not np.all(self.b_double_prime(probes) > 0.0):
            raise ValueError(f"family {self.name!r}: b_double_prime must be positive")


def _sigmoid(eta: np.ndarray) -> np.ndarray:
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    exp_eta = np.exp(eta[~pos])
    out[~pos] = exp_eta / (1.0 + exp_eta)
    return out


def _draw_logistic(rng: SeededRng, eta: np.ndarray) -> np.ndarray:
    return (rng.generator.random(eta.shape) < _sigmoid(eta)).astype(np.float64)


def _draw_poisson(rng: SeededRng, eta: np.ndarray) -> np.ndarray:
    return rng.generator.poisson(np.exp(eta)).astype(np.float64)


_LOGISTIC = GlmFamily(
    name="logistic",
    b=lambda eta: np.logaddexp(0.0, eta),
    b_prime=_sigmoid,
    b_double_prime=lambda eta: _sigmoid(eta) * (1.0 - _sigmoid(eta)),
    draw=_draw_logistic,
)

_POISSON = GlmFamily(
    name="poisson",
    b=np.exp,
    b_prime=np.exp,
    b_double_prime=np.exp,
    draw=_draw_poisson,
    eta_max=700.0,
)


def logistic() -> GlmFamily:
    """Bernoulli responses with the logit link."""
    return _LOGISTIC


def poisson() -> GlmFamily:
    """Poisson counts with the log link."""
    return _POISSON


def gaussian(dispersion: float = 1.0) -> GlmFamily:
    """Gaussian responses with identity link and variance ``dispersion``."""
    scale = math.sqrt(dispersion)
    return GlmFamily(
        name="gaussian",
        b=lambda eta: 0.5 * np.square(eta),
        b_prime=lambda eta: np.asarray(eta, dtype=np.float64),
        b_double_prime=np.ones_like,
        draw=lambda rng, eta: eta + scale * rng.generator.standard_normal(eta.shape),
        dispersion=dispersion,
    )


def family_by_name(name: str) -> GlmFamily:
    families = {"logistic": logistic, "poisson": poisson, "gaussian": gaussian}
    try:
        return families[name]()
    except KeyError:
        raise ValueError(f"unknown family {name!r}") from None


def _linear_predictor(family: GlmFamily, data: Dataset, beta: Vector) -> np.ndarray:
    beta = as_vector(beta)
    if beta.shape[0] != data.n_features:
        raise ValueError(
            f"beta has length {beta.shape[0]} but design has {data.n_features} columns"
        )
    eta = data.design @ beta
    if np.any(eta > family.eta_max):
        raise LinearPredictorOverflow(
            f"family {family.name!r}: max linear predictor {float(np.max(eta)):.3g} "
            f"exceeds {family.eta_max}"
        )
    return eta


def nll(family: GlmFamily, data: Dataset, beta: Vector) -> float:
    """Averaged negative log-likelihood ``mean(b(eta) - y * eta)``."""
    eta = _linear_predictor(family, data, beta)
    return float(np.mean(family.b(eta) - data.response * eta))


def gradient(family: GlmFamily, data: Dataset, beta: Vector) -> Vector:
    """Gradient of :func:`nll`: ``-X.T @ (y - b'(X beta)) / N``."""
    eta = _linear_predictor(family, data, beta)
    residual = data.response - family.b_prime(eta)
    return -(data.design.T @ residual) / data.n_rows


def hessian(family: GlmFamily, data: Dataset, beta: Vector) -> Matrix:
    """Hessian of :func:`nll`: ``X.T @ diag(b''(X beta)) @ X / N``."""
    eta = _linear_predictor(family, data, beta)
    weights = family.b_double_prime(eta)
    return (data.design.T @ (weights[:, None] * data.design)) / data.n_rows


def _canonical_rows(data: Dataset) -> Dataset:
    """Rows sorted lexicographically by (features, response).

    Fitting on the canonical order makes the solver exactly invariant to row
    permutations of the input: floating-point reductions do not commute, but
    identical row multisets reduce in identical order after the sort.
    """
    keys = [data.response] + [data.design[:, j] for j in reversed(range(data.n_features))]
    order = np.lexsort(keys)
    if np.array_equal(order, np.arange(data.n_rows)):
        return data
    return Dataset(data.design[order], data.response[order])


def fit_mle(
    family: GlmFamily,
    data: Dataset,
    init: Optional[Vector] = None,
    tol: float = 1e-10,
    max_iter: int = 100,
    gradient_shift: Optional[Vector] = None,
) -> EstimatorOutput:
    """Damped Newton minimization of the averaged negative log-likelihood.

    Newton steps are backtracked (step halved, down to 2**-30) until the
    objective strictly decreases, so the loss is monotone along accepted
    steps.  The status is CONVERGED once the gradient norm falls to ``tol``,
    DIVERGED as soon as the parameter norm passes ``1e6`` or the Hessian
    stops being positive definite (both signal a nonexistent MLE, e.g.
    logistic separation), and MAX_ITER otherwise.

    ``gradient_shift`` subtracts ``<shift, beta>`` from the objective, which
    is what the surrogate-likelihood aggregator needs; plain maximum
    likelihood leaves it at ``None``.
    """
    data = _canonical_rows(data)
    if init is None:
        beta = np.zeros(data.n_features)
    else:
        beta = as_vector(init).copy()
        if beta.shape[0] != data.n_features:
            raise ValueError("init length does not match design columns")
    shift = None if gradient_shift is None else as_vector(gradient_shift)
    if shift is not None and shift.shape[0] != data.n_features:
        raise ValueError("gradient_shift length does not match design columns")

    def objective(candidate: Vector) -> float:
        value = nll(family, data, candidate)
        if shift is not None:
            value -= float(shift @ candidate)
        return value

    def grad(candidate: Vector) -> Vector:
        g = gradient(family, data, candidate)
        return g if shift is None else g - shift

    try:
        f_current = objective(beta)
        g = grad(beta)
    except LinearPredictorOverflow:
        return EstimatorOutput(beta, 0, math.inf, FitStatus.DIVERGED)

    iterations = 0
    for _ in range(max_iter):
        if float(np.linalg.norm(beta)) > DIVERGENCE_NORM:
            return EstimatorOutput(beta, iterations, float(np.linalg.norm(g)), FitStatus.DIVERGED)
        grad_norm = float(np.linalg.norm(g))
        if grad_norm <= tol:
            return EstimatorOutput(beta, iterations, grad_norm, FitStatus.CONVERGED)
        try:
            step = cholesky_solve(hessian(family, data, beta), g)
        except NotPositiveDefinite:
            return EstimatorOutput(beta, iterations, grad_norm, FitStatus.DIVERGED)

        scale = 1.0
        accepted = False
        while scale >= _MIN_LINE_SEARCH_STEP:
            trial = beta - scale * step
            try:
                f_trial = objective(trial)
            except LinearPredictorOverflow:
                f_trial = math.inf
            if f_trial < f_current:
                beta, f_current = trial, f_trial
                accepted = True
                iterations += 1
                break
            scale *= 0.5
        if not accepted:
            return EstimatorOutput(beta, iterations, grad_norm, FitStatus.MAX_ITER)
        g = grad(beta)

    grad_norm = float(np.linalg.norm(g))
    if float(np.linalg.norm(beta)) > DIVERGENCE_NORM:
        status = FitStatus.DIVERGED
    elif grad_norm <= tol:
        status = FitStatus.CONVERGED
    else:
        status = FitStatus.MAX_ITER
    return EstimatorOutput(beta, iterations, grad_norm, status)


def draw_responses(family: GlmFamily, rng: SeededRng, eta) -> Vector:
    """Sample one response per linear predictor in ``eta``."""
    return family.draw(rng, np.asarray(eta, dtype=np.float64))


def sample_response(family: GlmFamily, rng: SeededRng, x: Vector, beta: Vector) -> float:
    """Sample one response at feature vector ``x`` under parameters ``beta``."""
    eta = float(as_vector(x) @ as_vector(beta))
    if not math.isfinite(eta):
        raise ValueError("linear predictor must be finite")
    return float(family.draw(rng, np.array([eta]))[0])
