"""Noisy quadratic-measurement (phase retrieval) model.

The response is the squared linear measurement plus standard normal noise,
so the parameter is only identified up to sign.  Estimation follows the
classic two-stage recipe: a spectral initializer from the leading eigenpair
of the response-weighted second-moment matrix, refined by fixed-step
gradient descent on the quartic squared-residual loss.

The gradient used throughout is the conventional quarter-scaled one (the raw
derivative of the squared residual divided by four); the factor is absorbed
into the step size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .glm import Dataset, EstimatorOutput, FitStatus, DIVERGENCE_NORM
from .numerics import SeededRng, Vector, as_vector, leading_eigenpair

# Gradient norm below which a gradient-descent run is reported as converged.
GRAD_TOL = 1e-6


class BadSpectrum(Exception):
    """The spectral initializer found no positive leading eigenvalue."""


@dataclass(frozen=True)
class PrConfig:
    """Gradient-descent schedule: iteration count and step size."""

    t_max: int
    mu: float

    def __post_init__(self):
        if self.t_max < 0:
            raise ValueError("t_max must be nonnegative")
        if not self.mu > 0.0:
            raise ValueError("step size mu must be positive")


def pr_loss(data: Dataset, beta: Vector) -> float:
    """Averaged squared residual ``mean((y - (x.beta)^2)^2)``."""
    beta = as_vector(beta)
    s = data.design @ beta
    return float(np.mean(np.square(data.response - np.square(s))))


def pr_gradient(data: Dataset, beta: Vector) -> Vector:
    """Quarter-scaled gradient ``mean(((x.beta)^2 - y) (x.beta) x)``."""
    beta = as_vector(beta)
    s = data.design @ beta
    return ((np.square(s) - data.response) * s) @ data.design / data.n_rows


def spectral_init(data: Dataset, tol: float = 1e-10, max_iter: int = 10_000) -> Vector:
    """Spectral initializer ``sqrt(lam/3) * v`` from the leading eigenpair of
    the response-weighted second-moment matrix ``mean(y_i x_i x_i^T)``.

    The eigenvector sign is fixed so its first nonzero entry is positive; the
    model's sign ambiguity makes either choice statistically equivalent.
    Raises :class:`BadSpectrum` when the leading eigenvalue is not positive.
    """
    weighted = data.design.T @ (data.response[:, None] * data.design) / data.n_rows
    weighted = (weighted + weighted.T) / 2.0
    lam, v = leading_eigenpair(weighted, tol=tol, max_iter=max_iter)
    if lam <= 0.0:
        raise BadSpectrum(f"leading eigenvalue {lam:.3g} is not positive")
    nonzero = np.nonzero(v)[0]
    if nonzero.size and v[nonzero[0]] < 0.0:
        v = -v
    return math.sqrt(lam / 3.0) * v


def wirtinger_flow(data: Dataset, init: Vector, cfg: PrConfig) -> EstimatorOutput:
    """Exactly ``cfg.t_max`` fixed-step gradient iterations from ``init``.

    There is no line search and no early stopping on small gradients; the
    run only stops early if the iterate norm passes ``1e6``, which is
    reported as DIVERGED.  Otherwise the status is CONVERGED when the final
    gradient norm is at most ``GRAD_TOL`` and MAX_ITER if not.
    """
    beta = as_vector(init).copy()
    if beta.shape[0] != data.n_features:
        raise ValueError("init length does not match design columns")
    steps = 0
    for _ in range(cfg.t_max):
        if float(np.linalg.norm(beta)) > DIVERGENCE_NORM:
            return EstimatorOutput(beta, steps, math.inf, FitStatus.DIVERGED)
        beta = beta - cfg.mu * pr_gradient(data, beta)
        steps += 1
    if float(np.linalg.norm(beta)) > DIVERGENCE_NORM:
        return EstimatorOutput(beta, steps, math.inf, FitStatus.DIVERGED)
    grad_norm = float(np.linalg.norm(pr_gradient(data, beta)))
    status = FitStatus.CONVERGED if grad_norm <= GRAD_TOL else FitStatus.MAX_ITER
    return EstimatorOutput(beta, steps, grad_norm, status)


def draw_pr_responses(rng: SeededRng, design, beta: Vector) -> Vector:
    """Responses ``(x.beta)^2 + eps`` with ``eps ~ N(0, 1)``, one per row."""
    s = np.asarray(design, dtype=np.float64) @ as_vector(beta)
    return np.square(s) + rng.generator.standard_normal(s.shape[0])


def sample_pr_response(rng: SeededRng, x: Vector, beta: Vector) -> float:
    """One response ``(x.beta)^2 + eps`` with ``eps ~ N(0, 1)``."""
    s = float(as_vector(x) @ as_vector(beta))
    return s * s + float(rng.generator.standard_normal())
