"""Dense linear algebra, seeded random streams, and distribution samplers.

Everything downstream (model fitting, aggregation, Monte Carlo driving)
builds on these primitives.  All operations are pure given their inputs.
A :class:`SeededRng` is owned by exactly one logical task at a time, and an
identical (seed, stream path) pair always reproduces the same draws no
matter how work is scheduled across threads.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.random import Generator, Philox, SeedSequence

Vector = np.ndarray
Matrix = np.ndarray


class DomainError(ValueError):
    """A sampler parameter lies outside its admissible range."""


class NotPositiveDefinite(Exception):
    """A Cholesky pivot collapsed: the matrix is singular or indefinite."""


class NoConvergence(Exception):
    """Power iteration hit its cap before isolating the top eigenpair."""


def as_vector(values) -> Vector:
    """Validate and return ``values`` as a finite 1-d float64 array."""
    vec = np.ascontiguousarray(values, dtype=np.float64)
    if vec.ndim != 1 or vec.shape[0] < 1:
        raise ValueError(f"expected a 1-d vector with at least one entry, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise ValueError("vector entries must be finite")
    return vec


def as_matrix(values) -> Matrix:
    """Validate and return ``values`` as a finite 2-d float64 array."""
    mat = np.ascontiguousarray(values, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] < 1 or mat.shape[1] < 1:
        raise ValueError(f"expected a 2-d matrix with positive dimensions, got shape {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise ValueError("matrix entries must be finite")
    return mat


class SeededRng:
    """Counter-based random stream addressed by (master seed, stream path).

    Substreams are derived through ``SeedSequence`` spawn keys on top of the
    Philox counter-based generator, so distinct paths never overlap by
    construction and a stream's content is independent of thread scheduling.
    Instances are cheap to create; derive one per logical task.
    """

    __slots__ = ("seed", "path", "generator")

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(i) for i in path)
        self.generator = Generator(Philox(SeedSequence(self.seed, spawn_key=self.path)))

    def substream(self, *indices: int) -> "SeededRng":
        """Independent stream addressed by this stream's path plus ``indices``."""
        return SeededRng(self.seed, self.path + tuple(int(i) for i in indices))

    def clone(self) -> "SeededRng":
        """The same stream, restarted from its beginning."""
        return SeededRng(self.seed, self.path)

    def permutation(self, n: int) -> np.ndarray:
        """Uniform random permutation of ``range(n)``."""
        return self.generator.permutation(int(n))

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, path={self.path})"


def _check_symmetric(a: Matrix, what: str) -> None:
    scale = max(1.0, float(np.max(np.abs(a))))
    if float(np.max(np.abs(a - a.T))) > 1e-10 * scale:
        raise ValueError(f"{what} must be symmetric within 1e-10 relative")


def cholesky_factor(a: Matrix, pivot_rtol: float = 1e-12) -> Matrix:
    """Lower Cholesky factor of a symmetric matrix with an explicit pivot floor.

    Raises :class:`NotPositiveDefinite` as soon as a pivot falls at or below
    ``pivot_rtol`` times the largest diagonal entry, which signals a singular
    or indefinite input.
    """
    n = a.shape[0]
    threshold = pivot_rtol * max(float(np.max(np.diag(a))), 0.0)
    lower = np.zeros_like(a)
    for j in range(n):
        pivot = a[j, j] - lower[j, :j] @ lower[j, :j]
        if pivot <= threshold:
            raise NotPositiveDefinite(
                f"pivot {pivot:.3e} at column {j} is at or below {threshold:.3e}"
            )
        lower[j, j] = np.sqrt(pivot)
        if j + 1 < n:
            lower[j + 1 :, j] = (a[j + 1 :, j] - lower[j + 1 :, :j] @ lower[j, :j]) / lower[j, j]
    return lower


def cholesky_solve(a: Matrix, b: Vector) -> Vector:
    """Solve ``a @ x = b`` for symmetric positive definite ``a``."""
    a = as_matrix(a)
    b = as_vector(b)
    n = a.shape[0]
    if a.shape[1] != n or b.shape[0] != n:
        raise ValueError(f"dimension mismatch: matrix {a.shape}, vector {b.shape}")
    _check_symmetric(a, "cholesky_solve input")
    lower = cholesky_factor(a)
    y = np.zeros(n)
    for i in range(n):
        y[i] = (b[i] - lower[i, :i] @ y[:i]) / lower[i, i]
    x = np.zeros(n)
    for i in reversed(range(n)):
        x[i] = (y[i] - lower[i + 1 :, i] @ x[i + 1 :]) / lower[i, i]
    return x


# Fixed seeds for the power-iteration probe vector; the second one only
# matters if the first probe lands in the nullspace of the shifted matrix.
_PROBE_SEEDS = (0x9E3779B9, 0x85EBCA6B)


def _probe_vector(n: int, attempt: int) -> Vector:
    gen = Generator(Philox(SeedSequence(_PROBE_SEEDS[attempt % len(_PROBE_SEEDS)])))
    v = gen.standard_normal(n)
    return v / np.linalg.norm(v)


def leading_eigenpair(s: Matrix, tol: float = 1e-10, max_iter: int = 10_000) -> tuple[float, Vector]:
    """Leading eigenvalue and unit eigenvector of a symmetric matrix.

    Power iteration on the shifted matrix ``s + c*I`` with ``c`` set to the
    maximum absolute row sum, so the iteration converges to the algebraically
    largest eigenvalue even when the most negative eigenvalue dominates in
    magnitude.  Convergence is declared once the residual ``||s v - lam v||``
    drops to ``tol`` times the Frobenius norm of ``s``.

    Raises :class:`NoConvergence` after ``max_iter`` iterations, which signals
    near-degenerate top eigenvalues.
    """
    s = as_matrix(s)
    n = s.shape[0]
    if s.shape[1] != n:
        raise ValueError(f"expected a square matrix, got {s.shape}")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    _check_symmetric(s, "leading_eigenpair input")

    fro = float(np.linalg.norm(s))
    shift = float(np.max(np.sum(np.abs(s), axis=1)))
    v = _probe_vector(n, attempt=0)
    attempt = 0
    for _ in range(max_iter):
        sv = s @ v
        lam = float(v @ sv)
        if float(np.linalg.norm(sv - lam * v)) <= tol * fro:
            return lam, v
        w = sv + shift * v
        norm_w = float(np.linalg.norm(w))
        if norm_w == 0.0:
            attempt += 1
            v = _probe_vector(n, attempt)
            continue
        v = w / norm_w
    raise NoConvergence(f"no isolated top eigenpair after {max_iter} iterations")


def sample_standard_normal(rng: SeededRng, n: int) -> Vector:
    """``n`` i.i.d. standard normal draws, deterministic given the stream state."""
    n = int(n)
    if n < 0:
        raise DomainError("sample count must be nonnegative")
    return rng.generator.standard_normal(n)


@lru_cache(maxsize=None)
def ar1_cholesky(p: int, rho: float) -> Matrix:
    """Lower Cholesky factor of the AR(1) correlation matrix ``rho**|i-j|``.

    Cached per (p, rho); the returned array is read-only.
    """
    if not abs(rho) < 1.0:
        raise DomainError("AR(1) correlation must satisfy |rho| < 1")
    idx = np.arange(int(p))
    sigma = rho ** np.abs(idx[:, None] - idx[None, :])
    lower = np.linalg.cholesky(sigma)
    lower.setflags(write=False)
    return lower


def sample_mvn_ar1(rng: SeededRng, p: int, rho: float) -> Vector:
    """One draw from N(0, Sigma) with AR(1) covariance ``Sigma_ij = rho**|i-j|``.

    With ``rho == 0`` this consumes the stream exactly like
    :func:`sample_standard_normal` and returns the identical values.
    """
    if not abs(rho) < 1.0:
        raise DomainError("AR(1) correlation must satisfy |rho| < 1")
    z = sample_standard_normal(rng, p)
    if rho == 0.0:
        return z
    return ar1_cholesky(int(p), float(rho)) @ z


def sample_uniform01(rng: SeededRng) -> float:
    """One uniform draw from [0, 1)."""
    return float(rng.generator.random())


def sample_bernoulli(rng: SeededRng, prob: float) -> int:
    """One Bernoulli(prob) draw in {0, 1}."""
    if not 0.0 <= prob <= 1.0:
        raise DomainError(f"Bernoulli probability {prob} outside [0, 1]")
    return int(sample_uniform01(rng) < prob)


def sample_poisson(rng: SeededRng, mean: float) -> int:
    """One Poisson(mean) draw."""
    if not (mean >= 0.0 and np.isfinite(mean)):
        raise DomainError(f"Poisson mean {mean} must be finite and nonnegative")
    return int(rng.generator.poisson(mean))
