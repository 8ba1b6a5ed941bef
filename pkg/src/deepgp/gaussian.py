"""Gaussian helpers: jittered Cholesky, KL divergences, sampling, log densities.

Every function accepts nodes or plain arrays and returns a node, so results
stay differentiable when called inside a tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class JitterPolicy:
    initial: float = 1e-6
    growth_factor: float = 10.0
    max: float = 1e-2

    def __post_init__(self):
        if not 0 < self.initial <= self.max:
            raise ValueError(f"jitter must satisfy 0 < initial <= max, got {self.initial}, {self.max}")
        if self.growth_factor <= 1:
            raise ValueError(f"jitter growth factor must exceed 1, got {self.growth_factor}")

    def ladder(self) -> list[float]:
        steps = [self.initial]
        while steps[-1] * self.growth_factor <= self.max * (1 + 1e-12):
            steps.append(steps[-1] * self.growth_factor)
        return steps


DEFAULT_JITTER = JitterPolicy()


class CholeskyError(ad.NotPositiveDefiniteError):
    def __init__(self, message: str, ladder: list[float]):
        super().__init__(message)
        self.ladder = ladder


@dataclass
class FullGaussian:
    """N(mean, cov_sqrt @ cov_sqrt.T) with a lower-triangular square root."""

    mean: ad.Node
    cov_sqrt: ad.Node

    def __post_init__(self):
        self.mean = ad.as_node(self.mean)
        self.cov_sqrt = ad.as_node(self.cov_sqrt)
        m = self.mean.shape[0]
        if self.mean.ndim != 1 or self.cov_sqrt.shape != (m, m):
            raise ad.ShapeError("FullGaussian", f"mean {self.mean.shape} and cov_sqrt {self.cov_sqrt.shape} disagree")


def cholesky_with_jitter(a, policy: JitterPolicy = DEFAULT_JITTER, what: str = "matrix") -> tuple[ad.Node, float]:
    """Factor ``a + jitter * I``, walking up the jitter ladder until it succeeds.

    The initial jitter is always added.
    """
    a = ad.as_node(a)
    value = a.value
    if value.ndim != 2 or value.shape[0] != value.shape[1]:
        raise ad.ShapeError("cholesky_with_jitter", f"expected a square matrix, got {value.shape}")
    if not np.allclose(value, value.T, rtol=0.0, atol=1e-10):
        raise ValueError(f"{what} is not symmetric")
    eye = np.eye(value.shape[0])
    ladder = policy.ladder()
    for jitter in ladder:
        try:
            np.linalg.cholesky(value + jitter * eye)
        except np.linalg.LinAlgError:
            continue
        return ad.cholesky(ad.add(a, jitter * eye)), jitter
    raise CholeskyError(f"{what} is not positive definite (tried jitter {ladder})", ladder)


def _check_diag(cov_sqrt: ad.Node, op: str) -> ad.Node:
    diag = ad.diag_part(cov_sqrt)
    if np.any(diag.value <= 0):
        raise ValueError(f"{op}: covariance square root has a non-positive diagonal")
    return diag


def kl_whitened(q: FullGaussian) -> ad.Node:
    """KL(q || N(0, I))."""
    diag = _check_diag(q.cov_sqrt, "kl_whitened")
    m = q.mean.shape[0]
    trace_term = ad.sum(ad.square(q.cov_sqrt))
    mahalanobis = ad.sum(ad.square(q.mean))
    logdet = 2.0 * ad.sum(ad.log(diag))
    return 0.5 * (trace_term + mahalanobis - float(m) - logdet)


def kl_general(q: FullGaussian, prior_chol) -> ad.Node:
    """KL(q || N(0, L L^T)) for lower-triangular ``prior_chol`` L."""
    prior_chol = ad.as_node(prior_chol)
    m = q.mean.shape[0]
    if prior_chol.shape != (m, m):
        raise ad.ShapeError("kl_general", f"prior {prior_chol.shape} does not match q of size {m}")
    diag_q = _check_diag(q.cov_sqrt, "kl_general")
    diag_p = _check_diag(prior_chol, "kl_general")
    a = ad.solve_triangular(prior_chol, q.cov_sqrt, lower=True)
    b = ad.solve_triangular(prior_chol, ad.reshape(q.mean, (m, 1)), lower=True)
    logdet = 2.0 * (ad.sum(ad.log(diag_p)) - ad.sum(ad.log(diag_q)))
    return 0.5 * (ad.sum(ad.square(a)) + ad.sum(ad.square(b)) - float(m) + logdet)


def kl_diagonal(mean, log_var) -> ad.Node:
    """Sum of KL(N(mean_i, exp(log_var_i)) || N(0, 1)) over all entries."""
    mean, log_var = ad.as_node(mean), ad.as_node(log_var)
    return 0.5 * ad.sum(ad.exp(log_var) + ad.square(mean) - 1.0 - log_var)


def reparam_sample(mean, scale, noise, full: bool = False) -> ad.Node:
    """``mean + sqrt(var) * noise`` or, with ``full``, ``mean + L @ noise``.

    In the diagonal form ``scale`` is the variance; in the full form it is a
    lower-triangular covariance square root and ``mean``/``noise`` are
    column vectors or matrices of them.
    """
    mean, scale, noise = ad.as_node(mean), ad.as_node(scale), ad.as_node(noise)
    if noise.shape != mean.shape:
        raise ad.ShapeError("reparam_sample", f"noise {noise.shape} does not match mean {mean.shape}")
    if full:
        return ad.add(mean, ad.matmul(scale, noise))
    if np.any(scale.value < 0):
        raise ValueError("reparam_sample: negative variance")
    if not np.any(noise.value):
        # sqrt has an unbounded derivative at zero variance; the sample is just the mean.
        return mean
    return ad.add(mean, ad.mul(ad.sqrt(scale), noise))


def gaussian_logpdf(y, mean, var) -> ad.Node:
    y, mean, var = ad.as_node(y), ad.as_node(mean), ad.as_node(var)
    if np.any(var.value <= 0):
        raise ValueError("gaussian_logpdf: variance must be positive")
    return -0.5 * (LOG_2PI + ad.log(var)) - 0.5 * ad.square(y - mean) / var


def gaussian_variational_expectation(y, mean, var, noise_var) -> ad.Node:
    """E_{f ~ N(mean, var)} log N(y | f, noise_var), in closed form."""
    y, mean, var, noise_var = (ad.as_node(v) for v in (y, mean, var, noise_var))
    if np.any(noise_var.value <= 0):
        raise ValueError("gaussian_variational_expectation: noise variance must be positive")
    if np.any(var.value < 0):
        raise ValueError("gaussian_variational_expectation: variance must be non-negative")
    return -0.5 * (LOG_2PI + ad.log(noise_var)) - 0.5 * (ad.square(y - mean) + var) / noise_var
