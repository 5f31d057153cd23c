"""Amortized diagonal-Gaussian base posterior and KL machinery.

Log densities accept a single vector or a batch stacked on the leading
axis; reductions always run over the last axis. Every stochastic input is
an explicit ``eps`` draw, so callers own their RNG streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch

# exp(log_var) stays comfortably inside float64 range; any plausible
# optimum sits well inside this band.
LOG_VAR_CLAMP = 12.0

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GaussianPosterior:
    """q(z|x) = N(mu, diag(exp(log_var))). ``log_var`` is clamped on construction."""

    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        lv = np.asarray(self.log_var, dtype=np.float64)
        if mu.shape != lv.shape or mu.ndim != 1:
            raise DimensionMismatch(
                f"mu shape {mu.shape} and log_var shape {lv.shape} must be equal 1-D"
            )
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "log_var", np.clip(lv, -LOG_VAR_CLAMP, LOG_VAR_CLAMP))

    @property
    def dim(self) -> int:
        return self.mu.size


@dataclass(frozen=True)
class LatentSample:
    """A reparameterized draw together with the standard-normal eps that made it."""

    z0: np.ndarray
    eps: np.ndarray = field(repr=False)


def reparameterize(post: GaussianPosterior, eps) -> LatentSample:
    """z0 = mu + exp(log_var/2) * eps, deterministic given eps.

    ``eps`` may be a single (M,) draw or a (B, M) batch of draws.
    """
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape[-1] != post.dim or eps.ndim not in (1, 2):
        raise DimensionMismatch(f"eps shape {eps.shape} incompatible with dim {post.dim}")
    z0 = post.mu + np.exp(0.5 * post.log_var) * eps
    return LatentSample(z0=z0, eps=eps)


def log_density_diag_gaussian(z, post: GaussianPosterior):
    """Log density of ``z`` under ``post``; sums over the last axis."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != post.dim:
        raise DimensionMismatch(f"z dim {z.shape[-1]} != posterior dim {post.dim}")
    quad = (z - post.mu) ** 2 / np.exp(post.log_var)
    per_coord = -0.5 * (_LOG_2PI + post.log_var + quad)
    return np.sum(per_coord, axis=-1)


def log_density_standard_normal(z):
    """Log density under the N(0, I) prior; sums over the last axis."""
    z = np.asarray(z, dtype=np.float64)
    return -0.5 * (_LOG_2PI * z.shape[-1] + np.sum(z * z, axis=-1))


def kl_flow_term(post: GaussianPosterior, sample: LatentSample, zT):
    """Single-sample estimate ``log q(z0|x) - log p(zT)`` of the flow KL.

    This is the quantity the flow objective needs when the prior is placed
    on the flowed variable; it reduces to the analytic diagonal-Gaussian KL
    in expectation when the flow is the identity. A single draw may be
    negative; only its expectation is nonnegative.
    """
    return log_density_diag_gaussian(sample.z0, post) - log_density_standard_normal(zT)


def kl_analytic_diag(post: GaussianPosterior) -> float:
    """Closed-form KL(N(mu, diag(exp(lv))) || N(0, I)); oracle for the identity flow."""
    lv = post.log_var
    return float(0.5 * np.sum(np.exp(lv) + post.mu**2 - 1.0 - lv))
