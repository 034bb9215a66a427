"""Stochastic Gradient Langevin Dynamics over latent vectors.

One step moves the latent z along minus half the stepsize times the
gradient of the potential

    U(z) = lam^2 ||x - g(z, w)||^2 + c * ||z||^2

and injects N(0, epsilon*I) noise. The default latent-prior weight is
c = 1, the literal potential; c = 0.5 (the weight implied by a standard
normal latent prior) is selectable for comparison. Chains for different
training tuples use independent noise streams keyed by
(seed, tuple id, round, step), so results do not depend on scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalAbortError
from .net import net_eval_and_backward, net_forward

__all__ = [
    "SgldParams",
    "sgld_drift",
    "sgld_potential",
    "sgld_noise",
    "noise_rng",
    "sgld_step",
    "sgld_run",
]


@dataclass(frozen=True)
class SgldParams:
    """Steplength and per-round chain length.

    epsilon must stay below 2: the noise-free recursion at lam = 0 is
    z <- (1 - epsilon) z, unstable beyond that.
    """

    epsilon: float = 0.01
    steps: int = 20
    z_prior_weight: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.epsilon < 2.0):
            raise ValueError(f"epsilon must lie in (0, 2), got {self.epsilon}")
        if self.steps < 0:
            raise ValueError(f"steps must be non-negative, got {self.steps}")
        if self.z_prior_weight not in (1.0, 0.5):
            raise ValueError(
                f"z prior weight must be 1.0 (literal) or 0.5, got {self.z_prior_weight}")


def sgld_potential(z, x, arch, w, lam: float, z_prior_weight: float = 1.0) -> float:
    z = np.asarray(z, dtype=np.float64).ravel()
    val = z_prior_weight * float(np.dot(z, z))
    if lam != 0.0:
        diff = np.asarray(x, dtype=np.float64) - net_forward(arch, w, z)
        val += lam * lam * float(np.dot(diff.ravel(), diff.ravel()))
    return val


def _drift_and_potential(z, x, arch, w, lam, params):
    """One generator evaluation serving both the drift and U(z)."""
    pot = params.z_prior_weight * float(np.dot(z, z))
    grad = 2.0 * params.z_prior_weight * z
    if lam != 0.0:
        x = np.asarray(x, dtype=np.float64)
        g, grad_z, _ = net_eval_and_backward(
            arch, w, z, lambda out: 2.0 * lam * lam * (out - x))
        diff = g - x
        pot += lam * lam * float(np.dot(diff.ravel(), diff.ravel()))
        grad = grad + grad_z
    return -(0.5 * params.epsilon) * grad, pot


def sgld_drift(z, x, arch, w, lam: float, params: SgldParams) -> np.ndarray:
    """-(epsilon/2) * grad U(z); the deterministic part of one step."""
    z = np.asarray(z, dtype=np.float64).ravel()
    return _drift_and_potential(z, x, arch, w, lam, params)[0]


def noise_rng(key) -> np.random.Generator:
    """Counter-based stream: a fresh generator keyed by a tuple of ints."""
    return np.random.default_rng(np.random.SeedSequence([int(v) for v in key]))


def sgld_noise(rng: np.random.Generator, dim: int, epsilon: float) -> np.ndarray:
    """One N(0, epsilon*I) perturbation."""
    return math.sqrt(epsilon) * rng.standard_normal(dim)


def sgld_step(z, x, arch, w, lam: float, params: SgldParams,
              rng: np.random.Generator, noise=None) -> np.ndarray:
    """One Langevin update. `noise` overrides the injected perturbation
    (test hook); otherwise it is drawn from `rng`."""
    z = np.asarray(z, dtype=np.float64).ravel()
    if noise is None:
        noise = sgld_noise(rng, z.size, params.epsilon)
    z_new = z + sgld_drift(z, x, arch, w, lam, params) + noise
    if not np.all(np.isfinite(z_new)):
        raise NumericalAbortError("non-finite latent iterate",
                                  diagnostics={"z": z, "epsilon": params.epsilon})
    return z_new


def sgld_run(z_warm, x, arch, w, lam: float, params: SgldParams, noise_key):
    """Run `params.steps` sequential updates from the warm-started latent.

    `noise_key` is a tuple of ints; step s draws its noise from the stream
    keyed by noise_key + (s,). Returns the final latent and the potential
    evaluated at each visited state (U(z_0) ... U(z_{steps-1}), sharing the
    drift's generator evaluation).
    """
    z = np.asarray(z_warm, dtype=np.float64).ravel().copy()
    key = tuple(int(v) for v in noise_key)
    trace = []
    for s in range(params.steps):
        drift, pot = _drift_and_potential(z, x, arch, w, lam, params)
        trace.append(pot)
        z = z + drift + sgld_noise(noise_rng(key + (s,)), z.size, params.epsilon)
        if not np.all(np.isfinite(z)):
            raise NumericalAbortError("non-finite latent iterate",
                                      diagnostics={"step": s, "epsilon": params.epsilon})
    return z, trace
