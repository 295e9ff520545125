"""Target densities p-hat = exp(-E) with exact energy gradients.

Every target exposes

    dim             sampling-space dimension
    energy(x)       E(x) = -ln p_hat(x), batched over rows when x is 2-D
    grad_energy(x)  dE/dx, same batching
    exact_log_norm  ln Z when analytically known, else None

The standard-normal base density of the flow also lives here
(``base_log_prob`` / ``base_grad_log_prob``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "TargetDensity",
    "IsotropicGaussianTarget",
    "GaussianMixtureTarget",
    "Phi4Lattice",
    "ZeroEnergyTarget",
    "base_log_prob",
    "base_grad_log_prob",
    "phi4_energy",
    "phi4_grad",
    "gaussian_mixture_energy",
    "gaussian_mixture_grad",
]

_LOG_2PI = float(np.log(2.0 * np.pi))


def base_log_prob(z: np.ndarray) -> np.ndarray:
    """Standard-normal log density, -d/2 ln(2 pi) - |z|^2 / 2."""
    z = np.asarray(z, dtype=np.float64)
    d = z.shape[-1]
    return -0.5 * d * _LOG_2PI - 0.5 * np.sum(z * z, axis=-1)


def base_grad_log_prob(z: np.ndarray) -> np.ndarray:
    """Gradient of the standard-normal log density: -z."""
    return -np.asarray(z, dtype=np.float64)


class TargetDensity:
    """Contract shared by all targets; subclasses fill in the math."""

    dim: int
    exact_log_norm = None

    def energy(self, x: np.ndarray):
        raise NotImplementedError

    def grad_energy(self, x: np.ndarray):
        raise NotImplementedError

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ValueError(f"point has dimension {x.shape[-1]}, expected {self.dim}")
        return x


@dataclass
class IsotropicGaussianTarget(TargetDensity):
    """N(0, sigma^2 I) via the unnormalized energy |x|^2 / (2 sigma^2).

    sigma = 1 is the flow's own base density as a target, with
    E(x) = |x|^2 / 2 and ln Z = d/2 ln(2 pi).
    """

    dim: int
    sigma: float = 1.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        self.exact_log_norm = 0.5 * self.dim * np.log(2.0 * np.pi * self.sigma**2)

    def energy(self, x):
        x = self._check(x)
        return 0.5 * np.sum(x * x, axis=-1) / self.sigma**2

    def grad_energy(self, x):
        x = self._check(x)
        return x / self.sigma**2


class ZeroEnergyTarget(TargetDensity):
    """E identically zero; the gradient estimators use it to isolate the
    log-density part of the loss (score = total - path at zero energy)."""

    def __init__(self, dim: int):
        self.dim = dim

    def energy(self, x):
        x = self._check(x)
        return np.zeros(x.shape[:-1])

    def grad_energy(self, x):
        x = self._check(x)
        return np.zeros_like(x)


def gaussian_mixture_energy(means, weights, sigmas, x) -> np.ndarray:
    """E(x) = -ln sum_k w_k N(x; mu_k, sigma_k^2 I) with normalized
    components, so exp(-E) integrates to one."""
    means = np.asarray(means, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    d = means.shape[1]
    # (N, K) log component densities
    diff = X[:, None, :] - means[None, :, :]
    sq = np.sum(diff * diff, axis=2)
    logcomp = (
        np.log(weights)[None, :]
        - 0.5 * d * _LOG_2PI
        - d * np.log(sigmas)[None, :]
        - 0.5 * sq / sigmas[None, :] ** 2
    )
    m = np.max(logcomp, axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(logcomp - m), axis=1))
    out = -lse
    return float(out[0]) if single else out


def gaussian_mixture_grad(means, weights, sigmas, x) -> np.ndarray:
    """dE/dx via responsibilities r_k: sum_k r_k (x - mu_k)/sigma_k^2."""
    means = np.asarray(means, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    d = means.shape[1]
    diff = X[:, None, :] - means[None, :, :]
    sq = np.sum(diff * diff, axis=2)
    logcomp = (
        np.log(weights)[None, :]
        - 0.5 * d * _LOG_2PI
        - d * np.log(sigmas)[None, :]
        - 0.5 * sq / sigmas[None, :] ** 2
    )
    m = np.max(logcomp, axis=1, keepdims=True)
    resp = np.exp(logcomp - m)
    resp /= np.sum(resp, axis=1, keepdims=True)
    grad = np.sum(resp[:, :, None] * diff / sigmas[None, :, None] ** 2, axis=1)
    return grad[0] if single else grad


class GaussianMixtureTarget(TargetDensity):
    """Desk-scale multimodal target; components are normalized Gaussians,
    so ln Z = 0."""

    exact_log_norm = 0.0

    def __init__(self, means, weights, sigmas):
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        self.weights = np.asarray(weights, dtype=np.float64)
        self.sigmas = np.asarray(sigmas, dtype=np.float64)
        if np.any(self.weights <= 0):
            raise ValueError("mixture weights must be positive")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to one")
        if np.any(self.sigmas <= 0):
            raise ValueError("component scales must be positive")
        self.dim = self.means.shape[1]

    def energy(self, x):
        return gaussian_mixture_energy(self.means, self.weights, self.sigmas, self._check(x))

    def grad_energy(self, x):
        return gaussian_mixture_grad(self.means, self.weights, self.sigmas, self._check(x))


def _phi4_terms(phi_grid: np.ndarray):
    """Kinetic link differences for periodic phi (..., L, L)."""
    dx = phi_grid - np.roll(phi_grid, 1, axis=-2)
    dy = phi_grid - np.roll(phi_grid, 1, axis=-1)
    return dx, dy


@dataclass
class Phi4Lattice(TargetDensity):
    """Two-dimensional scalar phi^4 theory on a periodic L x L lattice.

    Action (dimensionless couplings):

        S(phi) = sum_links (phi_x - phi_y)^2
               + sum_x ( m2 * phi_x^2 + lam * phi_x^4 )

    The kinetic term is the positive-semidefinite Laplacian quadratic form
    phi^T Delta phi with (Delta phi)_x = sum_mu (2 phi_x - phi_{x+mu} -
    phi_{x-mu}); constants lie in its kernel.  S is invariant under
    phi -> -phi and under the full spatial symmetry group of the torus.

    Defaults m2 = -4, lam = 6.975 are the broken-phase benchmark point
    common in the flow-based lattice literature.
    """

    L: int
    m2: float = -4.0
    lam: float = 6.975

    def __post_init__(self):
        if self.L < 2:
            raise ValueError("lattice side must be >= 2")
        if self.lam < 0:
            raise ValueError("quartic coupling must be >= 0")
        self.dim = self.L * self.L

    def energy(self, x):
        return phi4_energy(self, x)

    def grad_energy(self, x):
        return phi4_grad(self, x)


def phi4_energy(lat: Phi4Lattice, phi: np.ndarray) -> np.ndarray:
    """S(phi); phi is a flat (..., L^2) field configuration."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape[-1] != lat.dim:
        raise ValueError(f"field has {phi.shape[-1]} sites, expected {lat.dim}")
    single = phi.ndim == 1
    grid = phi.reshape(phi.shape[:-1] + (lat.L, lat.L))
    dx, dy = _phi4_terms(grid)
    kinetic = np.sum(dx * dx + dy * dy, axis=(-2, -1))
    p2 = grid * grid
    potential = np.sum(lat.m2 * p2 + lat.lam * p2 * p2, axis=(-2, -1))
    out = kinetic + potential
    return float(out) if single else out


def phi4_grad(lat: Phi4Lattice, phi: np.ndarray) -> np.ndarray:
    """dS/dphi_x = 2 (Delta phi)_x + 2 m2 phi_x + 4 lam phi_x^3."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape[-1] != lat.dim:
        raise ValueError(f"field has {phi.shape[-1]} sites, expected {lat.dim}")
    grid = phi.reshape(phi.shape[:-1] + (lat.L, lat.L))
    lap = 4.0 * grid
    lap -= np.roll(grid, 1, axis=-2) + np.roll(grid, -1, axis=-2)
    lap -= np.roll(grid, 1, axis=-1) + np.roll(grid, -1, axis=-1)
    g = 2.0 * lap + 2.0 * lat.m2 * grid + 4.0 * lat.lam * grid**3
    return g.reshape(phi.shape)
