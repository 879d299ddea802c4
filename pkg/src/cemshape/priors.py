"""Gaussian priors, the measurement noise model and the penalty terms.

Every prior is stored through a factor L of its covariance (Gamma = L L^T),
so that x = mean + L xi maps white coordinates xi to parameters and the
Mahalanobis penalty is |xi|^2.  Penalties are evaluated by triangular
back-substitution; no covariance is ever inverted explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.spatial.distance import cdist

C1_DEFAULT = 0.01
C2_DEFAULT = 0.001


def decay_stds(order: int, a: float, s: float) -> np.ndarray:
    """Standard deviations a_l of the 2N+1 Fourier coefficients.

    The cosine group l = 0..N gets max(l, 1)^-s * a and the sine group
    l = 1..N gets l^-s * a; the mean-radius entry is treated like l = 1.
    """
    if a <= 0 or s <= 0:
        raise ValueError("prior parameters a and s must be positive")
    l = np.arange(order + 1, dtype=float)
    cos = np.maximum(l, 1.0) ** (-s) * a
    sin = l[1:] ** (-s) * a
    return np.concatenate([cos, sin])


@dataclass(frozen=True)
class DiagonalPrior:
    """Gaussian prior with diagonal covariance diag(std^2)."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float).copy())
        object.__setattr__(self, "std", np.broadcast_to(np.asarray(self.std, dtype=float), self.mean.shape).copy())
        if np.any(self.std <= 0):
            raise ValueError("prior standard deviations must be positive")

    @property
    def size(self) -> int:
        return self.mean.size

    def whiten(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def color(self, xi) -> np.ndarray:
        return self.mean + self.std * np.asarray(xi, dtype=float)

    def apply_factor(self, A: np.ndarray) -> np.ndarray:
        """A @ L for a matrix A with `size` columns."""
        return A * self.std[None, :]

    def factor_times(self, v) -> np.ndarray:
        """L @ v."""
        return self.std * np.asarray(v, dtype=float)

    def value(self, x) -> float:
        xi = self.whiten(x)
        return float(xi @ xi)

    def gradient(self, x) -> np.ndarray:
        return 2.0 * self.whiten(x) / self.std


@dataclass(frozen=True)
class ShapePrior(DiagonalPrior):
    """Prior on boundary coefficients with algebraically decaying stds."""

    a: float = 1.0
    s: float = 1.0

    @classmethod
    def build(cls, order: int, a: float, s: float, mean) -> "ShapePrior":
        mean = np.asarray(mean, dtype=float)
        if mean.size != 2 * order + 1:
            raise ValueError(f"mean has {mean.size} entries, expected {2 * order + 1}")
        return cls(mean, decay_stds(order, a, s), a, s)


@dataclass(frozen=True)
class ElectrodePrior(DiagonalPrior):
    """Independent Gaussian prior on electrode angles, covariance tau^2 I."""

    tau: float = 1.0

    @classmethod
    def build(cls, mean, tau: float) -> "ElectrodePrior":
        if tau <= 0:
            raise ValueError("tau must be positive")
        mean = np.asarray(mean, dtype=float)
        return cls(mean, np.full(mean.size, float(tau)), float(tau))


@dataclass(frozen=True)
class SmoothnessPrior:
    """Squared-exponential smoothness prior on grid node values.

    Gamma = s^2 ((1 - nugget) C + nugget I) with
    C_ij = exp(-|x_i - x_j|^2 / (2 l^2)); the nugget keeps the matrix
    numerically positive definite and leaves the diagonal at s^2.
    """

    mean: np.ndarray
    nodes: np.ndarray
    length: float
    std: float
    nugget: float = 1e-3
    factor: np.ndarray = field(default=None, repr=False)

    @classmethod
    def build(cls, nodes, mean_value: float, length: float = 0.6, std: float | None = None, nugget: float = 1e-3):
        nodes = np.asarray(nodes, dtype=float)
        if std is None:
            std = 0.5 * mean_value
        if length <= 0 or std <= 0 or not 0 < nugget < 1:
            raise ValueError("need length > 0, std > 0 and 0 < nugget < 1")
        C = np.exp(-cdist(nodes, nodes, "sqeuclidean") / (2.0 * length**2))
        C *= 1.0 - nugget
        C[np.diag_indices_from(C)] += nugget
        L = cholesky(C, lower=True) * std
        return cls(np.full(len(nodes), float(mean_value)), nodes, float(length), float(std), nugget, L)

    @property
    def size(self) -> int:
        return self.mean.size

    def covariance(self) -> np.ndarray:
        return self.factor @ self.factor.T

    def whiten(self, x) -> np.ndarray:
        return solve_triangular(self.factor, np.asarray(x, dtype=float) - self.mean, lower=True)

    def color(self, xi) -> np.ndarray:
        return self.mean + self.factor @ np.asarray(xi, dtype=float)

    def apply_factor(self, A: np.ndarray) -> np.ndarray:
        return A @ self.factor

    def factor_times(self, v) -> np.ndarray:
        return self.factor @ np.asarray(v, dtype=float)

    def value(self, x) -> float:
        xi = self.whiten(x)
        return float(xi @ xi)

    def gradient(self, x) -> np.ndarray:
        return 2.0 * solve_triangular(self.factor, self.whiten(x), lower=True, trans="T")


@dataclass(frozen=True)
class NoiseModel:
    """Diagonal measurement noise covariance over the stacked data."""

    variance: np.ndarray
    c1: float = C1_DEFAULT
    c2: float = C2_DEFAULT

    def __post_init__(self):
        v = np.asarray(self.variance, dtype=float)
        if np.any(v <= 0):
            raise ValueError("noise variances must be positive")
        object.__setattr__(self, "variance", v)

    @classmethod
    def from_clean(cls, clean, M: int, c1: float = C1_DEFAULT, c2: float = C2_DEFAULT) -> "NoiseModel":
        return cls(noise_cov(clean, M, c1, c2), c1, c2)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)

    def misfit(self, residual) -> float:
        r = np.asarray(residual, dtype=float)
        return float(np.sum(r * r / self.variance))


def noise_cov(clean, M: int, c1: float = C1_DEFAULT, c2: float = C2_DEFAULT) -> np.ndarray:
    """Per-entry variances c1^2 |U|^2 + c2^2 (max spread within the drive)^2.

    `clean` is drive-major: entry j*M + m is electrode m under drive j.
    """
    U = np.asarray(clean, dtype=float).reshape(-1, M)
    spread = U.max(axis=1) - U.min(axis=1)
    return (c1**2 * U**2 + (c2 * spread)[:, None] ** 2).ravel()


@dataclass(frozen=True)
class Priors:
    """Prior blocks keyed like the parameter blocks; None means fixed."""

    sigma: SmoothnessPrior | DiagonalPrior | None = None
    alpha: ShapePrior | None = None
    theta: ElectrodePrior | None = None

    def blocks(self):
        return [(k, getattr(self, k)) for k in ("sigma", "alpha", "theta") if getattr(self, k) is not None]


def regularizer(state: dict, priors: Priors):
    """Sum of the Mahalanobis penalties and their gradients.

    Parameters
    ----------
    state : mapping with keys among "sigma", "alpha", "theta".
    priors : prior blocks; blocks that are None contribute nothing.

    Returns
    -------
    value : float
    grads : dict of gradients, one per active block.
    """
    value = 0.0
    grads = {}
    for key, prior in priors.blocks():
        x = state[key]
        value += prior.value(x)
        grads[key] = prior.gradient(x)
    return value, grads
