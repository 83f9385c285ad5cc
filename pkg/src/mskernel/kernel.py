"""Compactly supported Wendland kernels and their level-scaled versions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_KERNEL = "wendland-3-1"


def _ensure_nonnegative(r: np.ndarray) -> None:
    if np.any(r < 0):
        raise ValueError("radial argument must be nonnegative")


def _phi30(r):
    return np.maximum(1.0 - r, 0.0) ** 2


def _phi31(r):
    return np.maximum(1.0 - r, 0.0) ** 4 * (4.0 * r + 1.0)


def _phi32(r):
    return np.maximum(1.0 - r, 0.0) ** 6 * (35.0 * r**2 + 18.0 * r + 3.0) / 3.0


_PROFILES = {
    (3, 0): _phi30,
    (3, 1): _phi31,
    (3, 2): _phi32,
}


@dataclass(frozen=True)
class WendlandKernel:
    """Radial profile ``phi_{(d,k)}`` supported on ``[0, 1]``.

    The profile is positive definite on R^d for ``d <= d_param`` and its native
    space is the Sobolev space of order ``tau = (d_param + 2k + 1) / 2``.
    """

    d_param: int = 3
    k_param: int = 1

    def __post_init__(self):
        if (self.d_param, self.k_param) not in _PROFILES:
            raise ValueError(f"unsupported Wendland parameters ({self.d_param}, {self.k_param})")

    @property
    def name(self) -> str:
        return f"wendland-{self.d_param}-{self.k_param}"

    @property
    def tau(self) -> float:
        return (self.d_param + 2 * self.k_param + 1) / 2

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        _ensure_nonnegative(r)
        out = _PROFILES[(self.d_param, self.k_param)](r)
        # exact zero outside the support, independent of round-off in the polynomial
        return np.where(r >= 1.0, 0.0, out)

    def scaled(self, delta: float, d: int) -> "ScaledKernel":
        return ScaledKernel(self, delta, d)


@dataclass(frozen=True)
class ScaledKernel:
    """``x -> delta**-d * phi(|x| / delta)``, support in the closed ball of radius delta."""

    base: WendlandKernel
    delta: float
    d: int

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"d must be a positive integer, got {self.d}")
        if self.d > self.base.d_param:
            raise ValueError(f"{self.base.name} is not positive definite in dimension {self.d}")

    @property
    def prefactor(self) -> float:
        return self.delta ** (-self.d)

    def radial(self, dist):
        """Kernel value as a function of distance."""
        return self.prefactor * self.base(np.asarray(dist, dtype=float) / self.delta)

    def __call__(self, x, y):
        diff = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
        return self.radial(np.linalg.norm(np.atleast_1d(diff), axis=-1))

    def gram(self, X, Y=None) -> np.ndarray:
        """Dense kernel matrix; meant for small reference computations."""
        X = np.atleast_2d(X)
        Y = X if Y is None else np.atleast_2d(Y)
        dist = np.linalg.norm(X[:, None, :] - Y[None, :, :], axis=-1)
        return self.radial(dist)


def eval_phi31(r):
    """``(1 - r)_+^4 (4 r + 1)``; raises on negative arguments."""
    out = WendlandKernel(3, 1)(r)
    return float(out) if np.ndim(out) == 0 else out


def eval_scaled(kernel: ScaledKernel, x, y):
    out = kernel(x, y)
    return float(out) if np.ndim(out) == 0 else out


def get_kernel(name: str = DEFAULT_KERNEL) -> WendlandKernel:
    """Look up a profile by its config name, e.g. ``"wendland-3-1"``."""
    parts = name.lower().split("-")
    if len(parts) != 3 or parts[0] != "wendland":
        raise ValueError(f"unknown kernel {name!r}")
    try:
        return WendlandKernel(int(parts[1]), int(parts[2]))
    except ValueError as exc:
        raise ValueError(f"unknown kernel {name!r}") from exc


KERNEL_NAMES = tuple(f"wendland-{d}-{k}" for d, k in _PROFILES)
