"""Doughnut-shaped convolution kernels and the 40-plane per-pixel feature cube."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .cube import N_BANDS, SpectralCube

DEFAULT_ALPHA = 50
DEFAULT_RINGS: tuple[tuple[float, float], ...] = (
    (4.0, 0.781),
    (8.0, 1.56),
    (16.0, 3.13),
    (32.0, 6.25),
)
N_FEATURES = N_BANDS + N_BANDS * len(DEFAULT_RINGS)


@dataclass(frozen=True)
class RingKernel:
    alpha: int
    beta: float
    sigma: float
    values: np.ndarray

    @property
    def size(self) -> int:
        return 2 * self.alpha + 1


def ring_profile(r, beta: float, sigma: float):
    """Unnormalized radial profile ``exp(-(r - beta)**2 / sigma**2)``."""
    return np.exp(-((np.asarray(r, dtype=np.float64) - beta) ** 2) / sigma**2)


def radius_grid(alpha: int) -> np.ndarray:
    y, x = np.mgrid[0 : 2 * alpha + 1, 0 : 2 * alpha + 1]
    return np.sqrt((x - alpha) ** 2.0 + (y - alpha) ** 2.0)


def make_ring_kernel(alpha: int, beta: float, sigma: float, normalize: bool = True) -> RingKernel:
    """Ring of radius ``beta`` with Gaussian radial falloff on a (2*alpha+1)^2 grid.

    The profile ``exp(-(r-beta)^2/sigma^2)`` has radial standard deviation
    ``sigma/sqrt(2)``; the ring must fit three of those inside ``alpha``.
    With ``normalize`` the kernel is scaled to unit sum.
    """
    if int(alpha) != alpha or alpha < 1:
        raise ValueError(f"alpha must be an integer >= 1, got {alpha}")
    if beta <= 0 or sigma <= 0:
        raise ValueError(f"beta and sigma must be positive, got beta={beta}, sigma={sigma}")
    alpha = int(alpha)
    if beta + 3.0 * sigma / np.sqrt(2.0) > alpha:
        raise ValueError(f"ring beta={beta}, sigma={sigma} exceeds kernel support alpha={alpha}")
    values = ring_profile(radius_grid(alpha), beta, sigma)
    if normalize:
        values = values / values.sum()
    values.flags.writeable = False
    return RingKernel(alpha, float(beta), float(sigma), values)


def make_default_bank(alpha: int = DEFAULT_ALPHA) -> list[RingKernel]:
    return [make_ring_kernel(alpha, beta, sigma) for beta, sigma in DEFAULT_RINGS]


def make_bank(params, alpha: int = DEFAULT_ALPHA) -> list[RingKernel]:
    return [make_ring_kernel(alpha, float(b), float(s)) for b, s in params]


def azimuthal_mean(values: np.ndarray) -> np.ndarray:
    """Mean kernel value per integer radius bin (``round(r)``), from the center outwards."""
    alpha = values.shape[0] // 2
    bins = np.rint(radius_grid(alpha)).astype(int).ravel()
    sums = np.bincount(bins, weights=values.ravel())
    counts = np.bincount(bins)
    return sums / counts


def peak_radius(kernel: RingKernel) -> int:
    """Radius bin holding the largest azimuthal mean, restricted to r <= alpha."""
    profile = azimuthal_mean(kernel.values)[: kernel.alpha + 1]
    return int(np.argmax(profile))


def convolve_plane(plane: np.ndarray, kernel: RingKernel | np.ndarray) -> np.ndarray:
    """Same-size convolution with mirrored (edge-inclusive) border padding.

    Computed with FFTs on the padded plane; equivalent to the direct sum.
    """
    values = kernel.values if isinstance(kernel, RingKernel) else np.asarray(kernel, dtype=np.float64)
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2 or plane.size == 0:
        raise ValueError("plane must be a non-empty 2-D array")
    ky, kx = values.shape
    py, px = ky // 2, kx // 2
    padded = np.pad(plane, ((py, ky - 1 - py), (px, kx - 1 - px)), mode="symmetric")
    return fftconvolve(padded, values, mode="valid")


@dataclass(frozen=True)
class FeatureCube:
    """``(n_features, H, W)`` planes: raw bands, then band-major/kernel-minor ring responses."""

    features: np.ndarray
    n_kernels: int = len(DEFAULT_RINGS)

    @property
    def height(self) -> int:
        return self.features.shape[1]

    @property
    def width(self) -> int:
        return self.features.shape[2]

    def pixel_matrix(self) -> np.ndarray:
        """Features as ``(H*W, n_features)`` rows in row-major pixel order."""
        return self.features.reshape(self.features.shape[0], -1).T


def feature_index(band: int, kernel: int, n_kernels: int = len(DEFAULT_RINGS)) -> int:
    return N_BANDS + n_kernels * band + kernel


def feature_names(bank: list[RingKernel] | None = None) -> list[str]:
    from .cube import WAVELENGTHS

    bank = make_default_bank() if bank is None else bank
    names = [f"{nm}nm" for nm in WAVELENGTHS]
    for nm in WAVELENGTHS:
        names += [f"{nm}nm*ring{k.beta:g}" for k in bank]
    return names


def build_feature_cube(cube: SpectralCube, bank: list[RingKernel] | None = None) -> FeatureCube:
    if not cube.normalized:
        raise ValueError("feature extraction needs a normalized cube")
    bank = make_default_bank() if bank is None else bank
    out = np.empty((N_BANDS * (1 + len(bank)), cube.height, cube.width))
    out[:N_BANDS] = cube.planes
    for b in range(N_BANDS):
        for k, kernel in enumerate(bank):
            out[feature_index(b, k, len(bank))] = convolve_plane(cube.planes[b], kernel)
    return FeatureCube(out, len(bank))
