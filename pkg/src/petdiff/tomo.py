"""Projection-domain dose simulation: Radon transform, MLEM, Poisson thinning.

The projector is pixel-driven with linear interpolation onto detector bins,
and the backprojector is its exact adjoint, so the MLEM updates use a
matched forward/backprojection pair. Detector coverage exceeds the image
diagonal, which makes the transform mass-conserving up to float rounding.
"""

from __future__ import annotations

import math
import warnings
from functools import lru_cache

import numpy as np


class _ProjectorGeometry:
    """Precomputed bin indices/weights for an (image size, angle count) pair."""

    def __init__(self, size: int, n_angles: int):
        self.size = size
        self.n_angles = n_angles
        self.n_bins = int(math.ceil(size * math.sqrt(2.0))) + 3

        centers = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
        yy, xx = np.meshgrid(centers, centers, indexing="ij")
        thetas = np.arange(n_angles, dtype=np.float64) * math.pi / n_angles
        # t-coordinate of every pixel for every angle, shifted to bin space
        t = (
            xx.ravel()[None, :] * np.cos(thetas)[:, None]
            + yy.ravel()[None, :] * np.sin(thetas)[:, None]
            + (self.n_bins - 1) / 2.0
        )
        self.lo = np.floor(t).astype(np.int64)
        self.w_hi = t - self.lo
        self.w_lo = 1.0 - self.w_hi
        # flat indices into an (n_angles, n_bins) sinogram
        offset = (np.arange(n_angles, dtype=np.int64) * self.n_bins)[:, None]
        self.flat_lo = (self.lo + offset).ravel()
        self.flat_hi = (self.lo + 1 + offset).ravel()


@lru_cache(maxsize=32)
def _geometry(size: int, n_angles: int) -> _ProjectorGeometry:
    return _ProjectorGeometry(size, n_angles)


def forward_project(slice_2d: np.ndarray, n_angles: int) -> np.ndarray:
    """Discrete Radon transform over n_angles uniform angles in [0, pi).

    Returns a sinogram of shape (n_angles, n_bins).
    """
    a = np.asarray(slice_2d, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square 2D slice, got shape {a.shape}")
    if n_angles < 1:
        raise ValueError("n_angles must be >= 1")
    if np.any(a < 0):
        raise ValueError("negative input values are not a valid activity image")

    g = _geometry(a.shape[0], n_angles)
    vals = np.broadcast_to(a.ravel(), (n_angles, a.size)).ravel()
    sino = np.bincount(g.flat_lo, weights=vals * g.w_lo.ravel(), minlength=n_angles * g.n_bins)
    sino += np.bincount(g.flat_hi, weights=vals * g.w_hi.ravel(), minlength=n_angles * g.n_bins)
    return sino.reshape(n_angles, g.n_bins)


def back_project(sinogram: np.ndarray, size: int) -> np.ndarray:
    """Exact adjoint of :func:`forward_project` for the same geometry."""
    s = np.asarray(sinogram, dtype=np.float64)
    if s.ndim != 2:
        raise ValueError("sinogram must be 2D (n_angles, n_bins)")
    n_angles = s.shape[0]
    g = _geometry(size, n_angles)
    if s.shape[1] != g.n_bins:
        raise ValueError(f"sinogram has {s.shape[1]} bins, geometry expects {g.n_bins}")
    flat = s.ravel()
    img = (flat[g.flat_lo] * g.w_lo.ravel() + flat[g.flat_hi] * g.w_hi.ravel()).reshape(
        n_angles, size * size
    )
    return img.sum(axis=0).reshape(size, size)


def mlem(counts: np.ndarray, size: int, n_iters: int) -> np.ndarray:
    """Maximum-likelihood EM reconstruction with the matched projector pair.

    Multiplicative updates keep the estimate nonnegative at every iteration;
    pixels with zero sensitivity stay zero.
    """
    y = np.asarray(counts, dtype=np.float64)
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    n_angles = y.shape[0]
    sens = back_project(np.ones_like(y), size)
    ok = sens > 0
    x = np.where(ok, 1.0, 0.0)
    for _ in range(n_iters):
        proj = forward_project(x, n_angles)
        ratio = np.divide(y, proj, out=np.zeros_like(y), where=proj > 0)
        update = back_project(ratio, size)
        x = np.where(ok, x * update / np.where(ok, sens, 1.0), 0.0)
    return x


def simulate_low_dose(
    sd_slice: np.ndarray,
    drf: float,
    total_counts: int,
    seed: int,
    mlem_iters: int,
    n_angles: int = 60,
) -> np.ndarray:
    """Simulate a low-dose acquisition of a standard-dose slice.

    The slice is forward-projected, scaled so the expected sinogram total is
    total_counts / drf, Poisson-resampled, reconstructed with MLEM, and
    min-max renormalised to [0, 1]. Deterministic for a fixed seed.
    """
    a = np.asarray(sd_slice, dtype=np.float64)
    if drf < 1:
        raise ValueError("dose reduction factor must be >= 1")
    if total_counts < 1:
        raise ValueError("total_counts must be positive")
    if np.any(a < 0) or np.any(a > 1):
        raise ValueError("sd_slice values must lie in [0, 1]")

    sino = forward_project(a, n_angles)
    mass = sino.sum()
    if mass == 0:
        warnings.warn("zero-activity slice; returning an all-zero reconstruction")
        return np.zeros_like(a, dtype=np.float32)

    lam = sino * ((total_counts / drf) / mass)
    counts = np.random.default_rng(seed).poisson(lam).astype(np.float64)
    recon = mlem(counts, a.shape[0], mlem_iters)

    lo, hi = recon.min(), recon.max()
    if hi <= lo:
        warnings.warn("degenerate reconstruction; returning an all-zero slice")
        return np.zeros_like(a, dtype=np.float32)
    return ((recon - lo) / (hi - lo)).astype(np.float32)
