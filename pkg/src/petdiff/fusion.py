"""Multi-orientation volume reassembly and wavelet-domain fusion.

Per-orientation slice stacks are reoriented onto a canonical (depth, height,
width) grid; the three volumes are then fused by transforming each with an
orthogonal 3D Haar wavelet, averaging coefficients elementwise, and
inverting. Because the transform is orthogonal and averaging is linear this
equals the plain voxelwise mean up to float rounding, which doubles as the
correctness oracle. Non-dyadic shapes are symmetrically padded to the next
power of two and cropped after the inverse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import orientation_axis

_SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class OrientedVolume:
    data: np.ndarray
    orientation: str
    subject_id: str


def stack_orientation(
    slices: list[np.ndarray], orientation: str, subject_id: str = ""
) -> OrientedVolume:
    """Stack 2D predictions along the orientation axis in canonical order."""
    if not slices:
        raise ValueError("slice list must be nonempty")
    shapes = {s.shape for s in slices}
    if len(shapes) > 1:
        raise ValueError(f"heterogeneous slice shapes: {sorted(shapes)}")
    data = np.stack(slices, axis=orientation_axis(orientation))
    return OrientedVolume(data=np.asarray(data, dtype=np.float64), orientation=orientation, subject_id=subject_id)


def unstack_orientation(vol: OrientedVolume) -> list[np.ndarray]:
    axis = orientation_axis(vol.orientation)
    return [np.take(vol.data, i, axis=axis) for i in range(vol.data.shape[axis])]


def _haar_axis(a: np.ndarray, axis: int, inverse: bool) -> np.ndarray:
    a = np.moveaxis(a, axis, 0)
    n = a.shape[0]
    out = np.empty_like(a)
    if not inverse:
        lo, hi = a[0:n:2], a[1:n:2]
        out[: n // 2] = (lo + hi) / _SQRT2
        out[n // 2 :] = (lo - hi) / _SQRT2
    else:
        lo, hi = a[: n // 2], a[n // 2 :]
        out[0:n:2] = (lo + hi) / _SQRT2
        out[1:n:2] = (lo - hi) / _SQRT2
    return np.moveaxis(out, 0, axis)


def haar_decompose(vol: np.ndarray, depth: int) -> np.ndarray:
    """Multi-level separable 3D Haar transform (orthogonal)."""
    v = np.asarray(vol, dtype=np.float64).copy()
    _check_dyadic(v.shape, depth)
    size = list(v.shape)
    for _ in range(depth):
        block = v[: size[0], : size[1], : size[2]]
        for axis in range(3):
            block = _haar_axis(block, axis, inverse=False)
        v[: size[0], : size[1], : size[2]] = block
        size = [s // 2 for s in size]
    return v


def haar_reconstruct(coeffs: np.ndarray, depth: int) -> np.ndarray:
    """Inverse of :func:`haar_decompose`."""
    v = np.asarray(coeffs, dtype=np.float64).copy()
    _check_dyadic(v.shape, depth)
    sizes = [tuple(s // 2**k for s in v.shape) for k in range(depth)]
    for size in reversed(sizes):
        block = v[: size[0], : size[1], : size[2]]
        for axis in range(3):
            block = _haar_axis(block, axis, inverse=True)
        v[: size[0], : size[1], : size[2]] = block
    return v


def _check_dyadic(shape, depth: int) -> None:
    if depth < 1:
        raise ValueError("depth must be >= 1")
    for s in shape:
        if s % (2**depth) != 0:
            raise ValueError(f"shape {shape} not divisible by 2^{depth}")


def default_depth(shape) -> int:
    return max(1, int(math.floor(math.log2(min(shape)))) - 1)


def _pad_to_dyadic(v: np.ndarray, depth: int):
    target = [max(2**depth, 2 ** math.ceil(math.log2(s))) for s in v.shape]
    pads = [(0, t - s) for t, s in zip(target, v.shape)]
    if all(p == (0, 0) for p in pads):
        return v, pads
    return np.pad(v, pads, mode="symmetric"), pads


def fuse_volumes(vols: list[OrientedVolume]) -> np.ndarray:
    """Average the orientation volumes in the Haar coefficient domain.

    Accepts either the three orientation volumes or a single volume (the
    identity case). Output is clipped to [0, 1].
    """
    if len(vols) not in (1, 3):
        raise ValueError(f"expected 1 or 3 volumes, got {len(vols)}")
    shapes = {v.data.shape for v in vols}
    if len(shapes) > 1:
        raise ValueError(f"canonical volume shapes differ: {sorted(shapes)}")
    shape = vols[0].data.shape

    depth = default_depth(shape)
    padded0, pads = _pad_to_dyadic(vols[0].data, depth)
    depth = min(depth, default_depth(padded0.shape))

    acc = np.zeros_like(padded0)
    for v in vols:
        padded, _ = _pad_to_dyadic(v.data, depth)
        acc += haar_decompose(padded, depth)
    fused = haar_reconstruct(acc / len(vols), depth)
    fused = fused[: shape[0], : shape[1], : shape[2]]
    return np.clip(fused, 0.0, 1.0)
