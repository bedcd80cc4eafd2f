"""Seeded brain-like phantom volumes with paired PET activity and MRI contrast.

Geometry is built from jittered ellipsoids: a skull shell, a CSF gap, a
cortical ribbon wrapping white matter, deep grey nuclei, and ventricles.
Both modalities share the geometry but render it with different tissue
values; PET tissue contrast additionally varies per subject (uptake levels
are seed-drawn), which the MRI deliberately does not encode. Focal
hypometabolic lesions, when present, reduce PET uptake only and leave the
MRI untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter


@dataclass(frozen=True)
class PhantomVolume:
    """Paired standard-dose PET and MRI volumes in [0, 1] on a shared grid."""

    sd_pet: np.ndarray
    mri: np.ndarray
    shape: tuple[int, int, int]
    seed: int


@dataclass(frozen=True)
class PhantomRegions:
    """Boolean tissue masks plus the seed-drawn uptake/contrast values."""

    masks: dict[str, np.ndarray]
    pet_values: dict[str, float]
    mri_values: dict[str, float]
    has_lesion: bool


def _ellipsoid(grids, center, radii) -> np.ndarray:
    acc = np.zeros_like(grids[0])
    for g, c, r in zip(grids, center, radii):
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


def phantom_regions(
    seed: int, shape: tuple[int, int, int], lesion_probability: float = 0.5
) -> PhantomRegions:
    """Deterministic tissue-region layout for a subject seed."""
    if len(shape) != 3 or any(d < 16 for d in shape):
        raise ValueError(f"degenerate shape {shape}; each dim must be >= 16")
    rng = np.random.default_rng(seed)

    axes = [np.linspace(-1.0, 1.0, d) for d in shape]
    grids = np.meshgrid(*axes, indexing="ij", sparse=True)

    center = rng.uniform(-0.04, 0.04, size=3)
    head_r = np.array([0.90, 0.86, 0.80]) * rng.uniform(0.96, 1.04, size=3)
    head = _ellipsoid(grids, center, head_r)
    inner = _ellipsoid(grids, center, head_r * 0.91)
    brain = _ellipsoid(grids, center, head_r * 0.84)
    wm = _ellipsoid(grids, center, head_r * np.array([0.62, 0.68, 0.62]))

    masks = {
        "head": head,
        "skull": head & ~inner,
        "csf": inner & ~brain,
        "white_matter": wm.copy(),
        "cortex": brain & ~wm,
    }

    vent_r = np.array([0.24, 0.10, 0.085]) * rng.uniform(0.9, 1.1)
    vent_off = rng.uniform(0.16, 0.22)
    vent = _ellipsoid(grids, center + [0.0, 0.05, vent_off], vent_r) | _ellipsoid(
        grids, center + [0.0, 0.05, -vent_off], vent_r
    )
    masks["ventricles"] = vent & wm

    nuclei = np.zeros(shape, dtype=bool)
    for _ in range(int(rng.integers(2, 4))):
        off = rng.uniform([-0.1, 0.05, 0.25], [0.1, 0.25, 0.38])
        r = rng.uniform(0.07, 0.11)
        nuclei |= _ellipsoid(grids, center + off, [r, r, r])
        nuclei |= _ellipsoid(grids, center + off * [1, 1, -1], [r, r, r])
    masks["nuclei"] = nuclei & wm & ~masks["ventricles"]

    lesion = np.zeros(shape, dtype=bool)
    has_lesion = bool(rng.random() < lesion_probability)
    if has_lesion:
        cortex_idx = np.argwhere(masks["cortex"])
        for _ in range(int(rng.integers(1, 4))):
            voxel = cortex_idx[rng.integers(len(cortex_idx))]
            c = [axes[i][voxel[i]] for i in range(3)]
            r = rng.uniform(0.10, 0.16)
            lesion |= _ellipsoid(grids, c, [r, r, r])
    masks["lesion"] = lesion & (masks["cortex"] | masks["white_matter"])
    has_lesion = has_lesion and bool(masks["lesion"].any())

    # Subject-specific PET uptake: tissue contrast varies per seed, so
    # anatomy alone never determines activity.
    pet_values = {
        "skull": rng.uniform(0.04, 0.09),
        "csf": rng.uniform(0.02, 0.05),
        "white_matter": rng.uniform(0.25, 0.42),
        "cortex": rng.uniform(0.70, 0.92),
        "nuclei": rng.uniform(0.55, 0.78),
        "ventricles": rng.uniform(0.02, 0.06),
    }
    pet_values["lesion"] = pet_values["cortex"] * rng.uniform(0.35, 0.55)
    # MRI contrast is a fixed tissue rendering with mild per-subject gain.
    g = rng.uniform(0.95, 1.05)
    mri_values = {
        "skull": 0.12 * g,
        "csf": 0.08 * g,
        "white_matter": 0.85 * g,
        "cortex": 0.55 * g,
        "nuclei": 0.62 * g,
        "ventricles": 0.07 * g,
        "lesion": None,  # hypometabolic lesions are invisible on T1
    }
    return PhantomRegions(masks=masks, pet_values=pet_values, mri_values=mri_values, has_lesion=has_lesion)


def generate_phantom(
    seed: int, shape: tuple[int, int, int], lesion_probability: float = 0.5
) -> PhantomVolume:
    """Render the seeded region layout into paired PET/MRI volumes."""
    regions = phantom_regions(seed, shape, lesion_probability)
    masks = regions.masks

    pet = np.zeros(shape, dtype=np.float64)
    mri = np.zeros(shape, dtype=np.float64)
    paint_order = ["skull", "csf", "cortex", "white_matter", "nuclei", "ventricles", "lesion"]
    for name in paint_order:
        if regions.pet_values.get(name) is not None:
            pet[masks[name]] = regions.pet_values[name]
        if regions.mri_values.get(name) is not None:
            mri[masks[name]] = regions.mri_values[name]

    pet = gaussian_filter(pet, sigma=0.8)
    mri = gaussian_filter(mri, sigma=0.8)
    head = masks["head"]
    pet[~head] = 0.0
    mri[~head] = 0.0
    return PhantomVolume(
        sd_pet=np.clip(pet, 0.0, 1.0).astype(np.float32),
        mri=np.clip(mri, 0.0, 1.0).astype(np.float32),
        shape=tuple(shape),
        seed=seed,
    )
