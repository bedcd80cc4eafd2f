"""Dataset assembly: slicing phantom volumes, manifests, and array round-trips.

A dataset directory holds one ``.npy`` file per slice array (``.npy``
carries the dtype/shape header, so round-trips are bit-exact), a JSONL
manifest with one record per slice sample, and a ``meta.json`` with the
generation parameters.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError
from .phantom import PhantomVolume, generate_phantom
from .tomo import simulate_low_dose

log = logging.getLogger(__name__)

ORIENTATIONS = ("axial", "coronal", "sagittal")
_ORIENTATION_AXIS = {"axial": 0, "coronal": 1, "sagittal": 2}

MANIFEST_NAME = "manifest.jsonl"
META_NAME = "meta.json"


@dataclass
class SliceSample:
    """One training/inference unit: low-dose input, MRI, and clean target."""

    x_ld: np.ndarray
    z_mri: np.ndarray
    y0_sd: np.ndarray
    orientation: str
    subject_id: str
    slice_index: int
    mri_active: bool = True


@dataclass(frozen=True)
class DataConfig:
    subjects: int = 20
    shape: tuple[int, int, int] = (64, 64, 64)
    train_fraction: float = 0.8
    drf: float = 100.0
    total_counts: int = 500_000
    n_angles: int = 60
    mlem_iters: int = 30
    orientations: tuple[str, ...] = ("axial",)
    slices_per_subject: int = 16
    lesion_probability: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.subjects < 1:
            raise ValueError("subjects must be positive")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError("train_fraction must be in (0, 1]")
        unknown = set(self.orientations) - set(ORIENTATIONS)
        if unknown:
            raise ValueError(f"unknown orientations {sorted(unknown)}")
        object.__setattr__(self, "shape", tuple(self.shape))
        object.__setattr__(self, "orientations", tuple(self.orientations))


def orientation_axis(orientation: str) -> int:
    if orientation not in _ORIENTATION_AXIS:
        raise ValueError(f"unknown orientation {orientation!r}")
    return _ORIENTATION_AXIS[orientation]


def normalize_slice(a: np.ndarray) -> np.ndarray:
    """Min-max map to [0, 1]; constant slices collapse to zero."""
    a = np.asarray(a, dtype=np.float32)
    lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def extract_slices(vol: PhantomVolume, ld_vol: np.ndarray, orientation: str) -> list[SliceSample]:
    """Cut one normalised SliceSample per index along the orientation axis.

    Slices whose clean target is constant (empty background planes) are
    dropped and logged.
    """
    if ld_vol.shape != vol.sd_pet.shape:
        raise ValueError(f"volume shape mismatch: {ld_vol.shape} vs {vol.sd_pet.shape}")
    axis = orientation_axis(orientation)
    subject_id = f"s{vol.seed:04d}"
    samples = []
    dropped = []
    for idx in range(vol.sd_pet.shape[axis]):
        sd = np.take(vol.sd_pet, idx, axis=axis)
        if sd.max() <= sd.min():
            dropped.append(idx)
            continue
        samples.append(
            SliceSample(
                x_ld=normalize_slice(np.take(ld_vol, idx, axis=axis)),
                z_mri=normalize_slice(np.take(vol.mri, idx, axis=axis)),
                y0_sd=normalize_slice(sd),
                orientation=orientation,
                subject_id=subject_id,
                slice_index=idx,
            )
        )
    if dropped:
        log.info("dropped %d constant %s slices of %s", len(dropped), orientation, subject_id)
    return samples


def simulate_subject(cfg: DataConfig, subject_index: int) -> tuple[PhantomVolume, np.ndarray]:
    """Phantom volume plus its axially-acquired low-dose counterpart."""
    subject_seed = cfg.seed * 10_000 + subject_index
    vol = generate_phantom(subject_seed, cfg.shape, cfg.lesion_probability)
    ld = np.zeros_like(vol.sd_pet)
    for k in range(cfg.shape[0]):
        if vol.sd_pet[k].sum() == 0:
            continue
        ld[k] = simulate_low_dose(
            vol.sd_pet[k],
            drf=cfg.drf,
            total_counts=cfg.total_counts,
            seed=subject_seed * 1_000 + k,
            mlem_iters=cfg.mlem_iters,
            n_angles=cfg.n_angles,
        )
    return vol, ld


def _subsample(indices: list[int], count: int) -> list[int]:
    if count >= len(indices):
        return indices
    picks = np.unique(np.linspace(0, len(indices) - 1, count).round().astype(int))
    return [indices[i] for i in picks]


def build_dataset(cfg: DataConfig, out_dir: str | Path) -> Path:
    """Generate a full phantom dataset directory with manifest and meta."""
    out = Path(out_dir)
    (out / "slices").mkdir(parents=True, exist_ok=True)
    n_train = max(1, round(cfg.subjects * cfg.train_fraction))
    records = []
    for i in range(cfg.subjects):
        vol, ld = simulate_subject(cfg, i)
        split = "train" if i < n_train else "test"
        for orientation in cfg.orientations:
            samples = extract_slices(vol, ld, orientation)
            keep = _subsample(list(range(len(samples))), cfg.slices_per_subject)
            for j in keep:
                s = samples[j]
                rel = Path("slices") / s.subject_id / orientation
                (out / rel).mkdir(parents=True, exist_ok=True)
                paths = {}
                for key, arr in (("x_ld", s.x_ld), ("z_mri", s.z_mri), ("y0_sd", s.y0_sd)):
                    p = rel / f"{s.slice_index:04d}_{key}.npy"
                    np.save(out / p, arr)
                    paths[key] = str(p)
                records.append(
                    {
                        "subject": s.subject_id,
                        "orientation": orientation,
                        "index": s.slice_index,
                        "split": split,
                        "mri_active": True,
                        "seed": vol.seed,
                        **paths,
                    }
                )
        log.info("simulated subject %d/%d", i + 1, cfg.subjects)

    with open(out / MANIFEST_NAME, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    meta = {"config": _data_config_dict(cfg), "n_records": len(records)}
    with open(out / META_NAME, "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return out


def _data_config_dict(cfg: DataConfig) -> dict:
    return {
        "subjects": cfg.subjects,
        "shape": list(cfg.shape),
        "train_fraction": cfg.train_fraction,
        "drf": cfg.drf,
        "total_counts": cfg.total_counts,
        "n_angles": cfg.n_angles,
        "mlem_iters": cfg.mlem_iters,
        "orientations": list(cfg.orientations),
        "slices_per_subject": cfg.slices_per_subject,
        "lesion_probability": cfg.lesion_probability,
        "seed": cfg.seed,
    }


def read_manifest(dataset_dir: str | Path) -> list[dict]:
    path = Path(dataset_dir) / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"no manifest at {path}")
    records = []
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DataError(f"malformed manifest line {line_no}: {e}") from e
    return records


def load_samples(
    dataset_dir: str | Path,
    split: str | None = None,
    load_mri: bool = True,
) -> list[SliceSample]:
    """Materialise SliceSamples from a dataset directory.

    With ``load_mri=False`` the MRI arrays are never read from disk; a NaN
    sentinel of matching shape is substituted and the samples are flagged
    inactive.
    """
    root = Path(dataset_dir)
    samples = []
    for rec in read_manifest(root):
        if split is not None and rec["split"] != split:
            continue
        x_ld = np.load(root / rec["x_ld"])
        y0_sd = np.load(root / rec["y0_sd"])
        if load_mri:
            z_mri = np.load(root / rec["z_mri"])
        else:
            z_mri = np.full_like(x_ld, np.nan)
        samples.append(
            SliceSample(
                x_ld=x_ld,
                z_mri=z_mri,
                y0_sd=y0_sd,
                orientation=rec["orientation"],
                subject_id=rec["subject"],
                slice_index=rec["index"],
                mri_active=load_mri and rec.get("mri_active", True),
            )
        )
    if not samples:
        raise DataError(f"no samples found in {root} (split={split!r})")
    return samples
