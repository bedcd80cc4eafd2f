"""Per-layer activation capture and linear CKA between the two branches.

CKA is computed with a linear kernel and biased HSIC after column
centering:

    CKA(A, B) = ||A^T B||_F^2 / (||A^T A||_F * ||B^T B||_F)

evaluated through n x n Gram matrices so wide activation matrices stay
cheap. Activations are flattened channel x spatial per sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .dataset import SliceSample
from .diffusion import NoiseSchedule, q_sample
from .errors import DegenerateStatisticsError
from .network import MRI, PET, MultiTaskDenoiser


@dataclass(frozen=True)
class ActivationMatrix:
    data: np.ndarray  # (n_samples, n_features)
    layer_id: str
    branch: str
    stage: str  # "encoder" or "decoder"

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] < 2:
            raise ValueError("activation matrix needs >= 2 samples")
        if np.isnan(self.data).any():
            raise ValueError(f"NaN activations in {self.layer_id}/{self.branch}")


def capture_activations(
    model: MultiTaskDenoiser,
    batch: list[SliceSample],
    layer_spec: list[str],
    schedule: NoiseSchedule,
    t: int | None = None,
    seed: int = 0,
) -> list[ActivationMatrix]:
    """Run one recorded forward pass and return a matrix per layer per branch.

    All batch samples must have the MRI flag set (both branches must run).
    The forward input y_t is a deterministic mid-chain noising of the clean
    targets (timestep ``t`` defaults to T // 2, noise drawn from ``seed``).
    """
    if not model.cfg.task2_enabled:
        raise ValueError("activation capture compares branches; needs the dual-branch model")
    inactive = [s.subject_id for s in batch if not s.mri_active]
    if inactive:
        raise ValueError(f"all batch items must have mri_active=true; offending: {inactive[:3]}")
    if len(batch) < 2:
        raise ValueError("capture needs at least 2 samples")

    t = t if t is not None else max(1, schedule.T // 2)
    y0 = torch.from_numpy(np.stack([s.y0_sd for s in batch])[:, None]).float()
    x_ld = torch.from_numpy(np.stack([s.x_ld for s in batch])[:, None]).float()
    z_mri = torch.from_numpy(np.stack([s.z_mri for s in batch])[:, None]).float()
    gen = torch.Generator().manual_seed(seed)
    eps = torch.randn(y0.shape, generator=gen)
    y_t = q_sample(y0, t, eps, schedule)

    model.eval()
    with torch.no_grad(), model.record_activations(layer_spec) as rec:
        model(y_t, x_ld, z_mri, t, mri_active=True)

    out = []
    for layer_id in layer_spec:
        stage = layer_id.split(".", 1)[0]
        for branch in (PET, MRI):
            feat = rec.get(layer_id, branch)
            out.append(
                ActivationMatrix(
                    data=feat.flatten(1).double().numpy(),
                    layer_id=layer_id,
                    branch=branch,
                    stage=stage,
                )
            )
    return out


def linear_cka(a: ActivationMatrix | np.ndarray, b: ActivationMatrix | np.ndarray) -> float:
    """Linear CKA in [0, 1]; errors on mismatched samples or constant input."""
    x = a.data if isinstance(a, ActivationMatrix) else np.asarray(a, dtype=np.float64)
    y = b.data if isinstance(b, ActivationMatrix) else np.asarray(b, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"sample-count mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise ValueError("CKA needs at least 2 samples")
    xc = x - x.mean(axis=0, keepdims=True)
    yc = y - y.mean(axis=0, keepdims=True)
    k = xc @ xc.T
    l = yc @ yc.T
    denom = np.linalg.norm(k) * np.linalg.norm(l)
    if denom == 0.0:
        raise DegenerateStatisticsError("zero-variance activations: CKA undefined")
    return float(np.clip(np.sum(k * l) / denom, 0.0, 1.0))


def cka_matrix(
    acts_pet: list[ActivationMatrix], acts_mri: list[ActivationMatrix]
) -> tuple[np.ndarray, list[str], list[str]]:
    """Pairwise CKA between the two branches' layer lists, with labels."""
    if not acts_pet or not acts_mri:
        raise ValueError("activation lists must be nonempty")
    m = np.zeros((len(acts_pet), len(acts_mri)))
    for i, a in enumerate(acts_pet):
        for j, b in enumerate(acts_mri):
            m[i, j] = linear_cka(a, b)
    labels_pet = [a.layer_id for a in acts_pet]
    labels_mri = [b.layer_id for b in acts_mri]
    return m, labels_pet, labels_mri


def branch_split(
    acts: list[ActivationMatrix], stage: str | None = None
) -> tuple[list[ActivationMatrix], list[ActivationMatrix]]:
    """Split a capture result into (PET, MRI) lists, optionally per stage."""
    pet = [a for a in acts if a.branch == PET and (stage is None or a.stage == stage)]
    mri = [a for a in acts if a.branch == MRI and (stage is None or a.stage == stage)]
    return pet, mri
