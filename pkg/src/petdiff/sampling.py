"""Reverse-diffusion sampling with branch ensembling and respaced chains.

Sampling runs a single shared trajectory: at every step the two branch
estimates are averaged (when the MRI branch is active), the per-branch
variance logits are combined so the resulting log-variance is the log-space
mean of the branch log-variances, and one reverse step is taken. Respacing
retains an evenly spaced subsequence of timesteps ending at T, preserving
the original cumulative signal fractions at the retained steps exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .diffusion import NoiseSchedule, ReverseStepInput, _schedule_from_arrays, reverse_step
from .errors import NumericalError
from .network import MultiTaskDenoiser, PredictionPair


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 1000
    seed: int = 0
    mri_active: bool = True
    clip_x0: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be positive")


def ensemble(pair: PredictionPair) -> torch.Tensor:
    """Elementwise mean of the two branch estimates."""
    if not pair.mri_active:
        raise ValueError("ensemble requires an active MRI branch; use the PET output directly")
    return 0.5 * (pair.y0_hat_pet + pair.y0_hat_mri)


def combine_variance_logits(v_pet: torch.Tensor, v_mri: torch.Tensor) -> torch.Tensor:
    """Logits whose interpolated log-variance is the mean of the branches'.

    Because the log-variance is linear in sigmoid(v), averaging the sigmoid
    fractions averages the log-variances, keeping the result pinned inside
    [btilde_t, beta_t].
    """
    frac = 0.5 * (torch.sigmoid(v_pet) + torch.sigmoid(v_mri))
    frac = frac.clamp(1e-7, 1.0 - 1e-7)
    return torch.log(frac) - torch.log1p(-frac)


def respace_schedule(schedule: NoiseSchedule, steps: int) -> NoiseSchedule:
    """Subsample the chain to ``steps`` timesteps ending at T.

    The retained steps keep their original alpha_bar values exactly; betas
    are rederived from consecutive retained ratios.
    """
    T = schedule.T
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}]")
    retained = np.round(np.arange(1, steps + 1) * (T / steps)).astype(np.int64)
    retained = np.clip(retained, 1, T)
    if len(np.unique(retained)) != steps:  # spacing >= 1 makes collisions impossible
        raise RuntimeError("respacing produced duplicate timesteps")
    idx = retained - 1

    abar = schedule.alpha_bars[idx]
    abar_prev = np.concatenate(([1.0], abar[:-1]))
    betas = 1.0 - abar / abar_prev
    return _schedule_from_arrays(betas, abar, schedule.kind, schedule.timesteps[idx])


@torch.no_grad()
def sample(
    model: MultiTaskDenoiser,
    x_ld: torch.Tensor,
    z_mri: torch.Tensor | None,
    cfg: SamplerConfig,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Generate clean-image estimates conditioned on the low-dose input.

    Deterministic for fixed (weights, inputs, seed, steps); the returned
    images are clipped to [0, 1].
    """
    needs_mri = cfg.mri_active or (
        not model.cfg.task2_enabled and model.cfg.single_task_mri_cond
    )
    if needs_mri and z_mri is None:
        raise ValueError("z_mri is required for this model/sampler configuration")
    if x_ld.ndim == 2:
        x_ld = x_ld[None, None]
        z_mri = z_mri[None, None] if z_mri is not None else None
    elif x_ld.ndim == 3:
        x_ld = x_ld[:, None]
        z_mri = z_mri[:, None] if z_mri is not None else None
    if needs_mri and z_mri.shape != x_ld.shape:
        raise ValueError("MRI shape mismatch")
    if cfg.steps > schedule.T:
        raise ValueError(f"steps={cfg.steps} exceeds schedule length T={schedule.T}")

    chain = respace_schedule(schedule, cfg.steps) if cfg.steps < schedule.T else schedule
    model.eval()
    gen = torch.Generator().manual_seed(cfg.seed)
    y = torch.randn(x_ld.shape, generator=gen, dtype=x_ld.dtype)

    for s in range(chain.T, 0, -1):
        t_label = int(chain.timesteps[s - 1])
        pair = model(y, x_ld, z_mri if needs_mri else None, t_label, cfg.mri_active)
        if pair.mri_active:
            y0_hat = ensemble(pair)
            v = combine_variance_logits(pair.v_pet, pair.v_mri)
        else:
            y0_hat = pair.y0_hat_pet
            v = pair.v_pet
        if cfg.clip_x0:
            y0_hat = y0_hat.clamp(-1.0, 1.0)
        if bool(torch.isnan(y0_hat).any()) or bool(torch.isnan(v).any()):
            raise NumericalError(f"NaN prediction at sampling step t={t_label}")
        noise = (
            torch.zeros_like(y)
            if s == 1
            else torch.randn(y.shape, generator=gen, dtype=y.dtype)
        )
        y = reverse_step(ReverseStepInput(y_t=y, y0_hat=y0_hat, v=v, t=s, noise=noise), chain)

    return y.clamp(0.0, 1.0)
