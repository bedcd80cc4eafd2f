"""Forward/reverse diffusion mechanics with a learned-variance reverse step.

The forward process follows the closed form

    y_t = sqrt(abar_t) * y0 + sqrt(1 - abar_t) * eps,    eps ~ N(0, I),

and the reverse step draws from a Gaussian whose mean is parameterised
through a predicted clean image and whose per-pixel log-variance is a
learned interpolation between the posterior floor log(btilde_t) and the
schedule ceiling log(beta_t):

    logvar(v, t) = sigmoid(v) * log(beta_t) + (1 - sigmoid(v)) * log(btilde_t)

Timesteps are 1-based throughout: t in [1, T], arrays are indexed t-1.
All operations are pure functions of their inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

SCHEDULE_KINDS = ("cosine", "linear")

_BETA_MAX = 0.999
_LINEAR_BETA_START = 1e-4
_LINEAR_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep noise tables, stored as float64 arrays of length T.

    ``timesteps`` carries the original 1-based timestep labels; it is the
    identity ``1..T`` for a freshly built schedule and the retained
    subsequence for a respaced one (the labels are what a trained network
    must be conditioned on).
    """

    T: int
    kind: str
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_variance: np.ndarray
    posterior_log_variance_clipped: np.ndarray
    timesteps: np.ndarray

    def alpha_bars_prev(self) -> np.ndarray:
        """abar_{t-1} with the convention abar_0 = 1."""
        return np.concatenate(([1.0], self.alpha_bars[:-1]))

    def posterior_mean_coefs(self) -> tuple[np.ndarray, np.ndarray]:
        """Coefficients (c1, c2) of mu = c1*y0 + c2*y_t for q(y_{t-1} | y_t, y0).

        The t=1 entries are pinned to (1, 0): the chain's final step
        collapses onto the clean estimate.
        """
        ab_prev = self.alpha_bars_prev()
        c1 = self.betas * np.sqrt(ab_prev) / (1.0 - self.alpha_bars)
        c2 = np.sqrt(self.alphas) * (1.0 - ab_prev) / (1.0 - self.alpha_bars)
        c1[0], c2[0] = 1.0, 0.0
        return c1, c2


@dataclass(frozen=True)
class ReverseStepInput:
    """One reverse-step draw: noisy image, clean estimate, variance logits, noise."""

    y_t: torch.Tensor
    y0_hat: torch.Tensor
    v: torch.Tensor
    t: int
    noise: torch.Tensor


def _schedule_from_arrays(
    betas: np.ndarray, alpha_bars: np.ndarray, kind: str, timesteps: np.ndarray
) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    alpha_bars = np.asarray(alpha_bars, dtype=np.float64)
    T = len(betas)
    alphas = 1.0 - betas
    ab_prev = np.concatenate(([1.0], alpha_bars[:-1]))
    posterior_variance = betas * (1.0 - ab_prev) / (1.0 - alpha_bars)
    # t=1 has zero posterior variance; clip its log to the t=2 value so the
    # learned interpolation stays finite (the t=1 step injects no noise).
    if T >= 2:
        clipped = np.concatenate(([posterior_variance[1]], posterior_variance[1:]))
    else:
        clipped = betas.copy()
    schedule = NoiseSchedule(
        T=T,
        kind=kind,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        posterior_variance=posterior_variance,
        posterior_log_variance_clipped=np.log(clipped),
        timesteps=np.asarray(timesteps, dtype=np.int64),
    )
    _validate_schedule(schedule)
    return schedule


def _validate_schedule(s: NoiseSchedule) -> None:
    if not np.all((s.betas > 0.0) & (s.betas < 1.0)):
        raise ValueError("betas must lie in (0, 1)")
    if not np.all((s.alpha_bars > 0.0) & (s.alpha_bars <= 1.0)):
        raise ValueError("alpha_bars must lie in (0, 1]")
    if s.alpha_bars[0] >= 1.0:
        raise ValueError("alpha_bars[1] must be < 1")
    if s.T > 1 and not np.all(np.diff(s.alpha_bars) < 0.0):
        raise ValueError("alpha_bars must be strictly decreasing")
    if not np.all(np.isfinite(s.posterior_variance)) or np.any(s.posterior_variance < 0.0):
        raise ValueError("posterior_variance must be finite and nonnegative")


def build_schedule(T: int, kind: str) -> NoiseSchedule:
    """Construct a noise schedule of length T.

    ``cosine`` squashes abar with the squared-cosine ramp (offset 0.008,
    betas capped at 0.999); ``linear`` spaces betas uniformly over
    [1e-4, 0.02].
    """
    if not isinstance(T, int) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}, expected one of {SCHEDULE_KINDS}")

    if kind == "cosine":
        s = 0.008
        grid = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((grid + s) / (1.0 + s) * math.pi / 2.0) ** 2
        abar = f / f[0]
        betas = 1.0 - abar[1:] / abar[:-1]
        betas = np.clip(betas, None, _BETA_MAX)
    else:
        betas = np.linspace(_LINEAR_BETA_START, _LINEAR_BETA_END, T, dtype=np.float64)

    alpha_bars = np.cumprod(1.0 - betas)
    return _schedule_from_arrays(betas, alpha_bars, kind, np.arange(1, T + 1))


def _coef(values: np.ndarray, t: int | torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Gather a per-timestep scalar, broadcastable against ``ref``.

    ``t`` is 1-based: an int, or a tensor of per-sample timesteps whose
    leading dimension matches ``ref``'s batch dimension.
    """
    idx = torch.as_tensor(t, device=ref.device, dtype=torch.long) - 1
    n = len(values)
    if bool((idx < 0).any()) or bool((idx >= n).any()):
        raise ValueError(f"timestep out of range [1, {n}]")
    table = torch.as_tensor(values, device=ref.device, dtype=torch.float64)
    c = table[idx].to(ref.dtype)
    if c.ndim > 0:
        c = c.reshape(-1, *([1] * (ref.ndim - 1)))
    return c


def _check_same_shape(*tensors: torch.Tensor) -> None:
    shapes = {tuple(x.shape) for x in tensors}
    if len(shapes) > 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def q_sample(
    y0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Noise a clean image to step t in closed form."""
    _check_same_shape(y0, eps)
    ab = _coef(schedule.alpha_bars, t, y0)
    return torch.sqrt(ab) * y0 + torch.sqrt(1.0 - ab) * eps


def posterior_mean(
    y0_hat: torch.Tensor, y_t: torch.Tensor, t: int | torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Mean of q(y_{t-1} | y_t, y0) with y0 replaced by the estimate."""
    _check_same_shape(y0_hat, y_t)
    c1, c2 = schedule.posterior_mean_coefs()
    return _coef(c1, t, y_t) * y0_hat + _coef(c2, t, y_t) * y_t


def interpolated_log_variance(
    v: torch.Tensor, t: int | torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Per-pixel log-variance pinned between log(btilde_t) and log(beta_t)."""
    frac = torch.sigmoid(v)
    log_beta = torch.log(_coef(schedule.betas, t, v))
    log_btilde = _coef(schedule.posterior_log_variance_clipped, t, v)
    return frac * log_beta + (1.0 - frac) * log_btilde


def reverse_step(inp: ReverseStepInput, schedule: NoiseSchedule) -> torch.Tensor:
    """Draw y_{t-1} given the networks' clean estimate and variance logits.

    The final step (t=1) is deterministic: ``noise`` must be all-zero there
    and the output collapses onto ``y0_hat``.
    """
    _check_same_shape(inp.y_t, inp.y0_hat, inp.v, inp.noise)
    for name, x in (("y_t", inp.y_t), ("y0_hat", inp.y0_hat), ("v", inp.v), ("noise", inp.noise)):
        if bool(torch.isnan(x).any()):
            raise ValueError(f"NaN in reverse_step input {name!r}")
    if not 1 <= inp.t <= schedule.T:
        raise ValueError(f"timestep out of range [1, {schedule.T}]")
    if inp.t == 1 and bool((inp.noise != 0).any()):
        raise ValueError("noise must be zero at t=1 (deterministic final step)")

    mean = posterior_mean(inp.y0_hat, inp.y_t, inp.t, schedule)
    logvar = interpolated_log_variance(inp.v, inp.t, schedule)
    return mean + torch.exp(0.5 * logvar) * inp.noise


def _standard_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * (1.0 + torch.erf(x / math.sqrt(2.0)))


def _discretized_gaussian_nll(
    y0: torch.Tensor, mean: torch.Tensor, logvar: torch.Tensor
) -> torch.Tensor:
    """Negative log-likelihood of y0 under a Gaussian discretized to 256 levels in [0, 1].

    Each intensity owns a bin of half-width 1/510; the outermost bins extend
    to +-inf. Probabilities never exceed 1, so the result is nonnegative.
    """
    inv_std = torch.exp(-0.5 * logvar)
    half_bin = 1.0 / 510.0
    cdf_hi = _standard_normal_cdf((y0 + half_bin - mean) * inv_std)
    cdf_lo = _standard_normal_cdf((y0 - half_bin - mean) * inv_std)
    prob = torch.where(
        y0 < half_bin,
        cdf_hi,
        torch.where(y0 > 1.0 - half_bin, 1.0 - cdf_lo, cdf_hi - cdf_lo),
    )
    return -torch.log(prob.clamp(min=1e-12))


def vlb_variance_term(
    y0: torch.Tensor,
    y_t: torch.Tensor,
    y0_hat: torch.Tensor,
    v: torch.Tensor,
    t: int | torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Variational term that trains the variance logits.

    KL( q(y_{t-1} | y_t, y0) || N(mu_theta, Sigma_theta) ) in nats, averaged
    over pixels and batch; at t=1 the discretized Gaussian NLL of y0 is used
    instead. The predicted mean is frozen (detached) so only ``v`` receives
    gradient through this term.
    """
    _check_same_shape(y0, y_t, y0_hat, v)
    for name, x in (("y0", y0), ("y_t", y_t), ("y0_hat", y0_hat), ("v", v)):
        if bool(torch.isnan(x).any()):
            raise ValueError(f"NaN in vlb input {name!r}")

    y0_hat = y0_hat.detach()
    mean_q = posterior_mean(y0, y_t, t, schedule)
    logvar_q = _coef(schedule.posterior_log_variance_clipped, t, y_t)
    mean_p = posterior_mean(y0_hat, y_t, t, schedule)
    logvar_p = interpolated_log_variance(v, t, schedule)

    kl = 0.5 * (
        logvar_p
        - logvar_q
        + (torch.exp(logvar_q) + (mean_q - mean_p) ** 2) * torch.exp(-logvar_p)
        - 1.0
    )
    nll = _discretized_gaussian_nll(y0, mean_p, logvar_p)

    t_idx = torch.as_tensor(t, device=y0.device, dtype=torch.long)
    if t_idx.ndim == 0:
        per_pixel = nll if int(t_idx) == 1 else kl
    else:
        is_first = (t_idx == 1).reshape(-1, *([1] * (y0.ndim - 1)))
        per_pixel = torch.where(is_first, nll, kl)
    return per_pixel.mean()
