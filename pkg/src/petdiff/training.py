"""Multi-task objective, partial-MRI masking, and the optimisation loop.

The optimiser is Adam with default moment coefficients; no learning-rate
schedule or weight averaging is applied. Loss bookkeeping is carried in
float64 so the logged decomposition

    total = lambda1 * (pet + mri) + lambda2 * bias + vlb_weight * vlb

holds to machine precision at every step. Samples whose MRI flag is off
contribute only the PET reconstruction term and the PET-branch variance
term; the skipped terms are never zero-filled into batch means.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .dataset import SliceSample
from .diffusion import NoiseSchedule, build_schedule, q_sample, vlb_variance_term
from .errors import NumericalError
from .network import ModelConfig, MultiTaskDenoiser, PredictionPair

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "loss_total", "loss_pet", "loss_mri", "loss_bias", "loss_vlb", "wall_time")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.4
    lambda2: float = 0.2
    vlb_weight: float = 0.001

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.vlb_weight < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-4
    batch_size: int = 8
    T: int = 1000
    mri_availability: float = 1.0
    seed: int = 0
    schedule_kind: str = "cosine"
    max_steps: int | None = None
    checkpoint_every: int = 500
    log_every: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.T < 1:
            raise ValueError("epochs, batch_size and T must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.mri_availability <= 1.0:
            raise ValueError("mri_availability must be in [0, 1]")


def recon_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all pixels, accumulated in float64."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean(dtype=torch.float64)


def bias_loss(pred_pet: torch.Tensor, pred_mri: torch.Tensor) -> torch.Tensor:
    """Cross-branch consistency penalty: MSE between the two predictions."""
    return recon_loss(pred_pet, pred_mri)


def _as_component(x) -> float:
    x = float(x)
    if not np.isfinite(x):
        raise ValueError("loss components must be finite")
    if x < -1e-8:
        raise ValueError(f"negative loss component {x}")
    return max(x, 0.0)  # clamp float-rounding dust


def total_loss(l_pet, l_mri, l_bias, l_vlb, w: LossWeights):
    """Weighted multi-task objective; accepts tensors or floats."""
    if torch.is_tensor(l_pet):
        for x in (l_pet, l_mri, l_bias, l_vlb):
            _as_component(x.detach())
        return w.lambda1 * (l_pet + l_mri) + w.lambda2 * l_bias + w.vlb_weight * l_vlb
    parts = [_as_component(x) for x in (l_pet, l_mri, l_bias, l_vlb)]
    return w.lambda1 * (parts[0] + parts[1]) + w.lambda2 * parts[2] + w.vlb_weight * parts[3]


def mask_mri(
    batch: list[SliceSample], availability: float, rng: np.random.Generator
) -> list[SliceSample]:
    """Flag each sample's MRI as available with probability ``availability``.

    Unavailable samples get a NaN sentinel in place of the MRI so any
    accidental read is loud.
    """
    if not 0.0 <= availability <= 1.0:
        raise ValueError("availability must be in [0, 1]")
    draws = rng.random(len(batch))
    out = []
    for sample, u in zip(batch, draws):
        if u < availability:
            out.append(replace(sample, mri_active=True))
        else:
            out.append(
                replace(sample, mri_active=False, z_mri=np.full_like(sample.x_ld, np.nan))
            )
    return out


@dataclass
class TrainState:
    model: MultiTaskDenoiser
    optimizer: torch.optim.Adam
    schedule: NoiseSchedule
    weights: LossWeights
    config: TrainConfig
    np_rng: np.random.Generator
    step: int = 0
    epoch: int = 0


def init_state(model_cfg: ModelConfig, cfg: TrainConfig, weights: LossWeights) -> TrainState:
    """Seed all RNGs and build model, optimiser, and schedule."""
    torch.manual_seed(cfg.seed)
    model = MultiTaskDenoiser(model_cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    schedule = build_schedule(cfg.T, cfg.schedule_kind)
    return TrainState(
        model=model,
        optimizer=optimizer,
        schedule=schedule,
        weights=weights,
        config=cfg,
        np_rng=np.random.default_rng(cfg.seed),
    )


def _collate(batch: list[SliceSample]):
    def stack(key):
        return torch.from_numpy(np.stack([getattr(s, key) for s in batch])[:, None]).float()

    flags = np.array([s.mri_active for s in batch], dtype=bool)
    return stack("y0_sd"), stack("x_ld"), stack("z_mri"), flags


def _branch_losses(pair: PredictionPair, y0, y_t, t, schedule):
    """Per-subbatch sums needed for weighted cross-subbatch means."""
    n = y0.shape[0]
    sse_pet = ((pair.y0_hat_pet - y0) ** 2).sum(dtype=torch.float64)
    vlb_pet = vlb_variance_term(y0, y_t, pair.y0_hat_pet, pair.v_pet, t, schedule).double()
    return n, sse_pet, vlb_pet


def train_step(state: TrainState, batch: list[SliceSample]) -> dict:
    """One optimisation step over a batch; returns the loss record."""
    if not batch:
        raise ValueError("batch must be nonempty")
    t_start = time.perf_counter()
    model, w, schedule = state.model, state.weights, state.schedule
    model.train()
    cfg = model.cfg

    y0, x_ld, z_mri, flags = _collate(batch)
    B = len(batch)
    t = torch.randint(1, schedule.T + 1, (B,))
    eps = torch.randn_like(y0)
    y_t = q_sample(y0, t, eps, schedule)

    zero = torch.zeros((), dtype=torch.float64)
    l_mri = zero
    l_bias = zero
    numel = float(y0[0].numel())

    if not cfg.task2_enabled:
        cond_mri = z_mri if cfg.single_task_mri_cond else None
        pair = model(y_t, x_ld, cond_mri, t, mri_active=False)
        n, sse_pet, vlb_sum = _branch_losses(pair, y0, y_t, t, schedule)
        l_pet = sse_pet / (B * numel)
        l_vlb = vlb_sum  # single contributing branch, already a mean
        preds_pet = pair.y0_hat_pet
        order = list(range(B))
    else:
        on = np.nonzero(flags)[0]
        off = np.nonzero(~flags)[0]
        sse_pet = zero
        vlb_acc = zero
        vlb_items = 0
        preds, order = [], []
        pair_on = None
        if on.size:
            idx = torch.from_numpy(on)
            pair_on = model(y_t[idx], x_ld[idx], z_mri[idx], t[idx], mri_active=True)
            n, sse, vlb = _branch_losses(pair_on, y0[idx], y_t[idx], t[idx], schedule)
            sse_pet = sse_pet + sse
            vlb_acc = vlb_acc + vlb * n
            vlb_items += n
            if pair_on.mri_active:
                l_mri = recon_loss(pair_on.y0_hat_mri, y0[idx])
                l_bias = bias_loss(pair_on.y0_hat_pet, pair_on.y0_hat_mri)
                vlb_mri = vlb_variance_term(
                    y0[idx], y_t[idx], pair_on.y0_hat_mri, pair_on.v_mri, t[idx], schedule
                ).double()
                vlb_acc = vlb_acc + vlb_mri * n
                vlb_items += n
            preds.append(pair_on.y0_hat_pet)
            order.extend(on.tolist())
        if off.size:
            idx = torch.from_numpy(off)
            pair_off = model(y_t[idx], x_ld[idx], None, t[idx], mri_active=False)
            n, sse, vlb = _branch_losses(pair_off, y0[idx], y_t[idx], t[idx], schedule)
            sse_pet = sse_pet + sse
            vlb_acc = vlb_acc + vlb * n
            vlb_items += n
            preds.append(pair_off.y0_hat_pet)
            order.extend(off.tolist())
        l_pet = sse_pet / (B * numel)
        l_vlb = vlb_acc / vlb_items
        preds_pet = torch.cat(preds)

    total = total_loss(l_pet, l_mri, l_bias, l_vlb, w)
    if not bool(torch.isfinite(total)):
        with torch.no_grad():
            per_item = ((preds_pet - y0[order]) ** 2).flatten(1).mean(dim=1)
        bad = [order[i] for i in torch.nonzero(~torch.isfinite(per_item)).flatten().tolist()]
        sample_idx = bad[0] if bad else -1
        raise NumericalError(
            f"non-finite loss at step {state.step} (offending sample index {sample_idx}, "
            f"subject {batch[sample_idx].subject_id if sample_idx >= 0 else '?'})"
        )

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    state.step += 1

    components = {
        "loss_pet": float(l_pet.detach()),
        "loss_mri": float(l_mri.detach()),
        "loss_bias": float(l_bias.detach()),
        "loss_vlb": float(l_vlb.detach()),
    }
    record = {
        "step": state.step,
        "epoch": state.epoch,
        "loss_total": total_loss(
            components["loss_pet"], components["loss_mri"],
            components["loss_bias"], components["loss_vlb"], w,
        ),
        **components,
        "n_samples": B,
        "n_mri": int(flags.sum()),
        "wall_time": time.perf_counter() - t_start,
    }
    return record


class TrainLogWriter:
    """Tab-delimited, line-oriented training log."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._fh = open(self.path, "w")
        self._fh.write("\t".join(LOG_COLUMNS) + "\n")

    def write(self, record: dict) -> None:
        row = [record[c] for c in LOG_COLUMNS]
        self._fh.write("\t".join(_format_cell(x) for x in row) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _format_cell(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def read_train_log(path: str | Path) -> list[dict]:
    rows = []
    with open(path) as f:
        header = f.readline().strip().split("\t")
        for line in f:
            vals = line.strip().split("\t")
            row = {}
            for k, v in zip(header, vals):
                row[k] = int(v) if k in ("step", "epoch") else float(v)
            rows.append(row)
    return rows


@dataclass
class TrainResult:
    state: TrainState
    checkpoint_path: Path
    log_path: Path


def fit(
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    weights: LossWeights,
    samples: list[SliceSample],
    out_dir: str | Path,
    config_hash: str = "",
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Run the full training loop, logging and checkpointing along the way."""
    if not samples:
        raise ValueError("no training samples")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    state = init_state(model_cfg, cfg, weights)
    if resume_from is not None:
        ckpt.restore_training(resume_from, state, expected_config_hash=config_hash or None)

    log_path = out / "train_log.tsv"
    ckpt_path = out / "checkpoint.pt"
    writer = TrainLogWriter(log_path)
    n = len(samples)
    steps_per_epoch = -(-n // cfg.batch_size)
    try:
        done = False
        while not done:
            epoch = state.step // steps_per_epoch
            if epoch >= cfg.epochs:
                break
            state.epoch = epoch
            # the shuffle is derived from (seed, epoch) rather than drawn
            # sequentially, so mid-epoch resume replays the same order
            perm = np.random.default_rng([cfg.seed & 0x7FFFFFFF, epoch]).permutation(n)
            for b in range(state.step % steps_per_epoch, steps_per_epoch):
                sel = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                batch = mask_mri([samples[i] for i in sel], cfg.mri_availability, state.np_rng)
                record = train_step(state, batch)
                if state.step % cfg.log_every == 0:
                    writer.write(record)
                if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                    ckpt.save_training(ckpt_path, state, config_hash=config_hash)
                if cfg.max_steps is not None and state.step >= cfg.max_steps:
                    done = True
                    break
        ckpt.save_training(ckpt_path, state, config_hash=config_hash)
    finally:
        writer.close()
    log.info("training finished at step %d (epoch %d)", state.step, state.epoch)
    return TrainResult(state=state, checkpoint_path=ckpt_path, log_path=log_path)
