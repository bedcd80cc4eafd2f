"""Dual-branch conditional denoiser with hierarchical feature fusion.

Two UNet-style encoders condition on the low-dose PET and the MRI
respectively (each also sees the noisy target and the timestep embedding).
Per-level features from both encoders are projected, concatenated and fused
into a shared skip pyramid consumed by two symmetric decoders, each emitting
a clean-image estimate and per-pixel variance logits.

Ablation switches cover the single-task variants (with or without MRI as an
extra conditioning channel), fusion removal (decoders fall back to their own
encoder skips), a single shared decoder, and asymmetric decoder dropout.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

PET = "PET"
MRI = "MRI"


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    attention_levels: frozenset[int] = frozenset({2, 3})
    num_res_blocks_per_level: int = 2
    dropout: float = 0.1
    # None -> one fused map per level, as wide as that level's encoder features
    fused_width_per_level: tuple[int, ...] | None = None
    task2_enabled: bool = True
    hff_enabled: bool = True
    shared_single_decoder: bool = False
    # dropout override for the MRI-branch decoder; None keeps decoders symmetric
    mri_decoder_dropout: float | None = None
    # single-task only: concatenate the MRI onto the conditioning stack
    single_task_mri_cond: bool = False

    def __post_init__(self):
        L = self.num_levels
        if L < 1:
            raise ValueError("channel_multipliers must be nonempty")
        if self.input_size < 1 or self.input_size % (2 ** (L - 1)) != 0:
            raise ValueError(f"input_size must be divisible by 2^{L - 1}")
        if not set(self.attention_levels) <= set(range(1, L + 1)):
            raise ValueError(f"attention_levels must be within 1..{L}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.base_channels < 1 or self.num_res_blocks_per_level < 1:
            raise ValueError("base_channels and num_res_blocks_per_level must be positive")
        if any(m < 1 for m in self.channel_multipliers):
            raise ValueError("channel_multipliers must be positive")
        if self.fused_width_per_level is not None and len(self.fused_width_per_level) != L:
            raise ValueError("fused_width_per_level must have one entry per level")
        if self.shared_single_decoder and not (self.task2_enabled and self.hff_enabled):
            raise ValueError("shared_single_decoder requires the second task and fusion")
        object.__setattr__(self, "attention_levels", frozenset(self.attention_levels))
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        if self.fused_width_per_level is not None:
            object.__setattr__(
                self, "fused_width_per_level", tuple(self.fused_width_per_level)
            )

    @property
    def num_levels(self) -> int:
        return len(self.channel_multipliers)

    @property
    def level_channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_multipliers)

    @property
    def fused_widths(self) -> tuple[int, ...]:
        if self.fused_width_per_level is not None:
            return self.fused_width_per_level
        return self.level_channels

    @property
    def time_embed_dim(self) -> int:
        return 4 * self.base_channels


@dataclass
class FeaturePyramid:
    """Per-level encoder features plus the bottleneck (encoder output)."""

    levels: list[torch.Tensor]
    bottleneck: torch.Tensor


@dataclass
class FusionPyramid:
    """Per-level fused skip maps, spatially aligned with the encoder levels."""

    levels: list[torch.Tensor]


@dataclass
class PredictionPair:
    """Branch outputs: clean-image estimates and variance logits.

    When ``mri_active`` is false the MRI-branch fields are None and must not
    be read.
    """

    y0_hat_pet: torch.Tensor
    v_pet: torch.Tensor
    y0_hat_mri: torch.Tensor | None = None
    v_mri: torch.Tensor | None = None
    mri_active: bool = False


def time_embed(t: int | torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal timestep embedding.

    Frequencies are geometrically spaced, w_k = max_period^(-k/half) with
    max_period 10000 and half = dim/2; the embedding is
    [sin(t*w_0..), cos(t*w_0..)].
    """
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    if not torch.is_tensor(t):
        t = torch.tensor(t)
    if bool((t < 0).any()):
        raise ValueError("t must be nonnegative")
    t = t.to(torch.float64)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.reshape(*t.shape, 1) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(channels, 8), channels)


def _zero_init(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class ResBlock(nn.Module):
    """Residual block with affine (scale + shift) timestep modulation."""

    def __init__(self, in_ch: int, out_ch: int, temb_dim: int, dropout: float):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(temb_dim, 2 * out_ch)
        self.norm2 = _norm(out_ch)
        self.drop = nn.Dropout(dropout)
        self.conv2 = _zero_init(nn.Conv2d(out_ch, out_ch, 3, padding=1))
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.emb(F.silu(temb)).unsqueeze(-1).unsqueeze(-1).chunk(2, dim=1)
        h = self.norm2(h) * (1.0 + scale) + shift
        h = self.conv2(self.drop(F.silu(h)))
        return self.skip(x) + h


class AttentionBlock(nn.Module):
    """Single-head self-attention over spatial positions."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = _norm(channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = _zero_init(nn.Conv2d(channels, channels, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(dim=1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Encoder(nn.Module):
    """Extracts one feature map per resolution level plus a bottleneck."""

    def __init__(self, cfg: ModelConfig, cond_channels: int):
        super().__init__()
        chans = cfg.level_channels
        temb = cfg.time_embed_dim
        self.stem = nn.Conv2d(1 + cond_channels, chans[0], 3, padding=1)
        self.levels = nn.ModuleList()
        self.downs = nn.ModuleList()
        in_ch = chans[0]
        for l, out_ch in enumerate(chans, start=1):
            blocks = nn.ModuleList()
            for i in range(cfg.num_res_blocks_per_level):
                blocks.append(ResBlock(in_ch if i == 0 else out_ch, out_ch, temb, cfg.dropout))
            attn = AttentionBlock(out_ch) if l in cfg.attention_levels else None
            self.levels.append(nn.ModuleDict({"blocks": blocks, "attn": attn or nn.Identity()}))
            self.downs.append(Downsample(out_ch) if l < cfg.num_levels else nn.Identity())
            in_ch = out_ch
        mid = chans[-1]
        self.mid_block1 = ResBlock(mid, mid, temb, cfg.dropout)
        self.mid_attn = AttentionBlock(mid)
        self.mid_block2 = ResBlock(mid, mid, temb, cfg.dropout)

    def forward(
        self, y_t: torch.Tensor, cond: torch.Tensor, temb: torch.Tensor
    ) -> FeaturePyramid:
        h = self.stem(torch.cat([y_t, cond], dim=1))
        feats = []
        for level, down in zip(self.levels, self.downs):
            for block in level["blocks"]:
                h = block(h, temb)
            h = level["attn"](h)
            feats.append(h)
            h = down(h)
        h = self.mid_block2(self.mid_attn(self.mid_block1(h, temb)), temb)
        return FeaturePyramid(levels=feats, bottleneck=h)


class HierarchicalFusion(nn.Module):
    """Projects both branches into a shared width per level and fuses them.

    Fusion per level: 1x1 projections T1/T2, channel concatenation, then a
    3x3 conv + group norm + SiLU head. A separate PET-only head produces the
    skip pyramid used when the MRI branch is inactive.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.proj_pet = nn.ModuleList()
        self.proj_mri = nn.ModuleList()
        self.heads = nn.ModuleList()
        self.pet_only_heads = nn.ModuleList()
        for enc_ch, fused_ch in zip(cfg.level_channels, cfg.fused_widths):
            self.proj_pet.append(nn.Conv2d(enc_ch, enc_ch, 1))
            self.proj_mri.append(nn.Conv2d(enc_ch, enc_ch, 1))
            self.heads.append(
                nn.Sequential(nn.Conv2d(2 * enc_ch, fused_ch, 3, padding=1), _norm(fused_ch), nn.SiLU())
            )
            self.pet_only_heads.append(
                nn.Sequential(nn.Conv2d(enc_ch, fused_ch, 3, padding=1), _norm(fused_ch), nn.SiLU())
            )

    def fuse(self, pyr_pet: FeaturePyramid, pyr_mri: FeaturePyramid) -> FusionPyramid:
        if len(pyr_pet.levels) != len(self.heads) or len(pyr_mri.levels) != len(self.heads):
            raise ValueError("pyramid level count does not match the fusion module")
        fused = []
        for a1, a2, t1, t2, head in zip(
            pyr_pet.levels, pyr_mri.levels, self.proj_pet, self.proj_mri, self.heads
        ):
            if a1.shape[-2:] != a2.shape[-2:]:
                raise ValueError("pyramids are not spatially aligned")
            fused.append(head(torch.cat([t1(a1), t2(a2)], dim=1)))
        return FusionPyramid(levels=fused)

    def fuse_pet_only(self, pyr_pet: FeaturePyramid) -> FusionPyramid:
        if len(pyr_pet.levels) != len(self.heads):
            raise ValueError("pyramid level count does not match the fusion module")
        return FusionPyramid(
            levels=[
                head(t1(a1))
                for a1, t1, head in zip(pyr_pet.levels, self.proj_pet, self.pet_only_heads)
            ]
        )


class Decoder(nn.Module):
    """Reconstructs the clean estimate and variance logits from the bottleneck
    plus a skip pyramid."""

    def __init__(self, cfg: ModelConfig, skip_widths: tuple[int, ...], dropout: float | None = None):
        super().__init__()
        chans = cfg.level_channels
        temb = cfg.time_embed_dim
        drop = cfg.dropout if dropout is None else dropout
        self.levels = nn.ModuleList()
        self.ups = nn.ModuleList()
        in_ch = chans[-1]
        for l in range(cfg.num_levels, 0, -1):
            out_ch = chans[l - 1]
            blocks = nn.ModuleList()
            for i in range(cfg.num_res_blocks_per_level):
                blocks.append(
                    ResBlock(in_ch + skip_widths[l - 1] if i == 0 else out_ch, out_ch, temb, drop)
                )
            attn = AttentionBlock(out_ch) if l in cfg.attention_levels else None
            self.levels.append(nn.ModuleDict({"blocks": blocks, "attn": attn or nn.Identity()}))
            self.ups.append(Upsample(out_ch) if l > 1 else nn.Identity())
            in_ch = out_ch
        self.out_norm = _norm(chans[0])
        self.out_conv = nn.Conv2d(chans[0], 2, 3, padding=1)

    def forward(
        self, bottleneck: torch.Tensor, fusion: FusionPyramid, temb: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if len(fusion.levels) != len(self.levels):
            raise ValueError("fusion pyramid depth does not match the decoder")
        h = bottleneck
        for level, up, skip in zip(self.levels, self.ups, reversed(fusion.levels)):
            if h.shape[-2:] != skip.shape[-2:]:
                raise ValueError("fusion level is not spatially aligned with the decoder stage")
            h = torch.cat([h, skip], dim=1)
            for block in level["blocks"]:
                h = block(h, temb)
            h = level["attn"](h)
            h = up(h)
        out = self.out_conv(F.silu(self.out_norm(h)))
        y0_hat, v = out.chunk(2, dim=1)
        return y0_hat, v


class MultiTaskDenoiser(nn.Module):
    """Full conditional denoiser; see the module docstring for the layout.

    Parameter groups partition every trainable tensor into
    {enc_pet, enc_mri, dec_pet, dec_mri, hff, time}.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        base = cfg.base_channels
        self.time_mlp = nn.Sequential(
            nn.Linear(base, cfg.time_embed_dim), nn.SiLU(), nn.Linear(cfg.time_embed_dim, cfg.time_embed_dim)
        )
        pet_cond = 2 if (not cfg.task2_enabled and cfg.single_task_mri_cond) else 1
        self.enc_pet = Encoder(cfg, cond_channels=pet_cond)
        self.enc_mri = Encoder(cfg, cond_channels=1) if cfg.task2_enabled else None
        self.hff = HierarchicalFusion(cfg) if (cfg.task2_enabled and cfg.hff_enabled) else None

        skip_widths = cfg.fused_widths if self.hff is not None else cfg.level_channels
        if cfg.shared_single_decoder:
            mid = cfg.level_channels[-1]
            self.bottleneck_merge = nn.Conv2d(2 * mid, mid, 1)
            self.dec_pet = Decoder(cfg, skip_widths)
            self.dec_mri = None
        else:
            self.bottleneck_merge = None
            self.dec_pet = Decoder(cfg, skip_widths)
            self.dec_mri = (
                Decoder(cfg, skip_widths, dropout=cfg.mri_decoder_dropout)
                if cfg.task2_enabled
                else None
            )
        self._recorder: _ActivationRecorder | None = None

    # ---- structure ----------------------------------------------------

    def parameter_groups(self) -> dict[str, list[str]]:
        """Name-level partition of all trainable parameters."""
        prefix_to_group = {
            "time_mlp": "time",
            "enc_pet": "enc_pet",
            "enc_mri": "enc_mri",
            "dec_pet": "dec_pet",
            "dec_mri": "dec_mri",
            "hff": "hff",
            "bottleneck_merge": "dec_pet",
        }
        groups: dict[str, list[str]] = {}
        for name, _ in self.named_parameters():
            prefix = name.split(".", 1)[0]
            groups.setdefault(prefix_to_group[prefix], []).append(name)
        return groups

    def layer_ids(self) -> list[str]:
        """Capturable layer names, shared by both branches."""
        L = self.cfg.num_levels
        ids = [f"encoder.{l}" for l in range(1, L + 1)] + ["encoder.bottleneck"]
        ids += [f"decoder.{l}" for l in range(1, L + 1)]
        return ids

    @contextmanager
    def record_activations(self, layer_ids: list[str]):
        known = set(self.layer_ids())
        unknown = [i for i in layer_ids if i not in known]
        if unknown:
            raise ValueError(f"unknown layer ids: {unknown}; known: {sorted(known)}")
        rec = _ActivationRecorder(set(layer_ids))
        self._recorder = rec
        try:
            yield rec
        finally:
            self._recorder = None

    # ---- forward ------------------------------------------------------

    def _embed(self, t: torch.Tensor) -> torch.Tensor:
        w = self.time_mlp[0].weight
        emb = time_embed(t, self.cfg.base_channels).to(dtype=w.dtype, device=w.device)
        return self.time_mlp(emb)

    def _record_pyramid(self, branch: str, pyr: FeaturePyramid) -> None:
        if self._recorder is None:
            return
        for l, feat in enumerate(pyr.levels, start=1):
            self._recorder.store(f"encoder.{l}", branch, feat)
        self._recorder.store("encoder.bottleneck", branch, pyr.bottleneck)

    def _decode(
        self, branch: str, decoder: Decoder, bottleneck: torch.Tensor,
        fusion: FusionPyramid, temb: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if self._recorder is None or not self._recorder.wants_decoder:
            return decoder(bottleneck, fusion, temb)
        # re-run the decoder loop with taps after each level
        h = bottleneck
        L = self.cfg.num_levels
        for idx, (level, up, skip) in enumerate(
            zip(decoder.levels, decoder.ups, reversed(fusion.levels))
        ):
            h = torch.cat([h, skip], dim=1)
            for block in level["blocks"]:
                h = block(h, temb)
            h = level["attn"](h)
            # decoder.1 is the coarsest stage, decoder.L the finest
            self._recorder.store(f"decoder.{idx + 1}", branch, h)
            h = up(h)
        out = decoder.out_conv(F.silu(decoder.out_norm(h)))
        return out.chunk(2, dim=1)

    def forward(
        self,
        y_t: torch.Tensor,
        x_ld: torch.Tensor,
        z_mri: torch.Tensor | None,
        t: int | torch.Tensor,
        mri_active: bool,
    ) -> PredictionPair:
        """Run the conditional denoiser at timestep(s) t.

        ``z_mri`` must be provided iff the MRI pathway is used for this call
        (``mri_active`` for dual-branch configs, always for the MRI-conditioned
        single-task variant); when unused it is never read.
        """
        cfg = self.cfg
        for name, x in (("y_t", y_t), ("x_ld", x_ld)):
            if x.shape[-2:] != (cfg.input_size, cfg.input_size):
                raise ValueError(f"{name} spatial shape must be {cfg.input_size}x{cfg.input_size}")
            if bool(torch.isnan(x).any()):
                raise ValueError(f"NaN in input {name!r}")

        uses_mri_input = (cfg.task2_enabled and mri_active) or (
            not cfg.task2_enabled and cfg.single_task_mri_cond
        )
        if uses_mri_input:
            if z_mri is None:
                raise ValueError("z_mri is required for this call but is absent")
            if z_mri.shape != y_t.shape:
                raise ValueError("z_mri shape mismatch")
            if bool(torch.isnan(z_mri).any()):
                raise ValueError("NaN in input 'z_mri'")

        if not torch.is_tensor(t):
            t = torch.full((y_t.shape[0],), int(t), dtype=torch.long, device=y_t.device)
        temb = self._embed(t)

        if not cfg.task2_enabled:
            cond = torch.cat([x_ld, z_mri], dim=1) if cfg.single_task_mri_cond else x_ld
            pyr = self.enc_pet(y_t, cond, temb)
            self._record_pyramid(PET, pyr)
            skips = FusionPyramid(levels=list(pyr.levels))
            y0_hat, v = self._decode(PET, self.dec_pet, pyr.bottleneck, skips, temb)
            return PredictionPair(y0_hat_pet=y0_hat, v_pet=v, mri_active=False)

        pyr_pet = self.enc_pet(y_t, x_ld, temb)
        self._record_pyramid(PET, pyr_pet)

        if not mri_active:
            if self.hff is not None:
                skips = self.hff.fuse_pet_only(pyr_pet)
            else:
                skips = FusionPyramid(levels=list(pyr_pet.levels))
            y0_hat, v = self._decode(PET, self.dec_pet, pyr_pet.bottleneck, skips, temb)
            return PredictionPair(y0_hat_pet=y0_hat, v_pet=v, mri_active=False)

        pyr_mri = self.enc_mri(y_t, z_mri, temb)
        self._record_pyramid(MRI, pyr_mri)
        if self.hff is not None:
            fusion = self.hff.fuse(pyr_pet, pyr_mri)
        else:
            fusion = None

        if cfg.shared_single_decoder:
            merged = self.bottleneck_merge(
                torch.cat([pyr_pet.bottleneck, pyr_mri.bottleneck], dim=1)
            )
            y0_hat, v = self._decode(PET, self.dec_pet, merged, fusion, temb)
            return PredictionPair(y0_hat_pet=y0_hat, v_pet=v, mri_active=False)

        skips_pet = fusion if fusion is not None else FusionPyramid(levels=list(pyr_pet.levels))
        skips_mri = fusion if fusion is not None else FusionPyramid(levels=list(pyr_mri.levels))
        y0_pet, v_pet = self._decode(PET, self.dec_pet, pyr_pet.bottleneck, skips_pet, temb)
        y0_mri, v_mri = self._decode(MRI, self.dec_mri, pyr_mri.bottleneck, skips_mri, temb)
        return PredictionPair(
            y0_hat_pet=y0_pet, v_pet=v_pet, y0_hat_mri=y0_mri, v_mri=v_mri, mri_active=True
        )


class _ActivationRecorder:
    """Collects tapped feature maps during a recorded forward pass."""

    def __init__(self, layer_ids: set[str]):
        self.layer_ids = layer_ids
        self.wants_decoder = any(i.startswith("decoder.") for i in layer_ids)
        self.captured: dict[tuple[str, str], torch.Tensor] = {}

    def store(self, layer_id: str, branch: str, feat: torch.Tensor) -> None:
        if layer_id in self.layer_ids:
            self.captured[(layer_id, branch)] = feat.detach()

    def get(self, layer_id: str, branch: str) -> torch.Tensor:
        key = (layer_id, branch)
        if key not in self.captured:
            raise KeyError(f"no activation captured for {key}")
        return self.captured[key]


def build_model(cfg: ModelConfig, seed: int) -> MultiTaskDenoiser:
    """Deterministically initialised model for a given seed."""
    torch.manual_seed(seed)
    return MultiTaskDenoiser(cfg)
