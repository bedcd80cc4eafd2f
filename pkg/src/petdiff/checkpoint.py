"""Named-tensor checkpoint archive.

Layout: a magic line, an 8-byte big-endian header length, a JSON header
(human-readable: format version, config hash, epoch/step, numpy RNG state,
and a tensor index with explicit name/dtype/shape/offset), then the raw
little-endian tensor payload. The header records the payload's SHA-256, so
corruption is detected on load, and every field is written canonically so
save -> load -> save reproduces the file byte for byte.

Stored tensors: model parameters and buffers (``model.*``), Adam moments
(``opt.*``), and the torch RNG state (``rng.torch``).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"PETDIFF-CKPT\n"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    format_version: int
    config_hash: str
    epoch: int
    step: int
    numpy_rng_state: dict | None
    tensors: dict[str, np.ndarray]
    tensor_order: list[str] = field(default_factory=list)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    order = ckpt.tensor_order or sorted(ckpt.tensors)
    entries = []
    chunks = []
    offset = 0
    for name in order:
        arr = np.ascontiguousarray(ckpt.tensors[name])
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": ckpt.format_version,
        "config_hash": ckpt.config_hash,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "numpy_rng_state": ckpt.numpy_rng_state,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(blob).to_bytes(8, "big"))
        f.write(blob)
        f.write(payload)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint archive")
    pos = len(MAGIC)
    hlen = int.from_bytes(data[pos : pos + 8], "big")
    pos += 8
    try:
        header = json.loads(data[pos : pos + hlen])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint header in {path}") from e
    pos += hlen
    payload = data[pos:]
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format_version {header.get('format_version')!r}"
        )
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"checksum mismatch: {path} is corrupted")

    tensors = {}
    order = []
    for e in header["tensors"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        tensors[e["name"]] = arr
        order.append(e["name"])
    return Checkpoint(
        format_version=header["format_version"],
        config_hash=header["config_hash"],
        epoch=header["epoch"],
        step=header["step"],
        numpy_rng_state=header["numpy_rng_state"],
        tensors=tensors,
        tensor_order=order,
    )


def _check_hash(ckpt: Checkpoint, expected: str | None, allow_mismatch: bool) -> None:
    if expected is not None and ckpt.config_hash != expected and not allow_mismatch:
        raise CheckpointError(
            f"config_hash mismatch: checkpoint {ckpt.config_hash!r} vs current {expected!r} "
            "(pass the explicit override to load anyway)"
        )


def save_training(path: str | Path, state, config_hash: str = "") -> Path:
    """Snapshot model, optimiser moments, and RNG streams from a TrainState."""
    tensors: dict[str, np.ndarray] = {}
    order: list[str] = []

    def put(name: str, value) -> None:
        if torch.is_tensor(value):
            arr = value.detach().cpu().numpy()
        else:
            arr = np.asarray(value)
        tensors[name] = arr
        order.append(name)

    for name, p in state.model.named_parameters():
        put(f"model.{name}", p)
    for name, b in state.model.named_buffers():
        put(f"model.buffer.{name}", b)
    for name, p in state.model.named_parameters():
        opt_state = state.optimizer.state.get(p)
        if opt_state:
            for key in ("step", "exp_avg", "exp_avg_sq"):
                put(f"opt.{name}.{key}", opt_state[key])
    put("rng.torch", torch.get_rng_state())

    return save_checkpoint(
        path,
        Checkpoint(
            format_version=FORMAT_VERSION,
            config_hash=config_hash,
            epoch=state.epoch,
            step=state.step,
            numpy_rng_state=state.np_rng.bit_generator.state,
            tensors=tensors,
            tensor_order=order,
        ),
    )


def restore_training(
    path: str | Path, state, expected_config_hash: str | None = None, allow_mismatch: bool = False
):
    """Restore a TrainState in place so training continues bit-exactly."""
    ckpt = load_checkpoint(path)
    _check_hash(ckpt, expected_config_hash, allow_mismatch)
    _load_model_tensors(state.model, ckpt)

    for name, p in state.model.named_parameters():
        key = f"opt.{name}.step"
        if key in ckpt.tensors:
            state.optimizer.state[p] = {
                "step": torch.from_numpy(ckpt.tensors[key].copy()),
                "exp_avg": torch.from_numpy(ckpt.tensors[f"opt.{name}.exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(ckpt.tensors[f"opt.{name}.exp_avg_sq"].copy()),
            }
        else:
            state.optimizer.state.pop(p, None)

    torch.set_rng_state(torch.from_numpy(ckpt.tensors["rng.torch"].copy()))
    if ckpt.numpy_rng_state is not None:
        state.np_rng.bit_generator.state = ckpt.numpy_rng_state
    state.epoch = ckpt.epoch
    state.step = ckpt.step
    return ckpt


def load_model_weights(
    path: str | Path,
    model: torch.nn.Module,
    expected_config_hash: str | None = None,
    allow_mismatch: bool = False,
) -> Checkpoint:
    """Load only the model tensors (inference use)."""
    ckpt = load_checkpoint(path)
    _check_hash(ckpt, expected_config_hash, allow_mismatch)
    _load_model_tensors(model, ckpt)
    return ckpt


def _load_model_tensors(model: torch.nn.Module, ckpt: Checkpoint) -> None:
    with torch.no_grad():
        for name, p in model.named_parameters():
            key = f"model.{name}"
            if key not in ckpt.tensors:
                raise CheckpointError(f"checkpoint is missing tensor {key!r}")
            arr = ckpt.tensors[key]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(
                    f"tensor {key!r} has shape {arr.shape}, model expects {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(arr.copy()))
        for name, b in model.named_buffers():
            key = f"model.buffer.{name}"
            if key in ckpt.tensors:
                b.copy_(torch.from_numpy(ckpt.tensors[key].copy()))


def checkpoint_digest(path: str | Path) -> str:
    """SHA-256 of the checkpoint file bytes."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
