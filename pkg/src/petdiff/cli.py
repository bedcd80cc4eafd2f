"""Command-line entry point for the five workflows.

Commands: ``simulate-dose``, ``train``, ``sample``, ``evaluate``,
``analyze-cka``. Every run writes into its own directory (named
``<command>-<UTC timestamp>-<config hash prefix>`` under the run root,
unless ``--run-dir`` is given) containing the resolved config, a
``run.json`` with seeds and the code digest, a log file, and the workflow's
artifacts.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure, 1 unexpected error.

Checkpoint format: a named-tensor archive with a human-readable JSON header
(format version, config hash, epoch/step, RNG state, tensor index with
dtype/shape/offset) followed by raw tensor bytes guarded by a SHA-256
checksum; see the checkpoint module. Loading a checkpoint whose config hash
differs from the current run's fails unless ``--allow-config-mismatch`` is
passed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__, analysis, checkpoint, report
from .config import RunConfig, dump_resolved, load_config
from .dataset import build_dataset, load_samples, read_manifest
from .diffusion import build_schedule
from .errors import ConfigError, DataError, NumericalError, PetdiffError
from .metrics import SliceMetrics, build_report, score_pair
from .network import MultiTaskDenoiser
from .sampling import sample as run_sampler
from .training import fit, read_train_log

log = logging.getLogger("petdiff")

RUN_ROOT_ENV = "PETDIFF_RUN_ROOT"

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="petdiff", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"petdiff {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="YAML config file")
        p.add_argument(
            "--override", action="append", default=[], metavar="KEY=VALUE",
            help="dotted config override, repeatable",
        )
        p.add_argument("--run-dir", type=Path, help="explicit run directory")
        p.add_argument("--seed", type=int, help="overrides the config seed")

    p = sub.add_parser("simulate-dose", help="generate the phantom low-dose dataset")
    common(p)

    p = sub.add_parser("train", help="train the denoiser")
    common(p)
    p.add_argument("--dataset", type=Path, help="dataset directory (default: generate one)")
    p.add_argument("--resume", type=Path, help="checkpoint to resume from")

    p = sub.add_parser("sample", help="run reverse-diffusion inference")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--split", default="test", choices=["train", "test", "all"])
    p.add_argument("--allow-config-mismatch", action="store_true")

    p = sub.add_parser("evaluate", help="score predictions against the clean targets")
    common(p)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument(
        "--predictions", action="append", required=True, metavar="[NAME=]DIR",
        help="prediction directory, optionally labelled; repeatable",
    )
    p.add_argument("--split", default="test", choices=["train", "test", "all"])

    p = sub.add_parser("analyze-cka", help="branch representation-similarity matrices")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--split", default="test", choices=["train", "test", "all"])
    p.add_argument("--allow-config-mismatch", action="store_true")
    return parser


def code_digest() -> str:
    """SHA-256 over the package sources, for run provenance."""
    h = hashlib.sha256()
    pkg = Path(__file__).parent
    for f in sorted(pkg.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def _make_run_dir(args, cfg: RunConfig) -> Path:
    if args.run_dir is not None:
        run_dir = Path(args.run_dir)
    else:
        root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
        stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime())
        run_dir = root / f"{args.command}-{stamp}-{cfg.config_hash[:8]}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _init_run(args) -> tuple[RunConfig, Path, dict]:
    cfg = load_config(args.config, args.override, args.seed)
    run_dir = _make_run_dir(args, cfg)
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        handlers=[logging.StreamHandler(), logging.FileHandler(run_dir / "run.log")],
        force=True,
    )
    dump_resolved(cfg, run_dir / "resolved_config.yaml")
    meta = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config_hash": cfg.config_hash,
        "seed": cfg.seed,
        "code_digest": code_digest(),
        "version": __version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    (run_dir / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    log.info("run directory: %s (config hash %s)", run_dir, cfg.config_hash[:12])
    return cfg, run_dir, meta


def _finish_run(run_dir: Path, meta: dict) -> None:
    meta["finished"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    meta["status"] = "ok"
    (run_dir / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


# ---------------------------------------------------------------- workflows


def cmd_simulate_dose(args) -> int:
    cfg, run_dir, meta = _init_run(args)
    out = build_dataset(cfg.data, run_dir / "dataset")
    samples = load_samples(out, split=None)
    preview = samples[: min(6, len(samples))]
    report.save_image_grid(
        [[s.x_ld for s in preview], [s.z_mri for s in preview], [s.y0_sd for s in preview]],
        ["low-dose", "MRI", "standard-dose"],
        run_dir / "dataset_preview.png",
    )
    log.info("dataset with %d slice samples at %s", len(samples), out)
    _finish_run(run_dir, meta)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, run_dir, meta = _init_run(args)
    if args.dataset is not None:
        dataset_dir = args.dataset
    else:
        log.info("no --dataset given; generating one under the run directory")
        dataset_dir = build_dataset(cfg.data, run_dir / "dataset")
    samples = load_samples(dataset_dir, split="train")
    log.info("training on %d slices", len(samples))
    result = fit(
        cfg.model,
        cfg.train,
        weights=_loss_weights(),
        samples=samples,
        out_dir=run_dir,
        config_hash=cfg.config_hash,
        resume_from=args.resume,
    )
    rows = read_train_log(result.log_path)
    if rows:
        report.save_loss_curves(rows, run_dir / "loss_curves.png")
        log.info("final loss %.5f at step %d", rows[-1]["loss_total"], rows[-1]["step"])
    log.info("checkpoint: %s", result.checkpoint_path)
    _finish_run(run_dir, meta)
    return EXIT_OK


def _loss_weights():
    from .training import LossWeights

    return LossWeights()


def save_prediction_png(arr: np.ndarray, path: Path) -> None:
    """Lossless 16-bit grayscale export."""
    q = np.round(np.clip(arr, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(q, mode="I;16").save(path)


def cmd_sample(args) -> int:
    cfg, run_dir, meta = _init_run(args)
    model = MultiTaskDenoiser(cfg.model)
    ckpt = checkpoint.load_model_weights(
        args.checkpoint, model,
        expected_config_hash=cfg.config_hash,
        allow_mismatch=args.allow_config_mismatch,
    )
    schedule = build_schedule(cfg.train.T, cfg.train.schedule_kind)
    needs_mri = cfg.sampler.mri_active or (
        not cfg.model.task2_enabled and cfg.model.single_task_mri_cond
    )
    split = None if args.split == "all" else args.split
    samples = load_samples(args.dataset, split=split, load_mri=needs_mri)
    out_dir = run_dir / "predictions"
    files = []
    bs = cfg.sampler_batch_size
    for b0 in range(0, len(samples), bs):
        chunk = samples[b0 : b0 + bs]
        x = torch.from_numpy(np.stack([s.x_ld for s in chunk])).float()
        z = torch.from_numpy(np.stack([s.z_mri for s in chunk])).float() if needs_mri else None
        sampler_cfg = replace(cfg.sampler, seed=cfg.sampler.seed + b0)
        preds = run_sampler(model, x, z, sampler_cfg, schedule).squeeze(1).numpy()
        for s, pred in zip(chunk, preds):
            rel = Path(s.subject_id) / s.orientation
            (out_dir / rel).mkdir(parents=True, exist_ok=True)
            stem = out_dir / rel / f"{s.slice_index:04d}_pred"
            np.save(stem.with_suffix(".npy"), pred.astype(np.float32))
            save_prediction_png(pred, stem.with_suffix(".png"))
            files.append(str(stem.with_suffix(".npy").relative_to(out_dir)))
        log.info("sampled %d/%d slices", min(b0 + bs, len(samples)), len(samples))
    sidecar = {
        "seed": cfg.sampler.seed,
        "steps": cfg.sampler.steps,
        "mri_active": cfg.sampler.mri_active,
        "clip_x0": cfg.sampler.clip_x0,
        "checkpoint": str(args.checkpoint),
        "checkpoint_config_hash": ckpt.config_hash,
        "checkpoint_digest": checkpoint.checkpoint_digest(args.checkpoint),
        "files": files,
    }
    (out_dir / "metadata.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    log.info("wrote %d predictions to %s", len(files), out_dir)
    _finish_run(run_dir, meta)
    return EXIT_OK


def _load_prediction(pred_dir: Path, rec: dict) -> np.ndarray:
    stem = pred_dir / rec["subject"] / rec["orientation"] / f"{rec['index']:04d}_pred"
    npy = stem.with_suffix(".npy")
    if npy.exists():
        return np.load(npy)
    png = stem.with_suffix(".png")
    if png.exists():
        return np.asarray(Image.open(png), dtype=np.float64) / 65535.0
    raise DataError(f"no prediction for {rec['subject']}/{rec['orientation']}/{rec['index']} in {pred_dir}")


def cmd_evaluate(args) -> int:
    cfg, run_dir, meta = _init_run(args)
    manifest = read_manifest(args.dataset)
    if args.split != "all":
        manifest = [r for r in manifest if r["split"] == args.split]
    if not manifest:
        raise DataError(f"no records for split {args.split!r} in {args.dataset}")

    per_method: dict[str, list[SliceMetrics]] = {}
    for spec in args.predictions:
        name, _, pth = spec.rpartition("=")
        pred_dir = Path(pth)
        name = name or pred_dir.name
        rows = []
        for rec in manifest:
            ref = np.load(Path(args.dataset) / rec["y0_sd"])
            pred = _load_prediction(pred_dir, rec)
            rows.append(
                SliceMetrics(
                    subject=rec["subject"],
                    orientation=rec["orientation"],
                    slice_index=rec["index"],
                    values=score_pair(pred, ref, cfg.metrics.featurizer_seed),
                )
            )
        per_method[name] = rows
        log.info("scored %d slices for method %r", len(rows), name)

    rep = build_report(per_method)
    report.write_per_slice_csv(rep, run_dir / "per_slice.csv")
    report.write_aggregates_csv(rep, run_dir / "aggregates.csv")
    report.write_report_json(rep, run_dir / "report.json")
    report.save_metric_distributions(rep, run_dir / "metric_distributions.png")
    for method, aggs in rep.aggregates.items():
        log.info(
            "%s: %s", method,
            "  ".join(f"{m}={report.format_mean_std(*aggs[m])}" for m in aggs),
        )
    _finish_run(run_dir, meta)
    return EXIT_OK


def cmd_analyze_cka(args) -> int:
    cfg, run_dir, meta = _init_run(args)
    model = MultiTaskDenoiser(cfg.model)
    checkpoint.load_model_weights(
        args.checkpoint, model,
        expected_config_hash=cfg.config_hash,
        allow_mismatch=args.allow_config_mismatch,
    )
    schedule = build_schedule(cfg.train.T, cfg.train.schedule_kind)
    split = None if args.split == "all" else args.split
    samples = load_samples(args.dataset, split=split)[: cfg.analysis.max_samples]
    layer_spec = list(cfg.analysis.layers) if cfg.analysis.layers else model.layer_ids()
    acts = analysis.capture_activations(
        model, samples, layer_spec, schedule,
        t=cfg.analysis.timestep, seed=cfg.analysis.capture_seed,
    )
    summary = {}
    for stage in ("encoder", "decoder"):
        pet, mri = analysis.branch_split(acts, stage=stage)
        if not pet:
            continue
        matrix, rows, cols = analysis.cka_matrix(pet, mri)
        report.write_cka_csv(matrix, rows, cols, run_dir / f"cka_{stage}.csv")
        report.save_cka_heatmap(
            matrix, rows, cols, run_dir / f"cka_{stage}.png",
            f"{stage} branch similarity (n={len(samples)})",
        )
        summary[stage] = {"labels": rows, "diagonal": [float(matrix[i, i]) for i in range(min(matrix.shape))]}
    (run_dir / "cka_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    log.info("CKA matrices written to %s", run_dir)
    _finish_run(run_dir, meta)
    return EXIT_OK


COMMANDS = {
    "simulate-dose": cmd_simulate_dose,
    "train": cmd_train,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "analyze-cka": cmd_analyze_cka,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        log.error("configuration error: %s", e)
        return EXIT_CONFIG
    except DataError as e:
        log.error("data error: %s", e)
        return EXIT_DATA
    except NumericalError as e:
        log.error("numerical failure: %s", e)
        return EXIT_NUMERICAL
    except PetdiffError as e:
        log.error("error: %s", e)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
