"""Stage runners behind the CLI. Each writes its outputs plus a manifest."""

from __future__ import annotations

import logging
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import PipelineConfig
from .core import (MultiChannelImage, RGBImage, RunManifest, file_digest, load_image,
                   save_image, utc_now, write_manifest)
from .metrics import MetricsReport, comparison_panel, evaluate
from .model import (Checkpoint, PairedPatches, TrainingLog, infer_wholeslide, patch_pairs, train)
from .phantom import (GridSpec, PALETTE, reconstruct_grid, render_phantom, simulate_scan,
                      warp_pair, write_scan_records)
from .preprocess import PreprocessConfig, ReferenceHistogram, label_reference, prepare_input
from .registration import (RegistrationReport, apply_transform, check_gate,
                           fit_nonrigid, leave_one_out_report, match_fov, read_control_points,
                           registration_report, write_control_points)
from .sampling import resize_bilinear
from .tiling import plan_patches, split_dataset, write_sidecar

log = logging.getLogger(__name__)

CHANNEL_FILES = ("nr.png", "rad.png", "sc.png")
MANIFEST = "manifest.json"


def _manifest(cfg: PipelineConfig, started: str) -> RunManifest:
    return RunManifest(seed=cfg.seed, config_digest=cfg.digest(), timestamps={"started": started})


def _finish(manifest: RunManifest, out: Path, outputs: Sequence[Path]) -> RunManifest:
    manifest.outputs = {p.name: file_digest(p) for p in outputs}
    manifest.timestamps["finished"] = utc_now()
    write_manifest(manifest, out / MANIFEST)
    return manifest


def load_channels(paths: Sequence[str | Path]) -> MultiChannelImage:
    if len(paths) != 3:
        raise ValueError("expected three channel files (non-radiative, radiative, scattering)")
    return MultiChannelImage(*(load_image(p, "channel") for p in paths))


def composite(img: MultiChannelImage) -> RGBImage:
    """False-color view of the three channels (nr, rad, sc) as (R, G, B)."""
    return RGBImage(img.to_array(), img.pitch_nm)


# --------------------------------------------------------------------------- #

def run_phantom(cfg: PipelineConfig, out: str | Path) -> RunManifest:
    """Synthesize a paired dataset as an instrument would deliver it.

    Writes the gridded TA-PARS channels, a false-color composite, the aligned
    H&E ground truth, the warped and rescaled "brightfield" H&E, the pulse
    records and the exact control points relating the two H&E frames.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _manifest(cfg, utc_now())
    acq = cfg.acquisition
    phantom = render_phantom(cfg.phantom, cfg.seed)
    truth = phantom.channels
    grid = GridSpec(truth.shape[0], truth.shape[1], truth.pitch_nm)
    records = simulate_scan(truth, grid, acq.jitter_nm, seed=cfg.seed)
    acquired = reconstruct_grid(records, grid)

    warped, points = warp_pair(phantom.he, acq.warp_amplitude_px, cfg.seed, acq.n_control_points)
    scale = truth.pitch_nm / acq.he_pitch_nm
    if scale != 1.0:
        h, w = warped.shape
        shape = (int(round(h * scale)), int(round(w * scale)))
        warped = RGBImage(np.clip(resize_bilinear(warped.pixels, shape), 0, 1), acq.he_pitch_nm)
        points = points.scale_moving(scale)
    else:
        warped = RGBImage(warped.pixels, acq.he_pitch_nm)

    written = []
    for name, ch in zip(CHANNEL_FILES, acquired.channels):
        save_image(ch, out / name)
        written.append(out / name)
    for name, img in (("input_composite.png", composite(acquired)),
                      ("he_truth.png", phantom.he), ("he_moving.png", warped)):
        save_image(img, out / name)
        written.append(out / name)
    write_scan_records(records, out / "scan_records.csv")
    write_control_points(points, out / "control_points.csv")
    written += [out / "scan_records.csv", out / "control_points.csv"]

    manifest.parameters = {"phantom": cfg.phantom.to_dict(),
                           "acquisition": cfg.to_dict()["acquisition"],
                           "palette": PALETTE}
    manifest.reports = {"phantom": {"n_nuclei": phantom.n_nuclei, "n_records": len(records)}}
    return _finish(manifest, out, written)


def run_register(cfg: PipelineConfig, reference: str | Path, moving: str | Path,
                 points_file: str | Path, out: str | Path,
                 holdout_file: str | Path | None = None) -> tuple[RunManifest, RegistrationReport]:
    """FOV-match and warp the H&E image onto the non-radiative reference.

    Raises :class:`RegistrationGateError` (after writing the report and
    manifest) when the residual gate trips.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _manifest(cfg, utc_now())
    ref = load_image(reference, "channel")
    mov = load_image(moving, "rgb")
    points = read_control_points(points_file)
    matched = match_fov(ref, mov)
    scale = mov.pitch_nm / ref.pitch_nm
    if scale != 1.0:
        points = points.scale_moving(scale)

    rc = cfg.registration
    transform = fit_nonrigid(points, k=rc.neighbors)
    if holdout_file is not None:
        holdout = read_control_points(holdout_file)
        if scale != 1.0:
            holdout = holdout.scale_moving(scale)
        report = registration_report(transform, holdout, rc.gate_px)
    else:
        report = leave_one_out_report(points, k=rc.neighbors, gate_px=rc.gate_px)

    manifest.inputs = {Path(p).name: file_digest(p) for p in (reference, moving, points_file)}
    manifest.parameters = {"registration": cfg.to_dict()["registration"],
                           "fov_scale": scale}
    manifest.reports = {"registration": report.to_dict(),
                        "fit_warnings": list(transform.fit_warnings)}
    written = []
    if report.passed:
        registered = apply_transform(transform, matched, ref.shape)
        save_image(RGBImage(registered.pixels, ref.pitch_nm), out / "he_registered.png")
        written.append(out / "he_registered.png")
    _finish(manifest, out, written)
    check_gate(report)
    return manifest, report


def _training_images(cfg: PipelineConfig, nr, rad, sc, labels):
    raws = [load_channels(paths) for paths in zip(nr, rad, sc)]
    labs = [load_image(p, "rgb") for p in labels]
    for raw, lab in zip(raws, labs):
        if raw.shape != lab.shape:
            raise ValueError(f"label shape {lab.shape} differs from input shape {raw.shape}")
    reference = label_reference(labs) if cfg.preprocess.hist_match else None
    inputs = [prepare_input(raw, cfg.preprocess, reference) for raw in raws]
    return inputs, labs, reference


def run_train(cfg: PipelineConfig, nr: Sequence, rad: Sequence, sc: Sequence, labels: Sequence,
              out: str | Path) -> tuple[RunManifest, Checkpoint, TrainingLog]:
    if not (len(nr) == len(rad) == len(sc) == len(labels)) or not labels:
        raise ValueError("need matching lists of nr/rad/sc/label files")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _manifest(cfg, utc_now())
    inputs, labs, reference = _training_images(cfg, nr, rad, sc, labels)

    tc = cfg.tiling
    train_parts, val_parts, sidecars = [], [], []
    for i, (x, y) in enumerate(zip(inputs, labs)):
        grid = plan_patches(x.shape, tc.patch, tc.stride)
        split = split_dataset(grid, (tc.train_ratio, tc.val_ratio), tc.block_px, seed=cfg.seed + i)
        train_parts.append(patch_pairs(x, y, grid, split.indices("train")))
        val_parts.append(patch_pairs(x, y, grid, split.indices("val")))
        side = out / f"patches_{i}.json"
        write_sidecar(side, grid, split, image_digest=file_digest(labels[i]))
        sidecars.append(side)
    train_set = PairedPatches.concat(train_parts)
    val_set = PairedPatches.concat(val_parts)
    log.info("training on %d patches, validating on %d", len(train_set), len(val_set))

    metadata = {"preprocess": cfg.preprocess.to_dict(),
                "reference_histogram": reference.to_dict() if reference is not None else None,
                "pitch_nm": inputs[0].pitch_nm}
    ckpt, history = train(train_set, val_set, cfg.train, cfg.generator, cfg.discriminator,
                          metadata=metadata)
    ckpt.config_digests["pipeline"] = cfg.digest()
    ckpt.save(out / "checkpoint.pt")
    history.write(out / "training_log.csv")

    paths = [*nr, *rad, *sc, *labels]
    manifest.inputs = {f"{i}:{Path(p).name}": file_digest(p) for i, p in enumerate(paths)}
    d = cfg.to_dict()
    manifest.parameters = {k: d[k] for k in ("preprocess", "tiling", "generator", "discriminator", "train")}
    manifest.reports = {"training": {"epochs_run": len(history.records),
                                     "best_epoch": history.best_epoch,
                                     "best_val_loss": ckpt.best_val_loss,
                                     "stopped_early": history.stopped_early,
                                     "n_train_patches": len(train_set),
                                     "n_val_patches": len(val_set)}}
    _finish(manifest, out, [out / "checkpoint.pt", out / "training_log.csv", *sidecars])
    return manifest, ckpt, history


def preprocess_for_checkpoint(ckpt: Checkpoint, raw: MultiChannelImage) -> MultiChannelImage:
    """Condition raw channels exactly as the checkpoint's training data was."""
    meta = ckpt.metadata
    pcfg = PreprocessConfig(**meta["preprocess"]) if "preprocess" in meta else PreprocessConfig()
    ref = meta.get("reference_histogram")
    reference = ReferenceHistogram.from_dict(ref) if ref else None
    return prepare_input(raw, pcfg, reference)


def run_infer(cfg: PipelineConfig, checkpoint: str | Path, channels: Sequence, out: str | Path,
              stride: int | None = None) -> tuple[RunManifest, RGBImage]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _manifest(cfg, utc_now())
    ckpt = Checkpoint.load(checkpoint)
    raw = load_channels(channels)
    x = preprocess_for_checkpoint(ckpt, raw)
    stride = stride or cfg.eval.infer_stride
    t0 = time.perf_counter()
    pred = infer_wholeslide(ckpt, x, stride=stride, patch=ckpt.generator_config.input_size,
                            batch_size=cfg.eval.infer_batch_size)
    elapsed = time.perf_counter() - t0
    save_image(pred, out / "virtual_stain.png")
    manifest.inputs = {Path(p).name: file_digest(p) for p in (checkpoint, *channels)}
    manifest.parameters = {"stride": stride, "patch": ckpt.generator_config.input_size,
                           "checkpoint_digests": ckpt.config_digests}
    manifest.reports = {"inference": {"shape": list(pred.shape), "wall_time_s": elapsed}}
    _finish(manifest, out, [out / "virtual_stain.png"])
    return manifest, pred


def run_eval(cfg: PipelineConfig, pred: str | Path, truth: str | Path, out: str | Path,
             panel_input: str | Path | None = None) -> tuple[RunManifest, MetricsReport]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _manifest(cfg, utc_now())
    p = load_image(pred, "rgb")
    t = load_image(truth, "rgb")
    ec = cfg.eval
    report = evaluate(p, t, ec.n_patches, ec.patch_px, cfg.seed)
    report.source_digests = {"pred": file_digest(pred), "truth": file_digest(truth)}
    report.write(out / "metrics.json")
    written = [out / "metrics.json"]
    if panel_input is not None:
        raw = load_image(panel_input, "rgb")
        save_image(comparison_panel(raw, p, t), out / "comparison.png")
        written.append(out / "comparison.png")
    manifest.inputs = dict(report.source_digests)
    manifest.parameters = {"eval": cfg.to_dict()["eval"]}
    manifest.reports = {"metrics": report.to_dict()}
    _finish(manifest, out, written)
    return manifest, report


def run_all(cfg: PipelineConfig, out: str | Path) -> dict[str, RunManifest]:
    """Phantom -> register -> train -> infer -> eval into sub-directories of ``out``."""
    out = Path(out)
    manifests = {"phantom": run_phantom(cfg, out / "phantom")}
    ph = out / "phantom"
    manifests["register"], _ = run_register(cfg, ph / "nr.png", ph / "he_moving.png",
                                            ph / "control_points.csv", out / "register")
    channels = [ph / n for n in CHANNEL_FILES]
    label = out / "register" / "he_registered.png"
    manifests["train"], _, _ = run_train(cfg, [channels[0]], [channels[1]], [channels[2]], [label],
                                         out / "train")
    manifests["infer"], _ = run_infer(cfg, out / "train" / "checkpoint.pt", channels, out / "infer")
    manifests["eval"], _ = run_eval(cfg, out / "infer" / "virtual_stain.png", ph / "he_truth.png",
                                    out / "eval", panel_input=ph / "input_composite.png")
    return manifests
