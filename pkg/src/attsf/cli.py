"""Command-line front end: train, infer, eval, synth.

Exit codes: 0 ok, 2 usage/input error, 3 partial data, 4 numeric failure.
"""

from __future__ import annotations

import math
import sys
from pathlib import Path

import click
import numpy as np
import yaml

from . import data as dp
from . import training as tr
from .autodiff import Rng
from .metrics import LossConfig, mae, psnr, ssim
from .model import AttsfModel, ConfigError, ModelConfig

EXIT_USAGE = 2
EXIT_PARTIAL = 3
EXIT_NUMERIC = 4


def _fail(code, msg):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _get(cfg: dict, path: str, default):
    node = cfg
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            return default
        node = node[part]
    return node


def load_config(path) -> dict:
    """Parse and validate the YAML config; errors name the offending key."""
    if path is None:
        return {}
    try:
        cfg = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as e:
        _fail(EXIT_USAGE, f"config {path}: {e}")
    if not isinstance(cfg, dict):
        _fail(EXIT_USAGE, f"config {path}: top level must be a mapping")
    return cfg


def build_model_config(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig(
            levels=int(_get(cfg, "model.levels", 4)),
            base_channels=int(_get(cfg, "model.base_channels", 32)),
            triple_local_kernels=tuple(
                _get(cfg, "model.triple_local_kernels", (1, 3, 5))),
            nonlocal_reduction=int(_get(cfg, "model.nonlocal_reduction", 2)),
            leaky_slope=float(_get(cfg, "model.leaky_slope", 0.2)),
        )
    except (ConfigError, TypeError, ValueError) as e:
        _fail(EXIT_USAGE, f"model config: {e}")


def _phase(cfg, key, defaults: tr.PhaseConfig) -> tr.PhaseConfig:
    try:
        loss = LossConfig(
            alpha=float(_get(cfg, f"{key}.loss.alpha", defaults.loss.alpha)),
            beta=float(_get(cfg, f"{key}.loss.beta", defaults.loss.beta)),
            ssim_window=int(_get(cfg, f"{key}.loss.ssim_window",
                                 defaults.loss.ssim_window)))
        return tr.PhaseConfig(
            optimizer=_get(cfg, f"{key}.optimizer", defaults.optimizer),
            lr=float(_get(cfg, f"{key}.lr", defaults.lr)),
            batch=int(_get(cfg, f"{key}.batch", defaults.batch)),
            epochs=int(_get(cfg, f"{key}.epochs", defaults.epochs)),
            lr_half_every=_get(cfg, f"{key}.lr_half_every",
                               defaults.lr_half_every),
            momentum=float(_get(cfg, f"{key}.momentum", defaults.momentum)),
            loss=loss)
    except (TypeError, ValueError) as e:
        _fail(EXIT_USAGE, f"{key}: {e}")


def build_train_config(cfg: dict, seed=None) -> tr.TrainConfig:
    tc = tr.TrainConfig(
        phase1=_phase(cfg, "train.phase1", tr.default_phase1()),
        phase2=_phase(cfg, "train.phase2", tr.default_phase2()),
        seed=int(_get(cfg, "train.seed", 0)),
        checkpoint_every=int(_get(cfg, "train.checkpoint_every", 50)),
        augment=bool(_get(cfg, "train.augment", True)))
    if seed is not None:
        tc.seed = int(seed)
    return tc


@click.group()
def main():
    """Dual-pixel defocus deblurring tool."""


@main.command("train")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--data", "data_root", type=click.Path(), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--resume", "resume_from", type=click.Path(), default=None)
def cmd_train(config_path, data_root, out_dir, seed, resume_from):
    """Train the model on <data_root>/{train,val}/ and write checkpoints."""
    if not Path(data_root).is_dir():
        _fail(EXIT_USAGE, f"data root does not exist: {data_root}")
    cfg = load_config(config_path)
    model_cfg = build_model_config(cfg)
    train_cfg = build_train_config(cfg, seed)
    patch = dp.PatchSpec(size=int(_get(cfg, "patch.size", 560)),
                         stride=int(_get(cfg, "patch.stride", 140)))
    try:
        train_patches = [p for s in dp.load_dataset(data_root, "train")
                         for p in dp.extract_patches(s, patch)]
        val_dir = Path(data_root) / "val"
        val_patches = None
        if val_dir.is_dir():
            val_patches = [p for s in dp.load_dataset(data_root, "val")
                           for p in dp.extract_patches(s, patch)]
    except dp.DatasetError as e:
        _fail(EXIT_USAGE, str(e))
    model = AttsfModel(model_cfg, seed=train_cfg.seed)
    try:
        tr.train(model, train_patches, train_cfg, val_samples=val_patches,
                 out_dir=out_dir, resume_from=resume_from)
    except tr.TrainingError as e:
        _fail(EXIT_NUMERIC, str(e))
    except tr.CheckpointError as e:
        _fail(EXIT_USAGE, str(e))


def _pad_to_multiple(img: np.ndarray, mult: int) -> tuple[np.ndarray, int, int]:
    h, w = img.shape[:2]
    ph = (-h) % mult
    pw = (-w) % mult
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    return img, h, w


@main.command("infer")
@click.option("--ckpt", type=click.Path(), required=True)
@click.option("--left", "left_path", type=click.Path(), required=True)
@click.option("--right", "right_path", type=click.Path(), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def cmd_infer(ckpt, left_path, right_path, out_path):
    """Deblur one dual-pixel pair into a PNG of the same size."""
    try:
        state = tr.checkpoint_load(ckpt)
    except (OSError, tr.CheckpointError) as e:
        _fail(EXIT_USAGE, f"checkpoint: {e}")
    model = state["model"]
    try:
        left = dp.read_image(left_path)
        right = dp.read_image(right_path)
    except dp.DatasetError as e:
        _fail(EXIT_USAGE, str(e))
    if left.shape != right.shape:
        _fail(EXIT_USAGE, f"left {left.shape} and right {right.shape} "
                          "images differ in size")
    mult = 2 ** model.cfg.levels
    left_p, h, w = _pad_to_multiple(left, mult)
    right_p, _, _ = _pad_to_multiple(right, mult)
    pred = model.forward(left_p[None], right_p[None]).value[0]
    if not np.all(np.isfinite(pred)):
        _fail(EXIT_NUMERIC, "non-finite values in network output")
    dp.write_image(out_path, pred[:h, :w])


def _fmt_metric(x):
    return "inf" if math.isinf(x) else f"{x:.6f}"


@main.command("eval")
@click.option("--pred", "pred_dir", type=click.Path(), required=True)
@click.option("--gt", "gt_dir", type=click.Path(), required=True)
@click.option("--allow-partial", is_flag=True, default=False)
def cmd_eval(pred_dir, gt_dir, allow_partial):
    """Per-image and aggregate PSNR/SSIM/MAE over matching stems."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    if not pred_dir.is_dir() or not gt_dir.is_dir():
        _fail(EXIT_USAGE, "both --pred and --gt must be directories")
    pred_stems = {p.stem for p in pred_dir.glob("*.png")}
    gt_stems = {p.stem for p in gt_dir.glob("*.png")}
    unmatched = sorted(pred_stems ^ gt_stems)
    common = sorted(pred_stems & gt_stems)
    if unmatched and not allow_partial:
        _fail(EXIT_PARTIAL, "unmatched stems: " + ", ".join(unmatched))
    if not common:
        _fail(EXIT_USAGE, "no matching image stems to evaluate")
    click.echo("stem,psnr,ssim,mae")
    psnrs, ssims, maes = [], [], []
    for stem in common:
        try:
            pred = dp.read_image(pred_dir / f"{stem}.png")
            gt = dp.read_image(gt_dir / f"{stem}.png")
        except dp.DatasetError as e:
            _fail(EXIT_USAGE, str(e))
        p, s, m = psnr(pred, gt), ssim(pred, gt), mae(pred, gt)
        psnrs.append(p)
        ssims.append(s)
        maes.append(m)
        click.echo(f"{stem},{_fmt_metric(p)},{s:.6f},{m:.6f}")
    click.echo(f"mean,{_fmt_metric(float(np.mean(psnrs)))},"
               f"{float(np.mean(ssims)):.6f},{float(np.mean(maes)):.6f}")


@main.command("synth")
@click.option("--in", "in_dir", type=click.Path(), required=True)
@click.option("--out", "out_root", type=click.Path(), required=True)
@click.option("--radius", type=float, default=3.0)
@click.option("--seed", type=int, default=0)
@click.option("--split", type=str, default="train")
def cmd_synth(in_dir, out_root, radius, seed, split):
    """Blur sharp images into a synthetic dual-pixel dataset layout."""
    in_dir = Path(in_dir)
    if not in_dir.is_dir():
        _fail(EXIT_USAGE, f"input directory does not exist: {in_dir}")
    files = sorted(in_dir.glob("*.png"))
    if not files:
        _fail(EXIT_USAGE, f"no .png files in {in_dir}")
    rng = Rng(seed)
    base = Path(out_root) / split
    failures = 0
    for path in files:
        try:
            sharp = dp.read_image(path)
            sample = dp.synth_dual_pixel(
                sharp, dp.SynthConfig(max_blur_radius=radius), rng,
                sample_id=path.stem)
        except (dp.DatasetError, ValueError) as e:
            click.echo(f"warning: {path.name}: {e}", err=True)
            failures += 1
            continue
        for role in dp.ROLES:
            dp.write_image(base / role / f"{path.stem}.png",
                           getattr(sample, role))
    if failures == len(files):
        _fail(EXIT_USAGE, "all input images failed")


if __name__ == "__main__":
    main()
