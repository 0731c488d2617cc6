"""Dual-pixel dataset loading, patching, augmentation, and a synthetic
defocus-blur generator.

Dataset layout on disk: <root>/<split>/{left,right,target}/<stem>.png with
8- or 16-bit 3-channel PNGs. Values are normalized to [0, 1] on load.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from .autodiff import Rng

log = logging.getLogger(__name__)

ROLES = ("left", "right", "target")


class DatasetError(RuntimeError):
    """Raised for missing or unreadable dataset files."""


@dataclass
class DualPixelSample:
    left: np.ndarray     # HxWx3 in [0,1]
    right: np.ndarray
    target: np.ndarray
    id: str

    def __post_init__(self):
        if not (self.left.shape == self.right.shape == self.target.shape):
            raise DatasetError(
                f"sample {self.id}: left/right/target shapes differ: "
                f"{self.left.shape}, {self.right.shape}, {self.target.shape}")


@dataclass
class PatchSpec:
    size: int = 560
    stride: int = 140

    def __post_init__(self):
        if not 1 <= self.stride <= self.size:
            raise ValueError(f"need 1 <= stride <= size, got stride="
                             f"{self.stride}, size={self.size}")


@dataclass
class SynthConfig:
    max_blur_radius: float = 3.0
    depth_map: np.ndarray | None = None  # HxW in [0,1]; generated if None

    def __post_init__(self):
        if self.max_blur_radius < 0:
            raise ValueError(f"max_blur_radius must be >= 0, "
                             f"got {self.max_blur_radius}")


def read_image(path) -> np.ndarray:
    """Read a 3-channel PNG as float32 RGB in [0,1]."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DatasetError(f"unreadable image: {path}")
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise DatasetError(f"expected a 3-channel image at {path}, "
                           f"got shape {raw.shape}")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise DatasetError(f"unsupported image dtype {raw.dtype} at {path}")
    return (raw[:, :, ::-1].astype(np.float32)) / scale


def write_image(path, img: np.ndarray) -> None:
    """Write an RGB [0,1] float image as 16-bit PNG."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    out = np.round(arr * 65535.0).astype(np.uint16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), out[:, :, ::-1]):
        raise DatasetError(f"failed to write image: {path}")


def load_dataset(root, split):
    """Lazily yield normalized samples for a split, in lexicographic order."""
    base = Path(root) / split
    left_dir = base / "left"
    if not left_dir.is_dir():
        raise DatasetError(f"missing dataset directory: {left_dir}")
    for left_path in sorted(left_dir.glob("*.png")):
        stem = left_path.stem
        paths = {role: base / role / left_path.name for role in ROLES}
        missing = [role for role in ROLES if not paths[role].is_file()]
        if missing:
            raise DatasetError(f"sample '{stem}': missing {', '.join(missing)} "
                               "image(s)")
        yield DualPixelSample(left=read_image(paths["left"]),
                              right=read_image(paths["right"]),
                              target=read_image(paths["target"]),
                              id=stem)


def extract_patches(sample: DualPixelSample, spec: PatchSpec):
    """Crop congruent patches on a stride grid, fully contained."""
    h, w = sample.target.shape[:2]
    if h < spec.size or w < spec.size:
        log.warning("sample %s (%dx%d) smaller than patch size %d; skipped",
                    sample.id, h, w, spec.size)
        return []
    patches = []
    for i in range((h - spec.size) // spec.stride + 1):
        for j in range((w - spec.size) // spec.stride + 1):
            y, x = i * spec.stride, j * spec.stride
            sl = (slice(y, y + spec.size), slice(x, x + spec.size))
            patches.append(DualPixelSample(
                left=sample.left[sl], right=sample.right[sl],
                target=sample.target[sl], id=f"{sample.id}_y{y}_x{x}"))
    return patches


def augment(sample: DualPixelSample, rng: Rng) -> DualPixelSample:
    """Random 90-degree rotation plus horizontal/vertical flips, applied
    identically to all three images. A horizontal flip mirrors the
    half-aperture geometry, so it also swaps left and right."""
    h, w = sample.target.shape[:2]
    k = rng.integers(4)
    if k and h != w:
        raise ValueError(f"rotation requires square patches, got {h}x{w}")
    hflip = rng.integers(2)
    vflip = rng.integers(2)

    def tf(img):
        out = np.rot90(img, k, axes=(0, 1))
        if hflip:
            out = out[:, ::-1]
        if vflip:
            out = out[::-1]
        return np.ascontiguousarray(out)

    left, right = sample.left, sample.right
    if hflip:
        left, right = right, left
    return DualPixelSample(left=tf(left), right=tf(right),
                           target=tf(sample.target), id=sample.id)


def disk_psf(radius: int) -> np.ndarray:
    """Disk kernel of integer radius, normalized to sum 1."""
    if radius == 0:
        return np.ones((1, 1))
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    disk = (xx ** 2 + yy ** 2 <= r ** 2).astype(np.float64)
    return disk / disk.sum()


def half_disk_psfs(radius: int):
    """Left/right half-disk kernels. The center column is shared half/half,
    so the average of the two normalized halves is the full-disk kernel."""
    if radius == 0:
        k = np.ones((1, 1))
        return k.copy(), k.copy()
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    disk = (xx ** 2 + yy ** 2 <= r ** 2).astype(np.float64)
    left = disk * ((xx < 0) + 0.5 * (xx == 0))
    right = disk * ((xx > 0) + 0.5 * (xx == 0))
    return left / left.sum(), right / right.sum()


def _blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    if kernel.shape == (1, 1):
        return img * kernel[0, 0]
    out = np.empty_like(img, dtype=np.float64)
    for c in range(img.shape[2]):
        out[:, :, c] = ndimage.convolve(img[:, :, c].astype(np.float64),
                                        kernel, mode="reflect")
    return out


def default_depth_map(shape, rng: Rng) -> np.ndarray:
    """Smooth random depth field in [0,1]: upsampled low-res noise."""
    coarse = rng.uniform(0.0, 1.0, (4, 4), dtype=np.float64)
    h, w = shape
    zoomed = ndimage.zoom(coarse, (h / 4, w / 4), order=1,
                          mode="nearest", grid_mode=True)
    return np.clip(zoomed[:h, :w], 0.0, 1.0)


def synth_dual_pixel(sharp: np.ndarray, cfg: SynthConfig, rng: Rng,
                     sample_id: str = "synth") -> DualPixelSample:
    """Synthesize a dual-pixel pair by spatially varying half-disk blur.

    The per-pixel radius is max_blur_radius * depth. Radii are quantized to
    integer bins and blended linearly between adjacent bins.
    """
    sharp = np.asarray(sharp, dtype=np.float64)
    h, w = sharp.shape[:2]
    if 2 * cfg.max_blur_radius + 1 > min(h, w):
        raise ValueError(f"blur radius {cfg.max_blur_radius} exceeds the "
                         f"image extent {h}x{w}")
    depth = cfg.depth_map if cfg.depth_map is not None \
        else default_depth_map((h, w), rng)
    if depth.shape != (h, w):
        raise ValueError(f"depth map shape {depth.shape} does not match "
                         f"image {h}x{w}")
    radius = cfg.max_blur_radius * np.clip(depth, 0.0, 1.0)
    rmax = int(np.ceil(radius.max()))

    left_bins, right_bins = [], []
    for r in range(rmax + 1):
        lk, rk = half_disk_psfs(r)
        left_bins.append(_blur(sharp, lk))
        right_bins.append(_blur(sharp, rk))

    lo = np.floor(radius).astype(int)
    hi = np.minimum(lo + 1, rmax)
    frac = (radius - lo)[:, :, None]
    lstack = np.stack(left_bins)
    rstack = np.stack(right_bins)
    idx = np.arange(h)[:, None], np.arange(w)[None, :]

    def blend(stack):
        low = stack[lo, idx[0], idx[1]]
        high = stack[hi, idx[0], idx[1]]
        return (1.0 - frac) * low + frac * high

    left = np.clip(blend(lstack), 0.0, 1.0).astype(np.float32)
    right = np.clip(blend(rstack), 0.0, 1.0).astype(np.float32)
    return DualPixelSample(left=left, right=right,
                           target=sharp.astype(np.float32), id=sample_id)
