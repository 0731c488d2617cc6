"""Training loss (weighted SSIM + MAE) and evaluation metrics PSNR/SSIM/MAE.

Metric functions take plain numpy arrays; composite_loss builds an autodiff
graph so it can drive training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .autodiff import ShapeError, Variable


@dataclass
class LossConfig:
    alpha: float = 1.0     # SSIM-loss weight
    beta: float = 0.5      # MAE weight
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError(f"loss weights alpha={self.alpha}, beta={self.beta} "
                             "must be nonnegative with a positive sum")
        if self.ssim_window % 2 == 0 or self.ssim_window < 1:
            raise ValueError(f"ssim_window must be odd, got {self.ssim_window}")


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian window."""
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _check_pair(pred, target, name):
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"{name}: shapes differ: {pred.shape} vs {target.shape}")
    return pred, target


def mae(pred, target) -> float:
    pred, target = _check_pair(pred, target, "mae")
    return float(np.mean(np.abs(pred - target)))


def psnr(pred, target, dynamic_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical inputs."""
    pred, target = _check_pair(pred, target, "psnr")
    mse = float(np.mean((np.asarray(pred, np.float64)
                         - np.asarray(target, np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(dynamic_range ** 2 / mse)


def _as_batched(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img[None]
    if img.ndim != 4:
        raise ShapeError(f"ssim: expected HxWxC or BxHxWxC, got rank {img.ndim}")
    return img


def ssim(pred, target, cfg: LossConfig | None = None) -> float:
    """Mean SSIM over fully contained Gaussian windows and all channels."""
    cfg = cfg or LossConfig()
    pred, target = _check_pair(pred, target, "ssim")
    x = _as_batched(pred)
    y = _as_batched(target)
    k = cfg.ssim_window
    if x.shape[1] < k or x.shape[2] < k:
        raise ShapeError(f"ssim: image {x.shape[1]}x{x.shape[2]} is smaller than "
                         f"the {k}x{k} window")
    w = gaussian_window(k, cfg.ssim_sigma)

    def filt(img):
        win = sliding_window_view(img, (k, k), axis=(1, 2))
        return np.einsum("bhwcij,ij->bhwc", win, w)

    c1 = (cfg.ssim_k1 * cfg.dynamic_range) ** 2
    c2 = (cfg.ssim_k2 * cfg.dynamic_range) ** 2
    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(y * y) - mu_y * mu_y
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def _ssim_kernel(k, sigma, channels, dtype):
    """k×k×C×C kernel that applies the Gaussian window per channel."""
    w = gaussian_window(k, sigma)
    kern = np.zeros((k, k, channels, channels), dtype=dtype)
    for c in range(channels):
        kern[:, :, c, c] = w
    return kern


def ssim_graph(pred: Variable, target: Variable, cfg: LossConfig) -> Variable:
    """Differentiable SSIM matching ssim() on the same inputs."""
    k = cfg.ssim_window
    channels = pred.shape[-1]
    kern = ad.constant(_ssim_kernel(k, cfg.ssim_sigma, channels,
                                    pred.value.dtype))

    def filt(v):
        return ad.conv2d(v, kern, padding="valid")

    c1 = (cfg.ssim_k1 * cfg.dynamic_range) ** 2
    c2 = (cfg.ssim_k2 * cfg.dynamic_range) ** 2
    mu_x, mu_y = filt(pred), filt(target)
    sxx = filt(pred * pred) - mu_x * mu_x
    syy = filt(target * target) - mu_y * mu_y
    sxy = filt(pred * target) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return ad.mean_all(num / den)


def composite_loss(pred: Variable, target, cfg: LossConfig) -> Variable:
    """alpha * (1 - SSIM) + beta * MAE, differentiable end to end."""
    if not isinstance(target, Variable):
        target = ad.constant(np.asarray(target, dtype=pred.value.dtype))
    if pred.shape != target.shape:
        raise ShapeError(f"composite_loss: shapes differ: {pred.shape} vs "
                         f"{target.shape}")
    loss = None
    if cfg.alpha != 0.0:
        loss = cfg.alpha * (1.0 - ssim_graph(pred, target, cfg))
    if cfg.beta != 0.0:
        mae_term = cfg.beta * ad.mean_all(ad.absolute(pred - target))
        loss = mae_term if loss is None else loss + mae_term
    return loss
