"""ATTSF network: dual-attention encoders, triple-local and global-local
bottleneck, skip-connected decoder.

The model is a named map of parameters plus functional blocks built on the
autodiff ops. Layout is channel-last throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import (ShapeError, Variable, concat_channels, conv2d,
                       leaky_relu, matmul_batched, maxpool2d, mul_broadcast,
                       pool_global, relu, reshape, sigmoid, softmax_lastaxis,
                       transpose_last2, upsample_nearest)


class ConfigError(ValueError):
    """Raised when a model configuration is internally inconsistent."""


@dataclass
class ModelConfig:
    levels: int = 4
    base_channels: int = 32
    triple_local_kernels: tuple = (1, 3, 5)
    nonlocal_reduction: int = 2
    leaky_slope: float = 0.2
    input_channels: int = 3
    output_channels: int = 3

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        for k in self.triple_local_kernels:
            if k % 2 == 0 or k < 1:
                raise ConfigError(f"triple_local_kernels must be odd, got {k}")
        if self.bottleneck_channels % self.nonlocal_reduction != 0:
            raise ConfigError(
                f"nonlocal_reduction={self.nonlocal_reduction} must divide the "
                f"bottleneck width {self.bottleneck_channels}")

    def width(self, level: int) -> int:
        return self.base_channels * (2 ** level)

    @property
    def bottleneck_channels(self) -> int:
        # left and right encoder outputs are concatenated
        return 2 * self.base_channels * (2 ** (self.levels - 1))

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "base_channels": self.base_channels,
            "triple_local_kernels": list(self.triple_local_kernels),
            "nonlocal_reduction": self.nonlocal_reduction,
            "leaky_slope": self.leaky_slope,
            "input_channels": self.input_channels,
            "output_channels": self.output_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "triple_local_kernels" in d:
            d["triple_local_kernels"] = tuple(d["triple_local_kernels"])
        return cls(**d)


def _conv_params(params, name, k, cin, cout, rng, dtype):
    params[f"{name}.w"] = ad.parameter(
        ad.init_he_normal((k, k, cin, cout), rng, dtype), name=f"{name}.w")
    params[f"{name}.b"] = ad.parameter(
        np.zeros(cout, dtype=dtype), name=f"{name}.b")


def _dual_attention_params(params, prefix, c, rng, dtype):
    _conv_params(params, f"{prefix}.conv1", 3, c, c, rng, dtype)
    _conv_params(params, f"{prefix}.conv2", 3, c, c, rng, dtype)
    _conv_params(params, f"{prefix}.ca", 1, c, c, rng, dtype)
    _conv_params(params, f"{prefix}.pa", 1, 2, 1, rng, dtype)
    _conv_params(params, f"{prefix}.fuse", 1, 2 * c, c, rng, dtype)


def build_parameters(cfg: ModelConfig, rng: ad.Rng, dtype=np.float32) -> dict:
    params: dict[str, Variable] = {}
    for side in ("left", "right"):
        cin = cfg.input_channels
        for lvl in range(cfg.levels):
            w = cfg.width(lvl)
            pre = f"enc.{side}.{lvl}"
            _dual_attention_params(params, f"{pre}.da", cin, rng, dtype)
            _conv_params(params, f"{pre}.conv1", 3, cin, w, rng, dtype)
            _conv_params(params, f"{pre}.conv2", 3, w, w, rng, dtype)
            cin = w
    cb = cfg.bottleneck_channels
    for k in cfg.triple_local_kernels:
        _conv_params(params, f"tl.k{k}", k, cb, cb, rng, dtype)
    _conv_params(params, "tl.fuse", 1, len(cfg.triple_local_kernels) * cb, cb,
                 rng, dtype)
    ce = cb // cfg.nonlocal_reduction
    _conv_params(params, "gl.theta", 1, cb, ce, rng, dtype)
    _conv_params(params, "gl.phi", 1, cb, ce, rng, dtype)
    _conv_params(params, "gl.g", 1, cb, ce, rng, dtype)
    _conv_params(params, "gl.out", 1, ce, cb, rng, dtype)
    _conv_params(params, "bottleneck.fuse", 1, 2 * cb, cb, rng, dtype)
    cin = cb
    for lvl in reversed(range(cfg.levels)):
        w = cfg.width(lvl)
        pre = f"dec.{lvl}"
        _conv_params(params, f"{pre}.up", 3, cin, w, rng, dtype)
        _conv_params(params, f"{pre}.conv1", 3, 3 * w, w, rng, dtype)
        _conv_params(params, f"{pre}.conv2", 3, w, w, rng, dtype)
        cin = w
    _conv_params(params, "head", 3, cfg.width(0), cfg.output_channels, rng, dtype)
    return params


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter census as a function of the config."""

    def conv(k, cin, cout):
        return k * k * cin * cout + cout

    def dual_attention(c):
        return (2 * conv(3, c, c)      # spatial convs
                + conv(1, c, c)        # channel-attention conv
                + conv(1, 2, 1)        # pixel-attention conv
                + conv(1, 2 * c, c))   # fusion conv

    total = 0
    for _side in range(2):
        cin = cfg.input_channels
        for lvl in range(cfg.levels):
            w = cfg.width(lvl)
            total += dual_attention(cin) + conv(3, cin, w) + conv(3, w, w)
            cin = w
    cb = cfg.bottleneck_channels
    total += sum(conv(k, cb, cb) for k in cfg.triple_local_kernels)
    total += conv(1, len(cfg.triple_local_kernels) * cb, cb)
    ce = cb // cfg.nonlocal_reduction
    total += 3 * conv(1, cb, ce) + conv(1, ce, cb)
    total += conv(1, 2 * cb, cb)
    cin = cb
    for lvl in reversed(range(cfg.levels)):
        w = cfg.width(lvl)
        total += conv(3, cin, w) + conv(3, 3 * w, w) + conv(3, w, w)
        cin = w
    total += conv(3, cfg.width(0), cfg.output_channels)
    return total


def _conv(params, name, x, **kw):
    return conv2d(x, params[f"{name}.w"], params[f"{name}.b"], **kw)


def channel_attention(feat, params, prefix):
    """Per-channel mask: sigmoid(1x1 conv of the spatially pooled feature)."""
    if feat.shape[-1] != params[f"{prefix}.w"].shape[2]:
        raise ShapeError(
            f"channel_attention: feature has {feat.shape[-1]} channels, "
            f"params expect {params[f'{prefix}.w'].shape[2]}")
    pooled = pool_global(feat, "avg", "spatial")
    mask = sigmoid(_conv(params, prefix, pooled))
    return mul_broadcast(feat, mask)


def pixel_attention(feat, params, prefix):
    """Per-pixel mask from channel-pooled avg and max maps."""
    gap = pool_global(feat, "avg", "channel")
    gmp = pool_global(feat, "max", "channel")
    mask = sigmoid(_conv(params, prefix, concat_channels([gap, gmp])))
    return mul_broadcast(feat, mask)


def dual_attention(feat, params, prefix):
    t = relu(_conv(params, f"{prefix}.conv1", feat))
    t = relu(_conv(params, f"{prefix}.conv2", t))
    pa = pixel_attention(t, params, f"{prefix}.pa")
    ca = channel_attention(t, params, f"{prefix}.ca")
    return _conv(params, f"{prefix}.fuse", concat_channels([pa, ca]))


def attention_encoder_level(feat, params, prefix):
    """One encoder level: dual attention, two ReLU convs, 2x maxpool."""
    if feat.shape[1] % 2 or feat.shape[2] % 2:
        raise ShapeError(f"encoder level {prefix}: spatial extents "
                         f"{feat.shape[1]}x{feat.shape[2]} must be even")
    t = dual_attention(feat, params, f"{prefix}.da")
    t = relu(_conv(params, f"{prefix}.conv1", t))
    skip = relu(_conv(params, f"{prefix}.conv2", t))
    return skip, maxpool2d(skip, 2, 2)


def triple_local(feat, params, kernels):
    branches = [relu(_conv(params, f"tl.k{k}", feat)) for k in kernels]
    return _conv(params, "tl.fuse", concat_channels(branches))


def global_local(feat, params):
    """Embedded-Gaussian non-local block with a residual output projection."""
    B, H, W, C = feat.shape
    n = H * W
    theta = reshape(_conv(params, "gl.theta", feat), (B, n, -1))
    phi = reshape(_conv(params, "gl.phi", feat), (B, n, -1))
    g = reshape(_conv(params, "gl.g", feat), (B, n, -1))
    attn = softmax_lastaxis(matmul_batched(theta, transpose_last2(phi)))
    y = reshape(matmul_batched(attn, g), (B, H, W, -1))
    return feat + _conv(params, "gl.out", y)


def decoder_level(bottom, skip_left, skip_right, params, prefix, slope):
    if skip_left.shape != skip_right.shape:
        raise ShapeError(f"decoder {prefix}: skip shapes differ: "
                         f"{skip_left.shape} vs {skip_right.shape}")
    if (skip_left.shape[1] != 2 * bottom.shape[1]
            or skip_left.shape[2] != 2 * bottom.shape[2]):
        raise ShapeError(f"decoder {prefix}: skips {skip_left.shape} are not "
                         f"2x the bottom {bottom.shape}")
    u = _conv(params, f"{prefix}.up", upsample_nearest(bottom, 2))
    t = concat_channels([u, skip_left, skip_right])
    t = leaky_relu(_conv(params, f"{prefix}.conv1", t), slope)
    return leaky_relu(_conv(params, f"{prefix}.conv2", t), slope)


class AttsfModel:
    """The assembled network: config plus named parameter map."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32,
                 params: dict | None = None):
        self.cfg = cfg
        self.dtype = dtype
        if params is None:
            params = build_parameters(cfg, ad.Rng(seed), dtype)
        self.params = params

    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def astype(self, dtype) -> "AttsfModel":
        params = {k: ad.parameter(p.value.astype(dtype), name=p.name)
                  for k, p in self.params.items()}
        return AttsfModel(self.cfg, dtype=dtype, params=params)

    def forward(self, left, right) -> Variable:
        return attsf_forward(left, right, self)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def attsf_forward(left, right, model: AttsfModel) -> Variable:
    """Full forward pass: two blurry views in, one sharp image out, in (0,1)."""
    cfg, params = model.cfg, model.params
    if not isinstance(left, Variable):
        left = ad.constant(left)
    if not isinstance(right, Variable):
        right = ad.constant(right)
    if left.shape != right.shape:
        raise ShapeError(f"left {left.shape} and right {right.shape} inputs "
                         "must have the same shape")
    if left.value.ndim != 4 or left.shape[-1] != cfg.input_channels:
        raise ShapeError(f"inputs must be BxHxWx{cfg.input_channels}, "
                         f"got {left.shape}")
    div = 2 ** cfg.levels
    B, H, W, _ = left.shape
    if H % div or W % div:
        raise ShapeError(f"spatial extents {H}x{W} must be divisible by "
                         f"2^levels = {div}")

    skips = {}
    downs = {}
    for side, feat in (("left", left), ("right", right)):
        for lvl in range(cfg.levels):
            skip, feat = attention_encoder_level(feat, params,
                                                 f"enc.{side}.{lvl}")
            skips[(side, lvl)] = skip
        downs[side] = feat

    bott = concat_channels([downs["left"], downs["right"]])
    tl = triple_local(bott, params, cfg.triple_local_kernels)
    gl = global_local(bott, params)
    feat = _conv(params, "bottleneck.fuse", concat_channels([tl, gl]))

    for lvl in reversed(range(cfg.levels)):
        feat = decoder_level(feat, skips[("left", lvl)], skips[("right", lvl)],
                             params, f"dec.{lvl}", cfg.leaky_slope)
    return sigmoid(_conv(params, "head", feat))
