"""Two-phase training: Adam warm phase, then SGD fine-tune with the
learning rate halved every 20 epochs. Includes checkpointing with bit-exact
round trips and resume.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Rng
from .metrics import LossConfig, composite_loss, mae, psnr, ssim
from .model import AttsfModel, ModelConfig

CHECKPOINT_MAGIC = b"ATSF\x00"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {0: np.float32, 1: np.float64}
_TAG_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class TrainingError(RuntimeError):
    """Raised on numeric failures (NaN gradients or loss) during training."""


class CheckpointError(RuntimeError):
    """Raised for corrupt, truncated, or mismatched checkpoint files."""


@dataclass
class PhaseConfig:
    optimizer: str = "adam"
    lr: float = 1e-4
    batch: int = 1
    epochs: int = 0
    lr_half_every: int | None = None
    momentum: float = 0.0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer: {self.optimizer}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


def default_phase1() -> PhaseConfig:
    # warm phase: Adam on MAE only
    return PhaseConfig(optimizer="adam", lr=1e-4, batch=4, epochs=200,
                       loss=LossConfig(alpha=0.0, beta=1.0))


def default_phase2() -> PhaseConfig:
    # fine-tune: SGD on the weighted SSIM + MAE loss, halving LR every 20
    return PhaseConfig(optimizer="sgd", lr=5e-5, batch=2, epochs=100,
                       lr_half_every=20, loss=LossConfig(alpha=1.0, beta=0.5))


@dataclass
class TrainConfig:
    phase1: PhaseConfig = field(default_factory=default_phase1)
    phase2: PhaseConfig = field(default_factory=default_phase2)
    seed: int = 0
    checkpoint_every: int = 50
    augment: bool = True

    def to_dict(self) -> dict:
        def phase(p):
            return {"optimizer": p.optimizer, "lr": p.lr, "batch": p.batch,
                    "epochs": p.epochs, "lr_half_every": p.lr_half_every,
                    "momentum": p.momentum,
                    "loss": {"alpha": p.loss.alpha, "beta": p.loss.beta,
                             "ssim_window": p.loss.ssim_window}}
        return {"phase1": phase(self.phase1), "phase2": phase(self.phase2),
                "seed": self.seed, "checkpoint_every": self.checkpoint_every,
                "augment": self.augment}


def config_digest(model_cfg: ModelConfig, train_cfg: TrainConfig | None) -> str:
    blob = {"model": model_cfg.to_dict()}
    if train_cfg is not None:
        blob["train"] = train_cfg.to_dict()
    canon = json.dumps(blob, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def lr_schedule(epoch: int, base_lr: float, half_every: int | None = 20) -> float:
    """base_lr halved once every `half_every` epochs."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if not half_every:
        return base_lr
    return base_lr * 0.5 ** (epoch // half_every)


class AdamState:
    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def __init__(self, params: dict):
        self.step = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}


class SgdState:
    def __init__(self, params: dict, momentum: float = 0.0):
        self.momentum = momentum
        self.buf = ({k: np.zeros_like(p.value) for k, p in params.items()}
                    if momentum else {})


def _check_grads(params):
    for name, p in params.items():
        if p.grad is None:
            raise TrainingError(f"parameter '{name}' has no gradient")
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in parameter '{name}'")


def adam_step(params: dict, state: AdamState, lr: float) -> None:
    """Standard bias-corrected Adam update, in place."""
    _check_grads(params)
    state.step += 1
    t = state.step
    b1, b2, eps = state.beta1, state.beta2, state.eps
    for name, p in params.items():
        dt = p.value.dtype
        g = p.grad.astype(dt)
        state.m[name] = (b1 * state.m[name] + (1 - b1) * g).astype(dt)
        state.v[name] = (b2 * state.v[name] + (1 - b2) * g * g).astype(dt)
        mhat = state.m[name] / dt.type(1 - b1 ** t)
        vhat = state.v[name] / dt.type(1 - b2 ** t)
        p.value = p.value - dt.type(lr) * mhat / (np.sqrt(vhat) + dt.type(eps))


def sgd_step(params: dict, lr: float, state: SgdState | None = None) -> None:
    """Plain SGD (momentum optional, off by default), in place."""
    _check_grads(params)
    for name, p in params.items():
        g = p.grad.astype(p.value.dtype)
        if state is not None and state.momentum:
            state.buf[name] = state.momentum * state.buf[name] + g
            g = state.buf[name]
        p.value = p.value - np.asarray(lr, p.value.dtype) * g


# -- checkpoint format ------------------------------------------------------
# magic | u32 version | blob digest | blob config-json | blob rng-json |
# u32 epoch | u32 phase | u32 n_tensors | tensor records (sorted by name).
# Tensor record: u32 name_len | name | u8 dtype tag | u32 rank | u32 extents
# | little-endian payload.

def _write_blob(f, data: bytes):
    f.write(struct.pack("<I", len(data)))
    f.write(data)


def _read_exact(f, n):
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, "
                              f"got {len(data)}")
    return data


def _read_blob(f) -> bytes:
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    return _read_exact(f, n)


def _write_tensor(f, name: str, arr: np.ndarray):
    enc = name.encode()
    f.write(struct.pack("<I", len(enc)))
    f.write(enc)
    f.write(struct.pack("<BI", _TAG_FOR[arr.dtype], arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def _read_tensor(f):
    (name_len,) = struct.unpack("<I", _read_exact(f, 4))
    name = _read_exact(f, name_len).decode()
    tag, rank = struct.unpack("<BI", _read_exact(f, 5))
    if tag not in _DTYPE_TAGS:
        raise CheckpointError(f"unknown dtype tag {tag} for tensor '{name}'")
    shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
    dtype = np.dtype(_DTYPE_TAGS[tag]).newbyteorder("<")
    raw = _read_exact(f, int(np.prod(shape, dtype=np.int64)) * dtype.itemsize)
    return name, np.frombuffer(raw, dtype=dtype).reshape(shape).astype(
        _DTYPE_TAGS[tag])


def checkpoint_save(path, model: AttsfModel, epoch: int, phase: int,
                    rng: Rng, train_cfg: TrainConfig | None = None,
                    adam: AdamState | None = None,
                    sgd: SgdState | None = None) -> None:
    tensors = {f"param/{k}": p.value for k, p in model.params.items()}
    if adam is not None:
        tensors["adam/step"] = np.asarray([adam.step], dtype=np.float64)
        for k in adam.m:
            tensors[f"adam/m/{k}"] = adam.m[k]
            tensors[f"adam/v/{k}"] = adam.v[k]
    if sgd is not None and sgd.momentum:
        for k, buf in sgd.buf.items():
            tensors[f"sgd/buf/{k}"] = buf
    meta = {"model": model.cfg.to_dict(),
            "train": train_cfg.to_dict() if train_cfg else None}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_blob(f, config_digest(model.cfg, train_cfg).encode())
        _write_blob(f, json.dumps(meta, sort_keys=True).encode())
        _write_blob(f, json.dumps(rng.get_state(), sort_keys=True).encode())
        f.write(struct.pack("<III", epoch, phase, len(tensors)))
        for name in sorted(tensors):
            _write_tensor(f, name, tensors[name])


def checkpoint_load(path, expected_digest: str | None = None,
                    force: bool = False) -> dict:
    """Load a checkpoint into a dict with model, rng, optimizer state, and
    the (phase, epoch) position."""
    with open(path, "rb") as f:
        magic = _read_exact(f, len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic bytes in {path}")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        digest = _read_blob(f).decode()
        if expected_digest is not None and digest != expected_digest and not force:
            raise CheckpointError(
                f"config digest mismatch: checkpoint {digest[:12]}..., "
                f"expected {expected_digest[:12]}... (pass force to override)")
        meta = json.loads(_read_blob(f))
        rng_state = json.loads(_read_blob(f))
        epoch, phase, n_tensors = struct.unpack("<III", _read_exact(f, 12))
        tensors = dict(_read_tensor(f) for _ in range(n_tensors))
        if f.read(1):
            raise CheckpointError(f"trailing data after checkpoint: {path}")

    cfg = ModelConfig.from_dict(meta["model"])
    params = {}
    for key, arr in tensors.items():
        if key.startswith("param/"):
            name = key[len("param/"):]
            params[name] = ad.parameter(arr, name=name)
    model = AttsfModel(cfg, params=params)
    if set(params) != set(build_names(cfg)):
        raise CheckpointError("checkpoint parameter names do not match config")

    adam = None
    if "adam/step" in tensors:
        adam = AdamState(params)
        adam.step = int(tensors["adam/step"][0])
        for k in params:
            adam.m[k] = tensors[f"adam/m/{k}"]
            adam.v[k] = tensors[f"adam/v/{k}"]
    rng = Rng(rng_state["seed"])
    rng_state["state"]["state"] = {k: int(v) for k, v in
                                   rng_state["state"]["state"].items()}
    rng.set_state(rng_state)
    return {"model": model, "rng": rng, "adam": adam, "epoch": epoch,
            "phase": phase, "digest": digest, "meta": meta}


def build_names(cfg: ModelConfig):
    from .model import build_parameters
    return build_parameters(cfg, Rng(0)).keys()


def _stack(samples, attr):
    return np.stack([getattr(s, attr) for s in samples]).astype(np.float32)


def evaluate(model: AttsfModel, samples) -> dict:
    """Mean PSNR/SSIM/MAE of model outputs over a sample list."""
    psnrs, ssims, maes = [], [], []
    for s in samples:
        pred = model.forward(s.left[None], s.right[None]).value[0]
        psnrs.append(psnr(pred, s.target))
        ssims.append(ssim(pred, s.target))
        maes.append(mae(pred, s.target))
    return {"psnr": float(np.mean(psnrs)), "ssim": float(np.mean(ssims)),
            "mae": float(np.mean(maes))}


def _format_row(epoch, phase, lr, train_loss, val):
    def fmt(x):
        return "nan" if x is None else f"{x:.9g}"
    return (f"{epoch},{phase},{lr:.9g},{train_loss:.9g},"
            f"{fmt(val and val.get('psnr'))},{fmt(val and val.get('ssim'))},"
            f"{fmt(val and val.get('mae'))}")

METRICS_HEADER = "epoch,phase,lr,train_loss,val_psnr,val_ssim,val_mae"


def train(model: AttsfModel, train_samples, cfg: TrainConfig,
          val_samples=None, out_dir=None, resume_from=None) -> list[str]:
    """Run both phases; returns metrics-log rows (and writes them to
    out_dir/metrics.csv plus periodic checkpoints when out_dir is given)."""
    train_samples = list(train_samples)
    if not train_samples:
        raise TrainingError("training dataset is empty")
    val_samples = list(val_samples) if val_samples is not None else None

    rng = Rng(cfg.seed)
    adam = AdamState(model.params)
    sgd = SgdState(model.params, cfg.phase2.momentum)
    start_phase, start_epoch = 1, 0
    rows = []
    if resume_from is not None:
        state = checkpoint_load(resume_from,
                                expected_digest=config_digest(model.cfg, cfg))
        model.params = state["model"].params
        rng = state["rng"]
        if state["adam"] is not None:
            adam = state["adam"]
        start_phase, start_epoch = state["phase"], state["epoch"]

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    def save(tag, epoch, phase):
        if out_dir is not None:
            checkpoint_save(out_dir / f"checkpoint_{tag}.ckpt", model, epoch,
                            phase, rng, cfg, adam=adam, sgd=sgd)

    global_epoch = 0
    for phase_no, phase in ((1, cfg.phase1), (2, cfg.phase2)):
        for epoch in range(phase.epochs):
            past = (phase_no < start_phase
                    or (phase_no == start_phase and epoch < start_epoch))
            lr = lr_schedule(epoch, phase.lr, phase.lr_half_every)
            if past:
                global_epoch += 1
                continue
            order = rng.permutation(len(train_samples))
            losses = []
            for lo in range(0, len(order), phase.batch):
                batch = [train_samples[i] for i in order[lo:lo + phase.batch]]
                if cfg.augment:
                    from .data import augment
                    batch = [augment(s, rng) for s in batch]
                left, right = _stack(batch, "left"), _stack(batch, "right")
                target = _stack(batch, "target")
                pred = model.forward(left, right)
                loss = composite_loss(pred, target, phase.loss)
                if not np.isfinite(loss.value):
                    save("abort", epoch, phase_no)
                    raise TrainingError(f"non-finite loss at phase {phase_no} "
                                        f"epoch {epoch}")
                model.zero_grad()
                ad.backward(loss, parameters=model.params.values())
                if phase.optimizer == "adam":
                    adam_step(model.params, adam, lr)
                else:
                    sgd_step(model.params, lr, sgd)
                losses.append(float(loss.value))
            val = evaluate(model, val_samples) if val_samples else None
            rows.append(_format_row(global_epoch, phase_no, lr,
                                    float(np.mean(losses)), val))
            global_epoch += 1
            if (epoch + 1) % cfg.checkpoint_every == 0:
                save(f"p{phase_no}e{epoch + 1:04d}", epoch + 1, phase_no)
        # phase boundary: next position is epoch 0 of the following phase
        save(f"phase{phase_no}", 0, phase_no + 1)

    if out_dir is not None:
        (out_dir / "metrics.csv").write_text(
            METRICS_HEADER + "\n" + "".join(r + "\n" for r in rows))
    return rows
