"""AdamW training loop, evaluation passes, and checkpointing.

Training is a pure function of (seed, config, dataset): shuffling and
flip-augmentation randomness are drawn from a fresh per-epoch stream
derived from (seed, epoch), so two same-seed runs produce bitwise
identical loss traces and a run resumed from an epoch checkpoint
continues the uninterrupted trace exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path

import numpy as np

from .data import DatasetManifest, flip_array, window_offsets
from .metrics import LossWeights, loss_3d, metric_report, tc_loss
from .model import ModelConfig, ProxyLifter
from .rng import Rng
from .tensor import Parameter, Tape, Tensor, add, backward, scale
from .tensor_io import ShapeMismatchError, load_tensor, save_tensor

_EPOCH_STREAM_TAG = 9176  # namespaces the per-epoch child seeds


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the offending step index."""


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 90
    lr0: float = 5e-4
    lr_decay: float = 0.99
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_t: float = 0.5
    seed: int = 0
    flip_augment: bool = True
    flip_tta: bool = False
    target_scale: float = 1e-3  # millimeters -> model units
    max_steps: int | None = None
    window_stride: int | None = None  # default: window length (disjoint)
    eval_every: int = 1  # epochs between metric passes

    def __post_init__(self):
        positive = {"batch_size": self.batch_size, "epochs": self.epochs,
                    "lr0": self.lr0, "lr_decay": self.lr_decay, "eps": self.eps,
                    "target_scale": self.target_scale, "eval_every": self.eval_every}
        for name, v in positive.items():
            if not v > 0:
                raise ValueError(f"{name} must be positive, got {v}")
        if self.weight_decay < 0 or self.lambda_t < 0:
            raise ValueError("weight_decay and lambda_t must be nonnegative")

    def lr_at(self, epoch: int) -> float:
        """Exponentially decayed learning rate for a given epoch."""
        if epoch < 0:
            raise ValueError(f"epoch must be >= 0, got {epoch}")
        return self.lr0 * self.lr_decay**epoch

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)


class AdamW:
    """Adam with decoupled weight decay and bias correction.

    Each step first shrinks the weights by lr * weight_decay, then applies
    the bias-corrected moment update, then clears all gradients."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params: list[Parameter] = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {p.name: np.zeros_like(p.value) for p in self.params if p.trainable}
        self.v = {p.name: np.zeros_like(p.value) for p in self.params if p.trainable}
        self.step_count = 0

    @classmethod
    def from_train_config(cls, params, cfg: TrainConfig) -> "AdamW":
        return cls(params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)

    def step(self, lr: float) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for p in self.params:
            if not p.trainable:
                p.zero_grad()
                continue
            if self.weight_decay:
                p.value *= 1.0 - lr * self.weight_decay
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.zero_grad()


# ---------------------------------------------------------------------------
# Dataset windows
# ---------------------------------------------------------------------------


@dataclass
class SampleWindow:
    """One training/eval sample: matched 2D input and 3D target (mm)."""

    x2d: np.ndarray
    y3d_mm: np.ndarray
    seq_id: str
    start: int
    padded: int = 0

    @property
    def valid_frames(self) -> int:
        return self.x2d.shape[0] - self.padded


def build_windows(manifest: DatasetManifest, frames: int,
                  stride: int | None = None) -> list[SampleWindow]:
    """Deterministically cut every manifest sequence into model windows."""
    stride = stride or frames
    windows = []
    for rec in manifest.sequences:
        p2, p3 = manifest.load_pair(rec)
        for start, pad in window_offsets(rec.frames, frames, stride):
            if pad == 0:
                x = p2.data[start : start + frames]
                y = p3.data[start : start + frames]
            else:
                x = _pad_tail(p2.data[start:], pad)
                y = _pad_tail(p3.data[start:], pad)
            windows.append(SampleWindow(x.copy(), y.copy(), rec.seq_id, start, pad))
    return windows


def _pad_tail(chunk: np.ndarray, pad: int) -> np.ndarray:
    return np.concatenate([chunk, np.repeat(chunk[-1:], pad, axis=0)], axis=0)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _epoch_rng(seed: int, epoch: int) -> Rng:
    return Rng([seed, _EPOCH_STREAM_TAG, epoch])


def train(
    model: ProxyLifter,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    eval_manifest: DatasetManifest | None = None,
    log_path=None,
    checkpoint_dir=None,
    optimizer: AdamW | None = None,
    start_epoch: int = 0,
    global_step: int = 0,
) -> list[dict]:
    """Run the optimization loop; returns the list of log records.

    Per epoch: seeded shuffle, optional 50% per-sample horizontal flip,
    forward, position + temporal loss, backward, AdamW step.  One metric
    record is appended after each `eval_every`-th epoch.  A non-finite
    loss aborts with TrainingDiverged naming the step.
    """
    windows = build_windows(manifest, model.config.frames, cfg.window_stride)
    if not windows:
        raise ValueError("manifest produced no training windows")
    batch = min(cfg.batch_size, len(windows))
    weights = LossWeights(cfg.lambda_t)
    pairs = manifest.skeleton.flip_pairs
    optimizer = optimizer or AdamW.from_train_config(model.parameters(), cfg)

    records: list[dict] = []
    log_file = open(log_path, "a") if log_path else None

    def emit(record: dict):
        records.append(record)
        if log_file:
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()

    step = global_step
    try:
        for epoch in range(start_epoch, cfg.epochs):
            rng = _epoch_rng(cfg.seed, epoch)
            order = rng.permutation(len(windows))
            lr = cfg.lr_at(epoch)
            n_batches = len(windows) // batch  # drop-last; batch is clamped above
            for b in range(n_batches):
                chosen = order[b * batch : (b + 1) * batch]
                losses, l3_vals, lt_vals = [], [], []
                with Tape() as tape:
                    for idx in chosen:
                        w = windows[idx]
                        x, y = w.x2d, w.y3d_mm * cfg.target_scale
                        if cfg.flip_augment and rng.random() < 0.5:
                            x = flip_array(x, pairs)
                            y = flip_array(y, pairs)
                        out = model.forward(Tensor(x))
                        l3 = loss_3d(out.y_hat, Tensor(y))
                        l3_vals.append(float(l3.data))
                        if cfg.lambda_t > 0:
                            lt = tc_loss(out.y_hat, Tensor(y))
                            lt_vals.append(float(lt.data))
                            losses.append(add(l3, scale(lt, cfg.lambda_t)))
                        else:
                            losses.append(l3)
                    batch_loss = scale(reduce(add, losses), 1.0 / len(losses))
                loss_val = float(batch_loss.data)
                if not np.isfinite(loss_val):
                    raise TrainingDiverged(f"non-finite loss {loss_val} at step {step}")
                backward(batch_loss, tape)
                optimizer.step(lr)
                step += 1
                emit({
                    "step": step,
                    "epoch": epoch,
                    "lr": lr,
                    "loss": loss_val,
                    "loss_3d": float(np.mean(l3_vals)),
                    "loss_t": float(np.mean(lt_vals)) if lt_vals else 0.0,
                })
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
            if (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs:
                report = evaluate(model, eval_manifest or manifest,
                                  flip_tta=cfg.flip_tta, target_scale=cfg.target_scale,
                                  stride=cfg.window_stride)
                emit({
                    "epoch": epoch,
                    "mpjpe": report["mpjpe_mm"],
                    "p_mpjpe": report["p_mpjpe_mm"],
                    "pck": report["pck_pct"],
                    "auc": report["auc_pct"],
                })
            if checkpoint_dir is not None:
                checkpoint_save(model, optimizer, Path(checkpoint_dir) / "latest",
                                train_cfg=cfg, epoch=epoch + 1, step=step)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
    finally:
        if log_file:
            log_file.close()
    return records


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def predict_window(model, x2d: np.ndarray, flip_tta: bool, pairs) -> np.ndarray:
    """Model prediction for one window, optionally averaged with the
    prediction on the mirrored input (mirrored back)."""
    y = model.forward(Tensor(x2d)).y_hat.data
    if not flip_tta:
        return y
    y_flip = model.forward(Tensor(flip_array(x2d, pairs))).y_hat.data
    return 0.5 * (y + flip_array(y_flip, pairs))


def evaluate(model, manifest: DatasetManifest, flip_tta: bool = False,
             target_scale: float = 1e-3, stride: int | None = None) -> dict:
    """Metric report over every manifest window, padded frames excluded."""
    windows = build_windows(manifest, model.config.frames, stride)
    if not windows:
        raise ValueError("manifest produced no evaluation windows")
    pairs = manifest.skeleton.flip_pairs
    preds, targets = [], []
    for w in windows:
        y_hat_mm = predict_window(model, w.x2d, flip_tta, pairs) / target_scale
        preds.append(y_hat_mm[: w.valid_frames])
        targets.append(w.y3d_mm[: w.valid_frames])
    y_hat = np.concatenate(preds, axis=0)
    y = np.concatenate(targets, axis=0)
    return metric_report(y_hat, y, root_index=manifest.skeleton.root_index)


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

_CKPT_FORMAT = 1


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    train_cfg: TrainConfig = field(default_factory=TrainConfig)


def checkpoint_save(model: ProxyLifter, optimizer: AdamW | None, path,
                    train_cfg: TrainConfig | None = None,
                    epoch: int = 0, step: int = 0) -> Path:
    """Write config + every parameter (and optimizer moment) to `path`."""
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    doc = {
        "format": _CKPT_FORMAT,
        "model": model.config.to_dict(),
        "train": (train_cfg or TrainConfig()).to_dict(),
        "epoch": epoch,
        "step": step,
        "optimizer_step": optimizer.step_count if optimizer else 0,
    }
    (path / "config.json").write_text(json.dumps(doc, indent=1) + "\n")
    for p in model.parameters():
        save_tensor(path / "params" / p.name, p.value)
    if optimizer is not None:
        (path / "optim").mkdir(exist_ok=True)
        for name, m in optimizer.m.items():
            save_tensor(path / "optim" / f"{name}__m", m)
            save_tensor(path / "optim" / f"{name}__v", optimizer.v[name])
    return path


def checkpoint_load(path) -> tuple[ProxyLifter, AdamW, TrainState]:
    """Rebuild the model and optimizer exactly as saved.

    Every stored array is validated against the freshly constructed
    parameter shapes; a config/files mismatch raises ShapeMismatchError."""
    path = Path(path)
    cfg_path = path / "config.json"
    if not cfg_path.exists():
        raise FileNotFoundError(f"missing checkpoint config {cfg_path}")
    doc = json.loads(cfg_path.read_text())
    if doc.get("format") != _CKPT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    model_cfg = ModelConfig.from_dict(doc["model"])
    train_cfg = TrainConfig.from_dict(doc["train"])

    model = ProxyLifter(model_cfg, Rng(0))
    for p in model.parameters():
        arr, _ = load_tensor(path / "params" / p.name)
        if arr.shape != p.value.shape:
            raise ShapeMismatchError(
                f"checkpoint parameter {p.name}: stored shape {arr.shape} "
                f"does not match config shape {p.value.shape}")
        p.value[...] = arr

    optimizer = AdamW.from_train_config(model.parameters(), train_cfg)
    optimizer.step_count = int(doc.get("optimizer_step", 0))
    optim_dir = path / "optim"
    if optim_dir.exists():
        for name in optimizer.m:
            m_arr, _ = load_tensor(optim_dir / f"{name}__m")
            v_arr, _ = load_tensor(optim_dir / f"{name}__v")
            if m_arr.shape != optimizer.m[name].shape:
                raise ShapeMismatchError(f"optimizer moment {name}: shape {m_arr.shape} mismatch")
            optimizer.m[name][...] = m_arr
            optimizer.v[name][...] = v_arr

    state = TrainState(epoch=int(doc.get("epoch", 0)), step=int(doc.get("step", 0)),
                       train_cfg=train_cfg)
    return model, optimizer, state
