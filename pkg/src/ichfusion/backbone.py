"""Stage 1: per-slice CNN producing six logits whose sigmoids are the slice descriptors."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError
from .numeric import (
    NUM_CLASSES,
    LrSchedule,
    bce_with_logits,
    check_class_weights,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    kaiming_uniform,
    relu,
    relu_backward,
    relu_signature,
    sigmoid,
)
from .preprocessing import AugmentConfig
from .sampler import Dataset, iterate_epoch, steps_per_epoch
from .training import DEFAULT_CLASS_WEIGHTS, AdamTrainer


# windowed intensities live in [0, 1]; centre them before the first convolution
INPUT_SHIFT = 0.5


@dataclass(frozen=True)
class ConvStage:
    channels: int
    kernel: int = 3
    stride: int = 2


@dataclass(frozen=True)
class BackboneConfig:
    input_size: tuple[int, int] = (32, 32)
    stages: tuple[ConvStage, ...] = (ConvStage(16), ConvStage(32), ConvStage(64))
    global_pool: bool = False
    head_width: int = 0  # optional hidden dense layer before the 6-way output
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        if self.num_classes != NUM_CLASSES:
            raise ConfigError(f"backbone.num_classes must be {NUM_CLASSES}, got {self.num_classes}")
        if not self.stages:
            raise ConfigError("backbone.stages must not be empty")
        if self.head_width < 0:
            raise ConfigError(f"backbone.head_width must be >= 0, got {self.head_width}")
        self.feature_shape()  # validates every stage geometry

    def feature_shape(self) -> tuple[int, int, int]:
        h, w = self.input_size
        if h < 1 or w < 1:
            raise ConfigError(f"backbone.input_size must be positive, got {self.input_size}")
        c = 3
        for k, st in enumerate(self.stages):
            if st.channels < 1 or st.kernel < 1 or st.kernel % 2 == 0 or st.stride < 1:
                raise ConfigError(f"backbone.stages[{k}]: need channels >= 1, stride >= 1 and an odd kernel")
            h, w = -(-h // st.stride), -(-w // st.stride)
            c = st.channels
        return c, h, w

    def feature_dim(self) -> int:
        c, h, w = self.feature_shape()
        return c if self.global_pool else c * h * w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        if "stages" in d:
            d["stages"] = tuple(ConvStage(**s) for s in d["stages"])
        if "input_size" in d:
            d["input_size"] = tuple(d["input_size"])
        return cls(**d)


def same_padding(size: int, k: int, stride: int) -> tuple[int, int]:
    """(before, after) padding giving ``ceil(size / stride)`` outputs; the odd pixel goes after."""
    total = max((-(-size // stride) - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def _pad_same(x, k, stride):
    ph = same_padding(x.shape[2], k, stride)
    pw = same_padding(x.shape[3], k, stride)
    return np.pad(x, ((0, 0), (0, 0), ph, pw)), (ph, pw)


def init_backbone(config: BackboneConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    c = 3
    for k, st in enumerate(config.stages):
        fan_in = c * st.kernel * st.kernel
        params[f"conv{k}.weight"] = kaiming_uniform(rng, (st.channels, c, st.kernel, st.kernel), fan_in)
        params[f"conv{k}.bias"] = np.zeros(st.channels)
        c = st.channels
    d = config.feature_dim()
    if config.head_width:
        params["hidden.weight"] = kaiming_uniform(rng, (d, config.head_width), d)
        params["hidden.bias"] = np.zeros(config.head_width)
        d = config.head_width
    params["head.weight"] = kaiming_uniform(rng, (d, NUM_CLASSES), d)
    params["head.bias"] = np.zeros(NUM_CLASSES)
    return params


def _forward(images, params, config):
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError(f"backbone expects [B, 3, H, W] images, got {images.shape}")
    cache = {"acts": []}
    x = images - INPUT_SHIFT
    for k, st in enumerate(config.stages):
        xp, pads = _pad_same(x, st.kernel, st.stride)
        z = conv2d_forward(xp, params[f"conv{k}.weight"], params[f"conv{k}.bias"], st.stride, 0)
        cache["acts"].append((xp, pads, z))
        x = relu(z)
    cache["feat_shape"] = x.shape
    feats = x.mean(axis=(2, 3)) if config.global_pool else x.reshape(x.shape[0], -1)
    if config.head_width:
        zh = dense_forward(feats, params["hidden.weight"], params["hidden.bias"])
        cache["hidden"] = (feats, zh)
        feats = relu(zh)
    cache["head_in"] = feats
    return dense_forward(feats, params["head.weight"], params["head.bias"]), cache


def backbone_forward(images, params, config: BackboneConfig) -> np.ndarray:
    """Logits [B, 6] for windowed images [B, 3, H, W]."""
    return _forward(np.asarray(images, dtype=np.float64), params, config)[0]


def backbone_backward(dlogits, cache, params, config: BackboneConfig) -> dict[str, np.ndarray]:
    grads = {}
    dfeat, grads["head.weight"], grads["head.bias"] = dense_backward(dlogits, cache["head_in"], params["head.weight"])
    if config.head_width:
        feats, zh = cache["hidden"]
        dzh = relu_backward(dfeat, zh)
        dfeat, grads["hidden.weight"], grads["hidden.bias"] = dense_backward(dzh, feats, params["hidden.weight"])
    n, c, h, w = cache["feat_shape"]
    if config.global_pool:
        dx = np.broadcast_to(dfeat[:, :, None, None] / (h * w), (n, c, h, w))
    else:
        dx = dfeat.reshape(n, c, h, w)
    for k in reversed(range(len(config.stages))):
        st = config.stages[k]
        xp, (ph, pw), z = cache["acts"][k]
        dz = relu_backward(dx, z)
        dxp, grads[f"conv{k}.weight"], grads[f"conv{k}.bias"] = conv2d_backward(
            dz, xp, params[f"conv{k}.weight"], st.stride, 0
        )
        dx = dxp[:, :, ph[0] : dxp.shape[2] - ph[1], pw[0] : dxp.shape[3] - pw[1]]
    return grads


def backbone_loss(
    params, images, targets, config: BackboneConfig, class_weights=DEFAULT_CLASS_WEIGHTS, signature=False
):
    """Weighted BCE of the backbone on a batch, with gradients for every parameter.

    ``signature=True`` appends the ReLU activation pattern (for gradcheck).
    """
    logits, cache = _forward(images, params, config)
    loss, dlogits = bce_with_logits(logits, targets, class_weights)
    grads = backbone_backward(dlogits, cache, params, config)
    if signature:
        pre = [z for _, _, z in cache["acts"]] + ([cache["hidden"][1]] if config.head_width else [])
        return loss, grads, relu_signature(*pre)
    return loss, grads


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class Stage1Config:
    epochs: int = 20
    blocks_per_batch: int = 16
    lr: float = 5e-4
    min_lr: float = 0.0
    class_weights: tuple[float, ...] = DEFAULT_CLASS_WEIGHTS
    augment: AugmentConfig = field(default_factory=AugmentConfig.training_default)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"stage1.epochs must be >= 1, got {self.epochs}")
        if self.blocks_per_batch < 1:
            raise ConfigError(f"stage1.blocks_per_batch must be >= 1, got {self.blocks_per_batch}")
        if not self.lr > 0:
            raise ConfigError(f"stage1.lr must be positive, got {self.lr}")
        if not 0.0 <= self.min_lr <= self.lr:
            raise ConfigError(f"stage1.min_lr must lie in [0, lr], got {self.min_lr}")
        try:
            check_class_weights(self.class_weights)
        except ConfigError as exc:
            raise ConfigError(f"stage1.class_weights: {exc}") from exc


def dataset_loss(dataset: Dataset, params, config: BackboneConfig, class_weights=DEFAULT_CLASS_WEIGHTS) -> float:
    """Mean weighted BCE over every slice, no augmentation."""
    total, count = 0.0, 0
    for i in range(len(dataset)):
        logits = backbone_forward(dataset.windowed(i), params, config)
        loss, _ = bce_with_logits(logits, dataset.labels(i), class_weights)
        total += loss * logits.shape[0]
        count += logits.shape[0]
    return total / count


def train_stage1(
    dataset: Dataset,
    config: Stage1Config,
    seed: int,
    val_dataset: Dataset | None = None,
    on_epoch: Callable[[int, dict, dict], None] | None = None,
):
    """Train the backbone with Adam under a cosine schedule.

    Every slice of each 7-slice block is supervised with its own label. When
    ``val_dataset`` is given the parameters with the lowest validation loss are
    returned, otherwise the final ones. ``on_epoch(epoch, params, record)`` is
    the checkpoint hook.
    """
    h, w = dataset.windowed(0).shape[-2:]
    if (h, w) != tuple(config.backbone.input_size):
        raise ConfigError(f"backbone.input_size {config.backbone.input_size} != data slices {(h, w)}")
    init_rng, data_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    params = init_backbone(config.backbone, init_rng)
    spe = steps_per_epoch(dataset, config.blocks_per_batch)
    schedule = LrSchedule(config.lr, config.min_lr, config.epochs * spe)
    trainer = AdamTrainer(params, schedule)
    epochs, best = [], (float("inf"), None, None)
    for epoch in range(1, config.epochs + 1):
        start = trainer.step
        for batch in iterate_epoch(dataset, data_rng, config.blocks_per_batch, config.augment):
            loss, grads = backbone_loss(trainer.params, batch.images, batch.labels, config.backbone, config.class_weights)
            trainer.update(loss, grads)
        record = {"epoch": epoch, "train_loss": float(np.mean(trainer.losses[start:])), "lr": trainer.lr_trace[-1]}
        if val_dataset is not None:
            record["val_loss"] = dataset_loss(val_dataset, trainer.params, config.backbone, config.class_weights)
            if record["val_loss"] < best[0]:
                best = (record["val_loss"], epoch, trainer.params)
        epochs.append(record)
        if on_epoch is not None:
            on_epoch(epoch, trainer.params, record)
    final = trainer.params if best[2] is None else best[2]
    log = {
        "epochs": epochs,
        "best_epoch": best[1] if best[2] is not None else config.epochs,
        "lr_trace": trainer.lr_trace,
        "step_loss": trainer.losses,
        "total_steps": schedule.total_steps,
    }
    return final, log


# ---------------------------------------------------------------- descriptors


def study_descriptors(windowed, params, config: BackboneConfig) -> np.ndarray:
    """Sigmoid descriptors [n, 6] for one study's windowed slices [n, 3, H, W]."""
    return sigmoid(backbone_forward(windowed, params, config))


def extract_descriptors(dataset: Dataset, params, config: BackboneConfig, workers: int = 1) -> dict[str, np.ndarray]:
    """One descriptor per slice for every study, augmentation off. Insertion order follows the dataset."""

    def one(i):
        return study_descriptors(dataset.windowed(i), params, config)

    if workers > 1:
        for i in range(len(dataset)):
            dataset.windowed(i)  # fill the cache before threads read it
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, range(len(dataset))))
    else:
        results = [one(i) for i in range(len(dataset))]
    return dict(zip(dataset.study_ids, results))


def save_descriptors(path, descriptors: dict[str, np.ndarray]) -> None:
    doc = {sid: np.asarray(d).tolist() for sid, d in descriptors.items()}
    Path(path).write_text(json.dumps(doc, indent=None, separators=(",", ":")) + "\n")


def load_descriptors(path) -> dict[str, np.ndarray]:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: descriptor file must map study_id -> rows")
    out = {}
    for sid, rows in doc.items():
        arr = np.asarray(rows, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != NUM_CLASSES:
            raise ValidationError(f"{path}: study {sid} descriptors must be [n, {NUM_CLASSES}]")
        if np.any((arr < 0) | (arr > 1)):
            raise ValidationError(f"{path}: study {sid} has descriptor entries outside [0, 1]")
        out[sid] = arr
    return out
