"""Stage 2: re-calibrate each slice from the 7x6 grid of its block's descriptors."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import BackboneConfig, study_descriptors
from .errors import ConfigError, ShapeError
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
from .preprocessing import compose_channels
from .sampler import BLOCK_SIZE, CtStudy, block_indices
from .training import DEFAULT_CLASS_WEIGHTS, AdamTrainer

ACTIVATIONS = ("relu",)


@dataclass(frozen=True)
class FusionConfig:
    conv1_channels: int = 16
    conv1_kernel: int = 3
    conv2_channels: int = 32
    conv2_kernel: int = 3
    activation: str = "relu"
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        if self.num_classes != NUM_CLASSES:
            raise ConfigError(f"fusion.num_classes must be {NUM_CLASSES}, got {self.num_classes}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"fusion.activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        for name in ("conv1_kernel", "conv2_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"fusion.{name} must be a positive odd integer, got {k}")
        for name in ("conv1_channels", "conv2_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"fusion.{name} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        return cls(**d)


def init_fusion(config: FusionConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    c1, k1, c2, k2 = config.conv1_channels, config.conv1_kernel, config.conv2_channels, config.conv2_kernel
    d = c2 * BLOCK_SIZE * NUM_CLASSES
    return {
        "conv1.weight": kaiming_uniform(rng, (c1, 1, k1, k1), k1 * k1),
        "conv1.bias": np.zeros(c1),
        "conv2.weight": kaiming_uniform(rng, (c2, c1, k2, k2), c1 * k2 * k2),
        "conv2.bias": np.zeros(c2),
        "dense.weight": kaiming_uniform(rng, (d, NUM_CLASSES), d),
        "dense.bias": np.zeros(NUM_CLASSES),
    }


def assemble_fusion_input(descriptors, center_index: int) -> np.ndarray:
    """[7, 6, 1] stack of the block's descriptors, edge slices replicated like the sampler."""
    descriptors = np.asarray(descriptors, dtype=np.float64)
    idx = block_indices(descriptors.shape[0], center_index)
    return descriptors[list(idx)][:, :, None]


def assemble_study_inputs(descriptors) -> np.ndarray:
    """[n, 7, 6, 1] fusion inputs for every slice of a study."""
    descriptors = np.asarray(descriptors, dtype=np.float64)
    return np.stack([assemble_fusion_input(descriptors, i) for i in range(descriptors.shape[0])])


def _forward(inputs, params, config):
    if inputs.ndim != 4 or inputs.shape[1:] != (BLOCK_SIZE, NUM_CLASSES, 1):
        raise ShapeError(f"fusion expects [B, {BLOCK_SIZE}, {NUM_CLASSES}, 1], got {inputs.shape}")
    x0 = inputs.transpose(0, 3, 1, 2)  # NCHW with slices as rows, classes as columns
    z1 = conv2d_forward(x0, params["conv1.weight"], params["conv1.bias"], 1, config.conv1_kernel // 2)
    a1 = relu(z1)
    z2 = conv2d_forward(a1, params["conv2.weight"], params["conv2.bias"], 1, config.conv2_kernel // 2)
    a2 = relu(z2)
    flat = a2.reshape(a2.shape[0], -1)
    logits = dense_forward(flat, params["dense.weight"], params["dense.bias"])
    return logits, (x0, z1, a1, z2, flat)


def fusion_forward(inputs, params, config: FusionConfig) -> np.ndarray:
    """Logits [B, 6] for fusion inputs [B, 7, 6, 1]."""
    return _forward(np.asarray(inputs, dtype=np.float64), params, config)[0]


def fusion_backward(dlogits, cache, params, config: FusionConfig) -> dict[str, np.ndarray]:
    x0, z1, a1, z2, flat = cache
    grads = {}
    dflat, grads["dense.weight"], grads["dense.bias"] = dense_backward(dlogits, flat, params["dense.weight"])
    dz2 = relu_backward(dflat.reshape(z2.shape), z2)
    da1, grads["conv2.weight"], grads["conv2.bias"] = conv2d_backward(
        dz2, a1, params["conv2.weight"], 1, config.conv2_kernel // 2
    )
    dz1 = relu_backward(da1, z1)
    _, grads["conv1.weight"], grads["conv1.bias"] = conv2d_backward(
        dz1, x0, params["conv1.weight"], 1, config.conv1_kernel // 2
    )
    return grads


def fusion_loss(params, inputs, targets, config: FusionConfig, class_weights=DEFAULT_CLASS_WEIGHTS, signature=False):
    logits, cache = _forward(inputs, params, config)
    loss, dlogits = bce_with_logits(logits, targets, class_weights)
    grads = fusion_backward(dlogits, cache, params, config)
    if signature:
        return loss, grads, relu_signature(cache[1], cache[3])
    return loss, grads


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class Stage2Config:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 5e-4
    min_lr: float = 0.0
    class_weights: tuple[float, ...] = DEFAULT_CLASS_WEIGHTS
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"stage2.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"stage2.batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"stage2.lr must be positive, got {self.lr}")
        if not 0.0 <= self.min_lr <= self.lr:
            raise ConfigError(f"stage2.min_lr must lie in [0, lr], got {self.min_lr}")
        try:
            check_class_weights(self.class_weights)
        except ConfigError as exc:
            raise ConfigError(f"stage2.class_weights: {exc}") from exc


def fusion_training_set(descriptors: dict, labels: dict):
    """Stack every slice's fusion input with its own label, in ``descriptors`` order."""
    xs, ys = [], []
    for sid, desc in descriptors.items():
        if sid not in labels:
            raise KeyError(f"no labels for study {sid!r}")
        lab = np.asarray(labels[sid], dtype=np.float64)
        if lab.shape != np.shape(desc):
            raise ShapeError(f"study {sid}: labels {lab.shape} vs descriptors {np.shape(desc)}")
        xs.append(assemble_study_inputs(desc))
        ys.append(lab)
    return np.concatenate(xs), np.concatenate(ys)


def train_stage2(descriptors: dict, labels: dict, config: Stage2Config, seed: int):
    """Fit the fusion net on centre-slice labels. Returns ``(params, log)``."""
    x, y = fusion_training_set(descriptors, labels)
    init_rng, data_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    params = init_fusion(config.fusion, init_rng)
    spe = -(-len(x) // config.batch_size)
    schedule = LrSchedule(config.lr, config.min_lr, config.epochs * spe)
    trainer = AdamTrainer(params, schedule)
    epochs = []
    for epoch in range(1, config.epochs + 1):
        start = trainer.step
        order = data_rng.permutation(len(x))
        for b in range(0, len(x), config.batch_size):
            idx = order[b : b + config.batch_size]
            loss, grads = fusion_loss(trainer.params, x[idx], y[idx], config.fusion, config.class_weights)
            trainer.update(loss, grads)
        epochs.append({"epoch": epoch, "train_loss": float(np.mean(trainer.losses[start:])), "lr": trainer.lr_trace[-1]})
    log = {
        "epochs": epochs,
        "lr_trace": trainer.lr_trace,
        "step_loss": trainer.losses,
        "total_steps": schedule.total_steps,
    }
    return trainer.params, log


# ---------------------------------------------------------------- inference


def predict_from_descriptors(descriptors, params, config: FusionConfig) -> np.ndarray:
    """Fused per-slice probabilities [n, 6] from one study's descriptors [n, 6]."""
    return sigmoid(fusion_forward(assemble_study_inputs(descriptors), params, config))


def predict_study(
    study: CtStudy,
    backbone_params,
    backbone_config: BackboneConfig,
    fusion_params,
    fusion_config: FusionConfig,
    windowed=None,
) -> np.ndarray:
    """Window, describe every slice, then fuse each slice's block. Returns [n, 6]."""
    if windowed is None:
        windowed = compose_channels(study.hu)
    desc = study_descriptors(windowed, backbone_params, backbone_config)
    return predict_from_descriptors(desc, fusion_params, fusion_config)
