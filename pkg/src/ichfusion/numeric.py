"""Dense float64 layers with hand-written backward passes, Adam and a cosine schedule.

Arrays are plain ``numpy.ndarray`` in float64, NCHW layout for images.
Every layer is a pair of pure functions: ``*_forward`` and ``*_backward``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError

CLASS_NAMES = (
    "any",
    "intraparenchymal",
    "intraventricular",
    "subarachnoid",
    "subdural",
    "extradural",
)
NUM_CLASSES = len(CLASS_NAMES)


def as_tensor(values, shape=None, checked: bool = True) -> np.ndarray:
    """Return ``values`` as a C-contiguous float64 array.

    In checked mode NaN/Inf entries raise ``ValueError``.
    """
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    if checked and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


# ---------------------------------------------------------------- convolution


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    if stride < 1 or padding < 0:
        raise ConfigError(f"stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ConfigError(
            f"extent {size} with kernel {k}, stride {stride}, padding {padding} "
            "does not give an integer output size"
        )
    return span // stride + 1


def _windows(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # [N, C, H', W', kh, kw]


def conv2d_forward(x, kernel, bias, stride=1, padding=0):
    """Cross-correlate ``x`` [N,C,H,W] with ``kernel`` [F,C,kh,kw] and add ``bias`` [F]."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if c != kc:
        raise ShapeError(f"input has {c} channels but kernel expects {kc}")
    if bias.shape != (f,):
        raise ShapeError(f"bias shape {bias.shape} does not match {f} filters")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    win = _windows(x, kh, kw, stride, padding)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ kernel.reshape(f, -1).T + bias
    return np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))


def conv2d_backward(dout, x, kernel, stride=1, padding=0):
    """Gradients of :func:`conv2d_forward` w.r.t. input, kernel and bias."""
    n, c, h, w = x.shape
    f, _, kh, kw = kernel.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if dout.shape != (n, f, ho, wo):
        raise ShapeError(f"upstream gradient {dout.shape} != forward output {(n, f, ho, wo)}")

    d2 = dout.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
    win = _windows(x, kh, kw, stride, padding)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    dkernel = (d2.T @ cols).reshape(kernel.shape)
    dbias = d2.sum(axis=0)

    dcols = (d2 @ kernel.reshape(f, -1)).reshape(n, ho, wo, c, kh, kw)
    dpad = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            dpad[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    dx = dpad[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(dx), dkernel, dbias


# ---------------------------------------------------------------- dense


def dense_forward(x, weight, bias):
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
    return x @ weight + bias


def dense_backward(dout, x, weight):
    if dout.shape != (x.shape[0], weight.shape[1]):
        raise ShapeError(f"dense: upstream gradient {dout.shape} has wrong shape")
    return dout @ weight.T, x.T @ dout, dout.sum(axis=0)


# ---------------------------------------------------------------- activations


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dout, x):
    return dout * (x > 0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(dout, y):
    """``y`` is the forward output."""
    return dout * y * (1.0 - y)


# ---------------------------------------------------------------- loss


def check_class_weights(weights, tol=1e-9) -> np.ndarray:
    w = as_tensor(weights)
    if w.shape != (NUM_CLASSES,):
        raise ConfigError(f"class weights must have {NUM_CLASSES} entries, got shape {w.shape}")
    if np.any(w < 0) or abs(w.sum() - 1.0) > tol:
        raise ConfigError(f"class weights must be non-negative and sum to 1, got sum {float(w.sum())!r}")
    return w


def bce_with_logits(logits, targets, class_weights):
    """Class-weighted binary cross-entropy averaged over rows.

    Returns ``(loss, dlogits)``. Computed from logits as
    ``max(x,0) - x*t + log1p(exp(-|x|))`` so saturated logits stay exact.
    """
    w = check_class_weights(class_weights)
    if logits.shape != targets.shape or logits.ndim != 2 or logits.shape[1] != w.size:
        raise ShapeError(f"logits {logits.shape} / targets {targets.shape} mismatch")
    n = logits.shape[0]
    per = np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    loss = float((per @ w).sum() / n)
    grad = (sigmoid(logits) - targets) * w / n
    return loss, grad


# ---------------------------------------------------------------- parameters & optimiser


@dataclass
class ParamSet:
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def with_grads(self, grads: Mapping[str, np.ndarray]) -> "ParamSet":
        for name, g in grads.items():
            if name not in self.params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if g.shape != self.params[name].shape:
                raise ShapeError(
                    f"gradient for {name!r} has shape {g.shape}, parameter has {self.params[name].shape}"
                )
        return ParamSet(self.params, dict(grads))

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values()))

    def copy(self) -> "ParamSet":
        return ParamSet(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.grads.items()},
        )


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: Mapping[str, np.ndarray], **hyper) -> "AdamState":
        return cls(
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
            **hyper,
        )


def adam_step(params: ParamSet, state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns new ``(ParamSet, AdamState)``."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.params.items():
        if name not in params.grads:
            raise KeyError(f"missing gradient for parameter {name!r}")
        g = params.grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        new_p[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name], new_v[name] = m, v
    new_state = AdamState(new_m, new_v, t, state.beta1, state.beta2, state.eps)
    return ParamSet(new_p, {}), new_state


@dataclass(frozen=True)
class LrSchedule:
    initial_lr: float = 5e-4
    min_lr: float = 0.0
    total_steps: int = 1

    def __post_init__(self):
        if not 0.0 <= self.min_lr <= self.initial_lr:
            raise ConfigError(f"need 0 <= min_lr <= initial_lr, got {self.min_lr}, {self.initial_lr}")
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")


def cosine_lr(step: int, schedule: LrSchedule) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise IndexError(f"step {step} outside [0, {schedule.total_steps}]")
    cos = math.cos(math.pi * step / schedule.total_steps)
    return schedule.min_lr + 0.5 * (schedule.initial_lr - schedule.min_lr) * (1.0 + cos)


# ---------------------------------------------------------------- init


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------- gradient check


def relative_error(a, b, floor=1e-6):
    return np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)


def relu_signature(*preacts) -> bytes:
    """Bit pattern of which ReLU units are active; fixes the smooth piece of a ReLU net."""
    return b"".join(np.packbits(np.asarray(z) > 0).tobytes() for z in preacts)


@dataclass
class GradcheckReport:
    max_error: float  # worst relative error over checked coordinates
    n_checked: int
    n_kinks: int  # coordinates skipped because +/-eps crosses a ReLU kink
    worst: tuple[str, int] | None = None


def gradcheck_report(
    model_fn: Callable[[dict], tuple],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    max_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradcheckReport:
    """Compare analytic gradients with central differences coordinate by coordinate.

    ``model_fn(params)`` returns ``(loss, grads)`` or ``(loss, grads, signature)``.
    With a signature (see :func:`relu_signature`) a coordinate whose ``+eps`` or
    ``-eps`` evaluation lands on a different ReLU activation pattern is skipped:
    the loss is not differentiable across that interval and the central
    difference measures the kink, not the gradient.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    base = model_fn(params)
    grads = base[1]
    sig = base[2] if len(base) > 2 else None
    rng = rng or np.random.default_rng(0)
    worst, where, checked, kinks = 0.0, None, 0, 0
    for name, p in params.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = np.sort(rng.choice(flat.size, size=max_per_param, replace=False))
        analytic = np.asarray(grads[name]).reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = model_fn(params)
            flat[i] = orig - eps
            down = model_fn(params)
            flat[i] = orig
            if sig is not None and (up[2] != sig or down[2] != sig):
                kinks += 1
                continue
            checked += 1
            err = float(relative_error(analytic[i], (up[0] - down[0]) / (2.0 * eps), floor))
            if err > worst:
                worst, where = err, (name, int(i))
    return GradcheckReport(worst, checked, kinks, where)


def gradcheck(
    model_fn: Callable[[dict], tuple],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    max_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Relative error is ``|a - n| / max(|a| + |n|, floor)``. With
    ``max_per_param`` only that many randomly chosen coordinates of each
    parameter are probed. See :func:`gradcheck_report` for kink handling.
    """
    return gradcheck_report(model_fn, params, eps, max_per_param, rng, floor).max_error
