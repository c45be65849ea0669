"""Self-checks behind ``ichfusion verify``: gradient checks and oracle equivalence.

Each check returns a :class:`CheckResult`; the suite passes iff all of them do.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .backbone import BackboneConfig, backbone_loss, init_backbone
from .fusion import FusionConfig, fusion_loss, init_fusion
from .metrics import roc_auc, weighted_log_loss
from .numeric import (
    AdamState,
    ParamSet,
    adam_step,
    bce_with_logits,
    conv2d_forward,
    gradcheck_report,
)
from .oracles import direct_bce_from_logits, direct_log_loss, naive_conv2d, pairwise_auc, scalar_adam
from .preprocessing import BONE, BRAIN, SUBDURAL, apply_window
from .training import DEFAULT_CLASS_WEIGHTS

W = np.asarray(DEFAULT_CLASS_WEIGHTS)


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    seconds: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"[{status}] {self.name}: {self.value:.3g} vs {self.threshold:.3g} in {self.seconds:.1f}s{extra}"


def _randomize_biases(params, rng, scale=0.1):
    # zero biases park many pre-activations exactly on the ReLU kink
    return {k: rng.normal(scale=scale, size=v.shape) if k.endswith("bias") else v for k, v in params.items()}


def check_gradients(seeds=range(20), max_per_param=50, tol=1e-5, max_kink_fraction=0.1) -> CheckResult:
    """Backbone on 3x16x16 inputs and fusion on 7x6x1 inputs, central differences at eps 1e-5."""
    t0 = time.perf_counter()
    bb_cfg = BackboneConfig(input_size=(16, 16))
    fu_cfg = FusionConfig()
    worst, checked, kinks, where = 0.0, 0, 0, None
    for seed in seeds:
        rng = np.random.default_rng(seed)
        bp = _randomize_biases(init_backbone(bb_cfg, rng), rng)
        x, y = rng.random((4, 3, 16, 16)), rng.random((4, 6))
        fp = _randomize_biases(init_fusion(fu_cfg, rng), rng)
        xi, yi = rng.random((2, 7, 6, 1)), rng.random((2, 6))
        for label, fn, p in (
            ("backbone", lambda q: backbone_loss(q, x, y, bb_cfg, signature=True), bp),
            ("fusion", lambda q: fusion_loss(q, xi, yi, fu_cfg, signature=True), fp),
        ):
            rep = gradcheck_report(fn, p, eps=1e-5, max_per_param=max_per_param, rng=rng)
            checked += rep.n_checked
            kinks += rep.n_kinks
            if rep.max_error > worst:
                worst, where = rep.max_error, (label, seed, rep.worst)
    frac = kinks / max(checked + kinks, 1)
    passed = worst < tol and frac <= max_kink_fraction
    detail = f"{checked} coordinates, {kinks} skipped at ReLU kinks ({frac:.1%}), worst at {where}"
    return CheckResult("gradcheck", passed, worst, tol, time.perf_counter() - t0, detail)


def random_conv_case(rng):
    n, c, f = (int(v) for v in rng.integers(1, 4, size=3))
    k = int(rng.choice([1, 3, 5]))
    stride = int(rng.integers(1, 4))
    padding = int(rng.integers(0, k // 2 + 2))
    ho = int(rng.integers(1, 6))
    h = (ho - 1) * stride + k - 2 * padding
    if h < 1:
        h += stride * -(-(1 - h) // stride)
    wo = int(rng.integers(1, 6))
    w = (wo - 1) * stride + k - 2 * padding
    if w < 1:
        w += stride * -(-(1 - w) // stride)
    x = rng.normal(size=(n, c, h, w))
    kernel = rng.normal(size=(f, c, k, k))
    return x, kernel, rng.normal(size=f), stride, padding


def check_conv_oracle(n_cases=50, tol=1e-12, seed=0) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        x, k, b, s, p = random_conv_case(rng)
        diff = np.abs(conv2d_forward(x, k, b, s, p) - naive_conv2d(x, k, b, s, p))
        worst = max(worst, float(diff.max()))
    return CheckResult("conv oracle", worst < tol, worst, tol, time.perf_counter() - t0, f"{n_cases} configurations")


def check_log_loss_oracle(n_cases=20, tol=1e-12, seed=1) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        n = int(rng.integers(1, 50))
        preds = rng.random((n, 6))
        preds[rng.random((n, 6)) < 0.05] = 0.0  # exercise the clip floor
        labels = (rng.random((n, 6)) < 0.3).astype(float)
        worst = max(worst, abs(weighted_log_loss(preds, labels, W) - direct_log_loss(preds, labels, W)))
    half = abs(weighted_log_loss(np.full((10, 6), 0.5), (rng.random((10, 6)) < 0.5).astype(float), W) - math.log(2))
    passed = worst < tol and half < 1e-9
    return CheckResult(
        "log loss oracle", passed, worst, tol, time.perf_counter() - t0, f"all-0.5 predictions off ln 2 by {half:.2g}"
    )


def check_auc_oracle(n_cases=100, seed=2) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst, ties = 0.0, 0
    for i in range(n_cases):
        n = int(rng.integers(2, 201))
        labels = (rng.random(n) < rng.uniform(0.1, 0.9)).astype(int)
        labels[0], labels[1] = 0, 1
        # every third case draws from a handful of values so ties are common
        scores = rng.integers(0, 5, size=n) / 4.0 if i % 3 == 0 else rng.random(n)
        ties += len(np.unique(scores)) < n
        worst = max(worst, abs(roc_auc(scores, labels) - pairwise_auc(scores.tolist(), labels.tolist())))
    return CheckResult("AUC oracle", worst == 0.0, worst, 0.0, time.perf_counter() - t0, f"{ties} cases with ties")


def check_bce_oracle(n_cases=20, tol=1e-9, seed=3) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        z = rng.normal(scale=3.0, size=(4, 6))
        t = rng.random((4, 6))
        worst = max(worst, abs(bce_with_logits(z, t, W)[0] - direct_bce_from_logits(z, t, W)))
    return CheckResult("BCE oracle", worst < tol, worst, tol, time.perf_counter() - t0)


def check_adam_oracle(tol=1e-12, seed=4) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    grads = rng.normal(size=(25, 5))
    p0 = rng.normal(size=5)
    ps, state = ParamSet({"w": p0.copy()}), AdamState.fresh({"w": p0})
    traj = []
    for g in grads:
        ps, state = adam_step(ps.with_grads({"w": g}), state, 1e-2)
        traj.append(ps.params["w"])
    ref = np.array([scalar_adam(p0[j], grads[:, j].tolist(), 1e-2) for j in range(5)]).T
    worst = float(np.abs(np.array(traj) - ref).max())
    return CheckResult("Adam oracle", worst < tol, worst, tol, time.perf_counter() - t0)


def check_windows(n_fuzz=10000, seed=5) -> CheckResult:
    t0 = time.perf_counter()
    spots = [
        abs(float(apply_window(40.0, BRAIN)) - 0.5),
        abs(float(apply_window(600.0, BONE)) - 0.5),
        abs(float(apply_window(75.0, SUBDURAL)) - 0.5),
    ]
    hu = np.random.default_rng(seed).uniform(-2000, 4000, size=n_fuzz)
    inside = all(bool(np.all((v >= 0) & (v <= 1))) for v in (apply_window(hu, w) for w in (BRAIN, SUBDURAL, BONE)))
    worst = max(spots)
    return CheckResult("window spot checks", worst < 1e-12 and inside, worst, 1e-12, time.perf_counter() - t0)


def run_all(quick: bool = False) -> list[CheckResult]:
    seeds = range(3) if quick else range(20)
    return [
        check_gradients(seeds),
        check_conv_oracle(),
        check_log_loss_oracle(),
        check_auc_oracle(),
        check_bce_oracle(),
        check_adam_oracle(),
        check_windows(),
    ]
