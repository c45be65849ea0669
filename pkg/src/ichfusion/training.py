"""Shared optimisation loop pieces for both training stages."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalAbort
from .numeric import AdamState, LrSchedule, ParamSet, adam_step, cosine_lr

# any first, then the five sub-types
DEFAULT_CLASS_WEIGHTS = (2 / 7, 1 / 7, 1 / 7, 1 / 7, 1 / 7, 1 / 7)


@dataclass
class AdamTrainer:
    """Adam driven by a cosine schedule; aborts on a non-finite loss or gradient.

    ``lr_trace`` records the schedule at every step boundary 0..total_steps, so
    its last entry is the value the schedule has annealed to after the final update.
    """

    params: dict[str, np.ndarray]
    schedule: LrSchedule
    state: AdamState = None
    step: int = 0
    lr_trace: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.state is None:
            self.state = AdamState.fresh(self.params)
        self.lr_trace.append(cosine_lr(0, self.schedule))

    def update(self, loss: float, grads: dict[str, np.ndarray]) -> None:
        ps = ParamSet(self.params).with_grads(grads)
        lr = cosine_lr(min(self.step, self.schedule.total_steps), self.schedule)
        gnorm = ps.grad_norm()
        if not (math.isfinite(loss) and math.isfinite(gnorm)):
            raise NumericalAbort(self.step, lr, gnorm, loss)
        new, self.state = adam_step(ps, self.state, lr)
        self.params = new.params
        self.step += 1
        self.losses.append(float(loss))
        self.lr_trace.append(cosine_lr(min(self.step, self.schedule.total_steps), self.schedule))
