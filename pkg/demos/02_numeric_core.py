# # The numeric core and its gradient check
#
# Convolution, ReLU, pooling and the dense head are written directly in numpy.
# Each forward op has a hand-written backward, and every backward is compared
# against central finite differences.

import numpy as np

from ichfusion import oracles
from ichfusion.numeric import LrSchedule, conv2d_forward, cosine_lr
from ichfusion.verify import check_adam_oracle, check_conv_oracle, check_gradients, random_conv_case

# conv2d_forward against a plain quadruple loop on one random configuration.
rng = np.random.default_rng(3)
x, kernel, bias, stride, padding = random_conv_case(rng)
print(f"conv case: input {x.shape}, kernel {kernel.shape}, stride {stride}, padding {padding}")
fast = conv2d_forward(x, kernel, bias, stride, padding)
slow = oracles.naive_conv2d(x, kernel, bias, stride, padding)
print("max |vectorised - loop| =", float(np.abs(fast - slow).max()))

# The same comparison over 50 configurations, plus the optimiser recursion.
print(check_conv_oracle().line())
print(check_adam_oracle().line())

# The cosine schedule starts at the base rate and decays to min_lr.
sched = LrSchedule(5e-4, 0.0, 10)
print("lr schedule:", [f"{cosine_lr(t, sched):.2e}" for t in range(11)])

# Finite-difference gradient check over both networks. Coordinates whose
# perturbation flips a ReLU are skipped and counted, since the loss is not
# differentiable there.
print(check_gradients(seeds=range(3)).line())
