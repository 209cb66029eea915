#!/usr/bin/env python3
# Tape-based reverse-mode differentiation: record a computation, replay
# it backwards, and cross-check the analytic gradients against central
# differences.

import numpy as np

from posenas.autograd import (
    Tensor, backward, grad_check, mse, mul, softmax, tsum, weighted_sum,
)

# ---------------------------------------------------------------------------
# Leaves are tensors created with requires_grad=True. Every primitive
# records itself on a global tape; backward() replays the tape once.

x = Tensor(np.array([1.0, 2.0, 3.0], dtype=np.float32), requires_grad=True)
loss = tsum(mul(x, x))          # sum of squares
backward(loss)
print("d/dx sum(x^2) =", x.grad)        # -> [2, 4, 6]

# Gradients accumulate over multiple uses of the same leaf, and a
# second backward without re-recording is an error:
x.zero_grad()
loss = tsum(mul(x, x))
backward(loss)
try:
    backward(loss)
except RuntimeError as exc:
    print("double backward rejected:", exc)

# ---------------------------------------------------------------------------
# The softmax / weighted-sum pair is the heart of the relaxed search
# space: probabilities mix candidate outputs, and gradients flow to the
# mixing parameters.

alpha = Tensor(np.zeros(2, dtype=np.float64), requires_grad=True, dtype=np.float64)
v = Tensor(np.array([1.0, 3.0]), dtype=np.float64)
backward(tsum(mul(softmax(alpha), v)))
print("d(softmax(a) . v)/da at a=0 =", alpha.grad)   # -> [-0.5, +0.5]

# ---------------------------------------------------------------------------
# grad_check runs the same function twice: once for the analytic
# gradient, once coordinate-by-coordinate with central differences.
# Everything in the library keeps this below 1e-4 in float64.

rng = np.random.default_rng(0)
maps = [Tensor(rng.standard_normal((4, 4)), dtype=np.float64) for _ in range(3)]
target = Tensor(rng.standard_normal((4, 4)), dtype=np.float64)


def mixed_mse(a):
    return mse(weighted_sum(softmax(a), maps), target)


a0 = Tensor(rng.standard_normal(3), requires_grad=True, dtype=np.float64)
print("max relative FD error:", grad_check(mixed_mse, a0, step=1e-5))
