"""
Reverse-mode differentiation on a tape
======================================

Everything trainable in ``sdflow`` is built from a small set of float64
primitives that record themselves on a tape. This script shows the two
entry points used throughout: evaluating a function together with its
gradient, and checking that gradient against central differences.
"""

import numpy as np

from sdflow.numcore import AdamState, adam_step, evaluate_and_backprop, grad_check, ops

# %%
# A tiny two-layer perceptron written directly with the primitives.

rng = np.random.default_rng(0)
W1, W2 = rng.standard_normal((3, 5)), rng.standard_normal((5, 1))
x = rng.standard_normal((8, 3))
y = np.sin(x[:, :1])


def loss(W1, W2):
    h = ops.tanh(ops.matmul(x, W1))
    err = ops.sub(ops.matmul(h, W2), y)
    return ops.mean(ops.square(err))


value, (g1, g2) = evaluate_and_backprop(loss, [W1, W2])
print("loss", float(value), "| grad norms", np.linalg.norm(g1), np.linalg.norm(g2))

# %%
# ``grad_check`` returns the worst relative disagreement with central
# differences; anything near machine precision means the adjoints are right.

print("grad check", grad_check(loss, [W1, W2]))

# %%
# A few hundred Adam steps fit the toy regression.

params = {"W1": W1, "W2": W2}
state = AdamState(lr=0.05)
for step in range(300):
    value, grads = evaluate_and_backprop(loss, [params["W1"], params["W2"]])
    params, state = adam_step(params, dict(zip(["W1", "W2"], grads)), state)
print("loss after 300 steps", float(value))
