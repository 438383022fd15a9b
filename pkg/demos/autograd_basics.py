"""
Gradients with the numpy autograd core
======================================

Every model parameter is a ``Tensor``.  Operations record how to push a
gradient back to their inputs, and ``backward`` replays them in reverse.
"""

import numpy as np

from persona_ar import tensor as T
from persona_ar.tensor import Tensor, backward, finite_difference_check

# a single linear layer followed by softmax cross-entropy
rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(4, 3)))
w = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
b = Tensor(np.zeros(5), requires_grad=True)
targets = np.array([0, 2, 4, 1])

loss = T.cross_entropy(T.matmul(x, w) + b, targets)
backward(loss)
print("loss", float(loss.data))
print("dL/db", np.round(b.grad, 4))

# the bias gradient of a mean cross-entropy is mean(softmax) - mean(onehot)
p = np.exp(T.matmul(x, w).data)
p /= p.sum(-1, keepdims=True)
onehot = np.eye(5)[targets]
print("closed form", np.round((p - onehot).mean(0), 4))

# central differences agree to about 1e-9 in 64-bit
report = finite_difference_check(
    lambda: T.cross_entropy(T.matmul(x, w) + b, targets), {"w": w, "b": b})
print("max relative error", report.max_rel_error)
