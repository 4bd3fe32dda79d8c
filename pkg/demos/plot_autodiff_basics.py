"""
Reverse-mode autodiff on numpy arrays
=====================================

The model is built on a small tensor type that records every operation and
replays the chain rule backwards. This walk-through builds a two-layer
network by hand, differentiates it and compares the result with central
finite differences.
"""

import numpy as np

import momentloc.tensor as tn
from momentloc import Tensor, grad_check

rng = np.random.default_rng(0)

###############################################################################
# Building a graph
# ----------------
# Leaves that need gradients are created with ``requires_grad=True``.
# Elementwise operations never broadcast; ``add_bias`` is the one exception.

x = Tensor(rng.standard_normal((4, 3)))
w1 = Tensor(rng.standard_normal((3, 5)) * 0.5, requires_grad=True)
b1 = Tensor(np.zeros(5), requires_grad=True)
w2 = Tensor(rng.standard_normal((5, 1)) * 0.5, requires_grad=True)

hidden = tn.gelu(tn.linear(x, w1, b1))
loss = tn.mean(tn.mul(tn.matmul(hidden, w2), tn.matmul(hidden, w2)))
print("loss:", loss.item())

###############################################################################
# Backward pass
# -------------
# ``backward`` walks the graph once in reverse topological order and sums
# the gradient of every path into each leaf.

loss.backward()
print("dL/dw2:", w2.grad.ravel().round(4))

###############################################################################
# Checking against finite differences
# -----------------------------------
# ``grad_check`` perturbs each input entry by +/- eps at double precision and
# reports the largest relative error between the two gradients.

weights = Tensor(rng.standard_normal((4, 5)))
err = grad_check(lambda v: tn.sum(tn.mul(tn.softmax(tn.matmul(v, Tensor(w1.data))), weights)), x.data)
print(f"softmax(x @ w) max relative error: {err:.2e}")

###############################################################################
# Shape errors name both operands
# -------------------------------

try:
    tn.matmul(x, Tensor(np.ones((4, 4))))
except tn.ShapeError as exc:
    print("ShapeError:", exc)
