"""
A tour of the reverse-mode engine
=================================

Build a small computation out of tracked tensors, pull gradients back
through it, and cross-check one of them against a central difference.
"""

import numpy as np

import mlrm.autodiff as ad
from mlrm.autodiff import Tensor, backward, no_grad

rng = np.random.default_rng(0)

# Leaf tensors opt in to gradient tracking; everything derived from them
# records its parents on a tape.
w = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)

h = ad.gelu(ad.matmul(x, w))
loss = ad.tmean(ad.mul(h, h))
print("loss =", loss.item())

backward(loss)
print("dloss/dw[0,0] =", w.grad[0, 0])

# The same quantity by central differences, no tape involved.
eps = 1e-6
keep = w.data[0, 0]
w.data[0, 0] = keep + eps
up = ad.tmean(ad.mul(ad.gelu(ad.matmul(x, w)), ad.gelu(ad.matmul(x, w)))).item()
w.data[0, 0] = keep - eps
down = ad.tmean(ad.mul(ad.gelu(ad.matmul(x, w)), ad.gelu(ad.matmul(x, w)))).item()
w.data[0, 0] = keep
print("finite difference =", (up - down) / (2 * eps))

# Gradients accumulate, so clear them between backward passes.
w.grad = None
x.grad = None

# Softmax with a mask: masked columns get probability exactly zero, and
# their logits receive exactly zero gradient.
logits = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
mask = np.array([[True, True, False, True, False],
                 [True, True, True, True, True]])
probs = ad.masked_softmax(logits, mask)
print("\nmasked probabilities:\n", probs.data.round(4))
backward(ad.tsum(ad.mul(probs, probs)))
print("gradient at the masked slots:", logits.grad[0, 2], logits.grad[0, 4])

# Inside no_grad() nothing is recorded; useful for evaluation loops.
with no_grad():
    silent = ad.matmul(x, w)
print("\nrecorded under no_grad?", silent.requires_grad)
