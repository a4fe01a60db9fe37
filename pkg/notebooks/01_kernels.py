"""
Convolution kernels and their gradients
=======================================

im2col conv, its transpose, and a finite-difference check on the tape.
"""

# %%
import numpy as np

from polypnet import tensor_core as tc
from polypnet.autograd import Tape, finite_diff_check

rng = np.random.default_rng(0)

# %%
# A 3x3 box filter over 1..9 with padding 1: the centre sees every pixel.
x = np.arange(1, 10, dtype=np.float32).reshape(1, 1, 3, 3)
w = np.ones((1, 1, 3, 3), dtype=np.float32)
print(tc.conv2d(x, tc.Conv2DParams(w, padding=1))[0, 0])

# %%
# Transpose conv with a 4x4 stride-2 kernel doubles the resolution.
y = rng.standard_normal((1, 8, 16, 16)).astype(np.float32)
up = tc.conv_transpose2d(y, tc.Conv2DParams(rng.standard_normal((8, 8, 4, 4)).astype(np.float32), stride=2, padding=1))
print(y.shape, "->", up.shape)

# %%
# conv2d and conv_transpose2d with the same weight are adjoint:
# <conv(a), b> == <a, conv_t(b)>.
W = rng.standard_normal((3, 2, 4, 4))
p = tc.Conv2DParams(W, stride=2, padding=1)
a = rng.standard_normal((1, 2, 8, 8))
b = rng.standard_normal((1, 3, 4, 4))
print(np.vdot(tc.conv2d(a, p), b), np.vdot(a, tc.conv_transpose2d(b, p)))

# %%
# Gradients come from the tape; central differences agree to ~1e-9 in float64.
def loss(tape, xi, wi):
    return tape.sum(tape.sigmoid(tape.conv2d(xi, wi, padding=1)))

print(finite_diff_check(loss, [rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))], 1e-3))

# %%
# The same ops recorded by hand.
t = Tape()
xi = t.leaf(rng.standard_normal((1, 2, 4, 4)))
out = t.sum(t.maxpool2d(t.relu(xi)))
grads = t.backward(out)
print(grads[xi][0, 0])
