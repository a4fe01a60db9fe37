"""
Network layout
==============

Stage shapes, parameter counts and the SE gate.
"""

# %%
import numpy as np

from polypnet import build_model, model_forward
from polypnet.model import SEBlockParams, se_block_forward

# %%
# The full-width network; 64x64 keeps the forward pass quick.
params = build_model(input_size=64, seed=0)
print(f"{params.count():,} values, {params.count(trainable_only=True):,} trainable")

# %%
trace = {}
x = np.random.default_rng(0).random((1, 3, 64, 64), dtype=np.float32)
y = model_forward(params, x, trace=trace)
for stage, shape in trace.items():
    print(f"{stage:14s} {shape}")

# %%
# The head fuses up(d2), up(d3), d4 and s1: 64 + 32 + 16 + 32 channels.
print(params["head.conv.weight"].shape)

# %%
# Zeroing the skips still yields a valid mask, just a different one.
print(np.abs(model_forward(params, x, ablate_skips=True) - y).max())

# %%
# With all-zero SE parameters every channel is scaled by sigmoid(0) = 0.5.
z = lambda *s: np.zeros(s, np.float32)
se = SEBlockParams(z(2, 16, 1, 1), z(1, 2, 1, 1), z(16, 2, 1, 1), z(1, 16, 1, 1))
h = np.random.default_rng(1).standard_normal((1, 16, 4, 4)).astype(np.float32)
print(np.allclose(se_block_forward(h, se), 0.5 * h))
