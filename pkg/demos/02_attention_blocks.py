"""
Four ways to let motion steer appearance features
=================================================

Each block takes an appearance feature ``f_a`` [N,C,H,W] and a motion input,
either a one-channel saliency map or a motion feature, and returns a tensor
shaped like ``f_a``. All four add ``f_a`` back as a residual term. When the
multiplier is a sigmoid map, a nonnegative feature can only grow, by at most
a factor of two. The plain feature-guided block has no such bound.
"""

import numpy as np

from mga.attention import (AttentionKind, apply_attention, channel_weights, init_attention_params, mga_m,
                           spatial_map)
from mga.tensor import Tensor

rng = np.random.default_rng(1)
f_a = Tensor(rng.uniform(0, 1, (1, 4, 5, 5)))

###############################################################################
# Map-guided: a motion map in [0, 1] rescales each location by ``1 + map``.
# A map of zeros returns the input untouched; a map of ones doubles it.
zeros, ones = np.zeros((1, 1, 5, 5)), np.ones((1, 1, 5, 5))
print("zero map is identity:", np.array_equal(mga_m(f_a, Tensor(zeros)).data, f_a.data))
print("unit map doubles:   ", np.array_equal(mga_m(f_a, Tensor(ones)).data, 2 * f_a.data))

###############################################################################
# Feature-guided blocks learn 1x1 convolutions on a motion feature with
# three channels. The spatial block squeezes it into a single sigmoid map.
f_m = Tensor(rng.normal(size=(1, 3, 5, 5)))
for kind in (AttentionKind.MGA_T, AttentionKind.MGA_TM, AttentionKind.MGA_TMC):
    params = init_attention_params(kind, 4, 3, rng)
    out = apply_attention(kind, f_a, f_m, params).data
    ratio = out / f_a.data
    print(f"{kind.value:8s} output/input ratio in [{ratio.min():.3f}, {ratio.max():.3f}]")

###############################################################################
# The channel block reweights the spatially attended feature with a softmax
# scaled by the channel count, so the weights average to one per location.
params = init_attention_params(AttentionKind.MGA_TMC, 4, 3, rng)
params.hp_weight.data[...] = rng.normal(size=params.hp_weight.shape)
f_sp = Tensor(f_a.data * (1 + spatial_map(f_m, params).data))
w = channel_weights(f_sp, params).data
print("channel weights per sample:", np.round(w[0, :, 0, 0], 3), "sum", round(w[0, :, 0, 0].sum(), 12))
