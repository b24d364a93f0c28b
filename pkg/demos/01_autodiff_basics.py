"""
Reverse-mode gradients on a small convolution
=============================================

Everything in the package runs on a float64 tensor type that records the
operations applied to it. Calling ``backward`` on a scalar walks that record
in reverse and fills ``.grad`` on the leaves.
"""

import numpy as np

from mga import ops
from mga.gradcheck import check_gradients
from mga.tensor import Parameter, Tensor, backward

rng = np.random.default_rng(0)

# A batch of two 3-channel 6x6 images and a 3x3 convolution with 4 outputs.
x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
w = Parameter(rng.normal(size=(4, 3, 3, 3)) * 0.3, "w")
b = Parameter(np.zeros(4), "b")

y = ops.relu(ops.conv2d(x, w, b, padding=1))
print("output shape:", y.shape)

###############################################################################
# A scalar objective: the mean sigmoid response against an all-ones target.
target = np.ones((2, 4, 6, 6))
loss = ops.bce_loss(ops.sigmoid(y), target)
backward(loss)
print(f"loss {float(loss.data):.4f}")
print("grad norms: x %.4f, w %.4f, b %.4f" % tuple(np.linalg.norm(t.grad) for t in (x, w, b)))

###############################################################################
# The graph is single use. A second backward on the same loss is refused.
try:
    backward(loss)
except Exception as e:
    print("second backward:", type(e).__name__)

###############################################################################
# Central differences confirm the analytic gradient. ``check_gradients``
# needs a scalar, so the output is contracted against fixed random weights.
# The returned value is the worst relative error over all inputs.
proj = rng.normal(size=(1, 3, 5, 5))
err = check_gradients(lambda a, k: ops.sum_all(ops.mul(ops.conv2d(a, k, padding=1, dilation=2), proj)),
                      [Tensor(rng.normal(size=(1, 2, 7, 7))), Tensor(rng.normal(size=(3, 2, 3, 3)))])
print(f"dilated conv relative error: {err:.2e}")
