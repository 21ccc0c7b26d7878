"""The float64 tape autograd engine, checked against finite differences.

Operations record themselves only inside a ``Tape``; ``no_record`` computes
constants (an exact stop-gradient).  ``grad_check`` compares tape gradients
with central differences for every parameter tensor.
"""

import numpy as np

from scriptmot import autograd as ag
from scriptmot.autograd import Tape, Tensor

rng = np.random.default_rng(0)
A, b = rng.standard_normal((20, 3)), rng.standard_normal((20, 1))
x = Tensor(np.zeros((3, 1)), requires_grad=True)

# Least squares by gradient descent, compared with the normal equations.
for _ in range(500):
    x.grad = None
    with Tape():
        loss = ag.square(Tensor(A) @ x - Tensor(b)).mean()
        ag.backward(loss)
    x.data -= 0.1 * x.grad
print("gd     :", x.data.ravel().round(6))
print("lstsq  :", np.linalg.lstsq(A, b, rcond=None)[0].ravel().round(6))

# Masked attention with QK normalisation, checked numerically.
n, H, dh = 6, 2, 4
mask = np.tril(np.ones((n, n), bool))
params = {k: Tensor(rng.standard_normal((n, H, dh)), True) for k in "qkv"}


def attention_loss():
    q = ag.l2_normalize(params["q"]).transpose(1, 0, 2)
    k = ag.l2_normalize(params["k"]).transpose(1, 2, 0)
    attn = ag.masked_softmax(ag.scale(q @ k, 4.0), mask)
    return ag.square(attn @ params["v"].transpose(1, 0, 2)).sum()


print(ag.grad_check(attention_loss, params).format())
