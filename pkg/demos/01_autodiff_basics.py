"""A short tour of the tensor engine.

Builds a tiny computation, runs backward, and confirms the analytic
gradients against central finite differences.
"""

import numpy as np

import pct.autodiff as ad
from pct.autodiff import Tensor

rng = np.random.default_rng(0)

# forward: y = sum(relu(x W) ** 2) written with the library ops
x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
w = Tensor(rng.normal(size=(3, 5)), requires_grad=True)

h = ad.relu(ad.matmul(x, w))
y = ad.tsum(ad.mul(h, h))
print("y =", float(y.values))

y.backward()
print("dy/dx row 0:", x.grad[0])
print("dy/dW col 0:", w.grad[:, 0])

# the same gradient, checked against finite differences
err_x = ad.gradcheck(lambda t: ad.tsum(ad.mul(ad.relu(ad.matmul(t, w)),
                                              ad.relu(ad.matmul(t, w)))), x)
err_w = ad.gradcheck(lambda t: ad.tsum(ad.mul(ad.relu(ad.matmul(x, t)),
                                              ad.relu(ad.matmul(x, t)))), w)
print(f"gradcheck: x {err_x:.2e}, W {err_w:.2e} (tolerance 1e-4)")

# gradients accumulate until reset
x.zero_grad()
ad.tsum(ad.mul(ad.relu(ad.matmul(x, w)), ad.relu(ad.matmul(x, w)))).backward()
once = x.grad.copy()
ad.tsum(ad.mul(ad.relu(ad.matmul(x, w)), ad.relu(ad.matmul(x, w)))).backward()
print("two backward passes double the gradient:",
      np.allclose(x.grad, 2 * once))

