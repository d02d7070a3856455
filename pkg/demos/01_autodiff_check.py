"""
Checking the autodiff engine against finite differences
=======================================================

A tiny MLP and a conv layer, with gradients from the tape compared to
central differences.
"""

import numpy as np

from dualticket import tensor as T

rng = np.random.default_rng(0)

########### A two-layer MLP
x = T.Tensor(rng.normal(size=(8, 5)))
w1 = T.Tensor(rng.normal(size=(5, 16)) * 0.5, requires_grad=True)
w2 = T.Tensor(rng.normal(size=(16, 3)) * 0.5, requires_grad=True)
y = rng.integers(0, 3, size=8)


def loss():
    return T.softmax_cross_entropy(T.matmul(T.relu(T.matmul(x, w1)), w2), y)


T.backward(loss())
print("loss at start:", round(loss().item(), 4))


def numeric_grad(param, step=1e-5):
    g = np.zeros_like(param.data)
    for i in np.ndindex(param.data.shape):
        old = param.data[i]
        param.data[i] = old + step
        with T.no_grad():
            hi = loss().item()
        param.data[i] = old - step
        with T.no_grad():
            lo = loss().item()
        param.data[i] = old
        g[i] = (hi - lo) / (2 * step)
    return g


for name, p in (("w1", w1), ("w2", w2)):
    num = numeric_grad(p)
    err = np.linalg.norm(p.grad - num) / np.linalg.norm(num)
    print(f"{name}: relative error {err:.1e}")

########### Convolution, stride 2 with padding
img = T.Tensor(rng.normal(size=(2, 1, 7, 7)), requires_grad=True)
kernel = T.Tensor(rng.normal(size=(4, 1, 3, 3)), requires_grad=True)
out = T.conv2d(img, kernel, stride=2, padding=1)
print("conv output shape:", out.shape)   # (2, 4, 4, 4)
T.backward(T.tensor_sum(out))
print("d(sum)/d(kernel) for channel 0:\n", kernel.grad[0, 0].round(3))
