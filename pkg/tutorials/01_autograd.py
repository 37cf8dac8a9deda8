"""
Autograd and the finite-difference oracle
=========================================

Everything in carnet is built on a small reverse-mode tensor. Each op
records itself on a tape and ``backward`` walks the tape in reverse.
"""
import numpy as np

from carnet import tensor as T
from carnet.gradcheck import check
from carnet.tensor import Tensor, backward

# a two-layer network on a batch of five points
rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((5, 3)))
w1 = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
w2 = Tensor(rng.standard_normal((4, 1)), requires_grad=True)
y = T.matmul(T.tanh(T.matmul(x, w1)), w2)
loss = T.reduce_mean(T.mul(y, y))
backward(loss)
print("loss", float(loss.data))
print("dL/dw2", w2.grad.ravel())

# gradients are checked against central differences in float64
x64 = Tensor(rng.standard_normal((5, 3)), dtype=np.float64)
a = Tensor(rng.standard_normal((3, 4)), requires_grad=True, dtype=np.float64)
b = Tensor(rng.standard_normal((4, 1)), requires_grad=True, dtype=np.float64)


def f(a, b):
    y = T.matmul(T.tanh(T.matmul(x64, a)), b)
    return T.reduce_mean(T.mul(y, y))


err = check(f, [a, b])
print(f"relative error against finite differences: {err:.2e}")

# the layers work the same way: a GRU step with zero weights halves the state
from carnet import nn

cell = nn.GRUCell(2, 3, rng, dtype=np.float64)
for p in cell.parameters():
    p.data = np.zeros_like(p.data)
h = nn.gru_step(np.array([2.0, -4.0, 1.0]), np.ones(2), cell)
print("zero-weight GRU step", h.data)
