"""The reverse-mode tape in a few lines, then a finite-difference check."""
# %%
import numpy as np

from phasefuse import tensor as T
from phasefuse.checks import op_checks
from phasefuse.tensor import Tensor, grad_check

x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
w = Tensor(np.array([[0.5], [-1.0]]), requires_grad=True)
with T.Tape() as tape:
    y = T.sum_all(T.gelu(T.matmul(x, w)))
T.backward(tape, y)
print("loss", y.item())
print("d/dw", w.grad.ravel())

# %% softmax with temperature keeps rows stochastic
s = T.softmax_rows(Tensor(np.random.default_rng(0).normal(size=(3, 5))), 2.0)
print("row sums", s.data.sum(axis=1))

# %% central differences agree with the tape
err = grad_check(lambda ts: T.sum_all(T.mul(T.conv2d(ts[0], ts[1], None, 1), ts[0])),
                 [np.random.default_rng(1).uniform(-1, 1, (1, 6, 6, 2)),
                  np.random.default_rng(2).uniform(-1, 1, (3, 3, 2, 2))])
print(f"conv2d grad check {err:.1e}")
for name, e in op_checks().items():
    print(f"{name:22s} {e:.1e}")
