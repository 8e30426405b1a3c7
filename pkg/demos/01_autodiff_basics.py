"""Tour of the tape: forward graphs, gradients, and gradients-of-gradients.

Run: python3 demos/01_autodiff_basics.py
"""

import numpy as np

from drupi import tape as T
from drupi.tape import Tape

# Build a graph eagerly; every op lands on the tape.
t = Tape()
x = t.leaf("x", [1.0, 2.0, 3.0])
w = t.leaf("w", [[0.5], [-1.0], [2.0]])
pred = T.matmul(T.reshape(x, (1, 3)), w)
loss = T.reduce_sum(T.mul(pred, pred))
print("loss =", loss.item())

# Reverse-mode gradients of the scalar root.
grads = T.backward(loss, ["x", "w"])
print("dloss/dx =", grads["x"].value)
print("dloss/dw =", grads["w"].value.ravel())

# The backward pass itself lives on the tape, so scalars built from
# gradients can be differentiated again (double backprop).
t2 = Tape()
theta = t2.leaf("theta", 2.0)
xx = t2.leaf("x", 3.0)
root = T.mul(theta, xx)
gg = T.grad_of_grad(
    root, ["theta"], lambda gm: T.mul(gm["theta"], gm["theta"]), ["x"]
)
print("d[(d(theta*x)/dtheta)^2]/dx at x=3 ->", gg["x"].item(), "(expect 6)")

# Replaying the tape on new leaf values reproduces every node deterministically.
out1 = T.forward(t, {"x": [2.0, 0.0, 1.0], "w": [[1.0], [1.0], [1.0]]}, loss)
out2 = T.forward(t, {"x": [2.0, 0.0, 1.0], "w": [[1.0], [1.0], [1.0]]}, loss)
print("replay deterministic:", np.array_equal(out1, out2))
