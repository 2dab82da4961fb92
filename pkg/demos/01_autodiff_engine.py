"""Tour of the gradient engine: graphs, backward, checking, pseudoinverse.

Run:  python3 demos/01_autodiff_engine.py
"""

import numpy as np

from mixerlab import tensor as T
from mixerlab.tensor import Tensor, backward, grad_check, multinomial_sample, pinv

print("== scalar calculus ==")
x = Tensor(np.float64(3.0), requires_grad=True)
backward(T.mul(x, x))
print(f"d(x^2)/dx at x=3  ->  {x.grad.item()}  (expect 6)")

x = Tensor(np.float64(2.0), requires_grad=True)
y = Tensor(np.float64(5.0), requires_grad=True)
backward(T.mul(x, y))
print(f"d(xy)/dx, d(xy)/dy at (2,5)  ->  {x.grad.item()}, {y.grad.item()}  (expect 5, 2)")

print("\n== finite-difference validation of a composite op ==")
rng = np.random.default_rng(0)
logits = Tensor(rng.normal(size=(4, 9)), requires_grad=True)
err = grad_check(lambda t: T.cross_entropy(t, [1, 4, 0, 8]), logits)
print(f"softmax-cross-entropy max relative error vs central differences: {err:.2e}")

print("\n== masked convolution is causal by construction ==")
seq, d = 5, 3
w = Tensor(rng.normal(size=(seq, seq, 1)))
mask = np.tril(np.ones((seq, seq)))
base = T.masked_conv1d(Tensor(rng.normal(size=(seq, d))), w, mask)
print("output row i only sees input rows j <= i; the mask multiplies the")
print("weights inside the forward pass, so masked taps get zero gradient.")

print("\n== pseudoinverse by SVD cutoff ==")
wmat = rng.normal(size=(8, 3))
wp = pinv(wmat)
print(f"||W+ W - I||_max for a full-column-rank 8x3: {np.abs(wp @ wmat - np.eye(3)).max():.2e}")

print("\n== seeded sampling without replacement ==")
print("weights [1,0,1], two draws ->", sorted(multinomial_sample([1.0, 0.0, 1.0], 2, np.random.default_rng(0))))
