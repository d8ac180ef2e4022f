"""Tour of the reverse-mode engine: build a graph, pull gradients back
through it, and corroborate them against central differences."""
import numpy as np

import dynat.autodiff as ad
from dynat.gradcheck import run_suite

rng = np.random.default_rng(0)

# a two-layer net written out by hand
x = ad.Tensor(rng.uniform(-1, 1, (8, 5)))
w1 = ad.Tensor(rng.normal(0, 0.5, (5, 7)), requires_grad=True)
b1 = ad.Tensor(np.zeros(7), requires_grad=True)
w2 = ad.Tensor(rng.normal(0, 0.5, (7, 3)), requires_grad=True)
y = ad.Tensor(np.eye(3)[rng.integers(0, 3, 8)])

hidden = ad.relu(ad.add(ad.matmul(x, w1), b1))
loss = ad.softmax_cross_entropy(ad.matmul(hidden, w2), y)
ad.backward(loss)

print(f"loss            {float(loss.data):.6f}")
print(f"dloss/dw1 norm  {np.linalg.norm(w1.grad):.6f}")
print(f"dloss/db1 norm  {np.linalg.norm(b1.grad):.6f}")
print(f"dloss/dw2 norm  {np.linalg.norm(w2.grad):.6f}")

# the same gradient, one weight at a time, by bumping the entry
ad.reset_tape()


def loss_at(w1_data):
    probe = ad.Tensor(w1_data, requires_grad=True)
    h = ad.relu(ad.add(ad.matmul(x, probe), b1))
    out = ad.softmax_cross_entropy(ad.matmul(h, w2), y)
    ad.reset_tape()
    return float(out.data)


h = 1e-6
bump = w1.data.copy()
bump[2, 3] += h
numeric = (loss_at(bump) - loss_at(w1.data)) / h
print(f"\nw1[2,3] analytic {w1.grad[2, 3]: .8f}")
print(f"w1[2,3] numeric  {numeric: .8f}")

# grad_check automates that comparison over every entry
ad.reset_tape()
err = ad.grad_check(lambda t: ad.mse_loss(ad.relu(t), ad.Tensor(np.ones((4, 4)))),
                    ad.Tensor(rng.uniform(0.1, 1.0, (4, 4)), requires_grad=True))
print(f"\nrelu/mse grad_check relative error {err:.2e}")

# and run_suite sweeps every primitive plus randomized compositions
worst_name, worst = max(run_suite(), key=lambda item: item[1])
print(f"full suite worst {worst:.2e} ({worst_name})")
