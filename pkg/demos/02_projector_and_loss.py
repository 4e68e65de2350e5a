"""The scoring model: projector, temperature-scaled cosine, contrastive loss.

Shows that the hand-derived gradients agree with finite differences.
Run:  python demos/02_projector_and_loss.py
"""

import numpy as np

from bifair.recmodel import (Batch, infonce_loss, init_projector, loss_grad_theta,
                             project, score)

rng = np.random.default_rng(0)

# a toy catalog of 10 items in a 6-dimensional semantic space
Z = rng.standard_normal((10, 6))
Z /= np.linalg.norm(Z, axis=1, keepdims=True)

theta = init_projector("mlp2", d_sem=6, d_rec=4, hidden=8, seed=1)
e0 = project(theta, Z[0])
print(f"projected item 0 -> {np.round(e0, 3)}")
print(f"score(item0, item1, tau=0.1) = {score(project(theta, Z[0]), project(theta, Z[1]), 0.1):.3f}")

# two users with short histories; positives drawn from those histories
histories = [np.array([0, 1, 2]), np.array([5, 6])]
batch = Batch(users=np.array([0, 0, 1]),
              pos=np.array([1, 2, 5]),
              negs=np.array([[7, 8], [3, 9], [4, 8]]),
              pair_group=np.array([0, 1, 0]))

loss = infonce_loss(theta, Z, batch, histories, tau=0.2)
print(f"contrastive batch loss: {loss:.4f}")

# gradient check: analytic vs central finite differences
g = loss_grad_theta(theta, Z, batch, histories, tau=0.2)
flat = theta.flatten()
h = 1e-5
fd = np.empty_like(flat)
for k in range(flat.size):
    up, down = flat.copy(), flat.copy()
    up[k] += h
    down[k] -= h
    fd[k] = (infonce_loss(theta.with_flat(up), Z, batch, histories, 0.2)
             - infonce_loss(theta.with_flat(down), Z, batch, histories, 0.2)) / (2 * h)
err = np.abs(g.values - fd).max() / np.abs(fd).max()
print(f"max relative gradient error vs finite differences: {err:.2e}")
assert err < 1e-5
