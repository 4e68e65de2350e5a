"""From group losses to a common descent direction.

Builds the group loss vector, its softmax entropy, the gradient atoms,
and solves the min-norm weighting by Frank-Wolfe. The resulting
direction is aligned with every group's gradient at once.
Run:  python demos/03_fair_weighting.py
"""

import numpy as np

from bifair.fairloss import (build_atom_set, entropy_gradient, fair_direction,
                             frank_wolfe, softmax_entropy)
from bifair.recmodel import FlatGrad

rng = np.random.default_rng(3)

# pretend three groups produced these losses and (flattened) gradients
losses = np.array([0.9, 1.6, 1.1])
grads = [FlatGrad(rng.standard_normal(12), "theta") for _ in range(3)]

p, H = softmax_entropy(losses)
print(f"group losses {losses} -> softmax {np.round(p, 3)}, entropy {H:.4f} "
      f"(max possible {np.log(3):.4f})")

# the entropy gradient vanishes exactly when all losses are equal
ent = entropy_gradient(grads, losses)
print(f"entropy-gradient norm: {ent.norm():.4f}")

atoms = build_atom_set(grads, ent, include_entropy=True)
print(f"atom roles: {atoms.atom_roles}")

weights, trace = frank_wolfe(atoms, T=50, return_trace=True)
print(f"solved weights: {np.round(weights.w, 4)} (sum {weights.w.sum():.6f})")
print(f"objective trace (non-increasing): {np.round(trace[:5], 4)} ...")

d = fair_direction(atoms, weights)
print(f"direction norm: {d.norm():.4f}")
for role, g in zip(atoms.atom_roles, atoms.atoms):
    print(f"  d . {role:8s} = {d.dot(g):+.4f}  (>= ||d||^2 - tol = {d.norm()**2:.4f})")
