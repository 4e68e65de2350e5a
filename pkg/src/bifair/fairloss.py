"""Adaptive multi-group balancing of the recommendation loss.

Builds the per-group loss vector, the softmax-entropy objective that
rewards equal group losses, and the minimum-norm weighting over the
group gradients (plus the negated entropy gradient) solved by
Frank-Wolfe with a closed-form line search. The weighted combination is
a common descent direction: it cannot increase any group's loss to
first order unless the gradients conflict so severely that the
min-norm point collapses toward zero, which is reported rather than
patched over.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import GroupAssignment
from .recmodel import Batch, FlatGrad, ProjectorParams, combine_flat, group_batch_eval

# an entropy atom this small relative to the group atoms carries no
# signal and would pull the min-norm point to zero; skip it
_ENTROPY_ATOM_FLOOR = 1e-12


@dataclass
class GroupLossVector:
    losses: np.ndarray  # NaN for groups absent from the batch
    counts: np.ndarray

    @property
    def num_groups(self) -> int:
        return len(self.losses)

    @property
    def present(self) -> np.ndarray:
        return self.counts > 0

    def present_losses(self) -> np.ndarray:
        return self.losses[self.present]


@dataclass
class SimplexWeights:
    w: np.ndarray

    def validate(self) -> None:
        if (self.w < 0).any() or abs(self.w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be nonnegative and sum to 1")


@dataclass
class GradientAtomSet:
    atoms: list[FlatGrad]
    gram: np.ndarray
    atom_roles: list[str]  # "group:<n>" or "entropy"

    def __len__(self) -> int:
        return len(self.atoms)

    def validate(self) -> None:
        B = self.gram
        if not np.allclose(B, B.T, atol=1e-9):
            raise ValueError("Gram matrix is not symmetric")
        eig_min = float(np.linalg.eigvalsh(B).min())
        if eig_min < -1e-8:
            raise ValueError(f"Gram matrix not positive semidefinite (min eig {eig_min:.3e})")


def group_loss_vector(theta: ProjectorParams, Z: np.ndarray, batch: Batch, histories,
                      groups: GroupAssignment, tau: float, pooling: str = "mean",
                      scoring: str = "cosine") -> GroupLossVector:
    """Mean contrastive loss per group of the pair's positive item."""
    losses, counts, _ = group_batch_eval(theta, Z, batch, histories, tau,
                                         groups.num_groups, wrt=None,
                                         pooling=pooling, scoring=scoring)
    if not (counts > 0).any():
        raise ValueError("no group is present in the batch")
    return GroupLossVector(losses=losses, counts=counts)


def softmax_entropy(L: np.ndarray) -> tuple[np.ndarray, float]:
    """Softmax of the loss vector and the entropy of that distribution."""
    L = np.asarray(L, dtype=np.float64)
    if not np.isfinite(L).all():
        raise ValueError("loss vector contains non-finite values")
    e = np.exp(L - L.max())
    p = e / e.sum()
    H = float(-(p * np.log(p)).sum())
    return p, H


def entropy_coefficients(L: np.ndarray) -> np.ndarray:
    """Per-group chain-rule coefficients of the softmax entropy.

    c_n = p_n * (sum_j p_j log p_j - log p_n); all zero exactly when the
    softmax is uniform, i.e. when the entropy is already maximal.
    """
    p, _ = softmax_entropy(L)
    logp = np.log(p)
    return p * ((p * logp).sum() - logp)


def entropy_gradient(group_grads: list[FlatGrad], L: np.ndarray) -> FlatGrad:
    """Exact gradient of the softmax entropy of the group loss vector."""
    L = np.asarray(L, dtype=np.float64)
    if len(group_grads) != len(L):
        raise ValueError("need one gradient per loss entry")
    c = entropy_coefficients(L)
    return combine_flat(group_grads, c)


def build_atom_set(group_grads: list[FlatGrad], entropy_grad: FlatGrad | None,
                   include_entropy: bool, group_ids: list[int] | None = None) -> GradientAtomSet:
    """Assemble gradient atoms and their Gram matrix.

    Absent groups contribute no atom. The negated entropy gradient is
    appended when requested, unless it is numerically zero relative to
    the group atoms (at maximal entropy it vanishes identically, and a
    zero atom would make the min-norm point trivially zero).
    """
    if group_ids is None:
        group_ids = list(range(len(group_grads)))
    atoms: list[FlatGrad] = []
    roles: list[str] = []
    for n, g in zip(group_ids, group_grads):
        if g is not None:
            atoms.append(g)
            roles.append(f"group:{n}")
    if not atoms:
        raise ValueError("no gradient atoms present")
    if include_entropy and entropy_grad is not None:
        scale = max(1.0, max(a.norm() for a in atoms))
        if entropy_grad.norm() > _ENTROPY_ATOM_FLOOR * scale:
            atoms = atoms + [entropy_grad.scaled(-1.0)]
            roles = roles + ["entropy"]
    M = len(atoms)
    gram = np.empty((M, M))
    for i in range(M):
        for j in range(i, M):
            gram[i, j] = gram[j, i] = atoms[i].dot(atoms[j])
    atom_set = GradientAtomSet(atoms=atoms, gram=gram, atom_roles=roles)
    atom_set.validate()
    return atom_set


def _affine_min_norm(B: np.ndarray, support: np.ndarray) -> np.ndarray:
    """Minimize u^T B_S u subject to sum(u) = 1 (signs unconstrained)."""
    k = len(support)
    Bs = B[np.ix_(support, support)]
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = 2.0 * Bs
    kkt[:k, k] = 1.0
    kkt[k, :k] = 1.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    return sol[:k]


def _min_norm_polish(B: np.ndarray, w: np.ndarray, trace: list[float]) -> np.ndarray:
    """Active-set refinement to the exact minimum-norm point.

    The capped linear-minimization loop above converges only at a 1/t
    rate near faces; these major/minor cycles finish the job by solving
    the affine problem on the current support and clipping back to the
    simplex when a coordinate would go negative. Each accepted move
    lowers the objective, so the recorded trace stays non-increasing.
    """
    M = B.shape[0]
    scale = max(1.0, float(np.abs(B).max()))
    obj = float(w @ B @ w)
    for _ in range(16 * (M + 1)):
        a = B @ w
        v = int(np.argmin(a))
        if a[v] >= obj - 1e-12 * scale:
            break  # optimality: every atom aligns at least as well as d itself
        support = np.flatnonzero(w > 0)
        if v not in support:
            support = np.sort(np.append(support, v))
        for _ in range(4 * (M + 1)):
            u = _affine_min_norm(B, support)
            if (u >= -1e-14).all():
                w = np.zeros(M)
                w[support] = np.maximum(u, 0.0)
                break
            ws = w[support]
            shrink = u <= 0
            theta = np.min(ws[shrink] / (ws[shrink] - u[shrink]))
            ws = (1.0 - theta) * ws + theta * u
            ws[ws < 1e-14] = 0.0
            w = np.zeros(M)
            w[support] = ws
            support = np.flatnonzero(w > 0)
        w = np.maximum(w, 0.0)
        w /= w.sum()
        new_obj = float(w @ B @ w)
        if new_obj > obj:
            break
        obj = new_obj
        trace.append(obj)
    return w


def frank_wolfe(atoms: GradientAtomSet, T: int = 50, polish: bool = True,
                return_trace: bool = False):
    """Minimum-norm point of the convex hull of the atoms.

    The main loop picks the basis vector with the smallest inner product
    against the current iterate (ties to the lowest index) and moves by
    the closed-form step, stopping early once the per-step decrease
    drops below 1e-12. Because that rule alone crawls near faces, a
    final active-set polish solves the support exactly; the recorded
    objective is non-increasing throughout, and every iterate is a
    convex combination so the simplex constraints hold by construction.
    """
    if T < 1:
        raise ValueError("need at least one iteration")
    B = atoms.gram
    M = B.shape[0]
    w = np.full(M, 1.0 / M)
    obj = float(w @ B @ w)
    trace = [obj]
    for _ in range(T):
        a = B @ w
        v = int(np.argmin(a))
        num = float(w @ a - a[v])
        den = float(w @ a - 2.0 * a[v] + B[v, v])
        gamma = 0.0 if den <= 0.0 else min(1.0, max(0.0, num / den))
        w_next = (1.0 - gamma) * w + gamma * np.eye(M)[v]
        obj_next = float(w_next @ B @ w_next)
        if obj_next > obj:
            break
        w, decrease, obj = w_next, obj - obj_next, obj_next
        trace.append(obj)
        if decrease < 1e-12:
            break
    if polish:
        w = _min_norm_polish(B, w, trace)
        w = np.maximum(w, 0.0)
        w /= w.sum()
    weights = SimplexWeights(w=w)
    weights.validate()
    if return_trace:
        return weights, np.array(trace)
    return weights


def fair_direction(atoms: GradientAtomSet, weights: SimplexWeights,
                   mode: str = "all_atoms") -> FlatGrad:
    """Weighted combination of the atoms under the solved weights.

    ``all_atoms`` keeps the entropy atom's weight in the sum;
    ``groups_renormalized`` drops it and rescales the group weights to
    sum to one.
    """
    w = weights.w
    if len(w) != len(atoms):
        raise ValueError("weight length does not match atom count")
    if mode == "groups_renormalized" and "entropy" in atoms.atom_roles:
        keep = [i for i, r in enumerate(atoms.atom_roles) if r != "entropy"]
        w_kept = w[keep]
        total = w_kept.sum()
        w_kept = w_kept / total if total > 0 else np.full(len(keep), 1.0 / len(keep))
        return combine_flat([atoms.atoms[i] for i in keep], w_kept)
    if mode not in ("all_atoms", "groups_renormalized"):
        raise ValueError(f"unknown direction mode {mode!r}")
    return combine_flat(atoms.atoms, w)


def solve_direction(group_grads: list[FlatGrad | None], losses: np.ndarray,
                    include_entropy: bool = True, fw_iters: int = 50,
                    mode: str = "all_atoms"):
    """Group gradients -> atoms -> Frank-Wolfe -> descent direction.

    ``group_grads`` may contain None for absent groups; ``losses`` holds
    the matching per-group losses (NaN where absent). Returns the
    direction plus the atom set and weights for diagnostics.
    """
    present = [i for i, g in enumerate(group_grads) if g is not None]
    grads_present = [group_grads[i] for i in present]
    losses_present = np.asarray(losses)[present]
    ent = entropy_gradient(grads_present, losses_present) if include_entropy else None
    atoms = build_atom_set(grads_present, ent, include_entropy, group_ids=present)
    weights = frank_wolfe(atoms, fw_iters)
    d = fair_direction(atoms, weights, mode=mode)
    return d, atoms, weights


def direction_diagnostics(atoms: GradientAtomSet, weights: SimplexWeights,
                          d: FlatGrad, losses: np.ndarray) -> dict:
    """Per-step record: losses, softmax, entropy, weights, alignment."""
    present = [float(x) for x in losses[np.isfinite(losses)]]
    p, H = softmax_entropy(np.array(present))
    return {
        "group_losses": [None if not np.isfinite(x) else float(x) for x in losses],
        "p": [float(x) for x in p],
        "entropy": H,
        "w": [float(x) for x in weights.w],
        "atom_roles": list(atoms.atom_roles),
        "d_norm": d.norm(),
        "d_dot_atoms": [float(d.dot(a)) for a in atoms.atoms],
    }
