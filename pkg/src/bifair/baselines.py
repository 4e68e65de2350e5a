"""Comparison trainers: plain ERM, inverse-frequency reweighting, and
multiplicative worst-group weighting.

These share the training loop and evaluation stack of the two-level
engine but, by default, keep the semantic matrix frozen: they only
counteract unfairness that arises while the projector trains.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dataio import Dataset, GroupAssignment
from .embed import SemanticMatrix
from .fairloss import GroupLossVector

_MODES = ("plain", "reweight", "groupdro")


@dataclass
class BaselineWeights:
    w: np.ndarray
    mode: str = "plain"

    def validate(self) -> None:
        if (self.w < 0).any() or abs(self.w.sum() - 1.0) > 1e-9:
            raise ValueError("baseline weights must lie on the simplex")


def reweight_weights(groups: GroupAssignment, ds: Dataset) -> BaselineWeights:
    """Inverse frequency of each group's training interactions, normalized."""
    counts = np.zeros(groups.num_groups)
    for items in ds.train:
        np.add.at(counts, groups.group_of[items], 1)
    if (counts == 0).any():
        empty = np.flatnonzero(counts == 0).tolist()
        raise ValueError(f"groups {empty} have no training interactions")
    w = 1.0 / counts
    w /= w.sum()
    bw = BaselineWeights(w=w, mode="reweight")
    bw.validate()
    return bw


def groupdro_update(weights: BaselineWeights, losses: GroupLossVector,
                    step: float) -> BaselineWeights:
    """Exponentiated-gradient ascent toward the worst group.

    Present groups scale by exp(step * loss); absent groups keep their
    weight; the vector renormalizes onto the simplex. Adding a constant
    to every loss leaves the result unchanged.
    """
    if step <= 0:
        raise ValueError("step must be > 0")
    w = weights.w.copy()
    present = losses.present
    if present.any():
        w[present] = w[present] * np.exp(step * losses.losses[present])
    w /= w.sum()
    out = BaselineWeights(w=w, mode="groupdro")
    out.validate()
    return out


def train_baseline(ds: Dataset, groups: GroupAssignment, Z0: SemanticMatrix,
                   cfg, mode: str, train_z: bool = False):
    """Run the shared loop with a baseline weighting and frozen Z by default."""
    from .bilevel import train

    if mode not in _MODES:
        raise ValueError(f"mode must be one of {_MODES}")
    run_cfg = replace(cfg, fairness=mode, train_z=train_z)
    return train(ds, groups, Z0, run_cfg)
