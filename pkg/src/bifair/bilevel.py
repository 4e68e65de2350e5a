"""Alternating two-level training of the projector and the semantic matrix.

Each mini-batch first updates the projector by one SGD step along the
fairness-mode direction, then updates the touched rows of the semantic
matrix along an approximate hypergradient: the gradient at a one-step
virtual projector update, corrected by a finite-difference estimate of
the mixed second-order term. One outer update costs exactly two
projector-gradient passes (current and virtual parameters) and three
semantic-gradient passes (virtual point plus the two perturbed points);
the balancing weights are solved once per level per batch and reused to
scalarize every gradient inside that update, so the outer step
differentiates one well-defined weighted objective.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import Dataset, GroupAssignment
from .embed import SemanticMatrix, save_embeddings
from .evalmetrics import cv as cv_metric
from .evalmetrics import group_utilities, overall_metric, rank_topk
from .fairloss import (GroupLossVector, direction_diagnostics, entropy_coefficients,
                       solve_direction)
from .recmodel import (Batch, EvalCounter, FlatGrad, ProjectorParams, combine_flat,
                       group_batch_eval, init_projector, loss_grad_z, save_model)

_FAIRNESS_MODES = ("bifair", "plain", "reweight", "groupdro")

# seed fan-out offsets, also documented in the README
_THETA_SEED_OFFSET = 11
_BATCH_STREAM = 1000
_PHASE2_STREAM = 2000


class TrainDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    inner_lr: float = 0.05
    outer_lr: float = 0.01
    virtual_step: float | None = None  # defaults to inner_lr
    fd_epsilon_scale: float = 0.01
    max_epochs: int = 500
    patience: int = 20
    batch_size: int = 4096
    num_negatives: int = 256
    tau: float = 0.1
    adam_betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.1
    lr_decay_power: float = 0.9
    fairness: str = "bifair"
    direction_mode: str = "all_atoms"  # or "groups_renormalized"
    inner_lr_decay: bool = True   # inner SGD follows a polynomial schedule too
    inner_decay_power: float | None = None  # default: 2x the outer power, so the
    # projector anneals first and the representations converge under a
    # quasi-static projector
    seed: int = 0
    # projector
    projector_kind: str = "linear"
    d_rec: int = 32
    hidden: int | None = None
    bias: bool = True
    # loop behaviour
    train_z: bool = True
    separate: bool = False  # two-phase schedule: theta to convergence, then Z
    alternation: str = "batch"  # "batch": both updates every batch;
    # "epoch": whole projector epochs alternate with whole representation epochs
    fw_iters: int = 50
    stratified: bool = True
    pooling: str = "mean"
    scoring: str = "cosine"
    inner_optimizer: str = "sgd"  # or "adam"
    groupdro_step: float = 0.01
    exclude_history_negatives: bool = False
    eval_k: int = 20
    diag_path: str | None = None

    @property
    def xi(self) -> float:
        return self.inner_lr if self.virtual_step is None else self.virtual_step

    def validate(self) -> None:
        for name in ("inner_lr", "outer_lr", "fd_epsilon_scale", "tau"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.virtual_step is not None and self.virtual_step < 0:
            raise ValueError("virtual_step must be >= 0 (0 disables the correction)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1 or self.batch_size < 1 or self.num_negatives < 1:
            raise ValueError("max_epochs, batch_size, num_negatives must be >= 1")
        if self.fairness not in _FAIRNESS_MODES:
            raise ValueError(f"fairness must be one of {_FAIRNESS_MODES}")
        if self.direction_mode not in ("all_atoms", "groups_renormalized"):
            raise ValueError("direction_mode must be all_atoms or groups_renormalized")
        if self.alternation not in ("batch", "epoch"):
            raise ValueError("alternation must be batch or epoch")


@dataclass
class TrainedModel:
    theta: ProjectorParams
    Z: SemanticMatrix
    history: list[dict]
    best_epoch: int


@dataclass
class TrainPairs:
    users: np.ndarray
    items: np.ndarray
    item_group: np.ndarray

    def __len__(self) -> int:
        return len(self.users)


def collect_train_pairs(ds: Dataset, groups: GroupAssignment) -> TrainPairs:
    users = np.concatenate([np.full(len(ds.train[u]), u, dtype=np.int64)
                            for u in range(ds.num_users)])
    items = np.concatenate(ds.train)
    return TrainPairs(users=users, items=items, item_group=groups.group_of[items])


def sample_negatives(rng: np.random.Generator, num_items: int, pos: np.ndarray,
                     num_negatives: int, forbidden: list[np.ndarray] | None = None) -> np.ndarray:
    """Uniform negatives excluding each pair's positive (and optional sets)."""
    negs = rng.integers(0, num_items, size=(len(pos), num_negatives))
    for _ in range(100):
        bad = negs == pos[:, None]
        if forbidden is not None:
            for row, f in enumerate(forbidden):
                if f.size:
                    bad[row] |= np.isin(negs[row], f)
        if not bad.any():
            return negs
        negs[bad] = rng.integers(0, num_items, size=int(bad.sum()))
    raise RuntimeError("negative sampling failed to converge; item universe too small?")


def iter_epoch_batches(pairs: TrainPairs, ds: Dataset, num_groups: int,
                       cfg: TrainConfig, epoch: int, stream: int = _BATCH_STREAM):
    """Deterministic mini-batches; stratified mode tops up rare groups.

    Stratified batches reserve max(1, batch_size // (4 * num_groups))
    slots per group with training pairs, drawn from per-group shuffled
    reservoirs that wrap around; the remaining slots follow a global
    shuffle so the marginal distribution stays close to uniform.
    """
    rng = np.random.default_rng([cfg.seed, stream + epoch])
    P = len(pairs)
    num_batches = max(1, math.ceil(P / cfg.batch_size))
    order = rng.permutation(P)
    group_pools: list[np.ndarray] = []
    for n in range(num_groups):
        idx = np.flatnonzero(pairs.item_group == n)
        group_pools.append(rng.permutation(idx) if idx.size else idx)
    quota = max(1, cfg.batch_size // (4 * num_groups)) if cfg.stratified else 0
    cursors = [0] * num_groups
    global_cursor = 0
    populated = sum(1 for p in group_pools if p.size)
    fill = max(0, cfg.batch_size - quota * populated)
    for _ in range(num_batches):
        take: list[np.ndarray] = []
        if cfg.stratified:
            for n in range(num_groups):
                pool = group_pools[n]
                if pool.size == 0:
                    continue
                need = min(quota, pool.size)
                picked = []
                while need > 0:
                    if cursors[n] >= pool.size:
                        pool = rng.permutation(pool)
                        group_pools[n] = pool
                        cursors[n] = 0
                    got = min(need, pool.size - cursors[n])
                    picked.append(pool[cursors[n]:cursors[n] + got])
                    cursors[n] += got
                    need -= got
                take.append(np.concatenate(picked))
        room = fill if cfg.stratified else cfg.batch_size
        if room > 0 and global_cursor < P:
            take.append(order[global_cursor:global_cursor + room])
            global_cursor += room
        sel = np.concatenate(take) if take else order[: cfg.batch_size]
        forbidden = None
        if cfg.exclude_history_negatives:
            forbidden = [ds.train[u] for u in pairs.users[sel]]
        negs = sample_negatives(rng, ds.num_items, pairs.items[sel], cfg.num_negatives,
                                forbidden)
        yield Batch(users=pairs.users[sel], pos=pairs.items[sel], negs=negs,
                    pair_group=pairs.item_group[sel])


class AdamWRows:
    """AdamW over matrix rows with lazily updated sparse state.

    Moments and step counts are per row; decoupled weight decay
    multiplies only the rows touched by the current update.
    """

    def __init__(self, shape: tuple[int, int], betas=(0.9, 0.999),
                 weight_decay: float = 0.1, eps: float = 1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = np.zeros(shape[0], dtype=np.int64)
        self.b1, self.b2 = betas
        self.weight_decay = weight_decay
        self.eps = eps

    def step(self, Z: np.ndarray, grad: FlatGrad, lr: float) -> None:
        rows = grad.rows
        G = grad.as_matrix()
        self.t[rows] += 1
        t = self.t[rows][:, None].astype(np.float64)
        self.m[rows] = self.b1 * self.m[rows] + (1 - self.b1) * G
        self.v[rows] = self.b2 * self.v[rows] + (1 - self.b2) * (G * G)
        m_hat = self.m[rows] / (1 - self.b1 ** t)
        v_hat = self.v[rows] / (1 - self.b2 ** t)
        Z[rows] -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        Z[rows] -= lr * self.weight_decay * Z[rows]


class AdamFlat:
    """Plain Adam on a flat vector (optional inner optimizer)."""

    def __init__(self, size: int, betas=(0.9, 0.999), eps: float = 1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.b1, self.b2 = betas
        self.eps = eps

    def step(self, x: np.ndarray, g: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * (g * g)
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        return x - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _effective_weights(roles: list[str], w: np.ndarray, mode: str) -> np.ndarray:
    """Apply the direction mode to solved weights, keeping role alignment."""
    if mode == "groups_renormalized" and "entropy" in roles:
        w = w.copy()
        ent = roles.index("entropy")
        group_total = w.sum() - w[ent]
        if group_total > 0:
            w = w / group_total
        else:
            n_groups = len(roles) - 1
            w[:] = 1.0 / n_groups if n_groups else 0.0
        w[ent] = 0.0
    return w


def _mirror_atoms(grads: list[FlatGrad | None], losses: np.ndarray,
                  roles: list[str]) -> list[FlatGrad]:
    """Atom list in another parameter space matching a solved role layout."""
    group_ids = [int(r.split(":")[1]) for r in roles if r.startswith("group:")]
    atoms = [grads[n] for n in group_ids]
    if "entropy" in roles:
        c = entropy_coefficients(np.asarray(losses)[group_ids])
        atoms.append(combine_flat(atoms, -c))
    return atoms


def direction(theta: ProjectorParams, Z: np.ndarray, batch: Batch, histories,
              num_groups: int, cfg: TrainConfig, wrt: str,
              w_fixed: np.ndarray | None = None,
              counter: EvalCounter | None = None):
    """Fairness-mode update direction in theta- or Z-space.

    plain combines group gradients by batch share (the exact mean-loss
    gradient); reweight/groupdro use the supplied fixed weights over the
    present groups; bifair solves the entropy-regularized min-norm
    weighting. Returns (direction, info) with per-group losses and, for
    bifair, the atom set and solved weights.
    """
    losses, counts, grads = group_batch_eval(theta, Z, batch, histories, cfg.tau,
                                             num_groups, wrt=wrt, pooling=cfg.pooling,
                                             scoring=cfg.scoring, counter=counter)
    present = [n for n in range(num_groups) if grads[n] is not None]
    info: dict = {"losses": losses, "counts": counts}
    if cfg.fairness == "bifair":
        d, atoms, weights = solve_direction(grads, losses, include_entropy=True,
                                            fw_iters=cfg.fw_iters, mode=cfg.direction_mode)
        info.update(atoms=atoms, weights=weights)
        return d, info
    if cfg.fairness == "plain":
        w = counts[present] / counts.sum()
    else:
        if w_fixed is None:
            raise ValueError(f"mode {cfg.fairness} needs fixed group weights")
        w = np.asarray(w_fixed)[present]
    d = combine_flat([grads[n] for n in present], w)
    return d, info


def inner_step(theta: ProjectorParams, Z: np.ndarray, batch: Batch, histories,
               num_groups: int, cfg: TrainConfig, w_fixed: np.ndarray | None = None,
               counter: EvalCounter | None = None, opt: AdamFlat | None = None,
               lr: float | None = None):
    """One projector update along the fairness-mode direction."""
    d, info = direction(theta, Z, batch, histories, num_groups, cfg, "theta",
                        w_fixed=w_fixed, counter=counter)
    step = cfg.inner_lr if lr is None else lr
    flat = theta.flatten()
    if opt is not None:
        new_flat = opt.step(flat, d.values, step)
    else:
        new_flat = flat - step * d.values
    info["d_norm"] = d.norm()
    return theta.with_flat(new_flat), info


def central_difference(z_grad_fn, theta_flat: np.ndarray, v: np.ndarray, eps: float):
    """(grad(theta + eps v) - grad(theta - eps v)) / (2 eps)."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    gp = z_grad_fn(theta_flat + eps * v)
    gm = z_grad_fn(theta_flat - eps * v)
    if isinstance(gp, FlatGrad):
        return FlatGrad((gp.values - gm.values) / (2 * eps), gp.space, gp.rows, gp.width)
    return (np.asarray(gp) - np.asarray(gm)) / (2 * eps)


def fd_second_order(theta: ProjectorParams, Z: np.ndarray, batch: Batch, histories,
                    v: FlatGrad, eps: float, tau: float, pooling: str = "mean",
                    scoring: str = "cosine", counter: EvalCounter | None = None) -> FlatGrad:
    """Finite-difference estimate of the mixed second-order term times v."""
    def z_at(flat: np.ndarray) -> FlatGrad:
        return loss_grad_z(theta.with_flat(flat), Z, batch, histories, tau,
                           pooling=pooling, scoring=scoring, counter=counter)

    return central_difference(z_at, theta.flatten(), v.values, eps)


def approx_hypergradient(grad_theta_fn, grad_z_fn, theta0: np.ndarray, xi: float,
                         fd_epsilon_scale: float = 0.01):
    """Generic one-step-unrolled outer gradient over plain callables.

    Costs exactly two theta-gradient and three z-gradient evaluations:
    the virtual step, the direction at the virtual point, and the two
    perturbed points of the central difference.
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    g1 = np.asarray(grad_theta_fn(theta0))
    theta_v = theta0 - xi * g1
    g_z = np.asarray(grad_z_fn(theta_v))
    g_th = np.asarray(grad_theta_fn(theta_v))
    norm = float(np.linalg.norm(g_th))
    eps = fd_epsilon_scale / norm if norm > 0 else fd_epsilon_scale
    correction = central_difference(grad_z_fn, theta0, g_th, eps)
    return g_z - xi * np.asarray(correction)


def outer_hypergradient(theta: ProjectorParams, Z: np.ndarray, batch: Batch, histories,
                        num_groups: int, cfg: TrainConfig,
                        w_fixed: np.ndarray | None = None,
                        counter: EvalCounter | None = None,
                        xi: float | None = None) -> FlatGrad:
    """Approximate gradient of the loss in Z through the inner update.

    The virtual projector step uses the same fairness-mode direction as
    the inner level. At the virtual point the balancing weights are
    solved once, on the Z-space atoms, and then reused for the
    theta-space gradient and both finite-difference evaluations.
    """
    xi = cfg.xi if xi is None else xi
    d_in, _ = direction(theta, Z, batch, histories, num_groups, cfg, "theta",
                        w_fixed=w_fixed, counter=counter)
    theta_v = theta.with_flat(theta.flatten() - xi * d_in.values)

    losses_v, counts, z_grads = group_batch_eval(theta_v, Z, batch, histories, cfg.tau,
                                                 num_groups, wrt="z", pooling=cfg.pooling,
                                                 scoring=cfg.scoring, counter=counter)
    present = [n for n in range(num_groups) if z_grads[n] is not None]
    if cfg.fairness == "bifair":
        _, atoms, weights = solve_direction(z_grads, losses_v, include_entropy=True,
                                            fw_iters=cfg.fw_iters, mode=cfg.direction_mode)
        roles = atoms.atom_roles
        w_eff = _effective_weights(roles, weights.w, cfg.direction_mode)
    else:
        roles = [f"group:{n}" for n in present]
        if cfg.fairness == "plain":
            w_eff = counts[present] / counts.sum()
        else:
            w_eff = np.asarray(w_fixed)[present]
    g_z = combine_flat(_mirror_atoms(z_grads, losses_v, roles), w_eff)

    losses_th, _, th_grads = group_batch_eval(theta_v, Z, batch, histories, cfg.tau,
                                              num_groups, wrt="theta", pooling=cfg.pooling,
                                              scoring=cfg.scoring, counter=counter)
    g_th = combine_flat(_mirror_atoms(th_grads, losses_th, roles), w_eff)

    def z_phi(flat: np.ndarray) -> FlatGrad:
        th = theta.with_flat(flat)
        losses_p, _, grads_p = group_batch_eval(th, Z, batch, histories, cfg.tau,
                                                num_groups, wrt="z", pooling=cfg.pooling,
                                                scoring=cfg.scoring, counter=counter)
        return combine_flat(_mirror_atoms(grads_p, losses_p, roles), w_eff)

    norm = g_th.norm()
    eps = cfg.fd_epsilon_scale / norm if norm > 0 else cfg.fd_epsilon_scale
    corr = central_difference(z_phi, theta.flatten(), g_th.values, eps)
    return FlatGrad(g_z.values - xi * corr.values, "z", g_z.rows, g_z.width)


def _val_scores(theta, Z, ds, groups, cfg) -> tuple[float, float | None]:
    result = rank_topk(theta, Z, ds, cfg.eval_k, mask_policy="train", tau=cfg.tau,
                       pooling=cfg.pooling, scoring=cfg.scoring)
    recall = overall_metric(result, ds.val, "recall")
    util = group_utilities(result, ds, groups, metric="recall", split="val")
    try:
        val_cv = cv_metric(util)
    except ValueError:
        val_cv = None
    return recall, val_cv


def train(ds: Dataset, groups: GroupAssignment, Z0: SemanticMatrix,
          cfg: TrainConfig) -> TrainedModel:
    """Run the alternating two-level loop with early stopping.

    Keeps the checkpoint with the best validation Recall@K and returns
    it with the per-epoch history. With ``separate`` set, the projector
    first trains to convergence with the representations frozen, then
    freezes while the representations train.
    """
    cfg.validate()
    if Z0.num_items != ds.num_items:
        raise ValueError("semantic matrix row count does not match the dataset")
    groups.validate(ds.num_items)

    pairs = collect_train_pairs(ds, groups)
    histories = ds.train
    theta = init_projector(cfg.projector_kind, Z0.d_sem, cfg.d_rec, hidden=cfg.hidden,
                           bias=cfg.bias, seed=cfg.seed + _THETA_SEED_OFFSET)
    Z = Z0.Z.copy()

    w_fixed: np.ndarray | None = None
    if cfg.fairness == "reweight":
        from .baselines import reweight_weights
        w_fixed = reweight_weights(groups, ds).w

    # (phase id, update theta, update Z, epoch budget); the separate
    # schedule splits the same total budget across its two phases so the
    # ablation compares coupling, not extra training
    phases = [(1, True, cfg.train_z, cfg.max_epochs)]
    if cfg.separate:
        first = math.ceil(cfg.max_epochs / 2)
        phases = [(1, True, False, first), (2, False, True, cfg.max_epochs - first)]

    diag_fh = open(cfg.diag_path, "w") if cfg.diag_path else None
    history: list[dict] = []
    best_recall, best_epoch = -np.inf, 0
    best_theta, best_Z = theta.copy(), Z.copy()
    batches_per_epoch = max(1, math.ceil(len(pairs) / cfg.batch_size))
    epoch_counter = 0
    step = 0

    try:
        for phase, update_theta, update_z, phase_budget in phases:
            if phase_budget < 1:
                continue
            adam = AdamWRows((ds.num_items, Z0.d_sem), betas=cfg.adam_betas,
                             weight_decay=cfg.weight_decay) if update_z else None
            inner_opt = AdamFlat(theta.size(), betas=cfg.adam_betas) \
                if (update_theta and cfg.inner_optimizer == "adam") else None
            max_iter = phase_budget * batches_per_epoch
            if cfg.fairness == "groupdro":
                w_fixed = np.full(groups.num_groups, 1.0 / groups.num_groups)
            stale, phase_iter = 0, 0
            for phase_epoch in range(1, phase_budget + 1):
                epoch_counter += 1
                epoch_theta, epoch_z = update_theta, update_z
                if cfg.alternation == "epoch" and update_theta and update_z:
                    epoch_theta = phase_epoch % 2 == 1
                    epoch_z = not epoch_theta
                stream = _BATCH_STREAM if phase == 1 else _PHASE2_STREAM
                weight_sums = np.zeros(groups.num_groups + 1)
                loss_sums = np.zeros(groups.num_groups)
                loss_counts = np.zeros(groups.num_groups)
                n_batches = 0
                for batch in iter_epoch_batches(pairs, ds, groups.num_groups, cfg,
                                                phase_epoch, stream=stream):
                    n_batches += 1
                    step += 1
                    frac = min(1.0, phase_iter / max_iter)
                    decay = (1.0 - frac) ** cfg.lr_decay_power
                    inner_power = (2.0 * cfg.lr_decay_power
                                   if cfg.inner_decay_power is None
                                   else cfg.inner_decay_power)
                    inner_lr = cfg.inner_lr * (1.0 - frac) ** inner_power \
                        if cfg.inner_lr_decay else cfg.inner_lr
                    if epoch_theta:
                        theta, info = inner_step(theta, Z, batch, histories,
                                                 groups.num_groups, cfg,
                                                 w_fixed=w_fixed, opt=inner_opt,
                                                 lr=inner_lr)
                    else:
                        d_z, info = direction(theta, Z, batch, histories,
                                              groups.num_groups, cfg, "z",
                                              w_fixed=w_fixed)
                    losses = info["losses"]
                    present = np.isfinite(losses)
                    if not present.any() or not np.isfinite(losses[present]).all():
                        raise TrainDivergedError(f"non-finite group loss at step {step}")
                    loss_sums[present] += losses[present]
                    loss_counts[present] += 1
                    if cfg.fairness == "groupdro" and epoch_theta:
                        from .baselines import BaselineWeights, groupdro_update
                        glv = GroupLossVector(losses=losses,
                                              counts=info["counts"])
                        w_fixed = groupdro_update(
                            BaselineWeights(w=w_fixed, mode="groupdro"),
                            glv, cfg.groupdro_step).w
                    if "weights" in info:
                        roles = info["atoms"].atom_roles
                        for role, wv in zip(roles, info["weights"].w):
                            slot = groups.num_groups if role == "entropy" \
                                else int(role.split(":")[1])
                            weight_sums[slot] += wv
                        if diag_fh is not None:
                            rec = direction_diagnostics(
                                info["atoms"], info["weights"],
                                combine_flat(info["atoms"].atoms, info["weights"].w),
                                info["losses"])
                            rec["step"] = step
                            diag_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                    if epoch_z:
                        if update_theta:
                            xi = inner_lr if cfg.virtual_step is None else cfg.virtual_step
                            hg = outer_hypergradient(theta, Z, batch, histories,
                                                     groups.num_groups, cfg,
                                                     w_fixed=w_fixed, xi=xi)
                        else:
                            hg = d_z
                        lr = cfg.outer_lr * decay
                        if lr > 0:
                            adam.step(Z, hg, lr)
                    phase_iter += 1
                val_recall, val_cv = _val_scores(theta, Z, ds, groups, cfg)
                mean_losses = np.where(loss_counts > 0,
                                       loss_sums / np.maximum(loss_counts, 1), np.nan)
                history.append({
                    "epoch": epoch_counter,
                    "phase": phase,
                    "val_recall": float(val_recall),
                    "val_cv": None if val_cv is None else float(val_cv),
                    "group_losses": [None if not np.isfinite(x) else float(x)
                                     for x in mean_losses],
                    "mean_weights": [float(x) for x in weight_sums / max(1, n_batches)],
                })
                if val_recall > best_recall:
                    best_recall, best_epoch = val_recall, epoch_counter
                    best_theta, best_Z = theta.copy(), Z.copy()
                    stale = 0
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        break
            # the next phase continues from this phase's best checkpoint
            theta, Z = best_theta.copy(), best_Z.copy()
    finally:
        if diag_fh is not None:
            diag_fh.close()

    return TrainedModel(theta=best_theta, Z=SemanticMatrix(best_Z, normalized=False),
                        history=history, best_epoch=best_epoch)


def save_checkpoint(out_dir: str | Path, model: TrainedModel, cfg: TrainConfig,
                    config_echo: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out, model.theta, extra={"seed": cfg.seed, "best_epoch": model.best_epoch})
    save_embeddings(out / "z.bin", model.Z.Z)
    with open(out / "history.jsonl", "w") as fh:
        for record in model.history:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    echo = config_echo if config_echo is not None else config_to_dict(cfg)
    (out / "config.echo.json").write_text(json.dumps(echo, indent=1, sort_keys=True))


def config_to_dict(cfg: TrainConfig) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(cfg).items()}
