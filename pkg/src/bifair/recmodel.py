"""Trainable projector, scoring, contrastive loss, and its exact gradients.

Gradients with respect to both the projector parameters and the rows of
the semantic matrix are derived by hand and validated against central
finite differences in the test suite. One call to the batched gradient
routine produces the gradients of every group's mean loss in a single
pass over the batch; an optional counter records how many such passes a
caller spends, since the outer-level update is budgeted in exactly these
units.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_MAGIC = b"BIFE"


@dataclass
class ProjectorParams:
    """Projector weights: a linear map or a two-layer tanh MLP."""

    kind: str                       # "linear" | "mlp2"
    tensors: dict[str, np.ndarray]  # ordered: W[,b] or W1[,b1],W2[,b2]

    @property
    def d_sem(self) -> int:
        return self.tensors["W" if self.kind == "linear" else "W1"].shape[0]

    @property
    def d_rec(self) -> int:
        return self.tensors["W" if self.kind == "linear" else "W2"].shape[1]

    @property
    def has_bias(self) -> bool:
        return ("b" in self.tensors) or ("b1" in self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def size(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.tensors[k].ravel() for k in self.tensors])

    def with_flat(self, flat: np.ndarray) -> "ProjectorParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size():
            raise ValueError(f"flat vector has {flat.size} entries, expected {self.size()}")
        out, off = {}, 0
        for k, t in self.tensors.items():
            out[k] = flat[off:off + t.size].reshape(t.shape).copy()
            off += t.size
        return ProjectorParams(self.kind, out)

    def copy(self) -> "ProjectorParams":
        return ProjectorParams(self.kind, {k: t.copy() for k, t in self.tensors.items()})

    def validate(self) -> None:
        for k, t in self.tensors.items():
            if not np.isfinite(t).all():
                raise ValueError(f"tensor {k} contains non-finite values")


def init_projector(kind: str, d_sem: int, d_rec: int, hidden: int | None = None,
                   bias: bool = True, seed: int = 0) -> ProjectorParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, seeded."""
    rng = np.random.default_rng(seed)

    def layer(fan_in: int, fan_out: int) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    if kind == "linear":
        tensors = {"W": layer(d_sem, d_rec)}
        if bias:
            tensors["b"] = np.zeros(d_rec)
    elif kind == "mlp2":
        if hidden is None:
            hidden = d_rec
        tensors = {"W1": layer(d_sem, hidden)}
        if bias:
            tensors["b1"] = np.zeros(hidden)
        tensors["W2"] = layer(hidden, d_rec)
        if bias:
            tensors["b2"] = np.zeros(d_rec)
    else:
        raise ValueError(f"unknown projector kind {kind!r}")
    return ProjectorParams(kind, tensors)


def project(theta: ProjectorParams, z: np.ndarray) -> np.ndarray:
    """Map semantic vectors (rows) into the recommendation space."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    X = z[None, :] if single else z
    if X.shape[1] != theta.d_sem:
        raise ValueError(f"input width {X.shape[1]} != d_sem {theta.d_sem}")
    Y, _ = _forward(theta, X)
    return Y[0] if single else Y


def _forward(theta: ProjectorParams, X: np.ndarray) -> tuple[np.ndarray, dict]:
    t = theta.tensors
    if theta.kind == "linear":
        Y = X @ t["W"]
        if "b" in t:
            Y = Y + t["b"]
        return Y, {}
    A1 = X @ t["W1"]
    if "b1" in t:
        A1 = A1 + t["b1"]
    H = np.tanh(A1)
    Y = H @ t["W2"]
    if "b2" in t:
        Y = Y + t["b2"]
    return Y, {"H": H}


def _backward(theta: ProjectorParams, X: np.ndarray, cache: dict, dY: np.ndarray,
              need_dx: bool) -> tuple[dict[str, np.ndarray], np.ndarray | None]:
    t = theta.tensors
    grads: dict[str, np.ndarray] = {}
    if theta.kind == "linear":
        grads["W"] = X.T @ dY
        if "b" in t:
            grads["b"] = dY.sum(axis=0)
        dX = dY @ t["W"].T if need_dx else None
        return grads, dX
    H = cache["H"]
    grads["W2"] = H.T @ dY
    if "b2" in t:
        grads["b2"] = dY.sum(axis=0)
    dA1 = (dY @ t["W2"].T) * (1.0 - H * H)
    grads["W1"] = X.T @ dA1
    if "b1" in t:
        grads["b1"] = dA1.sum(axis=0)
    dX = dA1 @ t["W1"].T if need_dx else None
    return grads, dX


def score(e_u: np.ndarray, e_i: np.ndarray, tau: float, scoring: str = "cosine") -> float:
    """Temperature-scaled similarity of two projected vectors."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    e_u = np.asarray(e_u, dtype=np.float64)
    e_i = np.asarray(e_i, dtype=np.float64)
    if scoring == "dot":
        return float(e_u @ e_i) / tau
    nu, ni = np.linalg.norm(e_u), np.linalg.norm(e_i)
    if nu == 0.0 or ni == 0.0:
        warnings.warn("cosine of a zero vector; score defined as 0")
        return 0.0
    return float(e_u @ e_i / (nu * ni)) / tau


@dataclass
class Batch:
    """Training pairs with sampled negatives and the positive's group."""

    users: np.ndarray       # (P,)
    pos: np.ndarray         # (P,)
    negs: np.ndarray        # (P, m)
    pair_group: np.ndarray  # (P,)

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.pos = np.asarray(self.pos, dtype=np.int64)
        self.negs = np.asarray(self.negs, dtype=np.int64)
        self.pair_group = np.asarray(self.pair_group, dtype=np.int64)
        if self.negs.ndim != 2 or len(self.negs) != len(self.pos):
            raise ValueError("negatives must be (num_pairs, num_negatives)")
        if (self.negs == self.pos[:, None]).any():
            raise ValueError("a negative equals its pair's positive item")

    def __len__(self) -> int:
        return len(self.pos)


@dataclass
class FlatGrad:
    """Flat gradient vector over theta entries or over touched Z rows."""

    values: np.ndarray
    space: str                       # "theta" | "z"
    rows: np.ndarray | None = None   # z-space: sorted touched row indices
    width: int | None = None         # z-space: row width

    def dot(self, other: "FlatGrad") -> float:
        self._check_compatible(other)
        return float(self.values @ other.values)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def scaled(self, c: float) -> "FlatGrad":
        return FlatGrad(self.values * c, self.space, self.rows, self.width)

    def _check_compatible(self, other: "FlatGrad") -> None:
        if self.space != other.space or self.values.size != other.values.size:
            raise ValueError("gradients live in different parameter spaces")
        if self.space == "z" and not np.array_equal(self.rows, other.rows):
            raise ValueError("z-space gradients cover different row sets")

    def as_matrix(self) -> np.ndarray:
        if self.space != "z":
            raise ValueError("only z-space gradients reshape to rows")
        return self.values.reshape(len(self.rows), self.width)


def combine_flat(grads: list[FlatGrad], weights: np.ndarray) -> FlatGrad:
    """Weighted sum of same-space flat gradients."""
    if len(grads) != len(weights):
        raise ValueError("one weight per gradient required")
    acc = grads[0].values * weights[0]
    for g, w in zip(grads[1:], np.asarray(weights)[1:]):
        grads[0]._check_compatible(g)
        acc = acc + g.values * w
    return FlatGrad(acc, grads[0].space, grads[0].rows, grads[0].width)


@dataclass
class EvalCounter:
    """Counts whole-batch gradient passes, one per evaluation point."""

    theta_evals: int = 0
    z_evals: int = 0

    def reset(self) -> None:
        self.theta_evals = 0
        self.z_evals = 0


@dataclass
class _BatchWork:
    """Weight-independent forward quantities shared by all backward passes."""

    user_rows: np.ndarray      # (P,) row in the unique-user stack
    uniq_users: np.ndarray
    z_users: np.ndarray        # (U, d_sem) pooled inputs
    items_ref: np.ndarray      # unique referenced items
    J: np.ndarray              # (P, m+1) local indices into items_ref; col 0 = positive
    e_users: np.ndarray
    e_items: np.ndarray
    cache_users: dict
    cache_items: dict
    c: np.ndarray              # (P, m+1) cosine (or dot) values
    q: np.ndarray              # (P, m+1) softmax over logits
    pair_loss: np.ndarray      # (P,)
    U_hat: np.ndarray          # (P, d_rec) normalized user vectors per pair
    I_hat: np.ndarray          # (P, m+1, d_rec) normalized item vectors
    safe_nu: np.ndarray        # (P,)
    safe_nI: np.ndarray        # (P, m+1)
    inv_hist: np.ndarray       # (U,) 1/|hist| (mean pooling) or 1 (sum)
    hist_concat: np.ndarray    # all history rows of batch users
    hist_owner: np.ndarray     # owning unique-user row per history entry
    z_rows: np.ndarray         # sorted union of touched Z rows
    items_local: np.ndarray    # items_ref positions within z_rows
    hist_local: np.ndarray     # hist_concat positions within z_rows
    zero_mask: tuple | None    # (user, item) zero-norm masks, cosine only


def _prepare(theta: ProjectorParams, Z: np.ndarray, batch: Batch, histories,
             tau: float, pooling: str, scoring: str) -> _BatchWork:
    if len(batch) == 0:
        raise ValueError("empty batch")
    if tau <= 0:
        raise ValueError("tau must be > 0")
    uniq_users, user_rows = np.unique(batch.users, return_inverse=True)
    hists = [np.asarray(histories[u], dtype=np.int64) for u in uniq_users]
    if any(h.size == 0 for h in hists):
        raise ValueError("a batch user has an empty history")
    lens = np.array([h.size for h in hists], dtype=np.float64)
    inv_hist = 1.0 / lens if pooling == "mean" else np.ones_like(lens)
    hist_concat = np.concatenate(hists)
    offsets = np.zeros(len(hists), dtype=np.int64)
    np.cumsum(lens[:-1].astype(np.int64), out=offsets[1:])
    z_users = np.add.reduceat(Z[hist_concat], offsets, axis=0) * inv_hist[:, None]
    hist_owner = np.repeat(np.arange(len(hists)), [h.size for h in hists])

    cols = np.concatenate([batch.pos[:, None], batch.negs], axis=1)  # (P, m+1)
    items_ref, J_flat = np.unique(cols, return_inverse=True)
    J = J_flat.reshape(cols.shape)

    e_users, cache_users = _forward(theta, z_users)
    e_items, cache_items = _forward(theta, Z[items_ref])

    EU = e_users[user_rows]          # (P, d_rec)
    EJ = e_items[J]                  # (P, m+1, d_rec)
    zero_mask = None
    if scoring == "cosine":
        nu = np.linalg.norm(EU, axis=1)
        nI = np.linalg.norm(EJ, axis=2)
        if (nu == 0.0).any() or (nI == 0.0).any():
            warnings.warn("zero projected vector; its cosine scores are 0")
            zero_mask = (nu == 0.0, nI == 0.0)
        safe_nu = np.where(nu == 0.0, 1.0, nu)
        safe_nI = np.where(nI == 0.0, 1.0, nI)
        U_hat = EU / safe_nu[:, None]
        I_hat = EJ / safe_nI[:, :, None]
        c = np.einsum("pd,pjd->pj", U_hat, I_hat)
        if zero_mask is not None:
            c[zero_mask[1]] = 0.0
            c[zero_mask[0], :] = 0.0
    elif scoring == "dot":
        safe_nu = np.ones(len(batch))
        safe_nI = np.ones(J.shape)
        U_hat = EU
        I_hat = EJ
        c = np.einsum("pd,pjd->pj", EU, EJ)
    else:
        raise ValueError(f"unknown scoring {scoring!r}")
    logits = c / tau
    shift = logits.max(axis=1, keepdims=True)
    expl = np.exp(logits - shift)
    denom = expl.sum(axis=1)
    q = expl / denom[:, None]
    pair_loss = np.log(denom) + shift[:, 0] - logits[:, 0]

    z_rows = np.unique(np.concatenate([items_ref, hist_concat]))
    items_local = np.searchsorted(z_rows, items_ref)
    hist_local = np.searchsorted(z_rows, hist_concat)
    return _BatchWork(user_rows, uniq_users, z_users, items_ref, J, e_users, e_items,
                      cache_users, cache_items, c, q, pair_loss, U_hat, I_hat,
                      safe_nu, safe_nI, inv_hist, hist_concat, hist_owner,
                      z_rows, items_local, hist_local, zero_mask)


def _backward_weighted(theta: ProjectorParams, Z: np.ndarray, work: _BatchWork,
                       tau: float, scoring: str, omega: np.ndarray, wrt: str,
                       active: np.ndarray | None = None) -> FlatGrad:
    """Gradient of sum_p omega_p * loss_p with respect to theta or Z rows.

    ``active`` optionally restricts the computation to the pairs with
    nonzero weight; the result is identical, just cheaper when omega is
    sparse (per-group gradients).
    """
    if active is None:
        active = np.arange(len(omega))
    om = omega[active]
    g = om[:, None] * work.q[active]
    g[:, 0] -= om
    g = g / tau
    U_hat = work.U_hat[active]
    I_hat = work.I_hat[active]
    if scoring == "cosine":
        cA = work.c[active]
        gc = (g * cA).sum(axis=1)
        dU_pair = (np.einsum("pj,pjd->pd", g, I_hat) - gc[:, None] * U_hat) \
            / work.safe_nu[active][:, None]
        dI = (g[:, :, None] * (U_hat[:, None, :] - cA[:, :, None] * I_hat)) \
            / work.safe_nI[active][:, :, None]
        if work.zero_mask is not None:
            dU_pair[work.zero_mask[0][active]] = 0.0
            dI[work.zero_mask[1][active]] = 0.0
    else:
        dU_pair = np.einsum("pj,pjd->pd", g, I_hat)
        dI = g[:, :, None] * U_hat[:, None, :]

    dE_users = np.zeros_like(work.e_users)
    np.add.at(dE_users, work.user_rows[active], dU_pair)
    dE_items = np.zeros_like(work.e_items)
    np.add.at(dE_items, work.J[active].ravel(), dI.reshape(-1, dI.shape[2]))

    need_dx = wrt == "z"
    grads_u, dX_users = _backward(theta, work.z_users, work.cache_users, dE_users, need_dx)
    grads_i, dX_items = _backward(theta, Z[work.items_ref], work.cache_items, dE_items, need_dx)

    if wrt == "theta":
        flat = np.concatenate([(grads_u[k] + grads_i[k]).ravel() for k in theta.tensors])
        return FlatGrad(flat, "theta")

    dZ = np.zeros((work.z_rows.size, Z.shape[1]))
    np.add.at(dZ, work.items_local, dX_items)
    scaled = dX_users * work.inv_hist[:, None]
    if len(np.unique(work.user_rows[active])) == len(work.uniq_users):
        np.add.at(dZ, work.hist_local, scaled[work.hist_owner])
    else:
        keep = np.isin(work.hist_owner, work.user_rows[active])
        np.add.at(dZ, work.hist_local[keep], scaled[work.hist_owner[keep]])
    return FlatGrad(dZ.ravel(), "z", rows=work.z_rows, width=Z.shape[1])


def pair_losses(theta: ProjectorParams, Z: np.ndarray, batch: Batch, histories,
                tau: float, pooling: str = "mean", scoring: str = "cosine") -> np.ndarray:
    work = _prepare(theta, Z, batch, histories, tau, pooling, scoring)
    return work.pair_loss


def infonce_loss(theta: ProjectorParams, Z: np.ndarray, batch: Batch, histories,
                 tau: float, pooling: str = "mean", scoring: str = "cosine") -> float:
    """Mean contrastive loss: one positive against sampled negatives."""
    return float(pair_losses(theta, Z, batch, histories, tau, pooling, scoring).mean())


def loss_grad_theta(theta: ProjectorParams, Z: np.ndarray, batch: Batch, histories,
                    tau: float, pooling: str = "mean", scoring: str = "cosine",
                    counter: EvalCounter | None = None) -> FlatGrad:
    """Exact gradient of the mean batch loss over all theta entries."""
    work = _prepare(theta, Z, batch, histories, tau, pooling, scoring)
    if counter is not None:
        counter.theta_evals += 1
    omega = np.full(len(batch), 1.0 / len(batch))
    return _backward_weighted(theta, Z, work, tau, scoring, omega, "theta")


def loss_grad_z(theta: ProjectorParams, Z: np.ndarray, batch: Batch, histories,
                tau: float, pooling: str = "mean", scoring: str = "cosine",
                counter: EvalCounter | None = None) -> FlatGrad:
    """Exact gradient of the mean batch loss over the touched rows of Z."""
    work = _prepare(theta, Z, batch, histories, tau, pooling, scoring)
    if counter is not None:
        counter.z_evals += 1
    omega = np.full(len(batch), 1.0 / len(batch))
    return _backward_weighted(theta, Z, work, tau, scoring, omega, "z")


def group_batch_eval(theta: ProjectorParams, Z: np.ndarray, batch: Batch, histories,
                     tau: float, num_groups: int, wrt: str | None,
                     pooling: str = "mean", scoring: str = "cosine",
                     counter: EvalCounter | None = None):
    """Per-group mean losses and, when ``wrt`` is given, per-group gradients.

    Returns (losses, counts, grads) where ``losses[n]`` is NaN and
    ``grads[n]`` is None for groups absent from the batch. The whole
    call costs one pass over the batch regardless of the group count.
    """
    work = _prepare(theta, Z, batch, histories, tau, pooling, scoring)
    counts = np.bincount(batch.pair_group, minlength=num_groups).astype(np.float64)
    losses = np.full(num_groups, np.nan)
    sums = np.zeros(num_groups)
    np.add.at(sums, batch.pair_group, work.pair_loss)
    present = counts > 0
    losses[present] = sums[present] / counts[present]
    if wrt is None:
        return losses, counts, None
    if counter is not None:
        if wrt == "theta":
            counter.theta_evals += 1
        else:
            counter.z_evals += 1
    grads: list[FlatGrad | None] = []
    for n in range(num_groups):
        if not present[n]:
            grads.append(None)
            continue
        active = np.flatnonzero(batch.pair_group == n)
        omega = np.where(batch.pair_group == n, 1.0 / counts[n], 0.0)
        grads.append(_backward_weighted(theta, Z, work, tau, scoring, omega, wrt,
                                        active=active))
    return losses, counts, grads


def save_model(out_dir: str | Path, theta: ProjectorParams, extra: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    info = {
        "kind": theta.kind,
        "d_sem": theta.d_sem,
        "d_rec": theta.d_rec,
        "bias": theta.has_bias,
        "tensors": theta.names(),
        **(extra or {}),
    }
    (out / "model.json").write_text(json.dumps(info, indent=1, sort_keys=True))
    with open(out / "model.bin", "wb") as fh:
        for name in theta.tensors:
            t = np.atleast_2d(theta.tensors[name]).astype("<f4")
            fh.write(_MAGIC)
            fh.write(struct.pack("<II", t.shape[0], t.shape[1]))
            fh.write(t.tobytes(order="C"))


def load_model(in_dir: str | Path) -> ProjectorParams:
    src = Path(in_dir)
    info = json.loads((src / "model.json").read_text())
    tensors: dict[str, np.ndarray] = {}
    with open(src / "model.bin", "rb") as fh:
        for name in info["tensors"]:
            if fh.read(4) != _MAGIC:
                raise ValueError(f"{src}: bad tensor record for {name}")
            rows, cols = struct.unpack("<II", fh.read(8))
            data = np.frombuffer(fh.read(rows * cols * 4), dtype="<f4").astype(np.float64)
            t = data.reshape(rows, cols)
            tensors[name] = t[0] if name.startswith("b") else t
    theta = ProjectorParams(info["kind"], tensors)
    theta.validate()
    return theta
