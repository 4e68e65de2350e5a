"""All-ranking evaluation: accuracy metrics, group utilities, fairness.

Every item is scored for every user (no sampled candidate sets), the
user's known items are masked per policy, and the top-K list is ranked
by score with ties broken by ascending item index. Group utilities
restrict the relevant set of each user to one item group; users with no
relevant items in a group are excluded from that group's average unless
strict averaging is requested, in which case they contribute zeros.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import Dataset, GroupAssignment
from .embed import user_matrix
from .recmodel import ProjectorParams, _forward


@dataclass
class RankingResult:
    topk: list[np.ndarray]  # per-user item indices, best first
    K: int


@dataclass
class UtilityVector:
    values: np.ndarray
    defined: np.ndarray
    kind: str = "recall"
    K: int = 20

    def defined_values(self) -> np.ndarray:
        return self.values[self.defined]


def topk_from_scores(scores: np.ndarray, masked: np.ndarray, K: int) -> np.ndarray:
    """Indices of the K best scores, ties to the lower index, masked removed."""
    s = scores.astype(np.float64, copy=True)
    if masked.size:
        s[masked] = -np.inf
    order = np.lexsort((np.arange(len(s)), -s))
    keep = order[:K]
    return keep[np.isfinite(s[keep])].astype(np.int64)


def rank_topk(theta: ProjectorParams, Z: np.ndarray, ds: Dataset, K: int,
              mask_policy: str = "train+val", tau: float = 1.0,
              pooling: str = "mean", scoring: str = "cosine",
              chunk: int = 512) -> RankingResult:
    """Top-K items per user over the full catalog, masked per policy."""
    if mask_policy not in ("none", "train", "train+val"):
        raise ValueError(f"unknown mask policy {mask_policy!r}")
    e_items, _ = _forward(theta, Z)
    if scoring == "cosine":
        norms = np.linalg.norm(e_items, axis=1, keepdims=True)
        e_items = e_items / np.where(norms == 0.0, 1.0, norms)
    topk: list[np.ndarray] = []
    for start in range(0, ds.num_users, chunk):
        users = range(start, min(start + chunk, ds.num_users))
        zu = user_matrix(Z, [ds.train[u] for u in users], pooling=pooling)
        eu, _ = _forward(theta, zu)
        if scoring == "cosine":
            norms = np.linalg.norm(eu, axis=1, keepdims=True)
            eu = eu / np.where(norms == 0.0, 1.0, norms)
        scores = (eu @ e_items.T) / tau
        for row, u in enumerate(users):
            masked = ds.train[u] if mask_policy != "none" else np.empty(0, dtype=np.int64)
            if mask_policy == "train+val":
                masked = np.concatenate([masked, ds.val[u]])
            topk.append(topk_from_scores(scores[row], masked, K))
    return RankingResult(topk=topk, K=K)


def recall_at_k(topk: np.ndarray, relevant) -> float:
    relevant = set(int(i) for i in relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    hits = sum(1 for i in topk if int(i) in relevant)
    return hits / len(relevant)


def ndcg_at_k(topk: np.ndarray, relevant, K: int | None = None) -> float:
    relevant = set(int(i) for i in relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    K = len(topk) if K is None else K
    dcg = sum(1.0 / math.log2(r + 2) for r, i in enumerate(topk) if int(i) in relevant)
    ideal = sum(1.0 / math.log2(r + 2) for r in range(min(K, len(relevant))))
    return dcg / ideal if ideal > 0 else 0.0


def hr_at_k(topk: np.ndarray, relevant) -> float:
    relevant = set(int(i) for i in relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    return 1.0 if any(int(i) in relevant for i in topk) else 0.0


_METRICS = {"recall": recall_at_k, "ndcg": ndcg_at_k, "hr": hr_at_k}


def _metric_fn(kind: str):
    if kind not in _METRICS:
        raise ValueError(f"unknown metric {kind!r}")
    return _METRICS[kind]


def overall_metric(result: RankingResult, relevant_lists, kind: str = "recall") -> float:
    """Dataset-level mean over users with a nonempty relevant set."""
    fn = _metric_fn(kind)
    vals = []
    for u, rel in enumerate(relevant_lists):
        if len(rel) == 0:
            continue
        if kind == "ndcg":
            vals.append(fn(result.topk[u], rel, K=result.K))
        else:
            vals.append(fn(result.topk[u], rel))
    if not vals:
        raise ValueError("no user has relevant items to evaluate")
    return float(np.mean(vals))


def group_utility(result: RankingResult, ds: Dataset, groups: GroupAssignment, n: int,
                  metric: str = "recall", K: int | None = None, split: str = "test",
                  strict: bool = False) -> float:
    """Average group-restricted utility over users.

    The relevant set of each user is intersected with group ``n``; only
    items of that group count as hits. Users whose restricted relevant
    set is empty are skipped unless ``strict`` is set, which scores them
    zero instead. Returns NaN (with a warning) if no user is evaluable.
    """
    fn = _metric_fn(metric)
    K = result.K if K is None else K
    members = set(groups.members(n).tolist())
    relevant_lists = getattr(ds, split)
    vals = []
    for u in range(ds.num_users):
        rel_n = [i for i in relevant_lists[u] if int(i) in members]
        if not rel_n:
            if strict and len(relevant_lists[u]) > 0:
                vals.append(0.0)
            continue
        if metric == "ndcg":
            vals.append(fn(result.topk[u], rel_n, K=K))
        else:
            vals.append(fn(result.topk[u], rel_n))
    if not vals:
        warnings.warn(f"group {n} has no evaluable users; utility undefined")
        return float("nan")
    return float(np.mean(vals))


def group_utilities(result: RankingResult, ds: Dataset, groups: GroupAssignment,
                    metric: str = "recall", split: str = "test",
                    strict: bool = False) -> UtilityVector:
    vals = np.array([
        group_utility(result, ds, groups, n, metric=metric, split=split, strict=strict)
        for n in range(groups.num_groups)
    ])
    return UtilityVector(values=vals, defined=np.isfinite(vals), kind=metric, K=result.K)


def _as_values(utilities) -> np.ndarray:
    if isinstance(utilities, UtilityVector):
        return utilities.defined_values()
    vals = np.asarray(utilities, dtype=np.float64)
    return vals[np.isfinite(vals)]


def cv(utilities) -> float:
    """Population standard deviation over mean of the defined utilities."""
    vals = _as_values(utilities)
    if len(vals) < 2:
        raise ValueError("coefficient of variation needs at least two defined utilities")
    mean = vals.mean()
    if mean == 0.0:
        raise ValueError("coefficient of variation undefined: mean utility is zero")
    return float(vals.std() / mean)


def min_bottom(utilities, fraction: float = 0.25) -> float:
    """Mean of the bottom ceil(fraction * N) defined utilities."""
    vals = np.sort(_as_values(utilities))
    if len(vals) == 0:
        raise ValueError("no defined utilities")
    k = math.ceil(fraction * len(vals))
    return float(vals[:k].mean())


def epsilon_if(utilities, eps: float) -> bool:
    """True iff all pairwise utility gaps are bounded by eps."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    vals = _as_values(utilities)
    if len(vals) < 2:
        raise ValueError("need at least two defined utilities")
    return bool(vals.max() - vals.min() <= eps)


@dataclass
class ReportOptions:
    K: int = 20
    metric: str = "recall"
    epsilons: tuple[float, ...] = (0.05, 0.1)
    split: str = "test"
    strict: bool = False
    tau: float = 1.0
    pooling: str = "mean"
    scoring: str = "cosine"
    measure_runtime: bool = False
    config_echo: dict = field(default_factory=dict)


def build_report(theta: ProjectorParams, Z: np.ndarray, ds: Dataset,
                 groupings: dict[str, GroupAssignment], opts: ReportOptions) -> dict:
    """Full evaluation record: overall accuracy plus per-grouping fairness."""
    import time
    t0 = time.perf_counter()
    mask = "train+val" if opts.split == "test" else "train"
    result = rank_topk(theta, Z, ds, opts.K, mask_policy=mask, tau=opts.tau,
                       pooling=opts.pooling, scoring=opts.scoring)
    relevant = getattr(ds, opts.split)
    overall = {kind: overall_metric(result, relevant, kind) for kind in ("recall", "ndcg", "hr")}
    group_block: dict[str, dict] = {}
    for name, ga in groupings.items():
        util = group_utilities(result, ds, ga, metric=opts.metric, split=opts.split,
                               strict=opts.strict)
        entry: dict = {
            "labels": list(ga.labels),
            "utilities": [float(v) if d else None for v, d in zip(util.values, util.defined)],
            "metric": opts.metric,
        }
        try:
            entry["cv"] = cv(util)
        except ValueError as exc:
            entry["cv"] = None
            entry["cv_note"] = str(exc)
        try:
            entry["min_bottom"] = min_bottom(util)
        except ValueError as exc:
            entry["min_bottom"] = None
            entry["min_bottom_note"] = str(exc)
        try:
            entry["epsilon_if"] = {str(e): epsilon_if(util, e) for e in opts.epsilons}
        except ValueError:
            entry["epsilon_if"] = {str(e): None for e in opts.epsilons}
        group_block[name] = entry
    report = {
        "config": opts.config_echo,
        "split": opts.split,
        "k": opts.K,
        "overall": overall,
        "groupings": group_block,
        # wall time is nondeterministic, so it is opt-in; the key stays
        # in the schema either way
        "runtime_seconds": (time.perf_counter() - t0) if opts.measure_runtime else None,
    }
    return report


def write_report(report: dict, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["grouping", "group_index", "label", "utility", "defined"])
        for name, entry in report["groupings"].items():
            for idx, (label, util) in enumerate(zip(entry["labels"], entry["utilities"])):
                writer.writerow([name, idx, label,
                                 "" if util is None else f"{util:.10g}",
                                 util is not None])
