"""Synthetic interaction benchmark with controllable group imbalance.

Items carry a latent vector: their genre's topic center plus an
item-specific signal component. Users hold concentrated genre
preferences with a personal quirk, pick items by affinity to the latent
vectors (tempered by a mild popularity skew), and rate them. The
published embedding of an item is its latent vector plus extra Gaussian
noise whose scale depends on the item's genre group: groups with more
noise ship lower-quality representations of the very signal the
interactions follow, which is the imbalance the training framework is
meant to repair.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import Dataset


@dataclass
class SynthDataConfig:
    num_users: int = 1000
    num_items: int = 600
    num_genres: int = 4
    genre_weights: tuple[float, ...] | None = None  # item share per genre
    d_sem: int = 16
    signal_scale: float = 0.35
    affinity_sharpness: float = 8.0
    user_quirk: float = 0.25
    min_interactions: int = 28
    max_interactions: int = 56
    valid_fraction: float = 0.85
    popularity_skew: float = 0.8
    popularity_strength: float = 1.0
    genre_concentration: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        if self.num_users < 1 or self.num_items < self.num_genres:
            raise ValueError("need at least one user and one item per genre")
        if not (0 < self.valid_fraction <= 1):
            raise ValueError("valid_fraction must lie in (0, 1]")
        if self.min_interactions < 1 or self.max_interactions < self.min_interactions:
            raise ValueError("interaction bounds must satisfy 1 <= min <= max")
        if self.d_sem < 2 or self.signal_scale < 0:
            raise ValueError("d_sem must be >= 2 and signal_scale nonnegative")
        if self.genre_weights is not None:
            w = np.asarray(self.genre_weights, dtype=float)
            if len(w) != self.num_genres or (w <= 0).any():
                raise ValueError("genre_weights needs one positive entry per genre")


@dataclass
class SynthData:
    interactions: list[tuple[str, str, int, int]]  # user, item, rating, timestamp
    genre_of_key: dict[str, str]
    genre_index: dict[str, int]    # item key -> genre number
    centers: np.ndarray            # (num_genres, d_sem) unit topic centers
    latent: np.ndarray = field(repr=False, default=None)  # (num_items, d_sem) x_j


def _item_key(j: int) -> str:
    return f"i{j:05d}"


def _user_key(u: int) -> str:
    return f"u{u:05d}"


def _unit_rows(M: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(M, axis=1, keepdims=True)
    return M / np.where(norms == 0.0, 1.0, norms)


def generate(cfg: SynthDataConfig) -> SynthData:
    """Draw genre-typed items with latent signal and affinity-driven ratings."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    if cfg.genre_weights is None:
        genre_of = rng.integers(0, cfg.num_genres, size=cfg.num_items)
    else:
        probs = np.asarray(cfg.genre_weights, dtype=float)
        genre_of = rng.choice(cfg.num_genres, size=cfg.num_items, p=probs / probs.sum())
    genre_of[: cfg.num_genres] = np.arange(cfg.num_genres)  # no empty genre

    centers = _unit_rows(rng.standard_normal((cfg.num_genres, cfg.d_sem)))
    delta = rng.standard_normal((cfg.num_items, cfg.d_sem))
    latent = centers[genre_of] + cfg.signal_scale * delta
    latent_hat = _unit_rows(latent)

    # mild power-law exposure independent of genre
    ranks = rng.permutation(cfg.num_items)
    log_pop = -cfg.popularity_skew * np.log(ranks + 1.0)

    alpha = np.full(cfg.num_genres, cfg.genre_concentration)
    interactions: list[tuple[str, str, int, int]] = []
    for u in range(cfg.num_users):
        prefs = rng.dirichlet(alpha)
        w = prefs @ centers + cfg.user_quirk * rng.standard_normal(cfg.d_sem)
        w /= max(np.linalg.norm(w), 1e-12)
        logits = cfg.affinity_sharpness * (latent_hat @ w) \
            + cfg.popularity_strength * log_pop
        n_u = int(rng.integers(cfg.min_interactions, cfg.max_interactions + 1))
        n_u = min(n_u, cfg.num_items)
        # Gumbel top-k gives a without-replacement draw by affinity
        keys = logits + rng.gumbel(size=cfg.num_items)
        chosen = np.argpartition(-keys, n_u - 1)[:n_u]
        chosen = chosen[np.argsort(-keys[chosen])]
        ratings = np.where(rng.random(n_u) < cfg.valid_fraction,
                           rng.integers(3, 6, size=n_u),
                           rng.integers(1, 3, size=n_u))
        for k, (j, r) in enumerate(zip(chosen, ratings)):
            interactions.append((_user_key(u), _item_key(int(j)), int(r), u * 1000 + k))

    genre_of_key = {_item_key(j): f"g{int(g)}" for j, g in enumerate(genre_of)}
    genre_index = {_item_key(j): int(g) for j, g in enumerate(genre_of)}
    return SynthData(interactions=interactions, genre_of_key=genre_of_key,
                     genre_index=genre_index, centers=centers, latent=latent)


def benchmark_embeddings(data: SynthData, ds: Dataset, noise_by_genre,
                         seed: int) -> np.ndarray:
    """Published rows: latent vector plus genre-scaled noise, L2-normalized.

    Equivalently each row is its topic center plus Gaussian noise whose
    per-genre standard deviation is sqrt(signal^2 + noise^2); the signal
    part is shared with the interaction generator, the noise part drowns
    it out for the disadvantaged genres.
    """
    rng = np.random.default_rng(seed)
    noise_by_genre = np.asarray(noise_by_genre, dtype=float)
    key_of = {idx: key for key, idx in ds.item_map.items()}
    raw_idx = np.array([int(key_of[i][1:]) for i in range(ds.num_items)])
    genre = np.array([data.genre_index[key_of[i]] for i in range(ds.num_items)])
    noise = rng.standard_normal((ds.num_items, data.latent.shape[1]))
    Z = data.latent[raw_idx] + noise * noise_by_genre[genre][:, None]
    return _unit_rows(Z)


def write_raw_files(data: SynthData, out_dir: str | Path) -> tuple[Path, Path]:
    """Write interactions.csv and item_meta.csv under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inter_path = out / "interactions.csv"
    meta_path = out / "item_meta.csv"
    with open(inter_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user", "item", "rating", "timestamp"])
        for row in data.interactions:
            writer.writerow(row)
    with open(meta_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["item", "label"])
        for key in sorted(data.genre_of_key):
            writer.writerow([key, data.genre_of_key[key]])
    return inter_path, meta_path
