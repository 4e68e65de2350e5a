"""Semantic item representations: file I/O, synthetic generation, pooling.

The matrix Z holds one row per item. Rows are L2-normalized at load or
synthesis time but never re-normalized during training; the cosine
scoring downstream absorbs any scale drift.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import Dataset, GroupAssignment

_MAGIC = b"BIFE"


@dataclass
class SemanticMatrix:
    Z: np.ndarray
    normalized: bool = False

    @property
    def num_items(self) -> int:
        return self.Z.shape[0]

    @property
    def d_sem(self) -> int:
        return self.Z.shape[1]

    def validate(self) -> None:
        if self.Z.ndim != 2 or self.Z.shape[1] == 0:
            raise ValueError("embedding matrix must be 2-D with at least one column")
        if not np.isfinite(self.Z).all():
            raise ValueError("embedding matrix contains non-finite values")
        if self.normalized:
            norms = np.linalg.norm(self.Z, axis=1)
            if not np.allclose(norms, 1.0, atol=1e-6):
                raise ValueError("normalized flag set but rows are not unit length")

    def copy(self) -> "SemanticMatrix":
        return SemanticMatrix(self.Z.copy(), self.normalized)


@dataclass
class SynthEmbedConfig:
    d_sem: int = 16
    num_latent_topics: int = 4
    group_noise_scale: tuple[float, ...] = (0.1, 0.1)
    seed: int = 0
    # optional externally supplied item -> topic assignment (dense item index order);
    # when absent, topics are sampled uniformly from the seeded generator
    topic_of: np.ndarray | None = field(default=None, repr=False)

    def validate(self) -> None:
        if self.d_sem < 1 or self.num_latent_topics < 1:
            raise ValueError("d_sem and num_latent_topics must be >= 1")
        scales = np.asarray(self.group_noise_scale, dtype=float)
        if not np.isfinite(scales).all() or (scales < 0).any():
            raise ValueError("group noise scales must be finite and nonnegative")


def _l2_normalize_rows(Z: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(Z, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return Z / safe


def save_embeddings(path: str | Path, Z: np.ndarray) -> None:
    """Write the binary layout: magic, u32 rows, u32 cols, little-endian f32."""
    Z = np.asarray(Z, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", Z.shape[0], Z.shape[1]))
        fh.write(Z.astype("<f4").tobytes(order="C"))


def load_embeddings(path: str | Path, expected_items: int, normalize: bool = False) -> SemanticMatrix:
    """Load a text (whitespace rows) or binary embedding file.

    Raises on row-count mismatch, non-finite values, or zero columns.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"embedding file not found: {path}")
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head == _MAGIC:
            rows, cols = struct.unpack("<II", fh.read(8))
            if cols == 0:
                raise ValueError(f"{path}: embedding dimension is 0")
            data = np.frombuffer(fh.read(rows * cols * 4), dtype="<f4")
            if data.size != rows * cols:
                raise ValueError(f"{path}: truncated binary embedding file")
            Z = data.reshape(rows, cols).astype(np.float64)
        else:
            Z = np.loadtxt(path, dtype=np.float64, ndmin=2)
            if Z.size == 0 or Z.shape[1] == 0:
                raise ValueError(f"{path}: embedding dimension is 0")
    if Z.shape[0] != expected_items:
        raise ValueError(f"{path}: row-count mismatch (file has {Z.shape[0]}, expected {expected_items})")
    if not np.isfinite(Z).all():
        raise ValueError(f"{path}: non-finite embedding values")
    if normalize:
        Z = _l2_normalize_rows(Z)
    sm = SemanticMatrix(Z, normalized=normalize)
    sm.validate()
    return sm


def topic_model(cfg: SynthEmbedConfig, num_items: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded topic centers plus per-item topic assignment.

    Centers are unit vectors; the assignment honours ``cfg.topic_of``
    when provided, otherwise items draw topics uniformly.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    centers = rng.standard_normal((cfg.num_latent_topics, cfg.d_sem))
    centers = _l2_normalize_rows(centers)
    if cfg.topic_of is not None:
        topic_of = np.asarray(cfg.topic_of, dtype=np.int64)
        if topic_of.shape != (num_items,):
            raise ValueError("topic_of must have one entry per item")
        if topic_of.min() < 0 or topic_of.max() >= cfg.num_latent_topics:
            raise ValueError("topic_of entries out of range")
    else:
        topic_of = rng.integers(cfg.num_latent_topics, size=num_items)
    return centers, topic_of


def synth_embeddings(ds: Dataset, groups: GroupAssignment, cfg: SynthEmbedConfig) -> SemanticMatrix:
    """Generate a stand-in semantic matrix with group-dependent noise.

    Each item's row is its topic center plus isotropic Gaussian noise
    whose standard deviation depends on the item's group; rows are then
    L2-normalized. Larger noise means lower representation quality, so
    unevenly scaled groups start out with unequal signal.
    """
    cfg.validate()
    scales = np.asarray(cfg.group_noise_scale, dtype=float)
    if len(scales) < groups.num_groups:
        raise ValueError(f"need a noise scale for each of {groups.num_groups} groups")
    centers, topic_of = topic_model(cfg, ds.num_items)
    rng = np.random.default_rng(cfg.seed + 1)
    noise = rng.standard_normal((ds.num_items, cfg.d_sem))
    Z = centers[topic_of] + noise * scales[groups.group_of][:, None]
    Z = _l2_normalize_rows(Z)
    sm = SemanticMatrix(Z, normalized=True)
    sm.validate()
    return sm


def user_representation(Z: np.ndarray, history) -> np.ndarray:
    """Mean of the history rows of the current Z.

    Rows are summed in index order so the result is bitwise independent
    of the order the history is supplied in.
    """
    history = np.sort(np.asarray(history, dtype=np.int64))
    if history.size == 0:
        raise ValueError("cannot pool an empty history")
    return Z[history].mean(axis=0)


def user_matrix(Z: np.ndarray, histories, pooling: str = "mean") -> np.ndarray:
    """Stack pooled user vectors for a list of histories."""
    out = np.empty((len(histories), Z.shape[1]))
    for row, hist in enumerate(histories):
        hist = np.asarray(hist, dtype=np.int64)
        if hist.size == 0:
            raise ValueError(f"user {row} has an empty history")
        vec = Z[hist].sum(axis=0)
        if pooling == "mean":
            vec = vec / hist.size
        elif pooling != "sum":
            raise ValueError(f"unknown pooling {pooling!r}")
        out[row] = vec
    return out


def warn_if_degenerate(groups: GroupAssignment) -> None:
    if groups.num_groups < 2:
        warnings.warn("fewer than two groups; fairness metrics are degenerate")
