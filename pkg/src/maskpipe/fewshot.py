"""Few-shot classification head built on class means and regularized covariances.

Each class k with n_k supports gets a mean mu_k and a covariance estimate

    Q_k = lam_k * S_k + (1 - lam_k) * S_all + epsilon * I,   lam_k = n_k / (n_k + 1),

where S_k is the class sample covariance about mu_k and S_all the covariance
of every support about the global mean (both 1/n normalized, so a singleton
class degrades gracefully to the task covariance). Queries are labeled by the
smallest squared Mahalanobis distance (x - mu_k)^T Q_k^{-1} (x - mu_k),
computed through a Cholesky solve, never an explicit inverse. A Euclidean
mode (all Q_k forced to the identity) is kept for A/B comparison.

The surrounding routine has three stages: load a fixed embedder, optionally
refresh embeddings with a user-supplied hook, then run query episodes.
No neural training happens here; deep extractors plug in through the
embedding exchange file or any callable embedder.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    FormatError,
    MissingSupportError,
    SingularCovarianceError,
    ValidationError,
)
from .metrics import ConfusionMatrix

__all__ = [
    "ClassStatistics",
    "EpisodeConfig",
    "EpisodeReport",
    "BaselineEmbedder",
    "class_statistics",
    "mahalanobis_sq",
    "classify",
    "run_episode",
    "sweep_support_sizes",
    "read_embeddings",
    "write_embeddings",
]

EMBED_MAGIC = b"MEMB"

Embedder = Callable[[Any], np.ndarray]


@dataclass(frozen=True, eq=False)
class ClassStatistics:
    """Mean, regularized covariance, and its Cholesky factor for one class."""

    class_id: int
    count: int
    mean: np.ndarray = field(repr=False)
    covariance: np.ndarray = field(repr=False)
    chol: np.ndarray = field(repr=False)  # lower-triangular factor of covariance

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class EpisodeConfig:
    """One episode: supports per class, seed, and covariance regularization."""

    support_size: int | str = "full"
    seed: int = 0
    epsilon: float = 1e-3
    regularizer: str = "blend"  # "blend" or "ridge" (Q_k = S_k + eps I)
    metric: str = "mahalanobis"  # or "euclidean"
    undersample_cap: int | None = None  # cap the support pool before sampling

    def __post_init__(self):
        if isinstance(self.support_size, str):
            if self.support_size != "full":
                raise ConfigurationError(
                    f'support_size must be a positive int or "full", got {self.support_size!r}'
                )
        elif self.support_size < 1:
            raise ConfigurationError(f"support_size must be >= 1, got {self.support_size}")
        if self.epsilon < 0:
            raise ConfigurationError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.regularizer not in ("blend", "ridge"):
            raise ConfigurationError(f"unknown regularizer {self.regularizer!r}")
        if self.metric not in ("mahalanobis", "euclidean"):
            raise ConfigurationError(f"unknown metric {self.metric!r}")


def class_statistics(
    supports: Mapping[int, np.ndarray],
    epsilon: float = 1e-3,
    regularizer: str = "blend",
) -> list[ClassStatistics]:
    """Estimate per-class means and regularized covariances from supports.

    ``supports`` maps class id to an (n_k, d) array. Covariances use 1/n
    normalization; a single support gives S_k = 0 and the blend falls back
    to the task-level covariance.
    """
    if not supports:
        raise MissingSupportError("no support classes given")
    arrays: dict[int, np.ndarray] = {}
    for class_id in sorted(supports):
        a = np.asarray(supports[class_id], dtype=np.float64)
        if a.ndim != 2 or a.shape[0] == 0:
            raise MissingSupportError(f"class {class_id} has no support samples")
        arrays[class_id] = a
    dims = {a.shape[1] for a in arrays.values()}
    if len(dims) != 1:
        raise ConfigurationError(f"support dimensions disagree: {sorted(dims)}")
    d = dims.pop()

    pooled = np.concatenate(list(arrays.values()), axis=0)
    global_mean = pooled.mean(axis=0)
    centered = pooled - global_mean
    sigma_all = centered.T @ centered / pooled.shape[0]

    stats = []
    eye = np.eye(d)
    for class_id, a in arrays.items():
        n_k = a.shape[0]
        mean = a.mean(axis=0)
        diff = a - mean
        sigma_k = diff.T @ diff / n_k
        if regularizer == "blend":
            lam = n_k / (n_k + 1.0)
            q = lam * sigma_k + (1.0 - lam) * sigma_all + epsilon * eye
        elif regularizer == "ridge":
            q = sigma_k + epsilon * eye
        else:
            raise ConfigurationError(f"unknown regularizer {regularizer!r}")
        q = 0.5 * (q + q.T)  # exact symmetry against accumulation noise
        try:
            chol = np.linalg.cholesky(q)
        except np.linalg.LinAlgError:
            chol = None
        # rank deficiency can slip past Cholesky as a ~0 pivot
        tiny = d * np.finfo(np.float64).eps * max(1.0, float(np.max(np.diag(q))))
        if chol is None or np.min(np.diag(chol)) ** 2 <= tiny:
            raise SingularCovarianceError(
                f"covariance for class {class_id} is not positive definite; "
                f"increase epsilon (currently {epsilon})"
            )
        stats.append(ClassStatistics(class_id, n_k, mean, q, chol))
    return stats


def mahalanobis_sq(x: np.ndarray, stats: ClassStatistics) -> float:
    """Squared Mahalanobis distance of one embedding to one class."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (stats.dim,):
        raise ValidationError(f"embedding shape {x.shape} vs class dim {stats.dim}")
    y = np.linalg.solve(stats.chol, x - stats.mean)
    return float(y @ y)


@dataclass(frozen=True, eq=False)
class ClassificationResult:
    class_ids: np.ndarray  # (n,) predicted labels
    scores: np.ndarray = field(repr=False)  # (n, K) softmax over -distance^2
    classes: tuple[int, ...] = ()  # column order of scores


def classify(
    queries: np.ndarray,
    stats: Sequence[ClassStatistics],
    metric: str = "mahalanobis",
) -> ClassificationResult:
    """Label queries by nearest class under the chosen metric.

    Scores are a softmax over negative squared distances; ties in the argmin
    resolve to the lowest class id.
    """
    if len(stats) < 2:
        raise ValidationError("classification needs at least 2 classes")
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    d = stats[0].dim
    if q.shape[1] != d or any(s.dim != d for s in stats):
        raise ValidationError(f"query dimension {q.shape[1]} vs class dim {d}")
    ordered = sorted(stats, key=lambda s: s.class_id)
    dist_sq = np.empty((q.shape[0], len(ordered)))
    for j, s in enumerate(ordered):
        diff = q - s.mean
        if metric == "mahalanobis":
            z = np.linalg.solve(s.chol, diff.T)
            dist_sq[:, j] = np.sum(z * z, axis=0)
        elif metric == "euclidean":
            dist_sq[:, j] = np.sum(diff * diff, axis=1)
        else:
            raise ValidationError(f"unknown metric {metric!r}")
    logits = -dist_sq
    logits -= logits.max(axis=1, keepdims=True)
    scores = np.exp(logits)
    scores /= scores.sum(axis=1, keepdims=True)
    classes = tuple(s.class_id for s in ordered)
    pred = np.array([classes[j] for j in np.argmin(dist_sq, axis=1)])
    return ClassificationResult(pred, scores, classes)


@dataclass(frozen=True)
class EpisodeReport:
    """Accuracy summary for one support-sampling + query round."""

    config: EpisodeConfig
    accuracy: float
    per_class_accuracy: dict[int, float]
    query_counts: dict[int, int]
    support_counts: dict[int, int]
    confusion: ConfusionMatrix


def _class_name(class_id: int, label_names: Sequence[str] | None) -> str:
    if label_names and 0 <= class_id < len(label_names):
        return f'"{label_names[class_id]}"'
    return str(class_id)


def _sample_supports(
    pool: Mapping[int, Sequence],
    cfg: EpisodeConfig,
    embed: Embedder,
    label_names: Sequence[str] | None,
) -> tuple[dict[int, np.ndarray], dict[int, int]]:
    rng = random.Random(cfg.seed)
    supports: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for class_id in sorted(pool):
        items = list(pool[class_id])
        if cfg.undersample_cap is not None and len(items) > cfg.undersample_cap:
            items = rng.sample(items, cfg.undersample_cap)
        if cfg.support_size == "full":
            chosen = items
        else:
            if cfg.support_size > len(items):
                raise MissingSupportError(
                    f"support_size {cfg.support_size} exceeds the "
                    f"{len(items)} available samples of class "
                    f"{_class_name(class_id, label_names)}"
                )
            chosen = rng.sample(items, cfg.support_size)
        supports[class_id] = np.stack([np.asarray(embed(it), dtype=np.float64) for it in chosen])
        counts[class_id] = len(chosen)
    return supports, counts


def run_episode(
    support_pool: Mapping[int, Sequence],
    queries: Sequence[tuple[Any, int]],
    embedder: Embedder,
    cfg: EpisodeConfig,
    label_names: Sequence[str] | None = None,
) -> EpisodeReport:
    """Sample supports, fit class statistics, classify every query."""
    supports, support_counts = _sample_supports(support_pool, cfg, embedder, label_names)
    stats = class_statistics(supports, cfg.epsilon, cfg.regularizer)
    if not queries:
        raise ValidationError("episode has no queries")
    query_vecs = np.stack([np.asarray(embedder(item), dtype=np.float64) for item, _ in queries])
    truth = [label for _, label in queries]
    result = classify(query_vecs, stats, cfg.metric)
    num_classes = max(max(truth), max(s.class_id for s in stats)) + 1
    confusion = ConfusionMatrix.from_pairs(truth, result.class_ids.tolist(), num_classes, label_names)
    per_class = {}
    counts = {}
    for class_id in sorted(set(truth)):
        mask = [t == class_id for t in truth]
        n = sum(mask)
        hit = sum(1 for m, p in zip(mask, result.class_ids) if m and p == class_id)
        per_class[class_id] = hit / n
        counts[class_id] = n
    accuracy = float(np.mean(result.class_ids == np.asarray(truth)))
    return EpisodeReport(cfg, accuracy, per_class, counts, support_counts, confusion)


def sweep_support_sizes(
    support_pool: Mapping[int, Sequence],
    queries: Sequence[tuple[Any, int]],
    embedder: Embedder,
    sizes: Sequence[int | str],
    cfg: EpisodeConfig = EpisodeConfig(),
    label_names: Sequence[str] | None = None,
) -> list[tuple[str, EpisodeReport]]:
    """One episode per support size; rows render as (setting, accuracy).

    Accuracy over support size is recorded as observed, never assumed
    monotone.
    """
    if not sizes:
        raise ValidationError("no support sizes given")
    rows = []
    for size in sizes:
        episode_cfg = replace(cfg, support_size=size)
        report = run_episode(support_pool, queries, embedder, episode_cfg, label_names)
        rows.append((str(size), report))
    return rows


class BaselineEmbedder:
    """Fixed, dependency-free image embedder: color histograms plus
    gradient statistics of the 8x8 mean-pooled grayscale (d = 112).

    Deterministic by construction: identical pixels produce bit-identical
    embeddings.
    """

    BINS = 16
    POOL = 8

    @property
    def dim(self) -> int:
        return 3 * self.BINS + self.POOL * self.POOL

    def __call__(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValidationError(f"expected an (H, W, 3) image, got shape {img.shape}")
        img = img.astype(np.float64)
        parts = [
            np.histogram(img[..., c], bins=self.BINS, range=(0.0, 256.0))[0] / img[..., c].size
            for c in range(3)
        ]
        gray = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
        pooled = self._mean_pool(gray / 255.0)
        gy, gx = np.gradient(pooled)
        parts.append(np.sqrt(gx * gx + gy * gy).ravel())
        vec = np.concatenate(parts)
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec

    def _mean_pool(self, gray: np.ndarray) -> np.ndarray:
        h, w = gray.shape
        if h < self.POOL:
            gray = np.repeat(gray, -(-self.POOL // h), axis=0)
        if w < self.POOL:
            gray = np.repeat(gray, -(-self.POOL // w), axis=1)
        rows = np.array_split(gray, self.POOL, axis=0)
        return np.array(
            [[block.mean() for block in np.array_split(r, self.POOL, axis=1)] for r in rows]
        )


def write_embeddings(path, class_ids: Sequence[int], embeddings: np.ndarray) -> None:
    """Write the embedding exchange file: MEMB, u32 count, u32 d, then
    per record a u32 class id and d little-endian f64 values."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] != len(class_ids):
        raise ValidationError(
            f"embeddings shape {emb.shape} does not match {len(class_ids)} class ids"
        )
    with open(path, "wb") as fh:
        fh.write(EMBED_MAGIC)
        fh.write(struct.pack("<II", emb.shape[0], emb.shape[1]))
        for class_id, row in zip(class_ids, emb):
            fh.write(struct.pack("<I", int(class_id)))
            fh.write(row.astype("<f8").tobytes())


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray]:
    """Read an embedding exchange file into (class_ids, embeddings)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != EMBED_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0, expected {EMBED_MAGIC!r}")
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header at byte {len(data)}")
    count, d = struct.unpack("<II", data[4:12])
    record = 4 + 8 * d
    expected = 12 + count * record
    if len(data) < expected:
        raise FormatError(f"{path}: truncated at byte {len(data)}, expected {expected}")
    class_ids = np.empty(count, dtype=np.int64)
    embeddings = np.empty((count, d))
    for i in range(count):
        off = 12 + i * record
        (class_ids[i],) = struct.unpack("<I", data[off : off + 4])
        embeddings[i] = np.frombuffer(data[off + 4 : off + record], dtype="<f8")
    return class_ids, embeddings
