"""K-means label maps with gap-statistic model selection.

Both images' pixels are clustered together against one shared codebook, so a
class index means the same structure in the reference and floating maps.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from .errors import DepthMismatch, EmptyInput, KTooLarge
from .features import FeatureStack
from .imaging import Image

_CHUNK_ELEMS = 4_000_000
_LOG_FLOOR = 1e-300


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Hard class indices, array shape ``(h, w)``, values in ``[0, k)``."""

    labels: np.ndarray
    k: int

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.int64)
        if labels.ndim != 2:
            raise ValueError(f"label map must be 2D, got {labels.shape}")
        if self.k < 1 or labels.min() < 0 or labels.max() >= self.k:
            raise ValueError(f"labels must lie in [0, {self.k})")
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def degenerate(self) -> bool:
        """True when some class in ``[0, k)`` has no pixels."""
        return np.unique(self.labels).size < self.k

    def to_image(self) -> Image:
        return Image(self.labels / max(self.k - 1, 1))


@dataclass(frozen=True, eq=False)
class SoftLabelMap:
    """Per-pixel class probabilities, array shape ``(h, w, k)``."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        if probs.ndim != 3:
            raise ValueError(f"soft label map must be (h, w, k), got {probs.shape}")
        if probs.min() < -1e-12 or probs.max() > 1 + 1e-12:
            raise ValueError("probabilities must lie in [0, 1]")
        if not np.allclose(probs.sum(axis=-1), 1.0, rtol=0, atol=1e-6):
            raise ValueError("per-pixel probabilities must sum to 1")
        probs.flags.writeable = False
        object.__setattr__(self, "probs", probs)

    @property
    def k(self) -> int:
        return self.probs.shape[2]

    @property
    def width(self) -> int:
        return self.probs.shape[1]

    @property
    def height(self) -> int:
        return self.probs.shape[0]

    def hard(self) -> LabelMap:
        return LabelMap(np.argmax(self.probs, axis=-1), self.k)

    @classmethod
    def one_hot(cls, labels: LabelMap) -> "SoftLabelMap":
        return cls(np.eye(labels.k)[labels.labels])


class KMeansResult(NamedTuple):
    assignments: np.ndarray
    centroids: np.ndarray
    wk: float
    iterations: int


class GapRecord(NamedTuple):
    k: int
    wk: float
    gap: float
    sk: float


@dataclass(frozen=True)
class GapResult:
    records: tuple[GapRecord, ...]
    chosen_k: int
    no_elbow: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("k,Wk,gap,sk\n")
        for r in self.records:
            buf.write(f"{r.k},{r.wk!r},{r.gap!r},{r.sk!r}\n")
        return buf.getvalue()


@dataclass(frozen=True)
class ClusterConfig:
    k_min: int = 2
    k_max: int = 16
    B: int = 20
    subsample: int = 20_000
    gap_subsample: int = 2_000
    seed: int = 0
    temperature_scale: float = 1.0


# --------------------------------------------------------------------- k-means


def squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Exact ``(n, k)`` squared Euclidean distances, computed in chunks."""
    n, d = points.shape
    k = centroids.shape[0]
    out = np.empty((n, k))
    step = max(1, _CHUNK_ELEMS // max(1, k * d))
    for start in range(0, n, step):
        diff = points[start:start + step, None, :] - centroids[None, :, :]
        out[start:start + step] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def nearest_centroid(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest centroid (lowest index wins ties) and the full distance table."""
    d2 = squared_distances(points, centroids)
    return np.argmin(d2, axis=1), d2


def _fast_sq_distances(points, sq_norms, centroids) -> np.ndarray:
    """Squared distances via the Gram expansion; used inside Lloyd iterations."""
    d2 = sq_norms[:, None] - 2.0 * points @ centroids.T + np.einsum("ij,ij->i", centroids, centroids)[None, :]
    return np.maximum(d2, 0.0)


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    idx = [int(rng.integers(n))]
    closest = squared_distances(points, points[idx]).ravel()
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            nxt = int(rng.integers(n))
        else:
            nxt = int(rng.choice(n, p=closest / total))
        idx.append(nxt)
        closest = np.minimum(closest, squared_distances(points, points[nxt:nxt + 1]).ravel())
    return points[idx].copy()


def _dispersion(points, assign, centroids) -> float:
    diff = points - centroids[assign]
    return float(np.einsum("ij,ij->", diff, diff))


def kmeans(points, k: int, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    """Lloyd's algorithm from a seeded k-means++ start.

    Stops at an assignment fixpoint or after ``max_iter`` updates. An empty
    cluster is re-seeded at the point farthest from its current centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    n = points.shape[0]
    if n == 0:
        raise EmptyInput("kmeans needs at least one point")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise KTooLarge(f"k={k} exceeds point count {n}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(points, k, rng)
    # centring first keeps the Gram expansion well conditioned
    shift = points.mean(axis=0)
    points = points - shift
    centroids -= shift
    sq_norms = np.einsum("ij,ij->i", points, points)
    assign = np.argmin(_fast_sq_distances(points, sq_norms, centroids), axis=1)
    prev_wk = math.inf
    wk = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        counts = np.bincount(assign, minlength=k)
        for j in np.flatnonzero(counts == 0):
            own = np.einsum("ij,ij->i", points - centroids[assign], points - centroids[assign])
            far = int(np.argmax(own))
            centroids[j] = points[far]
            assign[far] = j
        counts = np.bincount(assign, minlength=k)
        sums = np.stack([np.bincount(assign, weights=points[:, c], minlength=k)
                         for c in range(points.shape[1])], axis=1)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        wk = _dispersion(points, assign, centroids)
        assert wk <= prev_wk * (1 + 1e-12) + 1e-12, "k-means dispersion increased"
        prev_wk = wk
        new_assign = np.argmin(_fast_sq_distances(points, sq_norms, centroids), axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return KMeansResult(assign, centroids + shift, wk, it)


def k_schedule(n_pixels: int, k_min: int = 2) -> Iterator[int]:
    """Decaying cluster counts: ``floor(3N/4)``, then ``floor(0.9 k)`` down to ``k_min``."""
    k = (3 * n_pixels) // 4
    last = None
    while k >= k_min:
        if k != last:
            yield k
        last = k
        k = math.floor(0.9 * k)


def candidate_ks(n_pixels: int, k_min: int = 2, k_max: int = 16) -> list[int]:
    """Schedule values clipped to ``[k_min, k_max]``, ascending and deduplicated."""
    return sorted({min(max(k, k_min), k_max) for k in k_schedule(n_pixels, k_min)})


# --------------------------------------------------------------- gap statistic


def gap_statistic(points, ks, B: int = 20, seed: int = 0) -> GapResult:
    """Select a cluster count by the gap statistic with uniform bounding-box references.

    ``chosen_k`` is the smallest candidate whose gap is at least the next
    candidate's gap minus that candidate's ``sk``. If no candidate qualifies the
    largest is returned and ``no_elbow`` is set.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if points.shape[0] == 0:
        raise EmptyInput("gap statistic needs data")
    ks = [int(k) for k in ks]
    if not ks or ks != sorted(set(ks)):
        raise ValueError("ks must be a non-empty ascending list without duplicates")
    if B < 1:
        raise ValueError("B must be >= 1")
    # canonical order makes the result independent of input point order
    order = np.lexsort(points.T[::-1])
    points = points[order]
    n, d = points.shape
    lo, hi = points.min(axis=0), points.max(axis=0)

    rng = np.random.default_rng(seed)
    obs_seeds = rng.integers(2**31, size=len(ks))
    log_w = np.array([math.log(max(kmeans(points, k, int(s)).wk, _LOG_FLOOR)) for k, s in zip(ks, obs_seeds)])
    log_w_ref = np.empty((B, len(ks)))
    for b in range(B):
        ref = lo + rng.random((n, d)) * (hi - lo)
        ref_seeds = rng.integers(2**31, size=len(ks))
        for j, (k, s) in enumerate(zip(ks, ref_seeds)):
            log_w_ref[b, j] = math.log(max(kmeans(ref, k, int(s)).wk, _LOG_FLOOR))

    gap = log_w_ref.mean(axis=0) - log_w
    sk = log_w_ref.std(axis=0) * math.sqrt(1.0 + 1.0 / B)
    records = tuple(GapRecord(k, math.exp(lw), float(g), float(s)) for k, lw, g, s in zip(ks, log_w, gap, sk))
    for j in range(len(ks) - 1):
        if gap[j] >= gap[j + 1] - sk[j + 1]:
            return GapResult(records, ks[j], False)
    return GapResult(records, ks[-1], True)


# ------------------------------------------------------------------ label maps


class LabelMaps(NamedTuple):
    ref: LabelMap
    flt: LabelMap
    ref_soft: SoftLabelMap
    flt_soft: SoftLabelMap
    gap: GapResult
    centroids: np.ndarray


def soft_assign(d2: np.ndarray, temperature_scale: float = 1.0) -> np.ndarray:
    """Softmax over ``-d2 / tau`` with ``tau`` the mean nearest-centroid distance."""
    dmin = d2.min(axis=1, keepdims=True)
    tau = float(dmin.mean()) * temperature_scale
    if tau <= 0.0:
        hard = np.argmin(d2, axis=1)
        return np.eye(d2.shape[1])[hard]
    p = np.exp(-(d2 - dmin) / tau)
    return p / p.sum(axis=1, keepdims=True)


def label_against(feats: FeatureStack, centroids: np.ndarray, temperature_scale: float = 1.0):
    """Hard and soft maps of one image against a fixed codebook."""
    assign, d2 = nearest_centroid(feats.points(), centroids)
    k = centroids.shape[0]
    h, w = feats.height, feats.width
    hard = LabelMap(assign.reshape(h, w), k)
    soft = SoftLabelMap(soft_assign(d2, temperature_scale).reshape(h, w, k))
    return hard, soft


def make_label_maps(ref_feats: FeatureStack, flt_feats: FeatureStack, cfg: ClusterConfig | None = None) -> LabelMaps:
    """Fine-grained label maps for an image pair from one shared k-means codebook."""
    cfg = cfg or ClusterConfig()
    if ref_feats.depth != flt_feats.depth:
        raise DepthMismatch(f"feature depths differ: {ref_feats.depth} vs {flt_feats.depth}")
    pooled = np.concatenate([ref_feats.points(), flt_feats.points()])
    rng = np.random.default_rng(cfg.seed)
    n = pooled.shape[0]
    sub = np.sort(rng.choice(n, size=min(n, cfg.subsample), replace=False))
    sample = pooled[sub]
    gap_idx = np.sort(rng.choice(sample.shape[0], size=min(sample.shape[0], cfg.gap_subsample), replace=False))
    gap_points = sample[gap_idx]

    n_pixels = ref_feats.width * ref_feats.height
    ks = [k for k in candidate_ks(n_pixels, cfg.k_min, cfg.k_max) if k <= gap_points.shape[0]]
    gap = gap_statistic(gap_points, ks, cfg.B, seed=int(rng.integers(2**31)))
    fit = kmeans(sample, gap.chosen_k, seed=int(rng.integers(2**31)))
    ref_hard, ref_soft = label_against(ref_feats, fit.centroids, cfg.temperature_scale)
    flt_hard, flt_soft = label_against(flt_feats, fit.centroids, cfg.temperature_scale)
    return LabelMaps(ref_hard, flt_hard, ref_soft, flt_soft, gap, fit.centroids)
