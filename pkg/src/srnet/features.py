"""Training-free multi-scale feature extractor standing in for a segmentation UNet.

Each scale applies the same analytic filter bank (intensity, Gaussian blur,
Gaussian x/y derivatives, Laplacian-of-Gaussian at two widths). Coarser scales
are reached by 2x2 max pooling, filtered there, and brought back to full
resolution bilinearly, so every pixel carries responses from all scales.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DepthMismatch, ImageTooSmall
from .imaging import Image, max_pool2, upsample

_DEGENERATE_STD = 1e-10


@dataclass(frozen=True)
class FeatureConfig:
    blur_sigma: float = 1.0
    deriv_sigma: float = 1.0
    log_sigmas: tuple[float, ...] = (1.0, 2.0)
    n_scales: int = 3
    standardize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "log_sigmas", tuple(float(s) for s in self.log_sigmas))
        if self.n_scales < 1:
            raise ValueError("n_scales must be >= 1")
        if min((self.blur_sigma, self.deriv_sigma) + self.log_sigmas) <= 0:
            raise ValueError("filter sigmas must be positive")

    @property
    def channels_per_scale(self) -> int:
        return 4 + len(self.log_sigmas)

    @property
    def depth(self) -> int:
        return self.channels_per_scale * self.n_scales

    def channel_names(self) -> list[str]:
        names = []
        for s in range(self.n_scales):
            base = ["intensity", f"blur{self.blur_sigma:g}", f"dx{self.deriv_sigma:g}", f"dy{self.deriv_sigma:g}"]
            base += [f"log{sig:g}" for sig in self.log_sigmas]
            names += [f"s{s}_{n}" for n in base]
        return names


@dataclass(frozen=True, eq=False)
class FeatureStack:
    """Per-pixel feature vectors, array shape ``(h, w, depth)``."""

    data: np.ndarray
    names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"feature data must be (h, w, depth), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("features must be finite")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def depth(self) -> int:
        return self.data.shape[2]

    def points(self) -> np.ndarray:
        """Feature vectors as an ``(h*w, depth)`` matrix in row-major pixel order."""
        return self.data.reshape(-1, self.depth)


def _filter_bank(arr: np.ndarray, cfg: FeatureConfig) -> list[np.ndarray]:
    out = [
        arr,
        ndimage.gaussian_filter(arr, cfg.blur_sigma, mode="reflect"),
        ndimage.gaussian_filter(arr, cfg.deriv_sigma, order=(0, 1), mode="reflect"),
        ndimage.gaussian_filter(arr, cfg.deriv_sigma, order=(1, 0), mode="reflect"),
    ]
    out += [ndimage.gaussian_laplace(arr, s, mode="reflect") for s in cfg.log_sigmas]
    return out


def standardize_channels(data: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance per channel; constant channels become zeros."""
    flat = data.reshape(-1, data.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    live = std > _DEGENERATE_STD
    out = np.zeros_like(flat)
    out[:, live] = (flat[:, live] - mean[live]) / std[live]
    return out.reshape(data.shape)


def extract(img: Image, config: FeatureConfig | None = None) -> FeatureStack:
    cfg = config or FeatureConfig()
    min_side = max(8, 2 ** cfg.n_scales)
    if img.width < min_side or img.height < min_side:
        raise ImageTooSmall(f"feature extraction needs at least {min_side}x{min_side}, got {img.width}x{img.height}")
    h, w = img.shape
    channels = []
    level = np.array(img.data)
    for s in range(cfg.n_scales):
        if s > 0:
            level = max_pool2(level)
        responses = np.stack(_filter_bank(level, cfg), axis=-1)
        if s > 0:
            responses = upsample(responses, 2 ** s, (h, w))
        channels.append(responses)
    data = np.concatenate(channels, axis=-1)
    if cfg.standardize:
        data = standardize_channels(data)
    return FeatureStack(data, tuple(cfg.channel_names()))


def feature_distance(a: FeatureStack, p, b: FeatureStack, q) -> float:
    """Squared Euclidean distance between the feature vectors at pixels ``p`` and ``q`` (each ``(x, y)``)."""
    if a.depth != b.depth:
        raise DepthMismatch(f"feature depths differ: {a.depth} vs {b.depth}")
    d = a.data[p[1], p[0]] - b.data[q[1], q[0]]
    return float(np.dot(d, d))
