"""Synthetic ground truth: elastic fields, deformed pairs, planted structure.

Pairs are built so that the stored field is exactly the registration target:
warping the (noise-free) floating image by ``true_field`` gives the reference,
and each floating landmark is its reference landmark moved by ``true_field``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .clustering import LabelMap
from .imaging import (
    Image,
    LandmarkSet,
    atomic_write_bytes,
    encode_image,
    load_image,
    load_landmarks,
    save_landmarks,
)
from .warp import (
    DisplacementField,
    encode_field,
    load_field,
    warp_image,
    warp_labels_nearest,
    warp_points,
)


@dataclass(frozen=True, eq=False)
class SynthPair:
    reference: Image
    floating: Image
    true_field: DisplacementField
    ref_landmarks: LandmarkSet
    flt_landmarks: LandmarkSet
    ref_regions: LabelMap | None = None


def _rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def elastic_field(w: int, h: int, amplitude: float, sigma: float, seed: int = 0) -> DisplacementField:
    """Gaussian-smoothed white noise rescaled so the largest vector has length ``amplitude``."""
    if amplitude < 0:
        raise ValueError("amplitude must be non-negative")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if amplitude == 0:
        return DisplacementField.zeros(h, w)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((h, w, 2))
    smooth = np.stack([ndimage.gaussian_filter(noise[..., c], sigma, mode="reflect") for c in range(2)], axis=-1)
    peak = np.hypot(smooth[..., 0], smooth[..., 1]).max()
    return DisplacementField(smooth * (amplitude / peak))


def textured_image(w: int, h: int, seed: int = 0, sigmas=(1.0, 2.0, 4.0)) -> Image:
    """Multi-scale smoothed-noise texture spanning roughly [0.05, 0.95]."""
    rng = np.random.default_rng(seed)
    acc = np.zeros((h, w))
    for s in sigmas:
        layer = ndimage.gaussian_filter(rng.standard_normal((h, w)), s, mode="reflect")
        acc += layer / layer.std()
    acc -= acc.min()
    acc /= acc.max()
    return Image(0.05 + 0.9 * acc)


def random_landmarks(w: int, h: int, n: int, margin: float, seed: int = 0) -> LandmarkSet:
    rng = np.random.default_rng(seed)
    xs = rng.uniform(margin, w - 1 - margin, n)
    ys = rng.uniform(margin, h - 1 - margin, n)
    return LandmarkSet(np.column_stack([xs, ys]), "reference")


def make_pair(base: Image, landmarks: LandmarkSet, amplitude: float, sigma: float,
              noise_std: float = 0.0, seed: int = 0, regions: LabelMap | None = None) -> SynthPair:
    """Deform ``base`` into a reference/floating pair with known field.

    The reference is ``base`` warped by the simulated field; the floating image
    is ``base`` plus clamped Gaussian noise. Floating landmarks are the
    reference landmarks pushed through the field and must stay in the domain.
    """
    landmarks.check_inside(base.width, base.height)
    field_rng, noise_rng = _rngs(seed, 2)
    field = elastic_field(base.width, base.height, amplitude, sigma, int(field_rng.integers(2**31)))
    reference = warp_image(base, field)
    if noise_std > 0:
        noisy = base.data + noise_rng.normal(0.0, noise_std, base.shape)
        floating = Image(np.clip(noisy, 0.0, 1.0))
    else:
        floating = base
    ref_lms = landmarks.with_frame("reference")
    flt_lms = warp_points(ref_lms, field)
    flt_lms.check_inside(base.width, base.height)
    ref_regions = None
    if regions is not None:
        ref_regions = LabelMap(warp_labels_nearest(regions.labels, field), regions.k)
    return SynthPair(reference, floating, field, ref_lms, flt_lms, ref_regions)


def structured_image(w: int, h: int, n_regions: int, seed: int = 0, texture_std: float = 0.02) -> tuple[Image, LabelMap]:
    """Voronoi partition with one distinct intensity per region plus mild texture.

    Region intensities are evenly spaced in [0.1, 0.9] (so at least 0.15 apart
    for up to six regions) and randomly assigned to regions.
    """
    if n_regions < 2:
        raise ValueError("n_regions must be >= 2")
    if n_regions > 6:
        raise ValueError("at most 6 regions keep intensities 0.15 apart")
    site_rng, level_rng, tex_rng = _rngs(seed, 3)
    # re-draw until every site owns at least one pixel
    gy, gx = np.mgrid[0:h, 0:w]
    for _ in range(100):
        sites = site_rng.uniform([0, 0], [w - 1, h - 1], (n_regions, 2))
        d2 = (gx[..., None] - sites[:, 0]) ** 2 + (gy[..., None] - sites[:, 1]) ** 2
        labels = np.argmin(d2, axis=-1)
        if np.unique(labels).size == n_regions:
            break
    levels = level_rng.permutation(np.linspace(0.1, 0.9, n_regions))
    texture = ndimage.gaussian_filter(tex_rng.standard_normal((h, w)), 1.0, mode="reflect")
    texture *= texture_std / texture.std()
    img = np.clip(levels[labels] + texture, 0.0, 1.0)
    return Image(img), LabelMap(labels, n_regions)


def planted_clusters(n_points: int, k: int, dim: int = 2, separation: float = 10.0,
                     sigma: float = 0.5, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """``k`` isotropic Gaussian blobs whose centres are pairwise >= ``separation`` apart."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if separation <= 0:
        raise ValueError("separation must be positive")
    rng = np.random.default_rng(seed)
    side = 2.0 * separation * max(1.0, k ** (1.0 / dim))
    centers = None
    for _ in range(1000):
        cand = rng.uniform(0, side, (k, dim))
        diff = cand[:, None, :] - cand[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() >= separation:
            centers = cand
            break
    if centers is None:
        centers = np.zeros((k, dim))
        centers[:, 0] = np.arange(k) * separation
    labels = rng.permutation(np.arange(n_points) % k)
    points = centers[labels] + rng.normal(0.0, sigma, (n_points, dim))
    return points, labels


# ------------------------------------------------------------------ files


def save_pair(pair: SynthPair, out_dir, extra: dict | None = None) -> dict:
    """Write a pair plus a JSON manifest listing every file with its size and digest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "reference": ("reference.png", encode_image(pair.reference)),
        "floating": ("floating.png", encode_image(pair.floating)),
        "true_field": ("true_field.srfd", encode_field(pair.true_field)),
    }
    if pair.ref_regions is not None:
        files["ref_regions"] = ("ref_regions.png", encode_image(pair.ref_regions.to_image()))
    for _, (name, payload) in files.items():
        atomic_write_bytes(out / name, payload)
    save_landmarks(pair.ref_landmarks, out / "landmarks_ref.csv")
    save_landmarks(pair.flt_landmarks, out / "landmarks_flt.csv")
    entries = {}
    for key, name in [(k, v[0]) for k, v in files.items()] + [
        ("ref_landmarks", "landmarks_ref.csv"), ("flt_landmarks", "landmarks_flt.csv")
    ]:
        raw = (out / name).read_bytes()
        entries[key] = {"path": name, "bytes": len(raw), "sha256": hashlib.sha256(raw).hexdigest()}
    manifest = {
        "width": pair.reference.width,
        "height": pair.reference.height,
        "files": entries,
    }
    if pair.ref_regions is not None:
        manifest["n_regions"] = pair.ref_regions.k
    if extra:
        manifest["config"] = extra
    atomic_write_bytes(out / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return manifest


def load_pair(manifest_path) -> SynthPair:
    path = Path(manifest_path)
    manifest = json.loads(path.read_text())
    root = path.parent
    files = manifest["files"]
    regions = None
    if "ref_regions" in files:
        k = int(manifest["n_regions"])
        img = load_image(root / files["ref_regions"]["path"])
        regions = LabelMap(np.rint(img.data * max(k - 1, 1)).astype(int), k)
    return SynthPair(
        reference=load_image(root / files["reference"]["path"]),
        floating=load_image(root / files["floating"]["path"]),
        true_field=load_field(root / files["true_field"]["path"]),
        ref_landmarks=load_landmarks(root / files["ref_landmarks"]["path"], "reference"),
        flt_landmarks=load_landmarks(root / files["flt_landmarks"]["path"], "floating"),
        ref_regions=regions,
    )
