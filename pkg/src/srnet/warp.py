"""Backward bilinear warping with analytic derivatives w.r.t. the displacement.

A field ``u`` lives in the reference frame: the registered image at pixel ``p``
is the floating image sampled at ``p + u(p)``. Sample coordinates are clamped to
the image rectangle, and the derivative through a clamped coordinate is zero.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clustering import SoftLabelMap
from .errors import CorruptHeader, DimensionMismatch, UnsupportedFormat
from .imaging import Image, LandmarkSet, atomic_write_bytes, upsample

FIELD_MAGIC = b"SRFD"


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-pixel displacement ``(ux, uy)`` in pixels, array shape ``(h, w, 2)``."""

    u: np.ndarray

    def __post_init__(self):
        u = np.array(self.u, dtype=np.float64)
        if u.ndim != 3 or u.shape[2] != 2:
            raise ValueError(f"field must have shape (h, w, 2), got {u.shape}")
        if not np.all(np.isfinite(u)):
            raise ValueError("field components must be finite")
        u.flags.writeable = False
        object.__setattr__(self, "u", u)

    @classmethod
    def zeros(cls, height: int, width: int) -> "DisplacementField":
        return cls(np.zeros((height, width, 2)))

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape[:2]


class BilinearSampler:
    """Sampling geometry for one displacement array, reusable across channels.

    ``u`` is an ``(h, w, 2)`` array; the sampled arrays must share ``(h, w)``
    and may carry trailing channel axes.
    """

    def __init__(self, u: np.ndarray):
        h, w = u.shape[:2]
        gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
        sx = gx + u[..., 0]
        sy = gy + u[..., 1]
        # derivative is zero wherever the coordinate got clamped
        self.live_x = (sx >= 0.0) & (sx <= w - 1)
        self.live_y = (sy >= 0.0) & (sy <= h - 1)
        sx = np.clip(sx, 0.0, w - 1)
        sy = np.clip(sy, 0.0, h - 1)
        x0 = np.minimum(np.floor(sx).astype(np.intp), max(w - 2, 0))
        y0 = np.minimum(np.floor(sy).astype(np.intp), max(h - 2, 0))
        self.x0, self.y0 = x0, y0
        self.x1 = np.minimum(x0 + 1, w - 1)
        self.y1 = np.minimum(y0 + 1, h - 1)
        self.fx = sx - x0
        self.fy = sy - y0
        self.shape = (h, w)

    def _corners(self, arr):
        return (arr[self.y0, self.x0], arr[self.y0, self.x1],
                arr[self.y1, self.x0], arr[self.y1, self.x1])

    def _expand(self, a, arr):
        return a.reshape(a.shape + (1,) * (arr.ndim - 2))

    def warp(self, arr: np.ndarray) -> np.ndarray:
        v00, v01, v10, v11 = self._corners(arr)
        fx, fy = self._expand(self.fx, arr), self._expand(self.fy, arr)
        w00 = (1.0 - fx) * (1.0 - fy)
        w01 = fx * (1.0 - fy)
        w10 = (1.0 - fx) * fy
        w11 = fx * fy
        return w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def jacobian(self, arr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(d out/d ux, d out/d uy)``, each shaped like ``arr``."""
        v00, v01, v10, v11 = self._corners(arr)
        fx, fy = self._expand(self.fx, arr), self._expand(self.fy, arr)
        dx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
        dy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01)
        dx = dx * self._expand(self.live_x, arr)
        dy = dy * self._expand(self.live_y, arr)
        return dx, dy


def _check_dims(shape, field: DisplacementField, what: str = "image"):
    if tuple(shape[:2]) != field.shape:
        raise DimensionMismatch(f"{what} is {shape[1]}x{shape[0]} but field is {field.width}x{field.height}")


def warp_image(img: Image, field: DisplacementField) -> Image:
    _check_dims(img.shape, field)
    out = BilinearSampler(field.u).warp(img.data)
    # convex weights keep values in range; clip guards last-ulp excursions
    return Image(np.clip(out, 0.0, 1.0))


def warp_jacobian(img: Image, field: DisplacementField) -> np.ndarray:
    """Per-pixel ``(d out/d ux, d out/d uy)`` of :func:`warp_image`, shape ``(h, w, 2)``."""
    _check_dims(img.shape, field)
    dx, dy = BilinearSampler(field.u).jacobian(img.data)
    return np.stack([dx, dy], axis=-1)


def normalize_planes(planes: np.ndarray) -> np.ndarray:
    total = planes.sum(axis=-1, keepdims=True)
    return planes / total


def warp_soft_labels(labels: SoftLabelMap, field: DisplacementField) -> SoftLabelMap:
    """Warp every class plane and renormalize each pixel onto the simplex."""
    _check_dims(labels.probs.shape, field, "label map")
    warped = BilinearSampler(field.u).warp(labels.probs)
    return SoftLabelMap(normalize_planes(warped))


def warp_labels_nearest(labels: np.ndarray, field: DisplacementField) -> np.ndarray:
    """Nearest-neighbour warp of an integer label array (for mask evaluation)."""
    _check_dims(labels.shape, field, "label map")
    h, w = field.shape
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = np.clip(np.rint(gx + field.u[..., 0]), 0, w - 1).astype(np.intp)
    sy = np.clip(np.rint(gy + field.u[..., 1]), 0, h - 1).astype(np.intp)
    return labels[sy, sx]


def interpolate_field(field: DisplacementField, points: np.ndarray) -> np.ndarray:
    """Bilinearly interpolate ``u`` at sub-pixel ``(x, y)`` points, returns ``(n, 2)``."""
    h, w = field.shape
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    x, y = pts[:, 0], pts[:, 1]
    x0 = np.minimum(np.floor(x).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    u = field.u
    return ((1 - fx) * (1 - fy) * u[y0, x0] + fx * (1 - fy) * u[y0, x1]
            + (1 - fx) * fy * u[y1, x0] + fx * fy * u[y1, x1])


def warp_points(pts: LandmarkSet, field: DisplacementField) -> LandmarkSet:
    """Map each point ``p`` to ``p + u(p)``; the frame tag flips."""
    pts.check_inside(field.width, field.height)
    moved = pts.points + interpolate_field(field, pts.points)
    other = "floating" if pts.frame == "reference" else "reference"
    return LandmarkSet(moved, other)


def upsample_field(field: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Upsample an ``(h, w, 2)`` displacement array x2, doubling the vectors."""
    return 2.0 * upsample(field, 2, out_shape)


# ------------------------------------------------------------- serialization


def encode_field(field: DisplacementField) -> bytes:
    header = FIELD_MAGIC + struct.pack("<II", field.width, field.height)
    return header + field.u.astype("<f4").tobytes()


def decode_field(raw: bytes) -> DisplacementField:
    if raw[:4] != FIELD_MAGIC:
        raise UnsupportedFormat("not an SRFD displacement field file")
    if len(raw) < 12:
        raise CorruptHeader("truncated SRFD header")
    width, height = struct.unpack("<II", raw[4:12])
    payload = raw[12:]
    if len(payload) != width * height * 2 * 4:
        raise CorruptHeader(
            f"SRFD header declares {width}x{height} but payload has {len(payload)} bytes"
        )
    u = np.frombuffer(payload, dtype="<f4").reshape(height, width, 2).astype(np.float64)
    return DisplacementField(u)


def save_field(field: DisplacementField, path) -> None:
    atomic_write_bytes(path, encode_field(field))


def load_field(path) -> DisplacementField:
    return decode_field(Path(path).read_bytes())


def save_field_csv(field: DisplacementField, path) -> None:
    h, w = field.shape
    gy, gx = np.mgrid[0:h, 0:w]
    table = np.column_stack([gx.ravel(), gy.ravel(), field.u[..., 0].ravel(), field.u[..., 1].ravel()])
    buf = io.StringIO()
    buf.write("x,y,ux,uy\n")
    np.savetxt(buf, table, fmt=["%d", "%d", "%.9g", "%.9g"], delimiter=",")
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))
