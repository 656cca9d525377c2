"""Raster types, image and landmark I/O, and pyramid resampling helpers.

Arrays are stored row-major with the spatial axes first: an image is ``(h, w)``,
a displacement field ``(h, w, 2)``, a stack of per-pixel channels ``(h, w, c)``.
"""

from __future__ import annotations

import csv
import io
import os
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import (
    CorruptHeader,
    ImageTooSmall,
    MalformedRow,
    NonContiguousIndices,
    PointOutOfDomain,
    UnsupportedFormat,
)

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Image:
    """Single-channel image with intensities in [0, 1].

    ``data`` has shape ``(height, width)`` and is read-only after construction.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"image data must be a non-empty 2D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("image intensities must lie in [0, 1]")
        object.__setattr__(self, "data", _frozen(arr))

    @classmethod
    def from_array(cls, arr, clip: bool = False) -> "Image":
        arr = np.asarray(arr, dtype=np.float64)
        if clip:
            arr = np.clip(arr, 0.0, 1.0)
        return cls(arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def quantized(self) -> np.ndarray:
        """8-bit representation used when writing to disk."""
        return np.rint(self.data * 255.0).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """Ordered 2D points ``(x, y)`` in pixel units; correspondence is by index."""

    points: np.ndarray
    frame: str = "reference"

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmark coordinates must be finite")
        if self.frame not in ("reference", "floating"):
            raise ValueError(f"unknown landmark frame {self.frame!r}")
        object.__setattr__(self, "points", _frozen(pts))

    def __len__(self) -> int:
        return self.points.shape[0]

    def check_inside(self, width: int, height: int) -> None:
        x, y = self.points[:, 0], self.points[:, 1]
        bad = (x < 0) | (x > width - 1) | (y < 0) | (y > height - 1)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise PointOutOfDomain(
                f"landmark {i} at {tuple(self.points[i])} outside {width}x{height} domain"
            )

    def with_frame(self, frame: str) -> "LandmarkSet":
        return LandmarkSet(self.points, frame)


# --------------------------------------------------------------------------- I/O


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write ``payload`` to ``path`` via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_netpbm(raw: bytes) -> np.ndarray:
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise UnsupportedFormat(f"netpbm variant {magic!r} not supported (need P5 or P6)")
    # header: magic, width, height, maxval separated by whitespace/comments,
    # then exactly one whitespace byte before the payload
    pos = 2
    tokens = []
    while len(tokens) < 3:
        m = re.compile(rb"(?:\s|#[^\n]*\n?)*").match(raw, pos)
        pos = m.end()
        m = re.compile(rb"\d+").match(raw, pos)
        if m is None:
            raise CorruptHeader("truncated or malformed netpbm header")
        tokens.append(int(m.group()))
        pos = m.end()
    if pos >= len(raw) or raw[pos:pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise CorruptHeader("missing whitespace after netpbm maxval")
    pos += 1
    width, height, maxval = tokens
    if maxval != 255:
        raise UnsupportedFormat(f"netpbm maxval {maxval} not supported (need 255)")
    if width <= 0 or height <= 0:
        raise CorruptHeader(f"invalid dimensions {width}x{height}")
    channels = 1 if magic == b"P5" else 3
    payload = raw[pos:]
    expected = width * height * channels
    if len(payload) != expected:
        raise CorruptHeader(
            f"header declares {width}x{height} ({expected} bytes) but payload has {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=np.uint8)
    if channels == 1:
        return arr.reshape(height, width).astype(np.float64) / 255.0
    rgb = arr.reshape(height, width, 3).astype(np.float64) / 255.0
    return rgb @ np.array(LUMA_WEIGHTS)


def _read_png(raw: bytes) -> np.ndarray:
    with PILImage.open(io.BytesIO(raw)) as im:
        mode = im.mode
        if mode == "L":
            return np.asarray(im, dtype=np.float64) / 255.0
        if mode == "LA":
            return np.asarray(im.getchannel(0), dtype=np.float64) / 255.0
        if mode in ("RGB", "RGBA", "P"):
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            return np.clip(rgb @ np.array(LUMA_WEIGHTS), 0.0, 1.0)
    raise UnsupportedFormat(f"PNG mode {mode!r} not supported (need 8-bit gray or RGB)")


def load_image(path) -> Image:
    """Read an 8-bit netpbm (P5/P6) or PNG file into an Image in [0, 1].

    Colour inputs are reduced to luminance with fixed 0.299/0.587/0.114 weights.
    """
    raw = Path(path).read_bytes()
    if raw[:2] in (b"P5", b"P6") or raw[:1] == b"P":
        data = _parse_netpbm(raw)
    elif raw[:8] == _PNG_MAGIC:
        data = _read_png(raw)
    else:
        raise UnsupportedFormat(f"{path}: not a netpbm P5/P6 or PNG file")
    return Image(data)


def encode_image(img: Image, fmt: str = "png") -> bytes:
    q = img.quantized()
    if fmt in ("pgm", "pnm", "p5"):
        header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
        return header + q.tobytes()
    if fmt == "png":
        buf = io.BytesIO()
        PILImage.fromarray(q).save(buf, format="PNG")
        return buf.getvalue()
    raise UnsupportedFormat(f"cannot write image format {fmt!r}")


def save_image(img: Image, path) -> None:
    """Write ``img`` as P5 (``.pgm``/``.pnm``) or 8-bit grayscale PNG (anything else)."""
    suffix = Path(path).suffix.lower().lstrip(".")
    fmt = suffix if suffix in ("pgm", "pnm") else "png"
    atomic_write_bytes(path, encode_image(img, fmt))


def load_landmarks(path, frame: str = "reference") -> LandmarkSet:
    """Read an ANHIR-style landmark CSV (header, then ``index,x,y`` rows)."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return LandmarkSet(np.zeros((0, 2)), frame)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise MalformedRow(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            try:
                idx = float(row[0])
                x, y = float(row[1]), float(row[2])
            except ValueError as exc:
                raise MalformedRow(f"{path}:{lineno}: {exc}") from None
            if idx != int(idx):
                raise MalformedRow(f"{path}:{lineno}: non-integer index {row[0]!r}")
            rows.append((int(idx), x, y))
    if not rows:
        return LandmarkSet(np.zeros((0, 2)), frame)
    rows.sort(key=lambda r: r[0])
    indices = [r[0] for r in rows]
    start = indices[0]
    if indices != list(range(start, start + len(indices))):
        raise NonContiguousIndices(f"{path}: landmark indices are not contiguous: {indices}")
    return LandmarkSet(np.array([(x, y) for _, x, y in rows]), frame)


def save_landmarks(lms: LandmarkSet, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["index", "x", "y"])
    for i, (x, y) in enumerate(lms.points):
        writer.writerow([i, repr(float(x)), repr(float(y))])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


# ---------------------------------------------------------------- resampling


def mean_pool2(arr: np.ndarray) -> np.ndarray:
    """2x2 mean pooling over the two leading axes; odd trailing row/column dropped."""
    h, w = arr.shape[0] // 2, arr.shape[1] // 2
    a = arr[: 2 * h, : 2 * w]
    return 0.25 * (a[0::2, 0::2] + a[0::2, 1::2] + a[1::2, 0::2] + a[1::2, 1::2])


def max_pool2(arr: np.ndarray) -> np.ndarray:
    h, w = arr.shape[0] // 2, arr.shape[1] // 2
    a = arr[: 2 * h, : 2 * w]
    return np.maximum(np.maximum(a[0::2, 0::2], a[0::2, 1::2]), np.maximum(a[1::2, 0::2], a[1::2, 1::2]))


def downsample_half(img: Image) -> Image:
    """Halve each dimension by 2x2 block averaging."""
    if img.width < 2 or img.height < 2:
        raise ImageTooSmall(f"cannot halve a {img.width}x{img.height} image")
    return Image(np.clip(mean_pool2(img.data), 0.0, 1.0))


def upsample(arr: np.ndarray, factor: int, out_shape: tuple[int, int]) -> np.ndarray:
    """Bilinear upsampling by an integer ``factor`` with pixel-centre alignment.

    Output pixel ``x`` reads the source at ``(x + 0.5) / factor - 0.5``, clamped
    to the source rectangle. Trailing axes beyond the first two are carried along.
    """
    src_h, src_w = arr.shape[:2]
    out_h, out_w = out_shape
    ys = np.clip((np.arange(out_h) + 0.5) / factor - 0.5, 0.0, src_h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) / factor - 0.5, 0.0, src_w - 1)
    y0 = np.minimum(np.floor(ys).astype(np.intp), max(src_h - 2, 0))
    x0 = np.minimum(np.floor(xs).astype(np.intp), max(src_w - 2, 0))
    y1 = np.minimum(y0 + 1, src_h - 1)
    x1 = np.minimum(x0 + 1, src_w - 1)
    fy = (ys - y0).reshape((-1, 1) + (1,) * (arr.ndim - 2))
    fx = (xs - x0).reshape((1, -1) + (1,) * (arr.ndim - 2))
    top = arr[y0][:, x0] * (1 - fx) + arr[y0][:, x1] * fx
    bot = arr[y1][:, x0] * (1 - fx) + arr[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy
