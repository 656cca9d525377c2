"""Registration losses and their analytic gradients w.r.t. the displacement field.

The composite objective is

    total = sim + lambda1 * smooth + lambda2 * seg

where ``sim`` compares the reference with the warped floating image (MSE, local
cross-correlation, or their unit-weight sum), ``smooth`` is the diffusion
energy of the field and ``seg`` is the MSE between the reference soft label map
and the warped floating one.

Inside the composite, ``smooth`` is the diffusion energy divided by the pixel
count so that all three terms are per-pixel averages; :func:`loss_smooth`
itself returns the plain sum.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .clustering import SoftLabelMap
from .errors import ClassCountMismatch, DimensionMismatch, FieldTooSmall, WindowTooLarge
from .imaging import Image
from .warp import BilinearSampler, DisplacementField, warp_soft_labels

LCC_EPS = 1e-10
SIM_MODES = ("mse", "lcc", "mse_plus_lcc")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.95
    lambda2: float = 1.05
    sim_mode: str = "mse_plus_lcc"
    lcc_window: int = 9

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.sim_mode not in SIM_MODES:
            raise ValueError(f"sim_mode must be one of {SIM_MODES}, got {self.sim_mode!r}")
        if self.lcc_window < 3 or self.lcc_window % 2 == 0:
            raise ValueError("lcc_window must be odd and >= 3")


@dataclass(frozen=True)
class LossReport:
    total: float
    sim: float
    smooth: float
    seg: float

    def to_json(self, **extra) -> str:
        return json.dumps({**extra, **asdict(self)})


# --------------------------------------------------------------- box filters


def _box_valid(a: np.ndarray, n: int) -> np.ndarray:
    """Sums over every fully contained ``n x n`` window; shape ``(h-n+1, w-n+1)``."""
    h, w = a.shape
    c = np.zeros((h + 1, w + 1))
    c[1:, 1:] = a.cumsum(axis=0).cumsum(axis=1)
    return c[n:, n:] - c[:-n, n:] - c[n:, :-n] + c[:-n, :-n]


def _box_adjoint(c: np.ndarray, n: int) -> np.ndarray:
    """Adjoint of :func:`_box_valid`: per pixel, the sum over windows covering it."""
    return _box_valid(np.pad(c, n - 1), n)


# ------------------------------------------------------------ array kernels


def _mse(ref: np.ndarray, moved: np.ndarray, want_grad: bool):
    diff = moved - ref
    value = float(np.mean(diff * diff))
    grad = 2.0 * diff / diff.size if want_grad else None
    return value, grad


def _lcc(ref: np.ndarray, moved: np.ndarray, n: int, want_grad: bool):
    n2 = float(n * n)
    a, b = ref, moved
    A, B = _box_valid(a, n), _box_valid(b, n)
    AA, BB, AB = _box_valid(a * a, n), _box_valid(b * b, n), _box_valid(a * b, n)
    cross = AB - A * B / n2
    va = AA - A * A / n2
    vb = BB - B * B / n2
    live = (va / n2 > LCC_EPS) & (vb / n2 > LCC_EPS)
    denom = np.where(live, va * vb, 1.0)
    cc2 = np.where(live, cross * cross / denom, 0.0)
    m = cc2.size
    value = 1.0 - float(cc2.sum()) / m
    if not want_grad:
        return value, None
    alpha = np.where(live, 2.0 * cross / denom, 0.0)
    beta = np.where(live, alpha * cross / np.where(live, vb, 1.0), 0.0)
    dcc = (a * _box_adjoint(alpha, n) - _box_adjoint(alpha * A / n2, n)
           - b * _box_adjoint(beta, n) + _box_adjoint(beta * B / n2, n))
    return value, -dcc / m


def _smooth(u: np.ndarray, want_grad: bool):
    dx = u[:, 1:] - u[:, :-1]
    dy = u[1:, :] - u[:-1, :]
    value = float(np.sum(dx * dx) + np.sum(dy * dy))
    if not want_grad:
        return value, None
    g = np.zeros_like(u)
    g[:, 1:] += 2.0 * dx
    g[:, :-1] -= 2.0 * dx
    g[1:, :] += 2.0 * dy
    g[:-1, :] -= 2.0 * dy
    return value, g


def effective_window(window: int, shape) -> int:
    """Largest odd window not exceeding ``window`` that fits in ``shape``."""
    side = min(shape)
    if window <= side:
        return window
    return side if side % 2 == 1 else side - 1


def evaluate(ref: np.ndarray, flt: np.ndarray, m_ref, m_flt, u: np.ndarray,
             weights: LossWeights, want_grad: bool = True, shrink_window: bool = False):
    """Composite loss on raw arrays; returns ``(LossReport, grad or None)``.

    ``m_ref``/``m_flt`` are ``(h, w, k)`` probability arrays or ``None``.
    """
    npix = ref.size
    sampler = BilinearSampler(u)
    moved = sampler.warp(flt)
    sim = 0.0
    g_img = np.zeros_like(ref) if want_grad else None
    if weights.sim_mode in ("mse", "mse_plus_lcc"):
        v, g = _mse(ref, moved, want_grad)
        sim += v
        if want_grad:
            g_img += g
    if weights.sim_mode in ("lcc", "mse_plus_lcc"):
        n = effective_window(weights.lcc_window, ref.shape) if shrink_window else weights.lcc_window
        v, g = _lcc(ref, moved, n, want_grad)
        sim += v
        if want_grad:
            g_img += g

    smooth_sum, g_smooth = _smooth(u, want_grad)
    smooth = smooth_sum / npix

    seg = 0.0
    g_seg = None
    if m_ref is not None and m_flt is not None:
        warped = sampler.warp(m_flt)
        total_mass = warped.sum(axis=-1, keepdims=True)
        m_reg = warped / total_mass
        diff = m_reg - m_ref
        seg = float(np.mean(diff * diff))
        if want_grad:
            g_m = 2.0 * diff / diff.size
            # through the per-pixel renormalization
            g_w = (g_m - np.sum(g_m * m_reg, axis=-1, keepdims=True)) / total_mass
            jx, jy = sampler.jacobian(m_flt)
            g_seg = np.stack([np.sum(g_w * jx, axis=-1), np.sum(g_w * jy, axis=-1)], axis=-1)

    total = sim + weights.lambda1 * smooth + weights.lambda2 * seg
    report = LossReport(total, sim, smooth, seg)
    if not want_grad:
        return report, None
    jx, jy = sampler.jacobian(flt)
    grad = np.stack([g_img * jx, g_img * jy], axis=-1)
    grad += (weights.lambda1 / npix) * g_smooth
    if g_seg is not None:
        grad += weights.lambda2 * g_seg
    return report, grad


# ------------------------------------------------------------- public API


def _same_shape(a, b, what="images"):
    if a.shape[:2] != b.shape[:2]:
        raise DimensionMismatch(f"{what} differ in size: {a.shape[:2]} vs {b.shape[:2]}")


def loss_mse(a: Image, b: Image) -> float:
    _same_shape(a.data, b.data)
    return _mse(a.data, b.data, False)[0]


def loss_lcc(a: Image, b: Image, window: int = 9) -> float:
    """``1 - mean(CC^2)`` over all fully contained windows; flat windows count as CC = 0."""
    _same_shape(a.data, b.data)
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    if window > min(a.shape):
        raise WindowTooLarge(f"window {window} exceeds image size {a.width}x{a.height}")
    return _lcc(a.data, b.data, window, False)[0]


def loss_smooth(field: DisplacementField) -> float:
    """Sum of squared forward differences of both components, over x and y."""
    if field.width < 2 or field.height < 2:
        raise FieldTooSmall(f"field must be at least 2x2, got {field.width}x{field.height}")
    return _smooth(field.u, False)[0]


def loss_seg(m_ref: SoftLabelMap, m_flt: SoftLabelMap, field: DisplacementField) -> float:
    """Mean over pixels and classes of ``(M_ref - warp(M_flt))^2``."""
    _same_shape(m_ref.probs, m_flt.probs, "label maps")
    if m_ref.k != m_flt.k:
        raise ClassCountMismatch(f"class counts differ: {m_ref.k} vs {m_flt.k}")
    m_reg = warp_soft_labels(m_flt, field)
    diff = m_ref.probs - m_reg.probs
    return float(np.mean(diff * diff))


def _check_inputs(ir, iflt, m_ref, m_flt, field, w):
    _same_shape(ir.data, iflt.data)
    if field.shape != ir.shape:
        raise DimensionMismatch(f"field is {field.width}x{field.height} but images are {ir.width}x{ir.height}")
    if (m_ref is None) != (m_flt is None):
        raise ValueError("pass both label maps or neither")
    if m_ref is not None:
        _same_shape(m_ref.probs, ir.data, "label map and image")
        _same_shape(m_ref.probs, m_flt.probs, "label maps")
        if m_ref.k != m_flt.k:
            raise ClassCountMismatch(f"class counts differ: {m_ref.k} vs {m_flt.k}")
    if w.sim_mode != "mse" and w.lcc_window > min(ir.shape):
        raise WindowTooLarge(f"window {w.lcc_window} exceeds image size {ir.width}x{ir.height}")
    if field.width < 2 or field.height < 2:
        raise FieldTooSmall("field must be at least 2x2")


def _maps(m):
    return None if m is None else m.probs


def loss_total(ir: Image, iflt: Image, m_ref: SoftLabelMap | None, m_flt: SoftLabelMap | None,
               field: DisplacementField, w: LossWeights | None = None) -> LossReport:
    w = w or LossWeights()
    _check_inputs(ir, iflt, m_ref, m_flt, field, w)
    return evaluate(ir.data, iflt.data, _maps(m_ref), _maps(m_flt), field.u, w, want_grad=False)[0]


def grad_total(ir: Image, iflt: Image, m_ref: SoftLabelMap | None, m_flt: SoftLabelMap | None,
               field: DisplacementField, w: LossWeights | None = None) -> np.ndarray:
    """Analytic ``d total / d u`` as an ``(h, w, 2)`` array."""
    w = w or LossWeights()
    _check_inputs(ir, iflt, m_ref, m_flt, field, w)
    return evaluate(ir.data, iflt.data, _maps(m_ref), _maps(m_flt), field.u, w, want_grad=True)[1]
