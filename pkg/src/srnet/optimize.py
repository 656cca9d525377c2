"""Coarse-to-fine Adam minimisation of the composite loss over a dense field."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .clustering import SoftLabelMap
from .errors import DimensionMismatch, NonFiniteLoss, ShapeMismatch
from .imaging import Image, mean_pool2
from .losses import LossReport, LossWeights, evaluate
from .warp import DisplacementField, upsample_field, warp_image


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.93
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.t < 0:
            raise ValueError("step count must be non-negative")
        if np.shape(self.m) != np.shape(self.v):
            raise ShapeMismatch("first and second moment buffers differ in shape")

    @classmethod
    def zeros_like(cls, params: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(params, dtype=np.float64), np.zeros_like(params, dtype=np.float64), 0, **hyper)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns new parameters and state."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeMismatch(f"params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, t=t)


@dataclass(frozen=True)
class RegConfig:
    levels: int = 3
    iters_per_level: int = 2000
    lr: float = 0.05
    beta1: float = 0.93
    beta2: float = 0.999
    eps: float = 1e-8
    lambda1: float = 0.95
    lambda2: float = 1.05
    sim_mode: str = "mse_plus_lcc"
    lcc_window: int = 9
    seed: int = 0
    plateau_window: int = 50
    plateau_tol: float = 1e-6

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.iters_per_level < 1:
            raise ValueError("iters_per_level must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        self.weights  # validates the loss fields

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.sim_mode, self.lcc_window)

    @classmethod
    def from_dict(cls, data: dict) -> "RegConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown RegConfig keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


@dataclass(frozen=True)
class TraceEntry:
    """Best-so-far (accepted) loss at one iteration of one pyramid level.

    ``level`` 0 is full resolution; ``current_total`` is the loss of the iterate
    actually evaluated at this step.
    """

    level: int
    iter: int
    report: LossReport
    current_total: float

    def to_json(self) -> str:
        return self.report.to_json(iter=self.iter, level=self.level, current_total=self.current_total)


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    field: DisplacementField
    registered: Image
    loss_trace: list = field(default_factory=list)
    converged: bool = False
    iterations_run: int = 0
    initial: LossReport | None = None
    final: LossReport | None = None

    def trace_jsonl(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.loss_trace)


def _pyramid(arr: np.ndarray, levels: int) -> list[np.ndarray]:
    out = [arr]
    for _ in range(levels - 1):
        out.append(mean_pool2(out[-1]))
    return out


def _usable_levels(shape, requested: int, min_side: int = 8) -> int:
    levels = 1
    h, w = shape
    while levels < requested and min(h, w) // 2 >= min_side:
        h, w = h // 2, w // 2
        levels += 1
    return levels


def register_pair(ir: Image, iflt: Image, m_ref: SoftLabelMap | None, m_flt: SoftLabelMap | None,
                  cfg: RegConfig | None = None) -> RegistrationResult:
    """Recover a backward displacement field aligning ``iflt`` onto ``ir``.

    Runs Adam on every pyramid level from coarsest to finest, seeding each
    level with the x2-upsampled best field from the level above. Each level
    stops at ``iters_per_level`` or when the accepted loss improved by less
    than ``plateau_tol`` (relative) over ``plateau_window`` iterations. The
    returned field is the best one seen at full resolution.
    """
    cfg = cfg or RegConfig()
    if ir.shape != iflt.shape:
        raise DimensionMismatch(f"images differ in size: {ir.shape} vs {iflt.shape}")
    if (m_ref is None) != (m_flt is None):
        raise ValueError("pass both label maps or neither")
    if m_ref is not None and (m_ref.probs.shape[:2] != ir.shape or m_flt.probs.shape != m_ref.probs.shape):
        raise DimensionMismatch("label maps must match the image size and each other")
    weights = cfg.weights
    use_maps = m_ref is not None and weights.lambda2 > 0
    n_levels = _usable_levels(ir.shape, cfg.levels)
    refs = _pyramid(ir.data, n_levels)
    flts = _pyramid(iflt.data, n_levels)
    mrefs = _pyramid(m_ref.probs, n_levels) if use_maps else [None] * n_levels
    mflts = _pyramid(m_flt.probs, n_levels) if use_maps else [None] * n_levels

    trace: list[TraceEntry] = []
    initial, _ = evaluate(ir.data, iflt.data, _maps(m_ref), _maps(m_flt), np.zeros(ir.shape + (2,)),
                          weights, want_grad=False, shrink_window=True)
    total_iters = 0
    converged = False
    u = np.zeros(refs[-1].shape + (2,))
    best_u = u
    best = None
    for level in range(n_levels - 1, -1, -1):
        if level != n_levels - 1:
            u = upsample_field(best_u, refs[level].shape)
        state = AdamState.zeros_like(u, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, lr=cfg.lr)
        best, best_u = None, u
        history = []
        converged = False
        for it in range(cfg.iters_per_level):
            report, grad = evaluate(refs[level], flts[level], mrefs[level], mflts[level], u, weights,
                                    want_grad=True, shrink_window=True)
            total_iters += 1
            if not (np.isfinite(report.total) and np.all(np.isfinite(grad))):
                raise NonFiniteLoss(f"non-finite loss at level {level}, iteration {it}", trace)
            if best is None or report.total < best.total:
                best, best_u = report, u
            trace.append(TraceEntry(level, it, best, report.total))
            history.append(best.total)
            if it >= cfg.plateau_window:
                old = history[it - cfg.plateau_window]
                if old - best.total <= cfg.plateau_tol * abs(old):
                    converged = True
                    break
            u, state = adam_step(state, u, grad)

    final, _ = evaluate(ir.data, iflt.data, _maps(m_ref), _maps(m_flt), best_u, weights,
                        want_grad=False, shrink_window=True)
    if final.total > initial.total:
        best_u, final = np.zeros_like(best_u), initial
    result_field = DisplacementField(best_u)
    return RegistrationResult(
        field=result_field,
        registered=warp_image(iflt, result_field),
        loss_trace=trace,
        converged=converged,
        iterations_run=total_iters,
        initial=initial,
        final=final,
    )


def _maps(m):
    return None if m is None else m.probs
