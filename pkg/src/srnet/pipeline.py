"""End-to-end orchestration: configs, the features -> clustering -> optimize
chain, synthetic suites, and the variant comparison used by ``srnet ablate``."""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import synth
from .clustering import ClusterConfig, LabelMaps, make_label_maps
from .evaluation import paired_wilcoxon, rtre
from .features import FeatureConfig, extract
from .imaging import Image
from .optimize import RegConfig, RegistrationResult, register_pair
from .warp import DisplacementField, warp_points

VARIANTS = {
    "full": {},
    "no-seg": {"lambda2": 0.0},
    "mse-only": {"sim_mode": "mse"},
    "cc-only": {"sim_mode": "lcc"},
}
LANDMARK_SEED_OFFSET = 1000


def _from_dict(cls, data: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ValueError(f"unknown config keys: {unknown}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _check_type(name, known[name].type, value)
    return cls(**kwargs)


def _check_type(name: str, kind: str, value):
    """Coerce JSON scalars to the declared field type, rejecting mismatches."""
    ok = {
        "bool": lambda v: isinstance(v, bool),
        "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
        "float": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        "str": lambda v: isinstance(v, str),
        "tuple": lambda v: isinstance(v, (list, tuple)),
    }[kind]
    if not ok(value):
        raise ValueError(f"config key {name!r} expects {kind}, got {value!r}")
    if kind == "float":
        return float(value)
    if kind == "tuple":
        return tuple(value)
    return value


@dataclass(frozen=True)
class PipelineConfig:
    # optimisation
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
    plateau_window: int = 50
    plateau_tol: float = 1e-6
    # features
    blur_sigma: float = 1.0
    deriv_sigma: float = 1.0
    log_sigmas: tuple = (1.0, 2.0)
    n_scales: int = 3
    standardize: bool = True
    # clustering
    k_min: int = 2
    k_max: int = 16
    B: int = 20
    subsample: int = 20_000
    gap_subsample: int = 2_000
    temperature_scale: float = 1.0
    seed: int = 0
    # outputs
    out_dir: str = "out"
    checkerboard_tile: int = 16
    figures: bool = True

    def __post_init__(self):
        # build the sub-configs once so bad values fail early
        self.reg_config()
        self.feature_config()
        self.cluster_config()
        if self.checkerboard_tile < 1:
            raise ValueError("checkerboard_tile must be >= 1")

    def reg_config(self) -> RegConfig:
        names = {f.name for f in fields(RegConfig)}
        return RegConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(self.blur_sigma, self.deriv_sigma, tuple(self.log_sigmas), self.n_scales, self.standardize)

    def cluster_config(self) -> ClusterConfig:
        return ClusterConfig(self.k_min, self.k_max, self.B, self.subsample, self.gap_subsample,
                             self.seed, self.temperature_scale)

    @classmethod
    def from_dict(cls, data: dict):
        return _from_dict(cls, data)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


@dataclass(frozen=True)
class SynthConfig:
    mode: str = "textured"
    width: int = 128
    height: int = 128
    amplitude: float = 8.0
    sigma: float = 8.0
    noise_std: float = 0.01
    n_landmarks: int = 30
    n_regions: int = 4
    seed: int = 0
    out_dir: str = "out"

    def __post_init__(self):
        if self.mode not in ("textured", "structured"):
            raise ValueError("mode must be 'textured' or 'structured'")
        if self.width < 8 or self.height < 8:
            raise ValueError("synthetic images must be at least 8x8")
        if self.n_landmarks < 1:
            raise ValueError("n_landmarks must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    @classmethod
    def from_dict(cls, data: dict):
        return _from_dict(cls, data)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


@dataclass(frozen=True)
class SuiteConfig(PipelineConfig):
    """A :class:`PipelineConfig` plus the synthetic suite it is evaluated on."""

    seeds: tuple = tuple(range(20))
    variants: tuple = ("full", "no-seg", "mse-only", "cc-only")
    mode: str = "structured"
    width: int = 128
    height: int = 128
    amplitude: float = 8.0
    sigma: float = 8.0
    noise_std: float = 0.02
    n_landmarks: int = 30
    n_regions: int = 4
    workers: int = 0

    def __post_init__(self):
        super().__post_init__()
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ValueError(f"unknown variants {bad}; choose from {sorted(VARIANTS)}")
        if not self.seeds:
            raise ValueError("suite needs at least one seed")
        self.synth_config(self.seeds[0])

    def synth_config(self, seed: int) -> SynthConfig:
        return SynthConfig(self.mode, self.width, self.height, self.amplitude, self.sigma, self.noise_std,
                           self.n_landmarks, self.n_regions, int(seed), self.out_dir)

    def pipeline_config(self) -> PipelineConfig:
        names = {f.name for f in fields(PipelineConfig)}
        return PipelineConfig(**{k: v for k, v in asdict(self).items() if k in names})


# ------------------------------------------------------------------ chains


def label_maps_for(ref: Image, flt: Image, cfg: PipelineConfig) -> LabelMaps:
    fcfg = cfg.feature_config()
    return make_label_maps(extract(ref, fcfg), extract(flt, fcfg), cfg.cluster_config())


def register_images(ref: Image, flt: Image, cfg: PipelineConfig,
                    maps: LabelMaps | None = None) -> tuple[LabelMaps | None, RegistrationResult]:
    """Features, clustering and optimisation for one pair; maps are skipped when ``lambda2 == 0``."""
    if maps is None and cfg.lambda2 > 0:
        maps = label_maps_for(ref, flt, cfg)
    m_ref = maps.ref_soft if maps is not None else None
    m_flt = maps.flt_soft if maps is not None else None
    return maps, register_pair(ref, flt, m_ref, m_flt, cfg.reg_config())


def make_synth_pair(cfg: SynthConfig) -> synth.SynthPair:
    margin = cfg.amplitude + 2.0
    if cfg.mode == "structured":
        base, regions = synth.structured_image(cfg.width, cfg.height, cfg.n_regions, seed=cfg.seed)
    else:
        base, regions = synth.textured_image(cfg.width, cfg.height, seed=cfg.seed), None
    lms = synth.random_landmarks(cfg.width, cfg.height, cfg.n_landmarks, margin,
                                 seed=cfg.seed + LANDMARK_SEED_OFFSET)
    return synth.make_pair(base, lms, cfg.amplitude, cfg.sigma, cfg.noise_std, seed=cfg.seed, regions=regions)


def pair_errors(pair: synth.SynthPair, fld: DisplacementField) -> dict:
    """rTRE and endpoint error of ``fld`` against the pair's ground truth."""
    w, h = pair.reference.width, pair.reference.height
    r = rtre(warp_points(pair.ref_landmarks, fld), pair.flt_landmarks, w, h)
    err = fld.u - pair.true_field.u
    epe = np.hypot(err[..., 0], err[..., 1])
    return {
        "mean_tre": r.mean_tre,
        "median_tre": r.median_tre,
        "mean_rtre": r.mean_rtre,
        "median_rtre": r.median_rtre,
        "landmark_rtre": [float(v) for v in r.rtre],
        "mean_epe": float(epe.mean()),
    }


# ------------------------------------------------------------------ ablation


def _run_seed(cfg: SuiteConfig, seed: int) -> dict:
    pair = make_synth_pair(cfg.synth_config(seed))
    base = cfg.pipeline_config()
    maps = None
    if any(replace(base, **VARIANTS[v]).lambda2 > 0 for v in cfg.variants):
        maps = label_maps_for(pair.reference, pair.floating, base)
    out = {"seed": int(seed), "pre": pair_errors(pair, DisplacementField.zeros(*pair.reference.shape)),
           "chosen_k": maps.gap.chosen_k if maps is not None else None, "variants": {}}
    for name in cfg.variants:
        vcfg = replace(base, **VARIANTS[name])
        _, res = register_images(pair.reference, pair.floating, vcfg, maps if vcfg.lambda2 > 0 else None)
        out["variants"][name] = pair_errors(pair, res.field)
    return out


def worker_count(requested: int, jobs: int) -> int:
    """Pool size: ``requested`` (0 = all CPUs), capped by ``SRNET_THREADS`` and the job count."""
    n = requested if requested > 0 else (os.cpu_count() or 1)
    cap = os.environ.get("SRNET_THREADS")
    if cap:
        try:
            limit = int(cap)
        except ValueError:
            raise ValueError(f"SRNET_THREADS must be a positive integer, got {cap!r}") from None
        if limit < 1:
            raise ValueError(f"SRNET_THREADS must be a positive integer, got {cap!r}")
        n = min(n, limit)
    return max(1, min(n, jobs))


@dataclass
class AblationResult:
    per_seed: list = field(default_factory=list)
    variants: tuple = ()

    def series(self, variant: str, key: str = "median_rtre") -> np.ndarray:
        return np.array([s["variants"][variant][key] for s in self.per_seed])

    def summary(self) -> list[dict]:
        rows = []
        for v in self.variants:
            pooled = [x for s in self.per_seed for x in s["variants"][v]["landmark_rtre"]]
            row = {
                "variant": v,
                "n_seeds": len(self.per_seed),
                "median_rtre": float(np.median(self.series(v))),
                "median_over_landmarks_rtre": float(np.median(pooled)),
                "mean_epe": float(np.mean(self.series(v, "mean_epe"))),
                "p_vs_full": "",
            }
            if v != "full" and "full" in self.variants:
                try:
                    row["p_vs_full"] = paired_wilcoxon(self.series("full"), self.series(v))
                except ValueError:
                    row["p_vs_full"] = float("nan")
            rows.append(row)
        return rows

    def wilcoxon_full_vs_noseg(self) -> float:
        return paired_wilcoxon(self.series("full"), self.series("no-seg"))


def run_ablation(cfg: SuiteConfig) -> AblationResult:
    jobs = len(cfg.seeds)
    workers = worker_count(cfg.workers, jobs)
    if workers == 1:
        per_seed = [_run_seed(cfg, s) for s in cfg.seeds]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(_run_seed, [cfg] * jobs, cfg.seeds))
    return AblationResult(per_seed, tuple(cfg.variants))
