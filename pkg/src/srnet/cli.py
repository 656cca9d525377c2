"""``srnet`` command line: register, synth, eval, ablate, cluster-map.

Exit codes: 0 success, 2 invalid arguments or inputs, 3 I/O failure
(missing, unreadable or undecodable files), 4 non-finite loss.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import plotting
from .clustering import LabelMap
from .errors import CorruptHeader, MalformedRow, NonContiguousIndices, NonFiniteLoss, UnsupportedFormat
from .evaluation import MetricRecord, MetricReport, dice, format_rtre_table, hd95, rtre
from .imaging import atomic_write_bytes, load_image, load_landmarks, save_image
from .pipeline import (
    PipelineConfig,
    SuiteConfig,
    SynthConfig,
    _from_dict,
    label_maps_for,
    make_synth_pair,
    pair_errors,
    register_images,
    run_ablation,
)
from .synth import load_pair, save_pair
from .warp import DisplacementField, load_field, save_field, warp_labels_nearest, warp_points

EXIT_OK, EXIT_ARGS, EXIT_IO, EXIT_NONFINITE = 0, 2, 3, 4
_IO_ERRORS = (OSError, UnsupportedFormat, CorruptHeader, MalformedRow, NonContiguousIndices)


@dataclass(frozen=True)
class EvalConfig:
    field: str = ""
    landmarks_ref: str = ""
    landmarks_flt: str = ""
    mask_ref: str = ""
    mask_flt: str = ""
    n_classes: int = 0
    pair_id: str = "pair"
    out_dir: str = "out"

    def __post_init__(self):
        if not self.field:
            raise ValueError("eval needs a field")
        if bool(self.landmarks_ref) != bool(self.landmarks_flt):
            raise ValueError("pass both landmark files or neither")
        if bool(self.mask_ref) != bool(self.mask_flt):
            raise ValueError("pass both masks or neither")
        if self.mask_ref and self.n_classes < 2:
            raise ValueError("masks need n_classes >= 2")

    @classmethod
    def from_dict(cls, data: dict):
        return _from_dict(cls, data)


# ------------------------------------------------------------- config flags


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _tuple_of(kind):
    def parse(text: str):
        try:
            return tuple(kind(t) for t in text.split(",") if t.strip())
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from None
    return parse


def _flag_type(f, default):
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    if kind == "bool":
        return _bool
    if kind == "int":
        return int
    if kind == "float":
        return float
    if kind == "tuple":
        elem = type(default[0]) if default else str
        return _tuple_of(elem)
    return str


def _add_config_flags(parser: argparse.ArgumentParser, cls, skip=()) -> None:
    parser.add_argument("--config", help="JSON file with config keys; flags override it")
    group = parser.add_argument_group("config keys")
    for f in fields(cls):
        if f.name in skip:
            continue
        default = f.default
        group.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None,
                           type=_flag_type(f, default), metavar=f.name.upper(),
                           help=f"default: {default!r}")


def _resolve(cls, args: argparse.Namespace):
    data = {}
    if args.config:
        raw = Path(args.config).read_text(encoding="utf-8")
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{args.config}: invalid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ValueError(f"{args.config}: config must be a JSON object")
    for f in fields(cls):
        value = getattr(args, f.name, None)
        if value is not None:
            data[f.name] = value
    return cls.from_dict(data)


def _echo_config(cfg, out: Path) -> None:
    text = json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n"
    sys.stdout.write(text)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(out / "effective_config.json", text.encode())


def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ------------------------------------------------------------- subcommands


def cmd_register(args) -> int:
    cfg = _resolve(PipelineConfig, args)
    pair = None
    if args.manifest:
        pair = load_pair(args.manifest)
    if args.ref and args.flt:
        ref, flt = load_image(args.ref), load_image(args.flt)
    elif pair is not None and not (args.ref or args.flt):
        ref, flt = pair.reference, pair.floating
    else:
        raise ValueError("give REF and FLT image paths, or --manifest")
    out = Path(cfg.out_dir)
    _echo_config(cfg, out)
    maps, res = register_images(ref, flt, cfg)

    save_image(res.registered, out / "registered.png")
    save_field(res.field, out / "field.srfd")
    save_image(plotting.difference_image(ref, flt), out / "diff_before.png")
    save_image(plotting.difference_image(ref, res.registered), out / "diff_after.png")
    save_image(plotting.checkerboard(ref, res.registered, cfg.checkerboard_tile), out / "checkerboard.png")
    _write_text(out / "loss_trace.jsonl", res.trace_jsonl())
    summary = {
        "initial": asdict(res.initial),
        "final": asdict(res.final),
        "converged": res.converged,
        "iterations_run": res.iterations_run,
        "mean_abs_displacement": float(np.hypot(res.field.u[..., 0], res.field.u[..., 1]).mean()),
    }
    if maps is not None:
        save_image(maps.ref.to_image(), out / "labels_ref.png")
        save_image(maps.flt.to_image(), out / "labels_flt.png")
        _write_text(out / "gap.csv", maps.gap.to_csv())
        summary.update(chosen_k=maps.gap.chosen_k, no_elbow=maps.gap.no_elbow)
    _write_text(out / "summary.json", _json(summary))
    if pair is not None and ref.shape == pair.reference.shape:
        pre = pair_errors(pair, DisplacementField.zeros(*ref.shape))
        post = pair_errors(pair, res.field)
        reduction = 1.0 - post["mean_rtre"] / pre["mean_rtre"] if pre["mean_rtre"] > 0 else 0.0
        _write_text(out / "metrics.json", _json({"pre": pre, "post": post, "rtre_reduction": reduction}))
    if cfg.figures:
        plotting.plot_loss_trace(res.loss_trace, out / "fig_loss.png")
        plotting.plot_registration_panel(ref, flt, res.registered, out / "fig_registration.png")
        if maps is not None:
            plotting.plot_gap(maps.gap, out / "fig_gap.png")
            plotting.plot_label_maps(maps.ref, maps.flt, out / "fig_labels.png")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _resolve(SynthConfig, args)
    out = Path(cfg.out_dir)
    _echo_config(cfg, out)
    pair = make_synth_pair(cfg)
    extra = {k: v for k, v in asdict(cfg).items() if k != "out_dir"}
    save_pair(pair, out, extra=extra)
    return EXIT_OK


def _load_mask(path: str, k: int, shape) -> LabelMap:
    img = load_image(path)
    if img.shape != shape:
        raise ValueError(f"{path}: mask is {img.width}x{img.height}, expected {shape[1]}x{shape[0]}")
    return LabelMap(np.rint(img.data * (k - 1)).astype(int), k)


def cmd_eval(args) -> int:
    cfg = _resolve(EvalConfig, args)
    out = Path(cfg.out_dir)
    _echo_config(cfg, out)
    fld = load_field(cfg.field)
    w, h = fld.width, fld.height
    record = MetricRecord(cfg.pair_id, w, h, *([float("nan")] * 4))
    if cfg.landmarks_ref:
        ref_lms = load_landmarks(cfg.landmarks_ref, "reference")
        flt_lms = load_landmarks(cfg.landmarks_flt, "floating")
        r = rtre(warp_points(ref_lms, fld), flt_lms, w, h)
        record = MetricRecord(cfg.pair_id, w, h, r.mean_tre, r.median_tre, r.mean_rtre, r.median_rtre,
                              landmark_rtre=[float(v) for v in r.rtre])
    if cfg.mask_ref:
        m_ref = _load_mask(cfg.mask_ref, cfg.n_classes, fld.shape)
        m_flt = _load_mask(cfg.mask_flt, cfg.n_classes, fld.shape)
        m_reg = LabelMap(warp_labels_nearest(m_flt.labels, fld), cfg.n_classes)
        for c in range(cfg.n_classes):
            record.dice[str(c)] = dice(m_ref, m_reg, c)
            if (m_ref.labels == c).any() and (m_reg.labels == c).any():
                record.hd95[str(c)] = hd95(m_ref, m_reg, c)
    report = MetricReport([record])
    _write_text(out / "metrics.json", report.to_json() + "\n")
    _write_text(out / "metrics.csv", report.to_csv())
    return EXIT_OK


def _ablation_csv(result) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["seed", "variant", "chosen_k", "pre_median_rtre", "median_rtre", "mean_rtre", "mean_epe"])
    for s in result.per_seed:
        for v in result.variants:
            m = s["variants"][v]
            writer.writerow([s["seed"], v, s["chosen_k"] if s["chosen_k"] is not None else "",
                             repr(s["pre"]["median_rtre"]), repr(m["median_rtre"]), repr(m["mean_rtre"]),
                             repr(m["mean_epe"])])
    return buf.getvalue()


def _summary_csv(rows) -> str:
    buf = io.StringIO()
    keys = ["variant", "n_seeds", "median_rtre", "median_over_landmarks_rtre", "mean_epe", "p_vs_full"]
    writer = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(r)
    return buf.getvalue()


def cmd_ablate(args) -> int:
    cfg = _resolve(SuiteConfig, args)
    out = Path(cfg.out_dir)
    _echo_config(cfg, out)
    result = run_ablation(cfg)
    rows = result.summary()
    _write_text(out / "ablation_per_seed.csv", _ablation_csv(result))
    _write_text(out / "ablation_summary.csv", _summary_csv(rows))
    table_rows = {r["variant"]: {"median rTRE": r["median_rtre"], "pooled": r["median_over_landmarks_rtre"]}
                  for r in rows}
    text = format_rtre_table(table_rows, ["median rTRE", "pooled"])
    if "full" in result.variants and "no-seg" in result.variants:
        try:
            text += f"paired Wilcoxon p (full vs no-seg): {result.wilcoxon_full_vs_noseg():.6g}\n"
        except ValueError as exc:
            text += f"paired Wilcoxon p (full vs no-seg): undefined ({exc})\n"
    _write_text(out / "ablation_table.txt", text)
    sys.stdout.write(text)
    if cfg.figures:
        plotting.plot_ablation(result, out / "fig_ablation.png")
    return EXIT_OK


def cmd_cluster_map(args) -> int:
    cfg = _resolve(PipelineConfig, args)
    ref, flt = load_image(args.ref), load_image(args.flt)
    out = Path(cfg.out_dir)
    _echo_config(cfg, out)
    maps = label_maps_for(ref, flt, cfg)
    save_image(maps.ref.to_image(), out / "labels_ref.png")
    save_image(maps.flt.to_image(), out / "labels_flt.png")
    _write_text(out / "gap.csv", maps.gap.to_csv())
    _write_text(out / "cluster_summary.json",
                _json({"chosen_k": maps.gap.chosen_k, "no_elbow": maps.gap.no_elbow,
                       "centroids": maps.centroids.tolist()}))
    if cfg.figures:
        plotting.plot_gap(maps.gap, out / "fig_gap.png")
        plotting.plot_label_maps(maps.ref, maps.flt, out / "fig_labels.png")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srnet", description="Structure-guided deformable image registration.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="register a floating image onto a reference")
    p.add_argument("ref", nargs="?", help="reference image (PNG or PGM/PPM)")
    p.add_argument("flt", nargs="?", help="floating image")
    p.add_argument("--manifest", help="synthetic pair manifest; adds ground-truth metrics")
    _add_config_flags(p, PipelineConfig)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("synth", help="write a synthetic pair with known field")
    _add_config_flags(p, SynthConfig)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="score a field against landmarks and masks")
    _add_config_flags(p, EvalConfig)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="compare loss variants over a seeded synthetic suite")
    _add_config_flags(p, SuiteConfig)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("cluster-map", help="features and clustering only")
    p.add_argument("ref", help="reference image")
    p.add_argument("flt", help="floating image")
    _add_config_flags(p, PipelineConfig)
    p.set_defaults(func=cmd_cluster_map)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except NonFiniteLoss as exc:
        print(f"srnet: non-finite loss: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except _IO_ERRORS as exc:
        print(f"srnet: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, TypeError) as exc:
        print(f"srnet: invalid argument: {exc}", file=sys.stderr)
        return EXIT_ARGS


if __name__ == "__main__":
    sys.exit(main())
