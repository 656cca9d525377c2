import json

import numpy as np
import pytest

from srnet import cli, pipeline
from srnet.errors import NonFiniteLoss
from srnet.imaging import Image, LandmarkSet, save_image, save_landmarks
from srnet.warp import DisplacementField, save_field

FAST = ["--iters-per-level", "60", "--B", "3", "--k-max", "6", "--figures", "false"]


def _run(argv, capsys=None):
    code = cli.main([str(a) for a in argv])
    return code


def _synth(out, *extra):
    return _run(["synth", "--out-dir", out, "--width", 48, "--height", 48, "--amplitude", 3, "--sigma", 6,
                 "--n-landmarks", 10, *extra])


def test_synth_deterministic(tmp_path):
    assert _synth(tmp_path / "a") == 0
    assert _synth(tmp_path / "b") == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "manifest.json" in names and "effective_config.json" in names
    for name in set(names) - {"effective_config.json"}:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_amplitude_zero_identical(tmp_path):
    assert _synth(tmp_path, "--amplitude", 0, "--noise-std", 0) == 0
    assert (tmp_path / "reference.png").read_bytes() == (tmp_path / "floating.png").read_bytes()


def test_synth_manifest_lists_files(tmp_path):
    assert _synth(tmp_path, "--mode", "structured", "--n-regions", 3) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    listed = {e["path"] for e in manifest["files"].values()}
    on_disk = {p.name for p in tmp_path.iterdir()} - {"manifest.json", "effective_config.json"}
    assert listed == on_disk
    for e in manifest["files"].values():
        assert (tmp_path / e["path"]).stat().st_size == e["bytes"]


def test_effective_config_echo_and_override(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"amplitude": 2.0, "seed": 5, "width": 40}))
    out = tmp_path / "o"
    assert _run(["synth", "--config", cfg_path, "--seed", 7, "--out-dir", out, "--height", 40]) == 0
    echoed = json.loads((out / "effective_config.json").read_text())
    assert echoed["amplitude"] == 2.0 and echoed["seed"] == 7 and echoed["width"] == 40
    assert echoed["noise_std"] == 0.01
    assert json.loads(capsys.readouterr().out) == echoed
    # rerunning from the echoed config reproduces the artifacts
    again = tmp_path / "again"
    assert _run(["synth", "--config", out / "effective_config.json", "--out-dir", again]) == 0
    for name in ("reference.png", "floating.png", "true_field.srfd"):
        assert (out / name).read_bytes() == (again / name).read_bytes()


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"amplitud": 2.0}))
    assert _run(["synth", "--config", cfg_path, "--out-dir", tmp_path]) == 2
    assert "amplitud" in capsys.readouterr().err


def test_bad_config_type_rejected(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"width": "wide"}))
    assert _run(["synth", "--config", cfg_path, "--out-dir", tmp_path]) == 2


def test_bad_flag_exit_2(tmp_path):
    assert _run(["synth", "--no-such-flag", 1]) == 2
    assert _run(["synth", "--width", "abc"]) == 2
    assert _run(["nonsense"]) == 2


def test_missing_config_file_exit_3(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert _run(["synth", "--config", missing]) == 3
    assert str(missing) in capsys.readouterr().err


def test_register_missing_image_exit_3(tmp_path, capsys):
    missing = tmp_path / "missing.png"
    save_image(Image(np.zeros((16, 16))), tmp_path / "ok.png")
    assert _run(["register", missing, tmp_path / "ok.png", "--out-dir", tmp_path / "o"]) == 3
    assert str(missing) in capsys.readouterr().err


def test_register_needs_inputs(tmp_path):
    assert _run(["register", "--out-dir", tmp_path]) == 2


def test_register_nonfinite_exit_4(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise NonFiniteLoss("diverged", [])

    monkeypatch.setattr(cli, "register_images", boom)
    save_image(Image(np.zeros((16, 16))), tmp_path / "a.png")
    assert _run(["register", tmp_path / "a.png", tmp_path / "a.png", "--out-dir", tmp_path / "o"]) == 4


def test_register_identical_pair(tmp_path):
    img = Image(np.random.default_rng(0).random((32, 32)))
    save_image(img, tmp_path / "a.png")
    out = tmp_path / "o"
    assert _run(["register", tmp_path / "a.png", tmp_path / "a.png", "--out-dir", out, *FAST[:-2]]) == 0
    expected = {"registered.png", "field.srfd", "labels_ref.png", "labels_flt.png", "gap.csv",
                "loss_trace.jsonl", "diff_before.png", "diff_after.png", "checkerboard.png",
                "effective_config.json", "summary.json", "fig_loss.png", "fig_registration.png",
                "fig_gap.png", "fig_labels.png"}
    assert expected <= {p.name for p in out.iterdir()}
    summary = json.loads((out / "summary.json").read_text())
    assert summary["mean_abs_displacement"] < 0.05
    assert summary["final"]["total"] <= summary["initial"]["total"]
    from srnet.imaging import load_image
    assert load_image(out / "diff_after.png").data.max() <= load_image(out / "diff_before.png").data.max()
    for line in (out / "loss_trace.jsonl").read_text().splitlines():
        assert {"iter", "total", "sim", "smooth", "seg"} <= set(json.loads(line))


def test_register_with_manifest_reports_reduction(tmp_path):
    assert _run(["synth", "--out-dir", tmp_path / "s", "--width", 64, "--height", 64, "--amplitude", 4,
                 "--sigma", 8, "--seed", 1]) == 0
    out = tmp_path / "r"
    assert _run(["register", "--manifest", tmp_path / "s" / "manifest.json", "--out-dir", out,
                 "--figures", "false"]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["rtre_reduction"] >= 0.8


def test_register_byte_identical_reruns(tmp_path):
    assert _synth(tmp_path / "s") == 0
    for name in ("r1", "r2"):
        assert _run(["register", "--manifest", tmp_path / "s" / "manifest.json", "--out-dir", tmp_path / name,
                     *FAST]) == 0
    for f in ("field.srfd", "registered.png", "loss_trace.jsonl", "labels_ref.png", "gap.csv"):
        assert (tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes()


def test_cluster_map(tmp_path):
    img = Image(np.random.default_rng(1).random((24, 24)))
    save_image(img, tmp_path / "a.png")
    out = tmp_path / "c"
    assert _run(["cluster-map", tmp_path / "a.png", tmp_path / "a.png", "--out-dir", out, "--B", 3,
                 "--k-max", 5]) == 0
    summary = json.loads((out / "cluster_summary.json").read_text())
    assert 2 <= summary["chosen_k"] <= 5
    assert (out / "gap.csv").read_text().startswith("k,Wk,gap,sk")
    assert (out / "labels_ref.png").read_bytes() == (out / "labels_flt.png").read_bytes()
    assert (out / "fig_gap.png").exists()


def _eval_inputs(tmp_path, n_ref=4, n_flt=4):
    rng = np.random.default_rng(0)
    pts = rng.random((n_ref, 2)) * 10 + 2
    save_landmarks(LandmarkSet(pts, "reference"), tmp_path / "ref.csv")
    save_landmarks(LandmarkSet(pts[:n_flt], "floating"), tmp_path / "flt.csv")
    save_field(DisplacementField.zeros(16, 16), tmp_path / "zero.srfd")


def test_eval_zero_field_identical_landmarks(tmp_path):
    _eval_inputs(tmp_path)
    out = tmp_path / "e"
    assert _run(["eval", "--field", tmp_path / "zero.srfd", "--landmarks-ref", tmp_path / "ref.csv",
                 "--landmarks-flt", tmp_path / "flt.csv", "--out-dir", out]) == 0
    rec = json.loads((out / "metrics.json").read_text())["records"][0]
    assert rec["mean_rtre"] == 0.0 and all(v == 0.0 for v in rec["landmark_rtre"])
    assert (out / "metrics.csv").exists()


def test_eval_mismatched_counts_exit_2(tmp_path):
    _eval_inputs(tmp_path, 4, 3)
    assert _run(["eval", "--field", tmp_path / "zero.srfd", "--landmarks-ref", tmp_path / "ref.csv",
                 "--landmarks-flt", tmp_path / "flt.csv", "--out-dir", tmp_path / "e"]) == 2


def test_eval_true_field_gives_zero_rtre(tmp_path):
    assert _synth(tmp_path / "s", "--mode", "structured", "--n-regions", 3) == 0
    s = tmp_path / "s"
    out = tmp_path / "e"
    save_image(Image(np.zeros((48, 48))), tmp_path / "dummy.png")
    assert _run(["eval", "--field", s / "true_field.srfd", "--landmarks-ref", s / "landmarks_ref.csv",
                 "--landmarks-flt", s / "landmarks_flt.csv", "--mask-ref", s / "ref_regions.png",
                 "--mask-flt", s / "ref_regions.png", "--n-classes", 3, "--out-dir", out]) == 0
    rec = json.loads((out / "metrics.json").read_text())["records"][0]
    assert max(rec["landmark_rtre"]) <= 1e-6
    assert set(rec["dice"]) == {"0", "1", "2"}


def test_ablate_contract(tmp_path, monkeypatch):
    monkeypatch.setenv("SRNET_THREADS", "1")
    out = tmp_path / "a"
    assert _run(["ablate", "--seeds", "0,1,2,3,4,5", "--variants", "full,no-seg,mse-only,cc-only",
                 "--width", 32, "--height", 32, "--amplitude", 2, "--sigma", 6, "--n-landmarks", 8,
                 "--out-dir", out, *FAST[:-2]]) == 0
    rows = (out / "ablation_summary.csv").read_text().splitlines()
    assert rows[0].split(",") == ["variant", "n_seeds", "median_rtre", "median_over_landmarks_rtre",
                                  "mean_epe", "p_vs_full"]
    assert [r.split(",")[0] for r in rows[1:]] == ["full", "no-seg", "mse-only", "cc-only"]
    assert all(r.split(",")[2] for r in rows[1:])
    assert "paired Wilcoxon p (full vs no-seg)" in (out / "ablation_table.txt").read_text()
    assert len((out / "ablation_per_seed.csv").read_text().splitlines()) == 1 + 6 * 4
    assert (out / "fig_ablation.png").exists()


def test_ablate_two_variants(tmp_path, monkeypatch):
    monkeypatch.setenv("SRNET_THREADS", "1")
    out = tmp_path / "a"
    assert _run(["ablate", "--seeds", "0,1", "--variants", "full,no-seg", "--width", 32, "--height", 32,
                 "--amplitude", 2, "--sigma", 6, "--n-landmarks", 5, "--out-dir", out, *FAST]) == 0
    rows = (out / "ablation_summary.csv").read_text().splitlines()
    assert len(rows) == 3
    assert "undefined" in (out / "ablation_table.txt").read_text()


def test_ablate_unknown_variant(tmp_path):
    assert _run(["ablate", "--variants", "full,fancy", "--out-dir", tmp_path]) == 2


def test_threads_env(monkeypatch):
    monkeypatch.setenv("SRNET_THREADS", "2")
    assert pipeline.worker_count(8, 20) == 2
    assert pipeline.worker_count(8, 1) == 1
    monkeypatch.setenv("SRNET_THREADS", "zero")
    with pytest.raises(ValueError):
        pipeline.worker_count(0, 5)
    monkeypatch.delenv("SRNET_THREADS")
    assert pipeline.worker_count(3, 10) == 3
