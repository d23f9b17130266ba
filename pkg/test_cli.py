"""
End-to-end tests of the command line, the pipeline and the file formats.

Each test works in its own tmp_path; solver runs use a miniature
configuration so the full synth -> solve -> eval chain stays quick.

Run with:
    pytest test_cli.py
"""

import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from main import EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, main
from src.config import (
    SolverConfig,
    dump_config_file,
    load_config_file,
    parse_config_lines,
    validate_config,
)
from src.image_io import (
    center_crop,
    read_image,
    read_kernel_text,
    write_image,
    write_kernel_image,
    write_kernel_text,
)
from src.pipeline import ACCEPT_CHECKS, acceptance_checks, bench_case, synthetic_scene
from src.run_manifest import MANIFEST_NAME, RunManifest, is_run_dir
from src.tensor_ad import Sigmoid

TINY_SOLVER_FLAGS = [
    "--iters", "1",
    "--samples", "2",
    "--meta-steps", "1",
    "--image-steps", "2",
    "--depth", "2",
    "--channels", "4",
    "--kernel-hidden", "32",
    "--set", "skip_channels=2",
    "--set", "z_x_channels=3",
]


@pytest.fixture
def hr_png(tmp_path):
    scene = synthetic_scene(np.random.default_rng(0), 64)
    return write_image(tmp_path / "scene.png", scene)


def _manifest(run_dir) -> dict:
    return json.loads((run_dir / MANIFEST_NAME).read_text())


def _read_metric_csv(path) -> dict:
    with open(path, newline="") as f:
        row = next(csv.DictReader(f))
    return {name: float(value) for name, value in row.items()}


# =============================================================================
# synth
# =============================================================================

def test_synth_delta_at_scale_one_reproduces_the_hr_image(tmp_path, hr_png):
    out = tmp_path / "synth"
    assert main(["synth", str(hr_png), "--out", str(out), "--mode", "delta", "--scale", "1"]) == EXIT_OK
    np.testing.assert_array_equal(read_image(out / "lr.png"), read_image(out / "hr.png"))
    k = read_kernel_text(out / "kernel.txt")
    assert k.shape == (7, 7) and k[3, 3] == 1.0


def test_synth_writes_test_case_and_manifest(tmp_path, hr_png):
    out = tmp_path / "synth"
    assert main(["synth", str(hr_png), "--out", str(out), "--seed", "3"]) == EXIT_OK

    assert read_image(out / "lr.png").shape == (32, 32, 1)
    k = read_kernel_text(out / "kernel.txt")
    assert k.shape == (11, 11)
    assert abs(k.sum() - 1.0) < 1e-9
    assert (out / "kernel.png").exists()
    assert is_run_dir(out)
    assert RunManifest(out).missing_outputs() == []
    assert _manifest(out)["runs"][0]["seed"] == 3


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_synth_ood_widths_are_in_the_wide_range(tmp_path, hr_png, seed):
    out = tmp_path / f"ood{seed}"
    assert main(["synth", str(hr_png), "--out", str(out), "--mode", "ood", "--seed", str(seed)]) == EXIT_OK
    kernel = RunManifest(out).get_run("synth")["metrics"]["kernel"]
    assert 0.7 <= kernel["sigma1"] <= 10.0
    assert 0.7 <= kernel["sigma2"] <= 10.0


def test_synth_is_deterministic_for_a_seed(tmp_path, hr_png):
    for name in ("a", "b"):
        assert main(["synth", str(hr_png), "--out", str(tmp_path / name), "--noise", "0.01", "--seed", "9"]) == EXIT_OK
    assert (tmp_path / "a" / "lr.png").read_bytes() == (tmp_path / "b" / "lr.png").read_bytes()
    assert (tmp_path / "a" / "kernel.txt").read_text() == (tmp_path / "b" / "kernel.txt").read_text()


def test_synth_rejects_small_and_missing_images(tmp_path):
    small = write_image(tmp_path / "small.png", np.zeros((16, 40, 1)))
    assert main(["synth", str(small), "--out", str(tmp_path / "o1")]) == EXIT_USAGE
    assert main(["synth", str(tmp_path / "missing.png"), "--out", str(tmp_path / "o2")]) == EXIT_USAGE


# =============================================================================
# solve and eval
# =============================================================================

def test_synth_solve_eval_chain(tmp_path, hr_png):
    synth_dir, solve_dir = tmp_path / "synth", tmp_path / "solve"
    assert main(["synth", str(hr_png), "--out", str(synth_dir)]) == EXIT_OK
    assert main(["solve", str(synth_dir), "--out", str(solve_dir)] + TINY_SOLVER_FLAGS) == EXIT_OK

    sr = read_image(solve_dir / "sr.png")
    assert sr.shape == (64, 64, 1)
    k_est = read_kernel_text(solve_dir / "kernel_est.txt")
    assert k_est.shape == (11, 11)
    assert abs(k_est.sum() - 1.0) < 1e-9
    assert RunManifest(solve_dir).missing_outputs() == []

    run = RunManifest(solve_dir).get_run("solve")
    assert {"image_psnr", "image_ssim", "kernel_psnr", "bicubic_psnr"} <= set(run["metrics"])

    with open(solve_dir / "trace.csv", newline="") as f:
        phases = [row["phase"] for row in csv.DictReader(f)]
    assert phases == ["MCKA", "MLAO"]

    assert main(["eval", str(solve_dir), str(synth_dir)]) == EXIT_OK
    metrics = _read_metric_csv(solve_dir / "eval.csv")
    assert set(metrics) == {"image_psnr", "image_ssim", "kernel_psnr"}


def test_solve_with_zero_iterations(tmp_path, hr_png):
    synth_dir = tmp_path / "synth"
    assert main(["synth", str(hr_png), "--out", str(synth_dir)]) == EXIT_OK
    flags = TINY_SOLVER_FLAGS + ["--iters", "0"]
    assert main(["solve", str(synth_dir / "lr.png"), "--out", str(tmp_path / "solve")] + flags) == EXIT_OK
    assert (tmp_path / "solve" / "trace.csv").read_text().splitlines()[1:] == []


def test_solve_is_deterministic_for_a_seed(tmp_path, hr_png):
    synth_dir = tmp_path / "synth"
    assert main(["synth", str(hr_png), "--out", str(synth_dir)]) == EXIT_OK
    for name in ("a", "b"):
        argv = ["solve", str(synth_dir / "lr.png"), "--out", str(tmp_path / name), "--seed", "5"]
        assert main(argv + TINY_SOLVER_FLAGS) == EXIT_OK
    assert (tmp_path / "a" / "sr.png").read_bytes() == (tmp_path / "b" / "sr.png").read_bytes()
    assert (tmp_path / "a" / "kernel_est.txt").read_text() == (tmp_path / "b" / "kernel_est.txt").read_text()


def test_solve_can_start_from_saved_networks(tmp_path, hr_png):
    synth_dir = tmp_path / "synth"
    assert main(["synth", str(hr_png), "--out", str(synth_dir)]) == EXIT_OK
    first, second = tmp_path / "first", tmp_path / "second"
    assert main(["solve", str(synth_dir), "--out", str(first)] + TINY_SOLVER_FLAGS) == EXIT_OK
    argv = ["solve", str(synth_dir), "--out", str(second), "--init-from", str(first / "networks"), "--seed", "42"]
    assert main(argv + TINY_SOLVER_FLAGS + ["--iters", "0"]) == EXIT_OK
    assert (first / "sr.png").read_bytes() == (second / "sr.png").read_bytes()


def test_solve_several_inputs_into_subdirectories(tmp_path, hr_png):
    lr_a = write_image(tmp_path / "a.png", np.random.default_rng(1).random((16, 16, 1)))
    lr_b = write_image(tmp_path / "b.png", np.random.default_rng(2).random((16, 16, 3)))
    out = tmp_path / "solve"
    assert main(["solve", str(lr_a), str(lr_b), "--out", str(out)] + TINY_SOLVER_FLAGS) == EXIT_OK
    assert read_image(out / "a" / "sr.png").shape == (32, 32, 1)
    assert read_image(out / "b" / "sr.png").shape == (32, 32, 3)


def test_solve_usage_errors(tmp_path):
    lr = write_image(tmp_path / "lr.png", np.zeros((16, 16, 1)))
    assert main(["solve", str(lr), "--set", "bogus=1"]) == EXIT_USAGE
    assert main(["solve", str(lr), "--eta", "2"]) == EXIT_USAGE
    assert main(["solve", str(lr), str(lr), "--gt-hr", str(lr)]) == EXIT_USAGE
    assert main(["solve", str(tmp_path / "missing.png"), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    with pytest.raises(SystemExit) as excinfo:
        main(["solve"])
    assert excinfo.value.code == EXIT_USAGE


def test_eval_of_identical_images(tmp_path, capsys):
    image = write_image(tmp_path / "x.png", synthetic_scene(np.random.default_rng(3), 32, channels=3))
    out_csv = tmp_path / "metrics.csv"
    assert main(["eval", str(image), str(image), "--luma", "--csv", str(out_csv)]) == EXIT_OK
    metrics = _read_metric_csv(out_csv)
    assert metrics["image_psnr"] == 100.0
    assert metrics["luma_psnr"] == 100.0
    assert metrics["image_ssim"] == pytest.approx(1.0, abs=1e-12)
    assert capsys.readouterr().out.splitlines()[0] == "image_psnr,image_ssim,luma_psnr"


def test_eval_shape_mismatch_is_a_usage_error(tmp_path):
    a = write_image(tmp_path / "a.png", np.zeros((32, 32, 1)))
    b = write_image(tmp_path / "b.png", np.zeros((32, 40, 1)))
    assert main(["eval", str(a), str(b)]) == EXIT_USAGE


# =============================================================================
# gradcheck and bench
# =============================================================================

def test_gradcheck_passes():
    assert main(["gradcheck", "--trials", "2", "--seed", "1"]) == EXIT_OK


def test_gradcheck_fails_on_a_broken_backward(monkeypatch):
    monkeypatch.setattr(Sigmoid, "backward", lambda self, grad: (2.0 * grad,))
    assert main(["gradcheck", "--trials", "2"]) == EXIT_NUMERICAL


def test_bench_writes_one_row_per_seed_and_variant(tmp_path):
    out = tmp_path / "bench"
    argv = ["bench", "--seeds", "0", "--variants", "full", "no-mc", "--hr-size", "32", "--out", str(out)]
    assert main(argv + TINY_SOLVER_FLAGS) == EXIT_OK
    with open(out / "bench.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [(row["seed"], row["variant"]) for row in rows] == [("0", "full"), ("0", "no-mc")]
    # Both variants see the same observation
    assert rows[0]["bicubic_psnr"] == rows[1]["bicubic_psnr"]
    assert all(row[column] in ("True", "False") for row in rows for column in ACCEPT_CHECKS + ("passed",))


def test_acceptance_checks_apply_each_threshold():
    row = {"lr_loss_ratio": 0.1, "image_psnr": 27.5, "bicubic_psnr": 27.0, "kernel_psnr": 35.0}
    assert acceptance_checks(row) == {"lr_ok": True, "psnr_ok": True, "kernel_ok": True, "passed": True}

    worse = dict(row, lr_loss_ratio=0.2, image_psnr=27.4)
    checks = acceptance_checks(worse)
    assert checks == {"lr_ok": False, "psnr_ok": False, "kernel_ok": True, "passed": False}


@pytest.mark.slow
def test_desk_scale_run_cuts_the_lr_loss_tenfold():
    row = bench_case(SolverConfig(iters=30), seed=0, variant="full", hr_size=128)
    assert row["lr_loss_ratio"] <= 0.1
    assert row["lr_ok"]


# =============================================================================
# Configuration
# =============================================================================

def test_config_dump_and_load_round_trip(tmp_path):
    cfg = SolverConfig(
        scale=3,
        image_steps=3,
        meta_weights=[0.5, 1.0, 2.0],
        width_range=(0.5, 2.0),
        no_meta=True,
        gamma_x=1.0 / 3.0,
    )
    path = dump_config_file(cfg, tmp_path / "cfg.txt")
    assert load_config_file(path) == cfg


def test_config_command_dumps_the_effective_config(tmp_path):
    path = tmp_path / "effective.txt"
    assert main(["config", "--scale", "4", "--no-mc", "--set", "rho_reg = 0", "--dump", str(path)]) == EXIT_OK
    cfg = load_config_file(path)
    assert cfg.scale == 4 and cfg.no_mc and cfg.rho_reg == 0.0
    assert cfg.kernel_side == 19


def test_config_lines_reject_unknown_keys_and_bad_values():
    with pytest.raises(ValueError, match="Unknown config key 'bogus'"):
        parse_config_lines(["bogus = 1"])
    with pytest.raises(ValueError, match="boolean"):
        parse_config_lines(["no_mc = maybe"])
    with pytest.raises(ValueError, match="two comma-separated"):
        parse_config_lines(["angle_range = 1.0"])
    with pytest.raises(ValueError, match="not 'key = value'"):
        parse_config_lines(["scale 2"])


def test_config_lines_ignore_comments_and_blanks():
    cfg = parse_config_lines(["# header", "", "iters = 7  # short run", "ood_kernels = yes"])
    assert cfg.iters == 7 and cfg.ood_kernels
    assert cfg.resolved_width_range() == pytest.approx((0.7, 10.0))


def test_validate_config_collects_every_error():
    result = validate_config(SolverConfig(scale=0, mc_samples=0, kernel_family="box"))
    assert result["valid"] is False
    assert len(result["errors"]) == 3


def test_config_module_runs_as_a_script():
    config_path = Path(__file__).parent / "src" / "config.py"
    completed = subprocess.run(
        [sys.executable, str(config_path)], capture_output=True, text=True, cwd=config_path.parent, timeout=120
    )
    assert completed.returncode == 0, completed.stderr
    assert "Configuration Status" in completed.stdout
    assert "kernel_side (derived): 11" in completed.stdout


# =============================================================================
# File formats
# =============================================================================

@pytest.mark.parametrize("suffix, channels", [(".png", 1), (".png", 3), (".pgm", 1), (".ppm", 3)])
def test_image_round_trip_within_quantization(tmp_path, suffix, channels):
    image = np.random.default_rng(channels).random((9, 13, channels))
    back = read_image(write_image(tmp_path / f"x{suffix}", image))
    assert back.shape == image.shape
    assert np.max(np.abs(back - image)) <= 0.5 / 255 + 1e-12


def test_image_writer_checks_format_and_channels(tmp_path):
    with pytest.raises(ValueError, match="Unsupported image format"):
        write_image(tmp_path / "x.jpg", np.zeros((4, 4, 1)))
    with pytest.raises(ValueError, match="PGM"):
        write_image(tmp_path / "x.pgm", np.zeros((4, 4, 3)))


def test_unreadable_image_is_reported(tmp_path):
    path = tmp_path / "broken.png"
    path.write_bytes(b"not an image")
    with pytest.raises(ValueError, match="Cannot read image"):
        read_image(path)


def test_kernel_text_round_trip_is_exact(tmp_path):
    k = np.random.default_rng(0).random((11, 11))
    k /= k.sum()
    np.testing.assert_array_equal(read_kernel_text(write_kernel_text(tmp_path / "k.txt", k)), k)


def test_kernel_image_is_max_normalized(tmp_path):
    k = np.zeros((5, 5))
    k[2, 2], k[2, 3] = 0.8, 0.2
    picture = read_image(write_kernel_image(tmp_path / "k.png", k))
    assert picture[2, 2, 0] == 1.0
    assert picture[2, 3, 0] == pytest.approx(64 / 255)


def test_center_crop_keeps_the_middle():
    image = np.arange(10 * 7, dtype=float).reshape(10, 7, 1)
    cropped = center_crop(image, 4)
    assert cropped.shape == (8, 4, 1)
    np.testing.assert_array_equal(cropped, image[1:9, 1:5])


# =============================================================================
# Run manifest
# =============================================================================

def test_manifest_replaces_entries_and_tracks_outputs(tmp_path):
    manifest = RunManifest(tmp_path)
    output = tmp_path / "sr.png"
    output.write_bytes(b"")
    manifest.record("solve", outputs={"sr": output}, seed=1)
    manifest.record("solve", outputs={"sr": output}, seed=2)

    data = manifest.load()
    assert data["metadata"]["total_runs"] == 1
    assert data["runs"][0]["seed"] == 2
    assert data["runs"][0]["outputs"]["sr"] == "sr.png"
    assert manifest.output_path("sr", "solve") == tmp_path / "sr.png"
    assert manifest.output_path("sr", "synth") is None

    output.unlink()
    assert manifest.missing_outputs() == ["sr.png"]


def test_corrupted_manifest_is_reported(tmp_path):
    (tmp_path / MANIFEST_NAME).write_text("{not json")
    with pytest.raises(ValueError, match="Corrupted manifest"):
        RunManifest(tmp_path).get_run("solve")
