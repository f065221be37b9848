import json
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from pointsplat.cli import cli_main
from pointsplat.losses import psnr
from pointsplat.rasterizer import render
from pointsplat.storage import (load_float_sidecar, load_image,
                                save_cameras, save_image, save_point_cloud)
from pointsplat.synth import random_cloud, ring_cameras


@pytest.fixture
def sample_paths():
    base = resources.files("pointsplat") / "data"
    with resources.as_file(base / "sample.ply") as ply, \
            resources.as_file(base / "sample_cameras.json") as cams:
        yield str(ply), str(cams)


def make_fit_inputs(tmp_path, n_points=20, size=40, n_views=3, seed=6):
    from pointsplat.fit import init_from_cloud
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, n_points, extent=0.7)
    cloud_path = tmp_path / "cloud.ply"
    save_point_cloud(cloud_path, cloud)
    cams = ring_cameras(n_views, 4.0, size, size)
    cam_path = tmp_path / "cams.json"
    save_cameras(cam_path, cams)
    scene = init_from_cloud(cloud, seed=seed)
    scene.raw_opacity[:] = 1.0
    targets = tmp_path / "targets"
    targets.mkdir()
    for i, cam in enumerate(cams):
        save_image(render(scene, cam), targets / f"target_{i:02d}.png")
    return cloud_path, cam_path, targets


class TestUsage:
    def test_no_verb(self, capsys):
        assert cli_main([]) == 1

    def test_unknown_verb(self):
        assert cli_main(["transmogrify"]) == 1

    def test_unknown_flag(self):
        assert cli_main(["render", "--frobnicate"]) == 1

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as e:
            cli_main(["--version"])
        assert e.value.code == 0


class TestRenderVerb:
    def test_sample_scene_writes_png_per_camera(self, sample_paths, tmp_path):
        ply, cams = sample_paths
        out = tmp_path / "out"
        code = cli_main(["render", "--cloud", ply, "--cameras", cams,
                         "--out", str(out)])
        assert code == 0
        pngs = sorted(out.glob("*.png"))
        assert [p.name for p in pngs] == ["render_000.png", "render_001.png"]

    def test_feature_payload_planes(self, sample_paths, tmp_path):
        ply, cams = sample_paths
        out = tmp_path / "out"
        code = cli_main(["render", "--cloud", ply, "--cameras", cams,
                         "--out", str(out), "--payload", "feature",
                         "--feature-dim", "4"])
        assert code == 0
        assert sorted(p.name for p in out.glob("render_000*.png")) == \
            [f"render_000_f{k}.png" for k in range(4)]

    def test_missing_cloud_is_io_error(self, sample_paths, tmp_path):
        _, cams = sample_paths
        code = cli_main(["render", "--cloud", str(tmp_path / "nope.ply"),
                         "--cameras", cams, "--out", str(tmp_path / "o")])
        assert code == 2

    def test_malformed_ply_is_validation_error(self, sample_paths, tmp_path):
        _, cams = sample_paths
        bad = tmp_path / "bad.ply"
        bad.write_text("not a ply\n")
        code = cli_main(["render", "--cloud", str(bad), "--cameras", cams,
                         "--out", str(tmp_path / "o")])
        assert code == 1

    def test_malformed_cameras_is_validation_error(self, sample_paths, tmp_path):
        ply, _ = sample_paths
        bad = tmp_path / "bad.json"
        bad.write_text("{ not json")
        code = cli_main(["render", "--cloud", ply, "--cameras", str(bad),
                         "--out", str(tmp_path / "o")])
        assert code == 1

    def test_deterministic_outputs(self, sample_paths, tmp_path):
        ply, cams = sample_paths
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert cli_main(["render", "--cloud", ply, "--cameras", cams,
                             "--out", str(out), "--seed", "4"]) == 0
        assert (a / "render_000.png").read_bytes() == (b / "render_000.png").read_bytes()

    def test_thread_cap_env(self, sample_paths, tmp_path, monkeypatch):
        ply, cams = sample_paths
        monkeypatch.setenv("PFGS_THREADS", "1")
        out1 = tmp_path / "o1"
        assert cli_main(["render", "--cloud", ply, "--cameras", cams,
                         "--out", str(out1)]) == 0
        monkeypatch.setenv("PFGS_THREADS", "0")
        out2 = tmp_path / "o2"
        assert cli_main(["render", "--cloud", ply, "--cameras", cams,
                         "--out", str(out2)]) == 0
        assert (out1 / "render_001.png").read_bytes() == (out2 / "render_001.png").read_bytes()


class TestGradcheckVerb:
    def test_reports_byte_identical(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        for out in (a, b):
            code = cli_main(["gradcheck", "--seed", "7", "--count", "2",
                             "--gaussians", "6", "--size", "16x16",
                             "--out", str(out)])
            assert code == 0
        assert a.read_bytes() == b.read_bytes()

    def test_report_contents(self, tmp_path):
        out = tmp_path / "r.json"
        assert cli_main(["gradcheck", "--seed", "1", "--count", "1",
                         "--gaussians", "5", "--size", "16x16",
                         "--out", str(out)]) == 0
        doc = json.loads(out.read_text())
        assert doc["overall"]["fraction_within_tolerance"] >= 0.99
        assert doc["overall"]["n_checked"] > 0


class TestFitVerb:
    def test_fit_then_render_matches_reported_psnr(self, tmp_path):
        cloud_path, cam_path, targets = make_fit_inputs(tmp_path)
        ckpt = tmp_path / "scene.ckpt"
        code = cli_main(["fit", "--cloud", str(cloud_path), "--cameras", str(cam_path),
                         "--targets", str(targets), "--out", str(ckpt),
                         "--steps", "40", "--seed", "3", "--eval-every", "20"])
        assert code == 0
        report = json.loads(Path(f"{ckpt}.report.json").read_text())
        assert len(report["losses"]) == 40

        out = tmp_path / "rendered"
        code = cli_main(["render", "--cloud", str(cloud_path), "--cameras", str(cam_path),
                         "--out", str(out), "--checkpoint", str(ckpt), "--sidecar"])
        assert code == 0
        target_paths = sorted(targets.glob("*.png"))
        got = []
        for i, tp in enumerate(target_paths):
            payload = load_float_sidecar(out / f"render_{i:03d}_payload.bin")
            got.append(psnr(payload, load_image(tp)))
        reported = report["eval_psnr"][-1]
        assert np.abs(np.array(got) - np.array(reported)).max() < 0.01

    def test_fit_deterministic_checkpoints(self, tmp_path):
        cloud_path, cam_path, targets = make_fit_inputs(tmp_path)
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        for out in (a, b):
            assert cli_main(["fit", "--cloud", str(cloud_path), "--cameras", str(cam_path),
                             "--targets", str(targets), "--out", str(out),
                             "--steps", "12", "--seed", "9"]) == 0
        assert a.read_bytes() == b.read_bytes()
        ra = json.loads(Path(f"{a}.report.json").read_text())
        rb = json.loads(Path(f"{b}.report.json").read_text())
        assert ra["losses"] == rb["losses"]

    def test_target_count_mismatch(self, tmp_path):
        cloud_path, cam_path, targets = make_fit_inputs(tmp_path)
        extra = targets / "zzz_extra.png"
        save_image(np.zeros((40, 40, 3)), extra)
        code = cli_main(["fit", "--cloud", str(cloud_path), "--cameras", str(cam_path),
                         "--targets", str(targets), "--out", str(tmp_path / "x.ckpt"),
                         "--steps", "1"])
        assert code == 1

    def test_toml_config(self, tmp_path):
        cloud_path, cam_path, targets = make_fit_inputs(tmp_path)
        cfg = tmp_path / "fit.toml"
        cfg.write_text("steps = 5\nseed = 2\nlr_color = 0.01\n")
        ckpt = tmp_path / "scene.ckpt"
        assert cli_main(["fit", "--cloud", str(cloud_path), "--cameras", str(cam_path),
                         "--targets", str(targets), "--out", str(ckpt),
                         "--config", str(cfg)]) == 0
        report = json.loads(Path(f"{ckpt}.report.json").read_text())
        assert len(report["losses"]) == 5

    def test_bad_toml_key(self, tmp_path):
        cloud_path, cam_path, targets = make_fit_inputs(tmp_path)
        cfg = tmp_path / "fit.toml"
        cfg.write_text("warp_speed = 9\n")
        assert cli_main(["fit", "--cloud", str(cloud_path), "--cameras", str(cam_path),
                         "--targets", str(targets), "--out", str(tmp_path / "x.ckpt"),
                         "--config", str(cfg)]) == 1


class TestLossEvalVerb:
    def test_identical_dirs_zero_losses(self, tmp_path):
        rng = np.random.default_rng(0)
        pred, gt = tmp_path / "pred", tmp_path / "gt"
        pred.mkdir(), gt.mkdir()
        for i in range(2):
            img = rng.uniform(size=(16, 16, 3))
            save_image(img, pred / f"{i}.png")
            save_image(img, gt / f"{i}.png")
        out = tmp_path / "losses.json"
        assert cli_main(["loss-eval", "--pred", str(pred), "--gt", str(gt),
                         "--out", str(out)]) == 0
        doc = json.loads(out.read_text())
        assert doc["summary"]["l_gs"] == 0.0
        assert doc["summary"]["total"] == 0.0

    def test_custom_weights_change_total(self, tmp_path):
        rng = np.random.default_rng(1)
        pred, gt = tmp_path / "pred", tmp_path / "gt"
        pred.mkdir(), gt.mkdir()
        save_image(rng.uniform(size=(16, 16, 3)), pred / "a.png")
        save_image(rng.uniform(size=(16, 16, 3)), gt / "a.png")
        out1, out2 = tmp_path / "w1.json", tmp_path / "w2.json"
        assert cli_main(["loss-eval", "--pred", str(pred), "--gt", str(gt),
                         "--out", str(out1)]) == 0
        assert cli_main(["loss-eval", "--pred", str(pred), "--gt", str(gt),
                         "--weights", "1,0,0", "--out", str(out2)]) == 0
        d1, d2 = json.loads(out1.read_text()), json.loads(out2.read_text())
        assert d1["summary"]["total"] != d2["summary"]["total"]
        assert d2["summary"]["total"] == pytest.approx(d2["summary"]["l_gs"])

    def test_count_mismatch(self, tmp_path):
        pred, gt = tmp_path / "pred", tmp_path / "gt"
        pred.mkdir(), gt.mkdir()
        save_image(np.zeros((8, 8, 3)), pred / "a.png")
        assert cli_main(["loss-eval", "--pred", str(pred), "--gt", str(gt)]) == 1

    def test_missing_dir_is_io_error(self, tmp_path):
        pred = tmp_path / "pred"
        pred.mkdir()
        save_image(np.zeros((8, 8, 3)), pred / "a.png")
        assert cli_main(["loss-eval", "--pred", str(pred),
                         "--gt", str(tmp_path / "nope")]) == 2
