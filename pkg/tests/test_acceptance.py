"""Acceptance suite: every primary criterion at its stated tolerance.

Each test prints one PASS line with the measured numbers; thresholds live in
acceptance_config.toml next to this file.
"""

import sys
import time
from pathlib import Path

import numpy as np
import pytest

if sys.version_info >= (3, 11):
    import tomllib as toml
else:
    import tomli as toml

from pointsplat.cli import cli_main
from pointsplat.fit import FitConfig, fit_features, fit_gaussians, init_from_cloud
from pointsplat.losses import (LossWeights, PredictionPyramid,
                               default_loop_weights, frequency_loss, l1_loss,
                               progressive_multiscale_image_loss,
                               total_loss)
from pointsplat.rasterizer import alpha_blend, render, render_reference
from pointsplat.storage import (load_checkpoint, load_point_cloud,
                                save_checkpoint, save_point_cloud)
from pointsplat.synth import (frontal_camera, perturb_scene, random_cloud,
                              random_rigid, random_scene, ring_cameras,
                              transform_camera, transform_scene)
from tests.test_losses import direct_dft_loss

CFG = toml.loads((Path(__file__).parent / "acceptance_config.toml").read_text())


def report(n, text):
    print(f"ACCEPTANCE {n} PASS: {text}")


def test_criterion_01_oracle_equivalence():
    cfg = CFG["oracle_equivalence"]
    camera = frontal_camera(cfg["image_size"], cfg["image_size"])
    rng = np.random.default_rng(0)
    worst = 0.0
    t0 = time.perf_counter()
    for seed in range(cfg["scenes"]):
        count = int(rng.integers(cfg["min_gaussians"], cfg["max_gaussians"] + 1))
        scene = random_scene(seed, count, camera)
        tiled = render(scene, camera)
        ref = render_reference(scene, camera)
        dev = np.abs(tiled.payload - ref.payload).max()
        worst = max(worst, float(dev))
        assert dev <= cfg["tolerance"], f"scene {seed}: deviation {dev:.3e}"
    elapsed = time.perf_counter() - t0
    assert elapsed < cfg["budget_seconds"]
    report(1, f"{cfg['scenes']} scenes, max per-channel deviation {worst:.3e} "
              f"<= {cfg['tolerance']:g}, runtime {elapsed:.1f}s < {cfg['budget_seconds']:g}s")


def test_criterion_02_gradient_correctness():
    from pointsplat.grad import finite_diff_check
    cfg = CFG["gradient_correctness"]
    camera = frontal_camera(cfg["image_size"], cfg["image_size"])
    n_checked = n_within = n_boundary = 0
    worst = 0.0
    t0 = time.perf_counter()
    for seed in range(cfg["scenes"]):
        scene = random_scene(10_000 + seed, cfg["gaussians"], camera)
        rep = finite_diff_check(scene, camera, epsilon=cfg["epsilon"],
                                tolerance=cfg["tolerance"])
        errs = np.concatenate([np.asarray(v) for v in rep.rel_error.values() if v])
        n_checked += errs.size
        n_within += int((errs < cfg["tolerance"]).sum())
        n_boundary += rep.n_boundary
        worst = max(worst, rep.max_rel_error)
    elapsed = time.perf_counter() - t0
    fraction = n_within / n_checked
    assert fraction >= cfg["min_fraction"]
    assert elapsed < cfg["budget_seconds"]
    report(2, f"{fraction:.4%} of {n_checked} non-boundary parameters within "
              f"{cfg['tolerance']:g} (max err {worst:.2e}, {n_boundary} boundary-excluded), "
              f"runtime {elapsed:.1f}s < {cfg['budget_seconds']:g}s")


def test_criterion_03_two_contributor_closed_form():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        c1, c2 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
        a1, a2 = rng.uniform(0, 0.999, 2)
        out, _ = alpha_blend([(c1, a1), (c2, a2)], np.zeros(3))
        closed = c1 * a1 + c2 * a2 * (1 - a1)
        worst = max(worst, float(np.abs(out - closed).max()))
    assert worst <= 1e-12
    report(3, f"1000 two-contributor draws, max deviation {worst:.2e} <= 1e-12")


def test_criterion_04_channel_consistency():
    camera = frontal_camera(48, 48)
    for seed in range(20):
        scene = random_scene(20_000 + seed, 40, camera, feature_dim=3)
        scene.feature = scene.color.copy()
        buf = render(scene, camera, payload_select="joint")
        assert np.array_equal(buf.payload[:, :, :3], buf.payload[:, :, 3:]), f"seed {seed}"
    report(4, "20 joint renders with feature := color, color and feature planes "
              "bitwise equal")


def test_criterion_05_stage1_fit_recovery():
    cfg = CFG["stage1_fit"]
    rng = np.random.default_rng(cfg["seed_scene"])
    cloud = random_cloud(rng, cfg["gaussians"], extent=0.8)
    gt = init_from_cloud(cloud, seed=cfg["seed_gt"])
    gt.raw_opacity[:] = rng.uniform(0.5, 2.0, cfg["gaussians"])
    cams = ring_cameras(cfg["views"], 4.0, cfg["image_size"], cfg["image_size"])
    views = [(c, render(gt, c).payload) for c in cams]
    init = perturb_scene(gt, rng,
                         position=cfg["perturb_position"],
                         rotation=cfg["perturb_rotation"],
                         scale=cfg["perturb_scale"],
                         opacity=cfg["perturb_opacity"],
                         color=cfg["perturb_color"])
    t0 = time.perf_counter()
    _, rep = fit_gaussians(cloud, views,
                           FitConfig(steps=cfg["steps"], seed=cfg["seed_fit"],
                                     eval_every=cfg["eval_every"]),
                           initial=init)
    elapsed = time.perf_counter() - t0
    initial, final = rep.initial_mean_psnr(), rep.final_mean_psnr()
    assert initial < cfg["max_initial_db"]
    assert final - initial >= cfg["min_gain_db"]
    assert final > cfg["min_final_db"]
    assert elapsed < cfg["budget_seconds"]
    report(5, f"mean PSNR {initial:.2f} dB -> {final:.2f} dB "
              f"(gain {final - initial:.2f} >= {cfg['min_gain_db']:g}, "
              f"final > {cfg['min_final_db']:g}), "
              f"{cfg['steps']} steps in {elapsed:.1f}s < {cfg['budget_seconds']:g}s")


def test_criterion_06_feature_fit():
    cfg = CFG["feature_fit"]
    rng = np.random.default_rng(77)
    cloud = random_cloud(rng, cfg["gaussians"], extent=0.8)
    scene = init_from_cloud(cloud, feature_dim=9, seed=3)
    scene.raw_opacity[:] = rng.uniform(0.5, 2.0, cfg["gaussians"])
    cams = ring_cameras(cfg["views"], 4.0, cfg["image_size"], cfg["image_size"])
    targets = [(c, np.tile(render(scene, c).payload, (1, 1, 3))) for c in cams]
    fitted, _ = fit_features(scene, targets,
                             FitConfig(steps=cfg["steps"], seed=9, eval_every=0,
                                       lr_feature=cfg["lr_feature"]))
    errs = [l1_loss(render(fitted, c, payload_select="feature").payload, t)
            for c, t in targets]
    assert max(errs) < cfg["max_l1"]
    report(6, f"replicated-color feature fit, max splatted L1 {max(errs):.4f} "
              f"< {cfg['max_l1']:g} within {cfg['steps']} steps")


def test_criterion_07_paper_constants():
    assert default_loop_weights(2) == (0.75, 1.0)
    w = LossWeights()
    assert (w.gamma1, w.gamma2, w.gamma3) == (0.75, 1.0, 0.25)
    # worked arithmetic: total with unit components; single-term image loss
    assert total_loss(1.0, 1.0, 1.0) == 2.0
    pred = np.full((4, 4, 1), 0.2)
    pyr = PredictionPyramid([[pred]], scale_factors=(1.0,))
    val = progressive_multiscale_image_loss(pyr, np.zeros((4, 4, 1)), w=(0.75,))
    assert val == pytest.approx(0.15, abs=1e-15)
    report(7, "loop weights (0.75, 1.0), gammas (0.75, 1.0, 0.25); "
              "total(1,1,1) = 2.0 and 0.75 * 0.2 = 0.15 exact")


def test_criterion_08_frequency_loss():
    rng = np.random.default_rng(8)
    img = rng.uniform(size=(8, 8, 3))
    assert frequency_loss(img, img) == 0.0
    other = rng.uniform(size=(8, 8, 3))
    fast = frequency_loss(img, other)
    direct = direct_dft_loss(img, other)
    assert abs(fast - direct) <= 1e-10
    shifted = np.roll(img, 1, axis=1)
    shift_loss = frequency_loss(shifted, img)
    assert shift_loss > 0.0
    report(8, f"zero on identical; fast vs direct DFT deviation {abs(fast - direct):.2e} "
              f"<= 1e-10; one-pixel shift loss {shift_loss:.4f} > 0")


def test_criterion_09_rigid_invariance():
    cfg = CFG["rigid_invariance"]
    camera = frontal_camera(cfg["image_size"], cfg["image_size"])
    rng = np.random.default_rng(9)
    worst = 0.0
    for trial in range(cfg["trials"]):
        scene = random_scene(30_000 + trial, cfg["gaussians"], camera)
        base = render(scene, camera)
        q, t = random_rigid(rng)
        moved = render(transform_scene(scene, q, t), transform_camera(camera, q, t))
        dev = float(np.abs(moved.payload - base.payload).max())
        worst = max(worst, dev)
        assert dev <= cfg["tolerance"], f"trial {trial}: {dev:.3e}"
    report(9, f"{cfg['trials']} random rigid transforms, max pixel change "
              f"{worst:.2e} <= {cfg['tolerance']:g}")


def test_criterion_10_io_round_trips(tmp_path):
    # PLY round trip: positions bitwise, colors exact on the uint8 grid
    cloud = random_cloud(10, 64)
    ply = tmp_path / "cloud.ply"
    save_point_cloud(ply, cloud)
    back = load_point_cloud(ply)
    assert np.array_equal(back.positions, cloud.positions)
    ply2 = tmp_path / "cloud2.ply"
    save_point_cloud(ply2, back)
    assert ply.read_bytes() == ply2.read_bytes()

    # checkpoint round trip: raw parameters bitwise, render bitwise
    camera = frontal_camera(32, 32)
    scene = random_scene(11, 30, camera)
    ckpt = tmp_path / "scene.ckpt"
    save_checkpoint(ckpt, scene, provenance={"seed": 11})
    loaded, _, _ = load_checkpoint(ckpt)
    for a, b in zip(scene.arrays(), loaded.arrays()):
        assert np.array_equal(a, b)
    assert np.array_equal(render(scene, camera).payload,
                          render(loaded, camera).payload)

    # CLI determinism under fixed seeds
    a, b = tmp_path / "g1.json", tmp_path / "g2.json"
    for out in (a, b):
        assert cli_main(["gradcheck", "--seed", "7", "--count", "1",
                         "--gaussians", "5", "--size", "16x16",
                         "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()
    report(10, "PLY and checkpoint round trips bitwise-stable; gradcheck CLI "
               "byte-identical under fixed seed")
