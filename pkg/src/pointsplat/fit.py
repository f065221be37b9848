"""Desk-scale optimization of raw gaussian tables.

Two phases mirror the training split: `fit_gaussians` optimizes geometry,
opacity, and color under the L1 render loss; `fit_features` then freezes all
of that and optimizes only the per-point feature descriptors through the
feature-splatting path. Both loops are driven by a from-scratch adaptive
moment estimation (Adam) optimizer with bias correction and one seeded
random view per step.
"""

import math
import time
from dataclasses import dataclass

import numpy as np

from .errors import FitDivergenceError, PointsplatError
from .grad import render_backward
from .losses import psnr
from .primitives import DEFAULT_FEATURE_DIM, PointCloud, RawGaussians
from .rasterizer import RasterConfig, render

GAUSSIAN_GROUPS = ("position", "raw_rotation", "raw_scale", "raw_opacity", "color")

_DIVERGENCE_FACTOR = 10.0
_DIVERGENCE_PATIENCE = 50


@dataclass
class FitConfig:
    steps: int = 500
    lr_position: float | None = None  # None: 1.6e-4 * scene extent
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_feature: float = 2.5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise PointsplatError(f"steps must be >= 1, got {self.steps}")
        rates = [self.lr_rotation, self.lr_scale, self.lr_opacity,
                 self.lr_color, self.lr_feature]
        if self.lr_position is not None:
            rates.append(self.lr_position)
        if any(lr < 0 for lr in rates):
            raise PointsplatError("learning rates must be nonnegative")

    def learning_rates(self, extent: float) -> dict:
        pos = self.lr_position if self.lr_position is not None else 1.6e-4 * extent
        return {"position": pos, "raw_rotation": self.lr_rotation,
                "raw_scale": self.lr_scale, "raw_opacity": self.lr_opacity,
                "color": self.lr_color, "feature": self.lr_feature}


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(v) for k, v in params.items()},
                   v={k: np.zeros_like(v) for k, v in params.items()})


def optimizer_step(params: dict, grads: dict, state: AdamState,
                   config: FitConfig, lrs: dict):
    """One Adam update over named parameter groups, in place.

    First/second moments with bias correction; deterministic given inputs.
    Raises on non-finite gradients.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - config.beta1 ** t
    c2 = 1.0 - config.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FitDivergenceError(f"non-finite gradient in parameter group '{name}' at step {t}")
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        p -= lrs[name] * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    return params, state


@dataclass
class FitReport:
    losses: list            # per-step loss trace
    eval_steps: list        # steps at which PSNR was evaluated (0 = init)
    eval_psnr: list         # per eval: list of per-view PSNR (dB)
    step_seconds: list      # wall clock per step
    seed: int
    phase: str

    def final_mean_psnr(self) -> float:
        return float(np.mean(self.eval_psnr[-1]))

    def initial_mean_psnr(self) -> float:
        return float(np.mean(self.eval_psnr[0]))

    def trace_dict(self) -> dict:
        """Deterministic part of the report (no wall clock)."""
        return {"phase": self.phase, "seed": self.seed,
                "losses": self.losses, "eval_steps": self.eval_steps,
                "eval_psnr": self.eval_psnr}


def scene_extent(positions: np.ndarray) -> float:
    if len(positions) < 2:
        return 1.0
    diag = positions.max(axis=0) - positions.min(axis=0)
    return float(max(np.linalg.norm(diag), 1e-6))


def mean_nn_distance(positions: np.ndarray, chunk: int = 512) -> float:
    """Average distance to the nearest neighbor, brute force in chunks."""
    n = len(positions)
    if n < 2:
        return 0.1
    mins = np.empty(n)
    for start in range(0, n, chunk):
        block = positions[start:start + chunk]
        d2 = ((block[:, None, :] - positions[None, :, :]) ** 2).sum(axis=2)
        rows = np.arange(len(block))
        d2[rows, start + rows] = np.inf
        mins[start:start + chunk] = np.sqrt(d2.min(axis=1))
    return float(mins.mean())


def init_from_cloud(cloud: PointCloud, feature_dim: int = DEFAULT_FEATURE_DIM,
                    seed: int = 0) -> RawGaussians:
    """Default raw tables for a colored point cloud.

    Isotropic scales at half the mean nearest-neighbor spacing, near-identity
    rotations, opacity 0.1, colors from the cloud, small random features.
    """
    if len(cloud) == 0:
        raise PointsplatError("cannot initialize gaussians from an empty cloud")
    rng = np.random.default_rng(seed)
    n = len(cloud)
    nn = max(mean_nn_distance(cloud.positions), 1e-6)
    raw_scale = np.full((n, 3), math.log(0.5 * nn))
    raw_rotation = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1))
    raw_rotation += rng.normal(scale=1e-3, size=(n, 4))
    raw_opacity = np.full(n, math.log(0.1 / 0.9))
    if cloud.features is not None:
        feature = cloud.features.copy()
    else:
        feature = rng.normal(scale=0.1, size=(n, feature_dim))
    return RawGaussians(
        position=cloud.positions.copy(),
        raw_rotation=raw_rotation,
        raw_scale=raw_scale,
        raw_opacity=raw_opacity,
        color=np.clip(cloud.colors, 0.0, 1.0),
        feature=feature,
    )


def _check_views(views, channels: int):
    if not views:
        raise PointsplatError("fitting needs at least one view")
    checked = []
    for i, (camera, target) in enumerate(views):
        target = np.asarray(target, dtype=np.float64)
        want = (camera.height, camera.width, channels)
        if target.shape != want:
            raise PointsplatError(
                f"view {i}: target shape {target.shape} does not match camera {want}")
        checked.append((camera, target))
    return checked


def _eval_psnr(scene, views, raster_config, payload_select):
    return [psnr(render(scene, cam, raster_config, payload_select).payload, target)
            for cam, target in views]


def _fit_loop(scene: RawGaussians, views, config: FitConfig,
              raster_config: RasterConfig, payload_select: str,
              group_names, phase: str):
    params = {name: getattr(scene, name) for name in group_names}
    state = AdamState.zeros_like(params)
    lrs = config.learning_rates(scene_extent(scene.position))
    rng = np.random.default_rng(config.seed)
    omega = views[0][1].shape[0] * views[0][1].shape[1]

    losses, step_seconds = [], []
    eval_steps = [0]
    eval_psnr = [_eval_psnr(scene, views, raster_config, payload_select)]
    initial_loss = None
    over_budget = 0

    def partial_report():
        return FitReport(losses, eval_steps, eval_psnr, step_seconds,
                         config.seed, phase)

    for step in range(config.steps):
        t0 = time.perf_counter()
        view_idx = int(rng.integers(len(views)))
        camera, target = views[view_idx]
        buffers = render(scene, camera, raster_config, payload_select)
        diff = buffers.payload - target
        loss = float(np.abs(diff).sum() / omega)
        if not np.isfinite(loss):
            raise FitDivergenceError(
                f"non-finite loss at step {step + 1}; parameters have blown up",
                report=partial_report())
        upstream = np.sign(diff) / omega
        grads = render_backward(scene, camera, raster_config, payload_select, upstream)
        try:
            optimizer_step(params, {n: getattr(grads, n) for n in group_names},
                           state, config, lrs)
        except FitDivergenceError as exc:
            exc.report = partial_report()
            raise
        if "color" in params:
            np.clip(scene.color, 0.0, 1.0, out=scene.color)

        losses.append(loss)
        step_seconds.append(time.perf_counter() - t0)
        if initial_loss is None:
            initial_loss = loss
        if loss > _DIVERGENCE_FACTOR * initial_loss + 1e-12:
            over_budget += 1
        else:
            over_budget = 0

        last = step == config.steps - 1
        if last or (config.eval_every and (step + 1) % config.eval_every == 0):
            eval_steps.append(step + 1)
            eval_psnr.append(_eval_psnr(scene, views, raster_config, payload_select))

        if over_budget >= _DIVERGENCE_PATIENCE:
            raise FitDivergenceError(
                f"loss exceeded {_DIVERGENCE_FACTOR}x its initial value for "
                f"{_DIVERGENCE_PATIENCE} consecutive steps", report=partial_report())

    return scene, partial_report()


def fit_gaussians(cloud: PointCloud, views, config: FitConfig | None = None,
                  raster_config: RasterConfig | None = None,
                  initial: RawGaussians | None = None,
                  feature_dim: int = DEFAULT_FEATURE_DIM):
    """Phase 1: fit per-point gaussian parameters under the L1 render loss.

    `views` is a list of (CameraModel, HxWx3 target). Starts from
    `initial` when given, otherwise from init_from_cloud. Returns the
    fitted scene and its FitReport.
    """
    config = config or FitConfig()
    raster_config = raster_config or RasterConfig()
    views = _check_views(views, 3)
    scene = initial.copy() if initial is not None else init_from_cloud(
        cloud, feature_dim, config.seed)
    return _fit_loop(scene, views, config, raster_config, "color",
                     GAUSSIAN_GROUPS, phase="gaussians")


def fit_features(scene: RawGaussians, views, config: FitConfig | None = None,
                 raster_config: RasterConfig | None = None):
    """Phase 2: fit only the feature table; geometry stays bitwise frozen.

    `views` is a list of (CameraModel, HxWxD target feature map) with D
    matching the scene's feature dimension.
    """
    config = config or FitConfig()
    raster_config = raster_config or RasterConfig()
    views = _check_views(views, scene.feature_dim)
    return _fit_loop(scene.copy(), views, config, raster_config, "feature",
                     ("feature",), phase="features")
