"""Flat-array boundary for the pointsplat engine.

External training pipelines drive the engine through three calls that
exchange nothing richer than contiguous row-major float arrays plus plain
scalars: `py_render`, `py_render_backward`, and `py_fit`. No object graph
crosses the boundary, results never alias caller memory, and every engine
error surfaces as an `EngineError` carrying the engine's message verbatim.

Inputs are taken zero-copy when they already are contiguous float64 buffers
and copied otherwise. Calls are reentrant and keep no hidden state; the
heavy array math runs inside numpy kernels, which release the interpreter
lock for long stretches, so host threads are not starved during renders.
"""

from dataclasses import dataclass

import numpy as np

import pointsplat
from pointsplat.errors import FitDivergenceError, PointsplatError
from pointsplat.fit import FitConfig, fit_gaussians
from pointsplat.geometry import CameraModel
from pointsplat.grad import render_backward
from pointsplat.primitives import PointCloud, RawGaussians
from pointsplat.rasterizer import RasterConfig, render

__version__ = "0.1.0"

_CAMERA_KEYS = ("fx", "fy", "cx", "cy", "width", "height", "world_to_camera")


class EngineError(RuntimeError):
    """An engine-side validation or runtime failure, message preserved."""


def _wrap(exc: Exception) -> EngineError:
    return EngineError(str(exc))


def _buffer(a, shape, name) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=np.float64)
    if out.shape != shape:
        raise EngineError(f"{name} has shape {out.shape}, expected {shape}")
    return out


@dataclass
class ArrayScene:
    """One scene as six flat float arrays with consistent row count."""

    positions: np.ndarray      # (N, 3)
    raw_rotations: np.ndarray  # (N, 4)
    raw_scales: np.ndarray     # (N, 3)
    raw_opacities: np.ndarray  # (N,)
    colors: np.ndarray         # (N, 3)
    features: np.ndarray       # (N, D)

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        n = self.positions.shape[0] if self.positions.ndim == 2 else -1
        if n < 0 or self.positions.shape != (n, 3):
            raise EngineError(f"positions must be (N, 3), got {self.positions.shape}")
        self.raw_rotations = _buffer(self.raw_rotations, (n, 4), "raw_rotations")
        self.raw_scales = _buffer(self.raw_scales, (n, 3), "raw_scales")
        self.raw_opacities = _buffer(self.raw_opacities, (n,), "raw_opacities")
        self.colors = _buffer(self.colors, (n, 3), "colors")
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise EngineError(f"features must be (N, D), got {self.features.shape}")

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


def _to_engine(scene: ArrayScene) -> RawGaussians:
    raw = RawGaussians(scene.positions, scene.raw_rotations, scene.raw_scales,
                       scene.raw_opacities, scene.colors, scene.features)
    try:
        raw.validate()
    except PointsplatError as exc:
        raise _wrap(exc) from exc
    return raw


def _from_engine(raw: RawGaussians) -> ArrayScene:
    return ArrayScene(raw.position.copy(), raw.raw_rotation.copy(),
                      raw.raw_scale.copy(), raw.raw_opacity.copy(),
                      raw.color.copy(), raw.feature.copy())


def _camera(fields) -> CameraModel:
    missing = [k for k in _CAMERA_KEYS if k not in fields]
    if missing:
        raise EngineError(f"camera fields missing keys {missing}")
    w2c = np.ascontiguousarray(fields["world_to_camera"], dtype=np.float64)
    if w2c.size != 16:
        raise EngineError("world_to_camera must hold 16 numbers")
    try:
        return CameraModel(fx=float(fields["fx"]), fy=float(fields["fy"]),
                           cx=float(fields["cx"]), cy=float(fields["cy"]),
                           width=int(fields["width"]), height=int(fields["height"]),
                           world_to_camera=w2c.reshape(4, 4))
    except PointsplatError as exc:
        raise _wrap(exc) from exc


def _raster_config(tile_size, cutoff_sigmas, background, max_contributors) -> RasterConfig:
    try:
        return RasterConfig(tile_size=tile_size, cutoff_sigmas=cutoff_sigmas,
                            background=background,
                            max_contributors_per_pixel=max_contributors)
    except PointsplatError as exc:
        raise _wrap(exc) from exc


def py_render(scene: ArrayScene, camera: dict, payload: str = "color",
              tile_size: int = 16, cutoff_sigmas: float = 3.0,
              background=None, max_contributors=None):
    """Render a scene; returns new (payload HxWxC, alpha HxW, depth HxW)."""
    cam = _camera(camera)
    config = _raster_config(tile_size, cutoff_sigmas, background, max_contributors)
    try:
        buf = render(_to_engine(scene), cam, config, payload)
    except PointsplatError as exc:
        raise _wrap(exc) from exc
    return buf.payload, buf.alpha, buf.depth


def py_render_backward(scene: ArrayScene, camera: dict, upstream,
                       upstream_alpha=None, payload: str = "color",
                       tile_size: int = 16, cutoff_sigmas: float = 3.0,
                       background=None, max_contributors=None) -> dict:
    """Backward pass; returns fresh gradient arrays keyed like ArrayScene."""
    cam = _camera(camera)
    config = _raster_config(tile_size, cutoff_sigmas, background, max_contributors)
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    if upstream_alpha is not None:
        upstream_alpha = np.ascontiguousarray(upstream_alpha, dtype=np.float64)
    try:
        grads = render_backward(_to_engine(scene), cam, config, payload,
                                upstream, upstream_alpha)
    except PointsplatError as exc:
        raise _wrap(exc) from exc
    return {"positions": grads.position, "raw_rotations": grads.raw_rotation,
            "raw_scales": grads.raw_scale, "raw_opacities": grads.raw_opacity,
            "colors": grads.color, "features": grads.feature}


def py_fit(scene: ArrayScene, cameras, targets, config: dict | None = None):
    """Fit gaussian tables starting from `scene`.

    `cameras` is a sequence of camera field dicts, `targets` an array of
    shape (V, H, W, 3) or a sequence of per-view images; `config` holds
    FitConfig fields. steps=0 returns an unchanged copy and an empty trace.
    The input scene is never modified.
    """
    config = dict(config or {})
    steps = config.get("steps", None)
    if steps == 0:
        return _from_engine(_to_engine(scene)), []
    cams = [_camera(c) for c in cameras]
    targets = [np.ascontiguousarray(t, dtype=np.float64) for t in targets]
    if len(cams) != len(targets):
        raise EngineError(f"{len(cams)} cameras vs {len(targets)} targets")
    try:
        fit_config = FitConfig(**config) if config else FitConfig()
    except (PointsplatError, TypeError) as exc:
        raise _wrap(exc) from exc
    initial = _to_engine(scene)
    cloud = PointCloud(positions=initial.position.copy(),
                       colors=np.clip(initial.color, 0.0, 1.0))
    try:
        fitted, report = fit_gaussians(cloud, list(zip(cams, targets)),
                                       fit_config, initial=initial)
    except (PointsplatError, FitDivergenceError) as exc:
        raise _wrap(exc) from exc
    return _from_engine(fitted), list(report.losses)
