"""Synthetic scenes, cameras, and perturbations.

Used by the gradcheck CLI verb and throughout the test suite. Scene
generators keep camera depths pairwise separated so depth-sort order is
stable under the small parameter perturbations finite differencing applies.
"""

import numpy as np

from .geometry import CameraModel, quat_multiply, quat_to_rotation
from .primitives import DEFAULT_FEATURE_DIM, PointCloud, RawGaussians


def frontal_camera(width: int, height: int, fx: float | None = None) -> CameraModel:
    """Identity-pose camera centered on the pixel grid."""
    if fx is None:
        fx = 1.25 * max(width, height)
    return CameraModel(fx=fx, fy=fx, cx=(width - 1) / 2, cy=(height - 1) / 2,
                       width=width, height=height, world_to_camera=np.eye(4))


def look_at_camera(eye, target, width: int, height: int,
                   fx: float | None = None, up=(0.0, 1.0, 0.0)) -> CameraModel:
    """Camera at `eye` with +z pointing at `target`."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    if abs(fwd @ up) > 0.999 * np.linalg.norm(up):
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(up, fwd)
    right = right / np.linalg.norm(right)
    ydir = np.cross(fwd, right)
    r = np.stack([right, ydir, fwd])
    w2c = np.eye(4)
    w2c[:3, :3] = r
    w2c[:3, 3] = -r @ eye
    if fx is None:
        fx = 1.25 * max(width, height)
    return CameraModel(fx=fx, fy=fx, cx=(width - 1) / 2, cy=(height - 1) / 2,
                       width=width, height=height, world_to_camera=w2c)


def ring_cameras(n_views: int, radius: float, width: int, height: int,
                 fx: float | None = None, center=(0.0, 0.0, 0.0),
                 tilt: float = 0.35) -> list:
    """Cameras on a circle around `center`, all looking inward."""
    center = np.asarray(center, dtype=np.float64)
    cams = []
    for i in range(n_views):
        ang = 2 * np.pi * i / n_views
        eye = center + radius * np.array([np.sin(ang), tilt * np.sin(2 * ang), -np.cos(ang)])
        cams.append(look_at_camera(eye, center, width, height, fx=fx))
    return cams


def _separated_depths(rng: np.random.Generator, n: int, lo: float, hi: float) -> np.ndarray:
    base = np.linspace(lo, hi, n)
    gap = (hi - lo) / max(n - 1, 1)
    jitter = rng.uniform(-0.3, 0.3, size=n) * gap
    return rng.permutation(base + jitter)


def random_scene(seed_or_rng, count: int, camera: CameraModel,
                 feature_dim: int = DEFAULT_FEATURE_DIM,
                 sigma_px=(0.8, 2.5), depth_range=(2.5, 4.5)) -> RawGaussians:
    """Random gaussians filling the camera frustum with distinct depths.

    Footprints land around `sigma_px` pixels so scenes have meaningful
    overlap without any splat covering the whole image.
    """
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) \
        else np.random.default_rng(seed_or_rng)
    z = _separated_depths(rng, count, *depth_range)
    u = rng.uniform(2.0, camera.width - 3.0, size=count)
    v = rng.uniform(2.0, camera.height - 3.0, size=count)
    x = (u - camera.cx) * z / camera.fx
    y = (v - camera.cy) * z / camera.fy
    cam_pts = np.stack([x, y, z], axis=1)
    # Positions are generated in the camera frame; map back to world.
    r = camera.rotation
    positions = (cam_pts - camera.translation) @ r

    raw_q = rng.normal(size=(count, 4))
    small = np.linalg.norm(raw_q, axis=1) < 1e-3
    raw_q[small] = np.array([1.0, 0.0, 0.0, 0.0])

    s_px = rng.uniform(*sigma_px, size=(count, 3)) * rng.uniform(0.75, 1.3, size=(count, 1))
    raw_scale = np.log(s_px * z[:, None] / camera.fx)
    raw_opacity = rng.uniform(-1.5, 1.5, size=count)
    color = rng.uniform(0.05, 0.95, size=(count, 3))
    feature = rng.uniform(0.0, 1.0, size=(count, feature_dim))
    return RawGaussians(positions, raw_q, raw_scale, raw_opacity, color, feature)


def random_cloud(seed_or_rng, count: int, extent: float = 1.0) -> PointCloud:
    """Uniform colored points in a cube of half-size `extent`."""
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) \
        else np.random.default_rng(seed_or_rng)
    return PointCloud(
        positions=rng.uniform(-extent, extent, size=(count, 3)),
        colors=rng.uniform(0.0, 1.0, size=(count, 3)),
    )


def perturb_scene(scene: RawGaussians, seed_or_rng,
                  position: float = 0.0, rotation: float = 0.0,
                  scale: float = 0.0, opacity: float = 0.0,
                  color: float = 0.0, feature: float = 0.0) -> RawGaussians:
    """Additive gaussian noise on each raw parameter group (a copy)."""
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) \
        else np.random.default_rng(seed_or_rng)
    out = scene.copy()
    out.position += rng.normal(scale=position, size=out.position.shape) if position else 0.0
    out.raw_rotation += rng.normal(scale=rotation, size=out.raw_rotation.shape) if rotation else 0.0
    out.raw_scale += rng.normal(scale=scale, size=out.raw_scale.shape) if scale else 0.0
    out.raw_opacity += rng.normal(scale=opacity, size=out.raw_opacity.shape) if opacity else 0.0
    if color:
        out.color = np.clip(out.color + rng.normal(scale=color, size=out.color.shape), 0.0, 1.0)
    if feature:
        out.feature = out.feature + rng.normal(scale=feature, size=out.feature.shape)
    return out


def random_rigid(seed_or_rng):
    """A random rigid transform as (unit quaternion, translation)."""
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) \
        else np.random.default_rng(seed_or_rng)
    q = rng.normal(size=4)
    q = q / np.linalg.norm(q)
    t = rng.uniform(-2.0, 2.0, size=3)
    return q, t


def transform_scene(scene: RawGaussians, q, t) -> RawGaussians:
    """Apply a rigid transform to every primitive (positions and rotations)."""
    r = quat_to_rotation(q)
    out = scene.copy()
    out.position = scene.position @ r.T + np.asarray(t, dtype=np.float64)
    out.raw_rotation = np.stack([quat_multiply(q, row) for row in scene.raw_rotation])
    return out


def transform_camera(camera: CameraModel, q, t) -> CameraModel:
    """Compose the camera pose with the inverse rigid transform.

    Rendering transform_scene(scene, q, t) from transform_camera(cam, q, t)
    reproduces the original image.
    """
    r = quat_to_rotation(q)
    inv = np.eye(4)
    inv[:3, :3] = r.T
    inv[:3, 3] = -r.T @ np.asarray(t, dtype=np.float64)
    return CameraModel(fx=camera.fx, fy=camera.fy, cx=camera.cx, cy=camera.cy,
                       width=camera.width, height=camera.height,
                       world_to_camera=camera.world_to_camera @ inv)
