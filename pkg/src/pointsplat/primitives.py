"""Gaussian primitive data model, activation heads, and point-cloud sampling.

Raw parameters live in unconstrained spaces (log scale, logit opacity,
unnormalized quaternion) so gradient steps stay well conditioned; the
activation heads map them to valid rendering properties.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRotationError, PointsplatError

DEFAULT_FEATURE_DIM = 9

_QUAT_NORM_FLOOR = 1e-12


def _sigmoid(x):
    # Split by sign for numerical stability at large |x|.
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activate_params(raw_q, raw_s, raw_o):
    """Map raw parameters to (unit quaternion, positive scales, opacity).

    Accepts single parameters (shapes (4,), (3,), scalar) or batches with a
    leading axis. The maps are norm(.), exp(.), sigmoid(.).
    """
    raw_q = np.asarray(raw_q, dtype=np.float64)
    raw_s = np.asarray(raw_s, dtype=np.float64)
    raw_o = np.asarray(raw_o, dtype=np.float64)
    norms = np.linalg.norm(raw_q, axis=-1, keepdims=True)
    if np.any(norms <= _QUAT_NORM_FLOOR):
        raise DegenerateRotationError("raw quaternion norm below 1e-12; rotation undefined")
    return raw_q / norms, np.exp(raw_s), _sigmoid(raw_o)


@dataclass
class GaussianPrimitive:
    """One point's raw splatting parameters."""

    position: np.ndarray      # (3,) world units
    raw_rotation: np.ndarray  # (4,) unconstrained quaternion
    raw_scale: np.ndarray     # (3,) log-space scales
    raw_opacity: float        # logit-space opacity
    color: np.ndarray         # (3,) in [0, 1]
    feature: np.ndarray       # (D,) descriptor

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.raw_rotation = np.asarray(self.raw_rotation, dtype=np.float64)
        self.raw_scale = np.asarray(self.raw_scale, dtype=np.float64)
        self.raw_opacity = float(self.raw_opacity)
        self.color = np.asarray(self.color, dtype=np.float64)
        self.feature = np.asarray(self.feature, dtype=np.float64)
        if self.color.shape != (3,) or np.any(self.color < 0) or np.any(self.color > 1):
            raise PointsplatError(f"color must be a 3-vector in [0, 1], got {self.color}")


@dataclass
class PointCloud:
    """Colored points, optionally with per-point feature descriptors."""

    positions: np.ndarray          # (N, 3)
    colors: np.ndarray             # (N, 3) in [0, 1]
    features: np.ndarray | None = None  # (N, D) or None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
        if len(self.colors) != len(self.positions):
            raise PointsplatError("positions and colors disagree on point count")
        if not np.all(np.isfinite(self.positions)):
            raise PointsplatError("point cloud contains non-finite coordinates")

    def __len__(self):
        return len(self.positions)


@dataclass
class ActivatedGaussian:
    """One primitive after the activation heads (plus its position)."""

    position: np.ndarray
    rotation: np.ndarray  # unit quaternion
    scale: np.ndarray     # positive 3-vector
    opacity: float        # in (0, 1)
    color: np.ndarray
    feature: np.ndarray


@dataclass
class ActivatedGaussians:
    """Batched activated parameters, one row per primitive."""

    position: np.ndarray  # (N, 3)
    rotation: np.ndarray  # (N, 4) unit quaternions
    scale: np.ndarray     # (N, 3) positive
    opacity: np.ndarray   # (N,) in (0, 1)
    color: np.ndarray     # (N, 3)
    feature: np.ndarray   # (N, D)

    def __len__(self):
        return len(self.position)

    @property
    def feature_dim(self) -> int:
        return self.feature.shape[1]

    @classmethod
    def from_list(cls, gaussians) -> "ActivatedGaussians":
        gaussians = list(gaussians)
        if not gaussians:
            return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                       np.zeros(0), np.zeros((0, 3)), np.zeros((0, DEFAULT_FEATURE_DIM)))
        return cls(
            position=np.stack([g.position for g in gaussians]).astype(np.float64),
            rotation=np.stack([g.rotation for g in gaussians]).astype(np.float64),
            scale=np.stack([g.scale for g in gaussians]).astype(np.float64),
            opacity=np.array([g.opacity for g in gaussians], dtype=np.float64),
            color=np.stack([g.color for g in gaussians]).astype(np.float64),
            feature=np.stack([g.feature for g in gaussians]).astype(np.float64),
        )

    def validate(self):
        n = len(self)
        for name, arr, shape in (("position", self.position, (n, 3)),
                                 ("rotation", self.rotation, (n, 4)),
                                 ("scale", self.scale, (n, 3)),
                                 ("opacity", self.opacity, (n,)),
                                 ("color", self.color, (n, 3))):
            if arr.shape != shape:
                raise PointsplatError(f"{name} has shape {arr.shape}, expected {shape}")
        if self.feature.shape[0] != n:
            raise PointsplatError("feature table row count does not match primitive count")
        if n:
            if np.abs(np.linalg.norm(self.rotation, axis=1) - 1.0).max() > 1e-9:
                raise PointsplatError("rotations are not unit quaternions")
            if np.any(self.scale <= 0):
                raise PointsplatError("scales must be positive")
            if np.any(self.opacity <= 0) or np.any(self.opacity >= 1):
                raise PointsplatError("opacities must lie strictly inside (0, 1)")


@dataclass
class RawGaussians:
    """Batched raw parameter tables; the thing the fit module optimizes."""

    position: np.ndarray     # (N, 3)
    raw_rotation: np.ndarray  # (N, 4)
    raw_scale: np.ndarray    # (N, 3)
    raw_opacity: np.ndarray  # (N,)
    color: np.ndarray        # (N, 3)
    feature: np.ndarray      # (N, D)

    def __len__(self):
        return len(self.position)

    @property
    def feature_dim(self) -> int:
        return self.feature.shape[1]

    def activate(self) -> ActivatedGaussians:
        rotation, scale, opacity = activate_params(self.raw_rotation, self.raw_scale, self.raw_opacity)
        return ActivatedGaussians(self.position, rotation, scale, opacity, self.color, self.feature)

    def copy(self) -> "RawGaussians":
        return RawGaussians(*(arr.copy() for arr in self.arrays()))

    def arrays(self):
        return (self.position, self.raw_rotation, self.raw_scale,
                self.raw_opacity, self.color, self.feature)

    @classmethod
    def from_primitives(cls, primitives) -> "RawGaussians":
        primitives = list(primitives)
        if not primitives:
            raise PointsplatError("cannot build a scene from an empty primitive list")
        return cls(
            position=np.stack([g.position for g in primitives]),
            raw_rotation=np.stack([g.raw_rotation for g in primitives]),
            raw_scale=np.stack([g.raw_scale for g in primitives]),
            raw_opacity=np.array([g.raw_opacity for g in primitives], dtype=np.float64),
            color=np.stack([g.color for g in primitives]),
            feature=np.stack([g.feature for g in primitives]),
        )

    def validate(self):
        n = len(self)
        shapes = {"position": (n, 3), "raw_rotation": (n, 4), "raw_scale": (n, 3),
                  "raw_opacity": (n,), "color": (n, 3)}
        for name, shape in shapes.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise PointsplatError(f"{name} has shape {arr.shape}, expected {shape}")
        if self.feature.ndim != 2 or self.feature.shape[0] != n:
            raise PointsplatError("feature table must be (N, D)")
        for name in (*shapes, "feature"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise PointsplatError(f"{name} contains non-finite values")


def downsample_uniform(cloud: PointCloud, rate: float, seed: int = 0) -> PointCloud:
    """Keep floor(rate * N) points by uniform stride over a seeded shuffle.

    Deterministic in (cloud, rate, seed); selected points keep their original
    order, so rate 1 returns the cloud unchanged.
    """
    if not (0 < rate <= 1):
        raise PointsplatError(f"downsample rate must lie in (0, 1], got {rate}")
    n = len(cloud)
    m = int(np.floor(rate * n))
    perm = np.random.default_rng(seed).permutation(n)
    strided = perm[(np.arange(m) * n) // max(m, 1)]
    keep = np.sort(strided)
    return PointCloud(
        positions=cloud.positions[keep],
        colors=cloud.colors[keep],
        features=None if cloud.features is None else cloud.features[keep],
    )
