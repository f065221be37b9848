"""Camera model, quaternion algebra, and covariance projection.

Conventions used throughout:

* quaternions are (w, x, y, z) and are normalized before use;
* the camera is right-handed and looks down +z, so depth is the camera-frame
  z coordinate;
* continuous pixel coordinates follow ``u = fx * x / z + cx``; the rasterizer
  samples pixel (row i, col j) at the continuous point (x=j, y=i);
* geometry math runs in double precision.
"""

from dataclasses import dataclass

import numpy as np

from .errors import CameraValidationError, CulledPointError, DegenerateRotationError, PointsplatError

# Near-plane cull distance in world units.
NEAR_PLANE = 0.01

# Low-pass dilation added to both diagonal entries of every projected 2D
# covariance so each splat covers at least about one pixel.
LOWPASS_DILATION = 0.3

_QUAT_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus a rigid world-to-camera transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray  # 4x4, row-major

    def __post_init__(self):
        object.__setattr__(self, "world_to_camera",
                           np.asarray(self.world_to_camera, dtype=np.float64))
        self.validate()

    def validate(self, rotation_atol: float = 1e-6):
        if not (self.fx > 0 and self.fy > 0):
            raise CameraValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise CameraValidationError(f"image size must be at least 1x1, got {self.width}x{self.height}")
        if self.world_to_camera.shape != (4, 4):
            raise CameraValidationError(f"world_to_camera must be 4x4, got {self.world_to_camera.shape}")
        if not np.all(np.isfinite(self.world_to_camera)):
            raise CameraValidationError("world_to_camera contains non-finite entries")
        r = self.rotation
        err = np.abs(r @ r.T - np.eye(3)).max()
        if err > rotation_atol:
            raise CameraValidationError(f"rotation block is not orthonormal (max deviation {err:.3e})")
        det = np.linalg.det(r)
        if abs(det - 1.0) > max(rotation_atol, 1e-6):
            raise CameraValidationError(f"rotation block must have determinant +1, got {det:.9f}")

    @property
    def rotation(self) -> np.ndarray:
        """3x3 world-to-camera rotation block."""
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    def world_to_cam_points(self, x_world: np.ndarray) -> np.ndarray:
        """Apply the rigid transform to one point or an (N, 3) batch."""
        x = np.asarray(x_world, dtype=np.float64)
        return x @ self.rotation.T + self.translation


@dataclass
class Covariance3:
    """Symmetric 3x3 covariance stored as 6 upper-triangular values.

    Packing order: (xx, xy, xz, yy, yz, zz), world units squared.
    """

    packed: np.ndarray

    def __post_init__(self):
        self.packed = np.asarray(self.packed, dtype=np.float64)
        if self.packed.shape != (6,):
            raise PointsplatError(f"Covariance3 expects 6 packed values, got shape {self.packed.shape}")

    @classmethod
    def from_matrix(cls, m) -> "Covariance3":
        m = np.asarray(m, dtype=np.float64)
        return cls(np.array([m[0, 0], m[0, 1], m[0, 2], m[1, 1], m[1, 2], m[2, 2]]))

    @property
    def matrix(self) -> np.ndarray:
        xx, xy, xz, yy, yz, zz = self.packed
        return np.array([[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]])

    def validate(self, eig_floor: float = -1e-9):
        eigvals = np.linalg.eigvalsh(self.matrix)
        if eigvals.min() < eig_floor:
            raise PointsplatError(f"covariance is not PSD (min eigenvalue {eigvals.min():.3e})")


@dataclass
class Covariance2:
    """Symmetric 2x2 covariance stored as (xx, xy, yy), pixel units squared."""

    packed: np.ndarray

    def __post_init__(self):
        self.packed = np.asarray(self.packed, dtype=np.float64)
        if self.packed.shape != (3,):
            raise PointsplatError(f"Covariance2 expects 3 packed values, got shape {self.packed.shape}")

    @classmethod
    def from_matrix(cls, m) -> "Covariance2":
        m = np.asarray(m, dtype=np.float64)
        return cls(np.array([m[0, 0], m[0, 1], m[1, 1]]))

    @property
    def matrix(self) -> np.ndarray:
        xx, xy, yy = self.packed
        return np.array([[xx, xy], [xy, yy]])

    @property
    def det(self) -> float:
        xx, xy, yy = self.packed
        return xx * yy - xy * xy


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion, normalized first.

    Raises DegenerateRotationError when the norm is below 1e-12.
    """
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n <= _QUAT_NORM_FLOOR:
        raise DegenerateRotationError(f"quaternion norm {n:.3e} is too small to define a rotation")
    w, x, y, z = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_multiply(p, q) -> np.ndarray:
    """Hamilton product p * q for (w, x, y, z) quaternions."""
    pw, px, py, pz = np.asarray(p, dtype=np.float64)
    qw, qx, qy, qz = np.asarray(q, dtype=np.float64)
    return np.array([
        pw * qw - px * qx - py * qy - pz * qz,
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
    ])


def build_covariance3d(q, s) -> Covariance3:
    """World covariance R diag(s)^2 R^T from a quaternion and positive scales."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (3,):
        raise PointsplatError(f"scale must be a 3-vector, got shape {s.shape}")
    if np.any(s <= 0):
        raise PointsplatError(f"scales must be positive, got {s}")
    r = quat_to_rotation(q)
    m = r * s  # R @ diag(s)
    return Covariance3.from_matrix(m @ m.T)


def projection_jacobian(x_cam, camera: CameraModel, near: float = NEAR_PLANE) -> np.ndarray:
    """First-order expansion of the pixel projection at a camera-frame point.

    Returns the 2x3 matrix
    [[fx/z, 0, -fx*x/z^2], [0, fy/z, -fy*y/z^2]].
    """
    x, y, z = np.asarray(x_cam, dtype=np.float64)
    if z < near:
        raise CulledPointError(f"point depth {z:.6g} is in front of the near plane {near}")
    return np.array([
        [camera.fx / z, 0.0, -camera.fx * x / (z * z)],
        [0.0, camera.fy / z, -camera.fy * y / (z * z)],
    ])


def project_point(x_world, camera: CameraModel, near: float = NEAR_PLANE):
    """Pinhole projection of a world point.

    Returns (pixel, depth, culled). `culled` is True when the point sits
    behind the near plane; the pixel value is meaningless in that case.
    """
    xc = camera.world_to_cam_points(np.asarray(x_world, dtype=np.float64))
    x, y, z = xc
    if z < near:
        return np.array([np.nan, np.nan]), float(z), True
    pixel = np.array([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy])
    return pixel, float(z), False


def project_covariance(cov: Covariance3, camera: CameraModel, x_world,
                       near: float = NEAR_PLANE,
                       dilation: float = LOWPASS_DILATION) -> Covariance2:
    """EWA projection of a world covariance onto the image plane.

    Computes J W Sigma W^T J^T with W the rotation block of the camera pose,
    then adds the low-pass dilation to both diagonal entries. Translation is
    deliberately excluded: it cannot affect a covariance.
    """
    xc = camera.world_to_cam_points(np.asarray(x_world, dtype=np.float64))
    j = projection_jacobian(xc, camera, near=near)
    w3 = camera.rotation
    cov_cam = w3 @ cov.matrix @ w3.T
    cov2 = j @ cov_cam @ j.T
    cov2[0, 0] += dilation
    cov2[1, 1] += dilation
    return Covariance2.from_matrix(cov2)
