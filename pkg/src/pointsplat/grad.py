"""Analytic backward pass through the splatting pipeline.

Given an upstream gradient with respect to the rendered payload (and
optionally the accumulated-alpha plane), `render_backward` returns gradients
with respect to every raw gaussian parameter, chaining through blending,
the 2D kernel, the EWA covariance projection, the world covariance build,
and the activation heads.

The compositing adjoint follows the usual back-to-front recurrence: for a
pixel with contributions i = 1..n (front to back),

    dL/dc_i     = u . (a_i T_i)
    dL/da_i     = u . (c_i T_i) - [u . (S_i + bg T_n)] / (1 - a_i)
                  + u_alpha T_n / (1 - a_i)

where T_i is the transmittance before contribution i, S_i the payload
accumulated behind it, and T_n the residual transmittance. The 0.999 alpha
ceiling keeps the divisions bounded; contributions sitting on the ceiling
propagate zero gradient, matching the clamp's subgradient.

`finite_diff_check` verifies all of this against central differences. The
render is only piecewise smooth (cutoff ellipse, contributor budget, alpha
ceiling, depth-order ties), so parameters whose +/- epsilon renders differ
in blend structure are excluded from the pass/fail statistics and counted
separately; structure is compared via ContributionLog fingerprints.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import PointsplatError
from .geometry import CameraModel
from .primitives import RawGaussians
from .rasterizer import (RasterConfig, bin_tiles, project_scene, render,
                         tile_alpha_weights, tile_pixel_grid, _payload_matrix)

DEFAULT_FD_EPSILON = 1e-4
DEFAULT_FD_TOLERANCE = 1e-3
_REL_ERR_FLOOR = 1e-8


@dataclass
class ParamGradients:
    """Per-gaussian loss gradients, shaped like the raw parameter tables."""

    position: np.ndarray      # (N, 3)
    raw_rotation: np.ndarray  # (N, 4)
    raw_scale: np.ndarray     # (N, 3)
    raw_opacity: np.ndarray   # (N,)
    color: np.ndarray         # (N, 3)
    feature: np.ndarray       # (N, D)

    def groups(self) -> dict:
        return {"position": self.position, "raw_rotation": self.raw_rotation,
                "raw_scale": self.raw_scale, "raw_opacity": self.raw_opacity,
                "color": self.color, "feature": self.feature}

    def validate(self, scene: RawGaussians):
        for name, arr in self.groups().items():
            want = getattr(scene, name).shape
            if arr.shape != want:
                raise PointsplatError(f"gradient {name} has shape {arr.shape}, expected {want}")
            if not np.all(np.isfinite(arr)):
                raise PointsplatError(f"gradient {name} contains non-finite values")


def _exclusive_suffix_sum(a: np.ndarray) -> np.ndarray:
    """Along axis 0: out[k] = sum over j > k of a[j]."""
    return np.flip(np.cumsum(np.flip(a, 0), 0), 0) - a


def render_backward(scene: RawGaussians, camera: CameraModel,
                    config: RasterConfig | None = None,
                    payload_select: str = "color",
                    upstream: np.ndarray | None = None,
                    upstream_alpha: np.ndarray | None = None) -> ParamGradients:
    """Gradients of sum(upstream * payload) [+ sum(upstream_alpha * alpha)].

    `upstream` is an (H, W, C) array matching the forward payload; culled and
    zero-footprint gaussians receive zero gradients. The depth plane is a
    diagnostic output and is not differentiated.
    """
    config = config or RasterConfig()
    act = scene.activate()
    payload = _payload_matrix(act, payload_select)
    n, c = len(scene), payload.shape[1]
    h, w = camera.height, camera.width
    d = scene.feature_dim

    if upstream is None:
        raise PointsplatError("render_backward requires an upstream payload gradient")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (h, w, c):
        raise PointsplatError(
            f"upstream shape {upstream.shape} does not match render output {(h, w, c)}")
    if not np.all(np.isfinite(upstream)):
        raise PointsplatError("upstream gradient contains non-finite values")
    if upstream_alpha is not None:
        upstream_alpha = np.asarray(upstream_alpha, dtype=np.float64)
        if upstream_alpha.shape != (h, w):
            raise PointsplatError(
                f"upstream_alpha shape {upstream_alpha.shape} does not match {(h, w)}")

    grads = ParamGradients(
        position=np.zeros((n, 3)), raw_rotation=np.zeros((n, 4)),
        raw_scale=np.zeros((n, 3)), raw_opacity=np.zeros(n),
        color=np.zeros((n, 3)), feature=np.zeros((n, d)))
    if n == 0:
        return grads

    splats = project_scene(act, camera, config.cutoff_sigmas)
    nv = len(splats.indices)
    if nv == 0:
        return grads
    tiles, ntx, _ = bin_tiles(splats, w, h, config.tile_size)
    cutoff_sq = config.cutoff_sigmas ** 2
    opacity = act.opacity[splats.indices]
    pay = payload[splats.indices]
    bg = config.background_vector(c)

    d_payload = np.zeros((nv, c))
    d_opacity = np.zeros(nv)
    d_mean2d = np.zeros((nv, 2))
    d_conic = np.zeros((nv, 2, 2))

    for tile_id in sorted(tiles):
        ty, tx = divmod(tile_id, ntx)
        x0, x1, y0, y1, px, py = tile_pixel_grid(tx, ty, config.tile_size, w, h)
        stack = tile_alpha_weights(splats, tiles[tile_id], px, py, opacity,
                                   cutoff_sq, config.max_contributors_per_pixel)
        g = stack.g
        u = upstream[y0:y1, x0:x1].reshape(-1, c)
        ua = (upstream_alpha[y0:y1, x0:x1].reshape(-1)
              if upstream_alpha is not None else None)

        weight = stack.alpha * stack.t_before
        d_payload[g] += np.einsum("kp,pc->kc", weight, u)

        # d(loss)/d(alpha_k) per pixel, then back through the kernel.
        pu = pay[g] @ u.T                   # (K, P): payload_k . upstream_p
        behind = _exclusive_suffix_sum(weight * pu)
        t_n = stack.t_full[-1]
        bg_u = u @ bg                        # (P,)
        one_minus = 1.0 - stack.alpha
        d_alpha = stack.t_before * pu - (behind + bg_u[None, :] * t_n[None, :]) / one_minus
        if ua is not None:
            d_alpha += (ua * t_n)[None, :] / one_minus
        d_alpha = np.where(stack.inside & ~stack.clamped, d_alpha, 0.0)

        kernel = stack.alpha / opacity[g][:, None]  # exp(-maha/2) wherever grads flow
        d_opacity[g] += (d_alpha * kernel).sum(axis=1)
        d_maha = -0.5 * d_alpha * stack.alpha

        ca = splats.conic[g, 0, 0][:, None]
        cb = splats.conic[g, 0, 1][:, None]
        cc = splats.conic[g, 1, 1][:, None]
        gx = 2.0 * (ca * stack.dx + cb * stack.dy)
        gy = 2.0 * (cb * stack.dx + cc * stack.dy)
        d_mean2d[g, 0] += -(d_maha * gx).sum(axis=1)
        d_mean2d[g, 1] += -(d_maha * gy).sum(axis=1)
        d_conic[g, 0, 0] += (d_maha * stack.dx * stack.dx).sum(axis=1)
        off = (d_maha * stack.dx * stack.dy).sum(axis=1)
        d_conic[g, 0, 1] += off
        d_conic[g, 1, 0] += off
        d_conic[g, 1, 1] += (d_maha * stack.dy * stack.dy).sum(axis=1)

    # conic = inv(cov2d):  dL/dcov2d = -conic dL/dconic conic
    d_cov2d = -np.einsum("nab,nbc,ncd->nad", splats.conic, d_conic, splats.conic)
    # cov2d = J cov_cam J^T (+ constant dilation)
    d_cov_cam = np.einsum("nba,nbc,ncd->nad", splats.jac, d_cov2d, splats.jac)
    d_jac = 2.0 * np.einsum("nab,nbc,ncd->nad", d_cov2d, splats.jac, splats.cov_cam)

    # J and mean2d both depend on the camera-frame position.
    x, y, z = splats.xc[:, 0], splats.xc[:, 1], splats.xc[:, 2]
    fx, fy = camera.fx, camera.fy
    inv_z = 1.0 / z
    inv_z2 = inv_z * inv_z
    d_xc = np.zeros((nv, 3))
    d_xc[:, 0] = d_jac[:, 0, 2] * (-fx * inv_z2) + d_mean2d[:, 0] * fx * inv_z
    d_xc[:, 1] = d_jac[:, 1, 2] * (-fy * inv_z2) + d_mean2d[:, 1] * fy * inv_z
    d_xc[:, 2] = (d_jac[:, 0, 0] * (-fx * inv_z2)
                  + d_jac[:, 1, 1] * (-fy * inv_z2)
                  + d_jac[:, 0, 2] * (2.0 * fx * x * inv_z2 * inv_z)
                  + d_jac[:, 1, 2] * (2.0 * fy * y * inv_z2 * inv_z)
                  + d_mean2d[:, 0] * (-fx * x * inv_z2)
                  + d_mean2d[:, 1] * (-fy * y * inv_z2))

    r3 = camera.rotation
    d_position = d_xc @ r3
    d_cov3d = np.einsum("ba,nbc,cd->nad", r3, d_cov_cam, r3)

    # cov3d = M M^T with M = R diag(s)
    scale = act.scale[splats.indices]
    m = splats.rot * scale[:, None, :]
    d_m = 2.0 * np.einsum("nab,nbc->nac", d_cov3d, m)
    d_rot = d_m * scale[:, None, :]
    d_scale = np.einsum("nik,nik->nk", splats.rot, d_m)
    d_raw_scale = d_scale * scale

    # Rotation matrix -> unit quaternion -> raw quaternion.
    qn = act.rotation[splats.indices]
    qw, qx, qy, qz = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    r = d_rot
    d_qn = np.stack([
        2 * (-qz * r[:, 0, 1] + qy * r[:, 0, 2] + qz * r[:, 1, 0]
             - qx * r[:, 1, 2] - qy * r[:, 2, 0] + qx * r[:, 2, 1]),
        2 * (qy * r[:, 0, 1] + qz * r[:, 0, 2] + qy * r[:, 1, 0]
             - 2 * qx * r[:, 1, 1] - qw * r[:, 1, 2] + qz * r[:, 2, 0]
             + qw * r[:, 2, 1] - 2 * qx * r[:, 2, 2]),
        2 * (-2 * qy * r[:, 0, 0] + qx * r[:, 0, 1] + qw * r[:, 0, 2]
             + qx * r[:, 1, 0] + qz * r[:, 1, 2] - qw * r[:, 2, 0]
             + qz * r[:, 2, 1] - 2 * qy * r[:, 2, 2]),
        2 * (-2 * qz * r[:, 0, 0] - qw * r[:, 0, 1] + qx * r[:, 0, 2]
             + qw * r[:, 1, 0] - 2 * qz * r[:, 1, 1] + qy * r[:, 1, 2]
             + qx * r[:, 2, 0] + qy * r[:, 2, 1]),
    ], axis=1)
    raw_q = scene.raw_rotation[splats.indices]
    norm = np.linalg.norm(raw_q, axis=1, keepdims=True)
    d_raw_q = (d_qn - qn * np.sum(qn * d_qn, axis=1, keepdims=True)) / norm

    o = opacity
    d_raw_opacity = d_opacity * o * (1.0 - o)

    idx = splats.indices
    grads.position[idx] = d_position
    grads.raw_rotation[idx] = d_raw_q
    grads.raw_scale[idx] = d_raw_scale
    grads.raw_opacity[idx] = d_raw_opacity
    if payload_select == "color":
        grads.color[idx] = d_payload
    elif payload_select == "feature":
        grads.feature[idx] = d_payload
    else:
        grads.color[idx] = d_payload[:, :3]
        grads.feature[idx] = d_payload[:, 3:]
    return grads


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference sweep over every checked parameter."""

    epsilon: float
    tolerance: float
    payload_select: str
    rel_error: dict            # group name -> list of float (checked params)
    boundary_excluded: dict    # group name -> count of discontinuity-crossing params
    n_checked: int
    n_boundary: int
    max_rel_error: float
    fraction_within: float

    def passed(self) -> bool:
        return self.fraction_within >= 0.99

    def to_json(self) -> str:
        payload = {
            "epsilon": self.epsilon,
            "tolerance": self.tolerance,
            "payload_select": self.payload_select,
            "n_checked": self.n_checked,
            "n_boundary_excluded": self.n_boundary,
            "max_rel_error": self.max_rel_error,
            "fraction_within_tolerance": self.fraction_within,
            "boundary_excluded": self.boundary_excluded,
            "rel_error": self.rel_error,
        }
        return json.dumps(payload, sort_keys=True, indent=2)


def _fd_groups(payload_select: str):
    names = ["position", "raw_rotation", "raw_scale", "raw_opacity"]
    if payload_select in ("color", "joint"):
        names.append("color")
    if payload_select in ("feature", "joint"):
        names.append("feature")
    return names


def finite_diff_check(scene: RawGaussians, camera: CameraModel,
                      config: RasterConfig | None = None,
                      payload_select: str = "color",
                      upstream: np.ndarray | None = None,
                      upstream_alpha: np.ndarray | None = None,
                      epsilon: float = DEFAULT_FD_EPSILON,
                      tolerance: float = DEFAULT_FD_TOLERANCE) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    The scalar probed is sum(upstream * payload) (+ alpha-plane term when
    given); by default upstream is all ones. Parameters whose perturbed
    renders differ in blend structure (footprint, order, clamping) are
    excluded from the statistics and tallied per group instead.
    """
    if epsilon <= 0:
        raise PointsplatError(f"epsilon must be positive, got {epsilon}")
    config = config or RasterConfig()
    probe = render(scene, camera, config, payload_select)
    if upstream is None:
        upstream = np.ones_like(probe.payload)
    upstream = np.asarray(upstream, dtype=np.float64)

    def loss_and_fingerprint(s):
        buf, log = render(s, camera, config, payload_select, return_log=True)
        val = float(np.sum(upstream * buf.payload))
        if upstream_alpha is not None:
            val += float(np.sum(upstream_alpha * buf.alpha))
        return val, log.fingerprint()

    analytic = render_backward(scene, camera, config, payload_select,
                               upstream, upstream_alpha)
    analytic.validate(scene)

    work = scene.copy()
    rel_error: dict[str, list] = {}
    boundary: dict[str, int] = {}
    errs_all = []
    n_boundary = 0
    for name in _fd_groups(payload_select):
        arr = getattr(work, name)
        grad = getattr(analytic, name)
        rel_error[name] = []
        boundary[name] = 0
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for j in range(flat.size):
            base = flat[j]
            flat[j] = base + epsilon
            lo_plus, fp_plus = loss_and_fingerprint(work)
            flat[j] = base - epsilon
            lo_minus, fp_minus = loss_and_fingerprint(work)
            flat[j] = base
            if fp_plus != fp_minus:
                boundary[name] += 1
                n_boundary += 1
                continue
            numeric = (lo_plus - lo_minus) / (2.0 * epsilon)
            a = gflat[j]
            err = abs(a - numeric) / max(abs(a), abs(numeric), _REL_ERR_FLOOR)
            rel_error[name].append(float(err))
            errs_all.append(err)

    n_checked = len(errs_all)
    errs_all = np.asarray(errs_all) if errs_all else np.zeros(0)
    max_err = float(errs_all.max()) if n_checked else 0.0
    frac = float((errs_all < tolerance).mean()) if n_checked else 1.0
    return GradCheckReport(
        epsilon=epsilon, tolerance=tolerance, payload_select=payload_select,
        rel_error=rel_error, boundary_excluded=boundary,
        n_checked=n_checked, n_boundary=n_boundary,
        max_rel_error=max_err, fraction_within=frac)
