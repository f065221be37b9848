"""Forward splatting: tile-binned depth-sorted alpha compositing.

Two renderers live here. `render` is the production path: gaussians are
projected once, binned into tiles by a conservative bounding box, and
composited per tile with vectorized transmittance products. `render_reference`
is a deliberately unoptimized per-pixel transcription of front-to-back
blending used as a correctness oracle; it goes through the scalar geometry
ops and its own 2x2 algebra so the two paths share as little code as
possible.

Both renderers share the same semantics: contributions inside the
`cutoff_sigmas` Mahalanobis radius are blended front to back in ascending
camera-depth order, ties broken by ascending input index, each contribution's
alpha clamped to 0.999 so transmittance stays positive.

Pixel (row i, col j) is sampled at the continuous image point (x=j, y=i).
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateCovarianceError, PointsplatError
from .geometry import (LOWPASS_DILATION, NEAR_PLANE, CameraModel, Covariance2,
                       build_covariance3d, project_covariance, project_point)
from .primitives import ActivatedGaussians, RawGaussians

# Per-contribution opacity ceiling; keeps 1 - alpha >= 1e-3 so the backward
# pass never divides by a vanishing transmittance factor.
ALPHA_CLAMP = 0.999

PAYLOAD_KINDS = ("color", "feature", "joint")


@dataclass
class RasterConfig:
    tile_size: int = 16
    cutoff_sigmas: float = 3.0
    background: np.ndarray | None = None  # C-vector; None means all-zero
    max_contributors_per_pixel: int | None = None

    def __post_init__(self):
        if self.tile_size < 1:
            raise PointsplatError(f"tile_size must be >= 1, got {self.tile_size}")
        if not self.cutoff_sigmas > 0:
            raise PointsplatError(f"cutoff_sigmas must be positive, got {self.cutoff_sigmas}")
        if self.background is not None:
            self.background = np.asarray(self.background, dtype=np.float64).reshape(-1)

    def background_vector(self, channels: int) -> np.ndarray:
        if self.background is None:
            return np.zeros(channels)
        if self.background.shape != (channels,):
            raise PointsplatError(
                f"background has {self.background.shape[0]} channels, payload has {channels}")
        return self.background


@dataclass
class RenderBuffers:
    """Rendered payload plus accumulated alpha and alpha-weighted mean depth."""

    payload: np.ndarray  # (H, W, C)
    alpha: np.ndarray    # (H, W)
    depth: np.ndarray    # (H, W)

    @property
    def channels(self) -> int:
        return self.payload.shape[2]


@dataclass
class ContributionLog:
    """Flat record of every (pixel, gaussian) blend event, in blend order.

    Entries are grouped by linear pixel index (y * W + x) and, within a
    pixel, ordered front to back. `clamped` marks contributions whose alpha
    hit the 0.999 ceiling.
    """

    pixel: np.ndarray     # (M,) linear pixel indices
    gaussian: np.ndarray  # (M,) original gaussian indices
    alpha: np.ndarray     # (M,)
    weight: np.ndarray    # (M,) alpha * transmittance
    clamped: np.ndarray   # (M,) bool

    def fingerprint(self) -> bytes:
        """Structure-only digest: which gaussians touch which pixels, in what
        order, and whether their alpha is clamped. Changes exactly when the
        render crosses a cutoff/ordering/clamp discontinuity."""
        return (self.pixel.astype(np.int64).tobytes()
                + self.gaussian.astype(np.int64).tobytes()
                + self.clamped.astype(np.uint8).tobytes())

    def dense_weights(self, n_gaussians: int, n_pixels: int) -> np.ndarray:
        w = np.zeros((n_gaussians, n_pixels))
        w[self.gaussian, self.pixel] = self.weight
        return w


def evaluate_gaussian2d(mean2d, cov2d, opacity, pixel) -> float:
    """Opacity-scaled 2D Gaussian at a pixel, clamped to [0, 0.999]."""
    m = cov2d.matrix if isinstance(cov2d, Covariance2) else np.asarray(cov2d, dtype=np.float64)
    a, b, c = m[0, 0], m[0, 1], m[1, 1]
    det = a * c - b * b
    if det <= 1e-12:
        raise DegenerateCovarianceError(f"2D covariance is singular (det {det:.3e})")
    d = np.asarray(pixel, dtype=np.float64) - np.asarray(mean2d, dtype=np.float64)
    quad = (c * d[0] * d[0] - 2 * b * d[0] * d[1] + a * d[1] * d[1]) / det
    return float(np.clip(opacity * np.exp(-0.5 * quad), 0.0, ALPHA_CLAMP))


def alpha_blend(contributions, background):
    """Front-to-back compositing of depth-ordered (payload, alpha) pairs.

    Returns (blended payload, final alpha). Literal transcription of
    C = sum(c_i * a_i * prod_{j<i}(1 - a_j)) + background * prod(1 - a_i).
    """
    background = np.asarray(background, dtype=np.float64)
    out = np.zeros_like(background)
    transmittance = 1.0
    for payload, alpha in contributions:
        if not (0 <= alpha < 1):
            raise PointsplatError(f"contribution alpha {alpha} outside [0, 1)")
        out = out + np.asarray(payload, dtype=np.float64) * (alpha * transmittance)
        transmittance *= 1.0 - alpha
    return out + background * transmittance, 1.0 - transmittance


def _rotations_from_unit_quats(q: np.ndarray) -> np.ndarray:
    """(N, 4) unit quaternions -> (N, 3, 3) rotation matrices."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((len(q), 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


@dataclass
class SceneSplats:
    """Per-gaussian screen-space quantities for the valid (front) subset."""

    indices: np.ndarray   # (V,) original gaussian indices, ascending
    xc: np.ndarray        # (V, 3) camera-frame positions
    mean2d: np.ndarray    # (V, 2)
    depth: np.ndarray     # (V,)
    rot: np.ndarray       # (V, 3, 3) world rotations
    cov_cam: np.ndarray   # (V, 3, 3) camera-frame covariances
    jac: np.ndarray       # (V, 2, 3) projection Jacobians
    cov2d: np.ndarray     # (V, 2, 2) dilated screen covariances
    conic: np.ndarray     # (V, 2, 2) inverses of cov2d
    radius: np.ndarray    # (V,) cutoff ellipse bound in pixels
    order: np.ndarray     # (V,) permutation sorting by (depth, index)


def project_scene(act: ActivatedGaussians, camera: CameraModel,
                  cutoff_sigmas: float, near: float = NEAR_PLANE) -> SceneSplats:
    """Vectorized projection of all gaussians; culls those behind `near`."""
    xc_all = act.position @ camera.rotation.T + camera.translation
    valid = xc_all[:, 2] >= near
    idx = np.flatnonzero(valid)
    xc = xc_all[idx]
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]

    mean2d = np.stack([camera.fx * x / z + camera.cx,
                       camera.fy * y / z + camera.cy], axis=1)

    rot = _rotations_from_unit_quats(act.rotation[idx])
    m = rot * act.scale[idx][:, None, :]
    cov3d = np.einsum("nik,njk->nij", m, m)
    r3 = camera.rotation
    cov_cam = np.einsum("ab,nbc,dc->nad", r3, cov3d, r3)

    jac = np.zeros((len(idx), 2, 3))
    jac[:, 0, 0] = camera.fx / z
    jac[:, 0, 2] = -camera.fx * x / (z * z)
    jac[:, 1, 1] = camera.fy / z
    jac[:, 1, 2] = -camera.fy * y / (z * z)

    cov2d = np.einsum("nab,nbc,ndc->nad", jac, cov_cam, jac)
    cov2d[:, 0, 0] += LOWPASS_DILATION
    cov2d[:, 1, 1] += LOWPASS_DILATION

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = c / det
    conic[:, 0, 1] = -b / det
    conic[:, 1, 0] = -b / det
    conic[:, 1, 1] = a / det

    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = cutoff_sigmas * np.sqrt(lam_max)

    order = np.argsort(z, kind="stable")
    return SceneSplats(idx, xc, mean2d, z, rot, cov_cam, jac, cov2d, conic, radius, order)


def bin_tiles(splats: SceneSplats, width: int, height: int, tile_size: int):
    """Assign each splat to the tiles its bounding box overlaps.

    Returns (tiles, n_tiles_x, n_tiles_y) where tiles maps linear tile index
    to a list of positions into the splat arrays, already in blend order.
    """
    ntx = (width + tile_size - 1) // tile_size
    nty = (height + tile_size - 1) // tile_size
    tiles: dict[int, list[int]] = {}
    mx, my = splats.mean2d[:, 0], splats.mean2d[:, 1]
    r = splats.radius
    for k in splats.order:
        x0 = int(np.ceil(mx[k] - r[k]))
        x1 = int(np.floor(mx[k] + r[k]))
        y0 = int(np.ceil(my[k] - r[k]))
        y1 = int(np.floor(my[k] + r[k]))
        if x1 < 0 or y1 < 0 or x0 > width - 1 or y0 > height - 1:
            continue
        tx0, tx1 = max(x0, 0) // tile_size, min(x1, width - 1) // tile_size
        ty0, ty1 = max(y0, 0) // tile_size, min(y1, height - 1) // tile_size
        for ty in range(ty0, ty1 + 1):
            base = ty * ntx
            for tx in range(tx0, tx1 + 1):
                tiles.setdefault(base + tx, []).append(int(k))
    return tiles, ntx, nty


def _payload_matrix(act: ActivatedGaussians, payload_select: str) -> np.ndarray:
    if payload_select == "color":
        return act.color
    if payload_select == "feature":
        return act.feature
    if payload_select == "joint":
        return np.concatenate([act.color, act.feature], axis=1)
    raise PointsplatError(f"payload_select must be one of {PAYLOAD_KINDS}, got {payload_select!r}")


def _as_activated(gaussians) -> ActivatedGaussians:
    if isinstance(gaussians, ActivatedGaussians):
        return gaussians
    if isinstance(gaussians, RawGaussians):
        return gaussians.activate()
    return ActivatedGaussians.from_list(gaussians)


def tile_pixel_grid(tx: int, ty: int, tile_size: int, width: int, height: int):
    """Pixel columns/rows covered by a tile plus their flattened coordinates."""
    x0, x1 = tx * tile_size, min((tx + 1) * tile_size, width)
    y0, y1 = ty * tile_size, min((ty + 1) * tile_size, height)
    xs = np.arange(x0, x1, dtype=np.float64)
    ys = np.arange(y0, y1, dtype=np.float64)
    px = np.tile(xs, len(ys))
    py = np.repeat(ys, len(xs))
    return x0, x1, y0, y1, px, py


@dataclass
class TileStack:
    """Per-tile (gaussian, pixel) blending intermediates, in blend order."""

    g: np.ndarray         # (K,) positions into the splat arrays
    dx: np.ndarray        # (K, P) pixel-x minus mean-x
    dy: np.ndarray        # (K, P)
    inside: np.ndarray    # (K, P) bool, within cutoff and contributor budget
    clamped: np.ndarray   # (K, P) bool, alpha ceiling engaged
    alpha: np.ndarray     # (K, P) clamped alpha, zero outside the footprint
    t_before: np.ndarray  # (K, P) transmittance before each contribution
    t_full: np.ndarray    # (K, P) transmittance after each contribution


def tile_alpha_weights(splats: SceneSplats, members, px, py,
                       opacity, cutoff_sq: float, max_contrib) -> TileStack:
    """Alpha and transmittance stack for one tile's member gaussians."""
    g = np.asarray(members, dtype=np.intp)
    dx = px[None, :] - splats.mean2d[g, 0][:, None]
    dy = py[None, :] - splats.mean2d[g, 1][:, None]
    ca = splats.conic[g, 0, 0][:, None]
    cb = splats.conic[g, 0, 1][:, None]
    cc = splats.conic[g, 1, 1][:, None]
    maha = ca * dx * dx + 2 * cb * dx * dy + cc * dy * dy
    inside = maha <= cutoff_sq
    alpha_raw = opacity[g][:, None] * np.exp(-0.5 * maha)
    if max_contrib is not None:
        inside &= np.cumsum(inside, axis=0) <= max_contrib
    clamped = (alpha_raw > ALPHA_CLAMP) & inside
    alpha = np.where(inside, np.minimum(alpha_raw, ALPHA_CLAMP), 0.0)
    t_full = np.cumprod(1.0 - alpha, axis=0)
    t_before = np.vstack([np.ones((1, alpha.shape[1])), t_full[:-1]])
    return TileStack(g, dx, dy, inside, clamped, alpha, t_before, t_full)


def render(gaussians, camera: CameraModel, config: RasterConfig | None = None,
           payload_select: str = "color", return_log: bool = False):
    """Tiled forward splatting.

    `gaussians` may be an ActivatedGaussians batch, a RawGaussians scene
    (activated on the fly), or an iterable of ActivatedGaussian. Returns
    RenderBuffers, or (RenderBuffers, ContributionLog) when `return_log`.
    """
    config = config or RasterConfig()
    act = _as_activated(gaussians)
    payload = _payload_matrix(act, payload_select)
    h, w, c = camera.height, camera.width, payload.shape[1]
    bg = config.background_vector(c)

    out = np.broadcast_to(bg, (h, w, c)).copy()
    alpha_plane = np.zeros((h, w))
    depth_plane = np.zeros((h, w))
    log_parts = []

    if len(act):
        splats = project_scene(act, camera, config.cutoff_sigmas)
        tiles, ntx, _ = bin_tiles(splats, w, h, config.tile_size)
        cutoff_sq = config.cutoff_sigmas ** 2
        opacity = act.opacity[splats.indices]
        pay = payload[splats.indices]
        for tile_id in sorted(tiles):
            members = tiles[tile_id]
            ty, tx = divmod(tile_id, ntx)
            x0, x1, y0, y1, px, py = tile_pixel_grid(tx, ty, config.tile_size, w, h)
            stack = tile_alpha_weights(splats, members, px, py, opacity, cutoff_sq,
                                       config.max_contributors_per_pixel)
            weight = stack.alpha * stack.t_before
            g = stack.g

            tile_pay = np.einsum("kp,kc->pc", weight, pay[g])
            residual = stack.t_full[-1]
            tile_pay += residual[:, None] * bg[None, :]
            wsum = weight.sum(axis=0)
            zacc = (weight * splats.depth[g][:, None]).sum(axis=0)
            tile_depth = np.divide(zacc, wsum, out=np.zeros_like(zacc), where=wsum > 0)

            shape2 = (y1 - y0, x1 - x0)
            out[y0:y1, x0:x1] = tile_pay.reshape(*shape2, c)
            alpha_plane[y0:y1, x0:x1] = (1.0 - residual).reshape(shape2)
            depth_plane[y0:y1, x0:x1] = tile_depth.reshape(shape2)

            if return_log:
                pidx, kidx = np.nonzero(stack.inside.T)  # pixel-major => blend order per pixel
                lin = (py[pidx].astype(np.int64) * w + px[pidx].astype(np.int64))
                log_parts.append((lin, splats.indices[g[kidx]],
                                  stack.alpha.T[pidx, kidx], weight.T[pidx, kidx],
                                  stack.clamped.T[pidx, kidx]))

    buffers = RenderBuffers(out, alpha_plane, depth_plane)
    if not return_log:
        return buffers
    if log_parts:
        lin = np.concatenate([p[0] for p in log_parts])
        order = np.argsort(lin, kind="stable")
        log = ContributionLog(
            pixel=lin[order],
            gaussian=np.concatenate([p[1] for p in log_parts])[order],
            alpha=np.concatenate([p[2] for p in log_parts])[order],
            weight=np.concatenate([p[3] for p in log_parts])[order],
            clamped=np.concatenate([p[4] for p in log_parts])[order],
        )
    else:
        log = ContributionLog(pixel=np.zeros(0, dtype=np.int64),
                              gaussian=np.zeros(0, dtype=np.int64),
                              alpha=np.zeros(0), weight=np.zeros(0),
                              clamped=np.zeros(0, dtype=bool))
    return buffers, log


def render_reference(gaussians, camera: CameraModel, config: RasterConfig | None = None,
                     payload_select: str = "color") -> RenderBuffers:
    """Brute-force oracle renderer.

    Every pixel evaluates every gaussian (same cutoff rule), contributions
    are sorted by (depth, input index), and blending follows the compositing
    sum term by term. No tiling, no bounding boxes, no early exit. Geometry
    goes through the scalar per-gaussian ops rather than the batched
    projection used by `render`.
    """
    config = config or RasterConfig()
    act = _as_activated(gaussians)
    payload = _payload_matrix(act, payload_select)
    h, w, c = camera.height, camera.width, payload.shape[1]
    bg = config.background_vector(c)
    cutoff_sq = config.cutoff_sigmas ** 2

    means, depths, conics, keep = [], [], [], []
    for i in range(len(act)):
        pixel, z, culled = project_point(act.position[i], camera)
        if culled:
            continue
        cov3 = build_covariance3d(act.rotation[i], act.scale[i])
        cov2 = project_covariance(cov3, camera, act.position[i])
        a, b, d = cov2.packed
        det = a * d - b * b
        conics.append(np.array([d / det, -b / det, a / det]))
        means.append(pixel)
        depths.append(z)
        keep.append(i)

    grid_x, grid_y = np.meshgrid(np.arange(w, dtype=np.float64),
                                 np.arange(h, dtype=np.float64))
    out = np.zeros((h, w, c))
    transmit = np.ones((h, w))
    zacc = np.zeros((h, w))
    wsum = np.zeros((h, w))
    count = np.zeros((h, w), dtype=np.int64)

    order = np.argsort(np.asarray(depths), kind="stable") if keep else []
    for k in order:
        i = keep[k]
        dx = grid_x - means[k][0]
        dy = grid_y - means[k][1]
        ca, cb, cc = conics[k]
        maha = ca * dx * dx + 2 * cb * dx * dy + cc * dy * dy
        inside = maha <= cutoff_sq
        if config.max_contributors_per_pixel is not None:
            count += inside
            inside &= count <= config.max_contributors_per_pixel
        alpha = np.where(inside,
                         np.minimum(act.opacity[i] * np.exp(-0.5 * maha), ALPHA_CLAMP),
                         0.0)
        weight = alpha * transmit
        out += weight[:, :, None] * payload[i][None, None, :]
        zacc += weight * depths[k]
        wsum += weight
        transmit = transmit * (1.0 - alpha)

    out += transmit[:, :, None] * bg[None, None, :]
    depth_plane = np.divide(zacc, wsum, out=np.zeros_like(zacc), where=wsum > 0)
    return RenderBuffers(out, 1.0 - transmit, depth_plane)
