"""File formats: PLY point clouds, camera JSON, PNG images, raw float
sidecars, and binary scene checkpoints.

Checkpoint layout (version 1, all integers and floats little-endian):
magic "PFGS", u32 version, u64 count, u32 feature dim, the six raw parameter
arrays as float64 in declared order (position, raw_rotation, raw_scale,
raw_opacity, color, feature), u8 optimizer flag, optional optimizer state,
u32 provenance length, provenance JSON.
"""

import hashlib
import json
import struct
import warnings
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CameraValidationError, CheckpointError, PlyParseError, PointsplatError
from .fit import AdamState
from .geometry import CameraModel
from .primitives import PointCloud, RawGaussians

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}

CHECKPOINT_MAGIC = b"PFGS"
CHECKPOINT_VERSION = 1
_SCENE_ARRAYS = ("position", "raw_rotation", "raw_scale", "raw_opacity", "color", "feature")


# ---------------------------------------------------------------- PLY

def load_point_cloud(path) -> PointCloud:
    """Parse an ASCII or binary-little-endian PLY with xyz + rgb vertices.

    Requires float32/float64 x,y,z and uint8 red,green,blue; colors map to
    [0, 1] by /255. Unknown fixed-size vertex properties are ignored.
    """
    data = Path(path).read_bytes()
    lines = []
    offset = 0
    while True:
        nl = data.find(b"\n", offset)
        if nl < 0:
            raise PlyParseError("header is not terminated by end_header", offset)
        line = data[offset:nl].decode("ascii", errors="replace").strip()
        offset = nl + 1
        lines.append((line, offset))
        if line == "end_header":
            break
        if offset > 65536:
            raise PlyParseError("header exceeds 64 KiB; not a PLY file?", offset)

    if not lines or lines[0][0] != "ply":
        raise PlyParseError("missing 'ply' magic line", 0)

    fmt = None
    elements = []  # (name, count, [(prop_name, code)], has_list)
    for line, at in lines[1:-1]:
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian"):
                raise PlyParseError(f"unsupported format {' '.join(tok[1:])!r}", at)
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3:
                raise PlyParseError(f"malformed element line {line!r}", at)
            elements.append([tok[1], int(tok[2]), [], False])
        elif tok[0] == "property":
            if not elements:
                raise PlyParseError("property before any element", at)
            if tok[1] == "list":
                elements[-1][3] = True
            else:
                if tok[1] not in _PLY_TYPES:
                    raise PlyParseError(f"unknown property type {tok[1]!r}", at)
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt is None:
        raise PlyParseError("missing format line", 0)

    vertex = next((e for e in elements if e[0] == "vertex"), None)
    if vertex is None:
        raise PlyParseError("no vertex element", 0)
    if vertex[3]:
        raise PlyParseError("list properties on the vertex element are unsupported", 0)
    props = dict(vertex[2])
    for name in ("x", "y", "z"):
        if props.get(name) not in ("f4", "f8"):
            raise PlyParseError(f"vertex property {name!r} missing or not float32/float64", 0)
    for name in ("red", "green", "blue"):
        if props.get(name) != "u1":
            raise PlyParseError(f"vertex property {name!r} missing or not uint8", 0)

    count = vertex[1]
    names = [p[0] for p in vertex[2]]
    if fmt == "binary_little_endian":
        if elements[0][0] != "vertex":
            raise PlyParseError("binary layout with vertex element not first is unsupported", offset)
        dtype = np.dtype([(n, "<" + c) for n, c in vertex[2]])
        need = count * dtype.itemsize
        if len(data) - offset < need:
            raise PlyParseError(
                f"truncated payload: need {need} bytes for {count} vertices, have {len(data) - offset}",
                len(data))
        table = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    else:
        text = data[offset:].decode("ascii", errors="replace").split("\n")
        rows = []
        at = offset
        for line in text:
            if len(rows) == count:
                break
            stripped = line.strip()
            if stripped:
                tok = stripped.split()
                if len(tok) < len(names):
                    raise PlyParseError(
                        f"vertex row {len(rows)} has {len(tok)} values, expected {len(names)}", at)
                rows.append(tok[:len(names)])
            at += len(line) + 1
        if len(rows) < count:
            raise PlyParseError(f"truncated payload: {len(rows)} of {count} vertex rows", len(data))
        table = {}
        cols = list(zip(*rows)) if rows else [[] for _ in names]
        for (name, code), col in zip(vertex[2], cols):
            table[name] = np.asarray(col, dtype="<" + code)

    positions = np.stack([np.asarray(table["x"], dtype=np.float64),
                          np.asarray(table["y"], dtype=np.float64),
                          np.asarray(table["z"], dtype=np.float64)], axis=1)
    colors = np.stack([np.asarray(table["red"], dtype=np.float64),
                       np.asarray(table["green"], dtype=np.float64),
                       np.asarray(table["blue"], dtype=np.float64)], axis=1) / 255.0
    return PointCloud(positions=positions, colors=colors)


def save_point_cloud(path, cloud: PointCloud, binary: bool = True):
    """Write a PLY with float64 positions (bit-exact round trip) + uint8 rgb."""
    rgb = np.clip(np.round(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    n = len(cloud)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {n}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n")
    path = Path(path)
    if binary:
        dtype = np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
                          ("red", "u1"), ("green", "u1"), ("blue", "u1")])
        table = np.empty(n, dtype=dtype)
        table["x"], table["y"], table["z"] = cloud.positions.T
        table["red"], table["green"], table["blue"] = rgb.T
        path.write_bytes(header.encode("ascii") + table.tobytes())
    else:
        rows = [f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {c[0]} {c[1]} {c[2]}"
                for p, c in zip(cloud.positions, rgb)]
        path.write_text(header + "\n".join(rows) + ("\n" if rows else ""))


# ---------------------------------------------------------------- cameras

_CAMERA_KEYS = ("fx", "fy", "cx", "cy", "width", "height", "world_to_camera")


def load_cameras(path) -> list:
    """Parse a JSON array of camera objects and validate each.

    Rotations may deviate from orthonormal by up to 1e-4 (JSON rounding);
    they are projected onto the nearest rotation so the camera model's
    stricter invariant holds.
    """
    with open(path) as f:
        doc = json.load(f)
    if not isinstance(doc, list):
        raise CameraValidationError("camera file must contain a JSON array")
    if not doc:
        warnings.warn(f"camera file {path} lists zero cameras", stacklevel=2)
        return []
    cameras = []
    for i, item in enumerate(doc):
        if not isinstance(item, dict):
            raise CameraValidationError(f"camera {i}: expected an object")
        missing = [k for k in _CAMERA_KEYS if k not in item]
        if missing:
            raise CameraValidationError(f"camera {i}: missing keys {missing}")
        w2c = np.asarray(item["world_to_camera"], dtype=np.float64)
        if w2c.size != 16:
            raise CameraValidationError(f"camera {i}: world_to_camera must hold 16 numbers")
        w2c = w2c.reshape(4, 4)
        if np.abs(w2c[3] - np.array([0, 0, 0, 1.0])).max() > 1e-6:
            raise CameraValidationError(f"camera {i}: last row must be (0, 0, 0, 1)")
        r = w2c[:3, :3]
        err = np.abs(r @ r.T - np.eye(3)).max()
        if err > 1e-4:
            raise CameraValidationError(
                f"camera {i}: rotation block is not orthonormal (max deviation {err:.3e})")
        if np.linalg.det(r) <= 0:
            raise CameraValidationError(f"camera {i}: rotation block has nonpositive determinant")
        u, _, vt = np.linalg.svd(r)
        if np.linalg.det(u @ vt) < 0:
            u[:, -1] = -u[:, -1]
        w2c[:3, :3] = u @ vt
        try:
            cameras.append(CameraModel(
                fx=float(item["fx"]), fy=float(item["fy"]),
                cx=float(item["cx"]), cy=float(item["cy"]),
                width=int(item["width"]), height=int(item["height"]),
                world_to_camera=w2c))
        except CameraValidationError as exc:
            raise CameraValidationError(f"camera {i}: {exc}") from exc
    return cameras


def save_cameras(path, cameras):
    doc = [{"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
            "width": c.width, "height": c.height,
            "world_to_camera": [float(v) for v in c.world_to_camera.reshape(-1)]}
           for c in cameras]
    Path(path).write_text(json.dumps(doc, indent=2))


# ---------------------------------------------------------------- images

def quantize_unit(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and quantize to uint8 with round-half-up."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(image, path, value_range=(0.0, 1.0)):
    """Write a 1- or 3-channel image as an 8-bit PNG.

    `image` may be an (H, W), (H, W, 1), or (H, W, 3) float array or a
    RenderBuffers (its payload is used). `value_range` maps to [0, 1]
    before quantization.
    """
    arr = getattr(image, "payload", image)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    lo, hi = value_range
    if hi <= lo:
        raise PointsplatError(f"invalid value range {value_range}")
    q = quantize_unit((arr - lo) / (hi - lo))
    if q.shape[2] == 1:
        Image.fromarray(q[:, :, 0], mode="L").save(path)
    elif q.shape[2] == 3:
        Image.fromarray(q, mode="RGB").save(path)
    else:
        raise PointsplatError(
            f"direct save supports 1 or 3 channels, got {q.shape[2]}; "
            "use save_feature_planes for feature payloads")


def save_feature_planes(image, path_stem, value_range=(0.0, 1.0)) -> list:
    """Write each channel of a multi-channel buffer as stem_f{k}.png."""
    arr = getattr(image, "payload", image)
    arr = np.asarray(arr, dtype=np.float64)
    paths = []
    for k in range(arr.shape[2]):
        p = Path(f"{path_stem}_f{k}.png")
        save_image(arr[:, :, k], p, value_range)
        paths.append(p)
    return paths


def load_image(path) -> np.ndarray:
    """Read a PNG into a float64 (H, W, C) array in [0, 1]."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def save_float_sidecar(path, array: np.ndarray):
    """Raw little-endian float64 dump with a JSON shape header."""
    array = np.asarray(array, dtype="<f8")
    header = json.dumps({"shape": list(array.shape), "dtype": "<f8"},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(np.ascontiguousarray(array).tobytes())


def load_float_sidecar(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise PointsplatError(f"sidecar {path} is too short")
    (hlen,) = struct.unpack("<I", data[:4])
    header = json.loads(data[4:4 + hlen].decode("utf-8"))
    arr = np.frombuffer(data[4 + hlen:], dtype=header["dtype"])
    return arr.reshape(header["shape"]).astype(np.float64)


# ---------------------------------------------------------------- checkpoints

def config_hash(config) -> str:
    doc = {k: getattr(config, k) for k in vars(config)} if not isinstance(config, dict) else config
    blob = json.dumps(doc, sort_keys=True, default=repr).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, scene: RawGaussians, optimizer_state: AdamState | None = None,
                    provenance: dict | None = None):
    scene.validate()
    parts = [CHECKPOINT_MAGIC,
             struct.pack("<IQI", CHECKPOINT_VERSION, len(scene), scene.feature_dim)]
    for name in _SCENE_ARRAYS:
        parts.append(np.ascontiguousarray(getattr(scene, name), dtype="<f8").tobytes())
    if optimizer_state is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<B", 1))
        groups = sorted(optimizer_state.m)
        parts.append(struct.pack("<QI", optimizer_state.step, len(groups)))
        for name in groups:
            blob = name.encode("utf-8")
            parts.append(struct.pack("<H", len(blob)))
            parts.append(blob)
            parts.append(np.ascontiguousarray(optimizer_state.m[name], dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(optimizer_state.v[name], dtype="<f8").tobytes())
    prov = json.dumps(provenance or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(prov)))
    parts.append(prov)
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, name: str):
        self.data, self.at, self.name = data, 0, name

    def take(self, n: int) -> bytes:
        if self.at + n > len(self.data):
            raise CheckpointError(
                f"{self.name}: truncated at byte {self.at}, needed {n} more bytes")
        out = self.data[self.at:self.at + n]
        self.at += n
        return out

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(n * 8), dtype="<f8").reshape(shape).astype(np.float64)


def _group_shape(name: str, n: int, d: int):
    return {"position": (n, 3), "raw_rotation": (n, 4), "raw_scale": (n, 3),
            "raw_opacity": (n,), "color": (n, 3), "feature": (n, d)}[name]


def load_checkpoint(path):
    """Returns (scene, optimizer_state or None, provenance dict)."""
    r = _Reader(Path(path).read_bytes(), str(path))
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic; not a scene checkpoint")
    version, count, d = struct.unpack("<IQI", r.take(16))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    arrays = {name: r.array(_group_shape(name, count, d)) for name in _SCENE_ARRAYS}
    scene = RawGaussians(**arrays)
    scene.validate()
    state = None
    (flag,) = struct.unpack("<B", r.take(1))
    if flag:
        step, n_groups = struct.unpack("<QI", r.take(12))
        m, v = {}, {}
        for _ in range(n_groups):
            (ln,) = struct.unpack("<H", r.take(2))
            name = r.take(ln).decode("utf-8")
            if name not in _SCENE_ARRAYS:
                raise CheckpointError(f"{path}: unknown optimizer group {name!r}")
            shape = _group_shape(name, count, d)
            m[name] = r.array(shape)
            v[name] = r.array(shape)
        state = AdamState(m=m, v=v, step=step)
    (plen,) = struct.unpack("<I", r.take(4))
    provenance = json.loads(r.take(plen).decode("utf-8")) if plen else {}
    return scene, state, provenance
