"""Readers and writers for every file the command line touches.

* depth images: 16-bit single-channel PNG, ``depth = raw * scale``, raw 0 = invalid
* color images: 8-bit RGB PNG
* point clouds: PLY, ascii or binary little-endian, with float/double
  ``x y z``, optional uchar ``red green blue`` and optional float ``u v``
  pixel provenance
* flow files: ``b"SFL1"``, uint32 count, then count float32 triples, little-endian
* pose files: 12 numbers, row-major 3x4 ``[R|t]`` (KITTI odometry layout)
* intrinsics files: ``fx fy cx cy`` on one line
* config files: flat ``key = value`` lines, ``#`` starts a comment

Every reader raises :class:`~sceneflow.errors.FormatError` naming the path
on malformed input.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict

import numpy as np
from PIL import Image

from .errors import FormatError, InvalidInputError
from .geometry import CameraIntrinsics, DepthMap, PointCloud, RigidTransform

DEFAULT_DEPTH_SCALE = 1.0 / 256.0
FLOW_MAGIC = b"SFL1"
POSE_TOL = 1e-6


def _open_image(path):
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise FormatError(path, f"cannot read image ({exc})") from None
    return img


# -- depth and color images ------------------------------------------------


def read_depth_image(path, scale: float = DEFAULT_DEPTH_SCALE) -> DepthMap:
    return DepthMap(read_depth_raw(path) * float(_check_scale(scale)))


def read_depth_raw(path) -> np.ndarray:
    img = _open_image(path)
    if img.mode not in ("I;16", "I;16B", "I;16L", "I"):
        raise FormatError(path, f"expected a 16-bit single-channel image, got mode {img.mode}")
    raw = np.asarray(img)
    if img.mode == "I" and (raw.min() < 0 or raw.max() > 65535):
        raise FormatError(path, "pixel values outside the 16-bit range")
    return raw.astype(np.float64)


def depth_to_raw(depth: DepthMap, scale: float = DEFAULT_DEPTH_SCALE) -> np.ndarray:
    vals = np.where(depth.valid, depth.values, 0.0) / _check_scale(scale)
    raw = np.rint(vals)
    if raw.max(initial=0) > 65535:
        raise InvalidInputError(f"depth {depth.values.max()} m does not fit in 16 bits at scale {scale}")
    # A valid depth must not round to the invalid sentinel.
    raw = np.where(depth.valid & (raw == 0), 1, raw)
    return raw.astype(np.uint16)


def write_depth_raw(path, raw) -> None:
    raw = np.asarray(raw)
    if raw.ndim != 2 or raw.dtype != np.uint16:
        raise InvalidInputError("raw depth must be a 2-D uint16 array")
    Image.fromarray(raw.astype("<u2")).save(path, format="PNG")


def write_depth_image(path, depth: DepthMap, scale: float = DEFAULT_DEPTH_SCALE) -> None:
    write_depth_raw(path, depth_to_raw(depth, scale))


def _check_scale(scale):
    if not (np.isfinite(scale) and scale > 0):
        raise InvalidInputError(f"depth scale must be positive, got {scale}")
    return scale


def read_rgb_image(path) -> np.ndarray:
    img = _open_image(path)
    if img.mode not in ("RGB", "RGBA", "L"):
        raise FormatError(path, f"expected an 8-bit color image, got mode {img.mode}")
    return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def write_rgb_image(path, image) -> None:
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


# -- PLY ---------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(path, data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError(path, "not a PLY file")
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    fmt = None
    elements = []
    for line in data[:end].decode("ascii", errors="replace").splitlines()[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1] if len(tok) > 1 else None
        elif tok[0] == "element" and len(tok) == 3:
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property" and elements:
            if tok[1] == "list":
                raise FormatError(path, "list properties are not supported")
            if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise FormatError(path, f"bad property line {line!r}")
            elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise FormatError(path, f"unexpected header line {line!r}")
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(path, f"unsupported PLY format {fmt!r}")
    return fmt, elements, body_start


def read_ply(path) -> PointCloud:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(path, str(exc)) from None
    try:
        fmt, elements, start = _parse_ply_header(path, data)
    except ValueError as exc:
        raise FormatError(path, f"bad header ({exc})") from None
    if not elements or elements[0][0] != "vertex":
        raise FormatError(path, "first element must be 'vertex'")
    _, count, props = elements[0]
    names = [p[0] for p in props]
    missing = [c for c in ("x", "y", "z") if c not in names]
    if missing:
        raise FormatError(path, f"missing required properties {missing}")
    dtype = np.dtype([(n, "<" + t) for n, t in props])
    body = data[start:]
    if fmt == "binary_little_endian":
        need = dtype.itemsize * count
        if len(body) < need:
            raise FormatError(path, f"truncated: expected {need} bytes of vertex data, got {len(body)}")
        rec = np.frombuffer(body, dtype=dtype, count=count)
    else:
        rows = body.decode("ascii", errors="replace").split("\n")
        rows = [r for r in rows if r.strip()][:count]
        if len(rows) < count:
            raise FormatError(path, f"expected {count} vertex lines, got {len(rows)}")
        try:
            table = np.array([r.split() for r in rows], dtype=np.float64)
        except ValueError:
            raise FormatError(path, "vertex lines are ragged or non-numeric") from None
        if count and table.shape[1] != len(props):
            raise FormatError(path, f"expected {len(props)} values per vertex, got {table.shape[1]}")
        rec = np.zeros(count, dtype=dtype)
        for i, n in enumerate(names):
            rec[n] = table[:, i] if count else []
    pts = np.stack([rec[c].astype(np.float64) for c in "xyz"], axis=1) if count else np.zeros((0, 3))
    if not np.all(np.isfinite(pts)):
        raise FormatError(path, "non-finite coordinates")
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.stack([rec[c].astype(np.float64) for c in ("red", "green", "blue")], axis=1) / 255.0
    pixels = None
    if "u" in names and "v" in names:
        pixels = np.stack([rec["u"].astype(np.float64), rec["v"].astype(np.float64)], axis=1)
    return PointCloud(pts, colors, pixels)


def write_ply(path, cloud: PointCloud, binary: bool = True, coord_type: str = "double") -> None:
    """Write a cloud; ``coord_type`` is ``"double"`` (lossless) or ``"float"``."""
    if coord_type not in ("float", "double"):
        raise InvalidInputError("coord_type must be 'float' or 'double'")
    n = len(cloud)
    props = [(c, coord_type) for c in "xyz"]
    if cloud.colors is not None:
        props += [(c, "uchar") for c in ("red", "green", "blue")]
    if cloud.source_pixels is not None:
        props += [("u", "float"), ("v", "float")]
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {n}"]
    header += [f"property {t} {name}" for name, t in props]
    header.append("end_header")
    rec = np.zeros(n, dtype=[(name, "<" + _PLY_TYPES[t]) for name, t in props])
    for i, c in enumerate("xyz"):
        rec[c] = cloud.points[:, i]
    if cloud.colors is not None:
        rgb = np.clip(np.rint(cloud.colors * 255.0), 0, 255)
        for i, c in enumerate(("red", "green", "blue")):
            rec[c] = rgb[:, i]
    if cloud.source_pixels is not None:
        rec["u"] = cloud.source_pixels[:, 0]
        rec["v"] = cloud.source_pixels[:, 1]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(rec.tobytes())
        else:
            for row in rec:
                fh.write((" ".join(_ascii_value(row[name], t) for name, t in props) + "\n").encode("ascii"))


def _ascii_value(val, ply_type):
    if ply_type == "uchar":
        return str(int(val))
    if ply_type == "double":
        return repr(float(val))
    return f"{float(val):.9g}"


# -- flow files --------------------------------------------------------------


def write_flow(path, flow) -> None:
    arr = np.asarray(flow, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3 or not np.all(np.isfinite(arr)):
        raise InvalidInputError("flow must be a finite (N, 3) array")
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC + struct.pack("<I", len(arr)))
        fh.write(arr.astype("<f4").tobytes())


def read_flow(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(path, str(exc)) from None
    if len(data) < 8 or data[:4] != FLOW_MAGIC:
        raise FormatError(path, "missing SFL1 header")
    (count,) = struct.unpack("<I", data[4:8])
    if len(data) != 8 + 12 * count:
        raise FormatError(path, f"expected {8 + 12 * count} bytes for {count} vectors, got {len(data)}")
    flow = np.frombuffer(data, dtype="<f4", offset=8).reshape(count, 3).astype(np.float64)
    if not np.all(np.isfinite(flow)):
        raise FormatError(path, "non-finite flow values")
    return flow


# -- small text files ----------------------------------------------------------


def _read_numbers(path, expected: int):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(path, str(exc)) from None
    try:
        vals = [float(x) for x in text.split()]
    except ValueError:
        raise FormatError(path, "non-numeric token") from None
    if len(vals) != expected:
        raise FormatError(path, f"expected {expected} numbers, got {len(vals)}")
    if not all(np.isfinite(vals)):
        raise FormatError(path, "non-finite value")
    return vals


def orthonormalize(R, tol: float = POSE_TOL) -> np.ndarray:
    """Nearest rotation to ``R``; raises InvalidInputError if ``R`` is more than ``tol`` away."""
    R = np.asarray(R, dtype=np.float64)
    if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1) > tol:
        raise InvalidInputError("matrix is not a rotation within tolerance")
    u, _, vt = np.linalg.svd(R)
    return u @ vt


def read_pose(path) -> RigidTransform:
    mat = np.array(_read_numbers(path, 12)).reshape(3, 4)
    try:
        R = orthonormalize(mat[:, :3])
    except InvalidInputError:
        raise FormatError(path, "rotation part is not orthonormal within 1e-6") from None
    return RigidTransform(R, mat[:, 3])


def write_pose(path, pose: RigidTransform) -> None:
    mat = np.hstack([pose.rotation, pose.translation[:, None]])
    Path(path).write_text(" ".join(repr(float(x)) for x in mat.ravel()) + "\n", encoding="utf-8")


def read_intrinsics(path) -> CameraIntrinsics:
    vals = _read_numbers(path, 4)
    try:
        return CameraIntrinsics(*vals)
    except InvalidInputError as exc:
        raise FormatError(path, str(exc)) from None


def write_intrinsics(path, K: CameraIntrinsics) -> None:
    Path(path).write_text(f"{K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r}\n", encoding="utf-8")


def read_config(path) -> Dict[str, str]:
    """Parse flat ``key = value`` text into a dict of strings."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(path, str(exc)) from None
    return parse_config(text, path)


def parse_config(text: str, path="<string>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise FormatError(path, f"line {lineno}: expected 'key = value'")
        key = key.strip()
        if key in out:
            raise FormatError(path, f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def write_config(path, values: Dict[str, object]) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in values.items()), encoding="utf-8")


def write_mask(path, mask) -> None:
    """One ``0``/``1`` per line, index-aligned with a cloud."""
    Path(path).write_text("".join("1\n" if m else "0\n" for m in np.asarray(mask, dtype=bool)), encoding="utf-8")


def read_mask(path) -> np.ndarray:
    try:
        tokens = Path(path).read_text(encoding="utf-8").split()
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(path, str(exc)) from None
    if any(t not in ("0", "1") for t in tokens):
        raise FormatError(path, "mask entries must be 0 or 1")
    return np.array([t == "1" for t in tokens], dtype=bool)
