"""Readers and writers for the on-disk formats.

CFR1 raster layout (little-endian)::

    bytes 0-3   b"CFR1"
    uint32      height
    uint32      width
    uint32      channels
    uint32      dtype code (0 = float32, 1 = uint8 mask)
    payload     row-major, height * width * channels elements

Every writer goes through :func:`atomic_write`, so an interrupted run never
leaves a partially written file under the final name.
"""

import json
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .geometry import Camera, PointCloud

CFR1_MAGIC = b"CFR1"
DTYPE_FLOAT32 = 0
DTYPE_UINT8 = 1
_HEADER = struct.Struct("<4sIIII")


class FormatError(ValueError):
    """A file does not follow the expected layout."""


@contextmanager
def atomic_write(path, mode="wb"):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def encode_raster(array):
    a = np.asarray(array)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise FormatError(f"raster must be 2-D or 3-D, got shape {a.shape}")
    if a.dtype == np.bool_ or a.dtype == np.uint8:
        code, payload = DTYPE_UINT8, a.astype("<u1")
    else:
        code, payload = DTYPE_FLOAT32, a.astype("<f4")
    h, w, c = a.shape
    return _HEADER.pack(CFR1_MAGIC, h, w, c, code) + np.ascontiguousarray(payload).tobytes()


def decode_raster(buf):
    if len(buf) < _HEADER.size:
        raise FormatError("truncated CFR1 header")
    magic, h, w, c, code = _HEADER.unpack_from(buf)
    if magic != CFR1_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if code == DTYPE_FLOAT32:
        dtype = np.dtype("<f4")
    elif code == DTYPE_UINT8:
        dtype = np.dtype("<u1")
    else:
        raise FormatError(f"unknown dtype code {code}")
    n = h * w * c
    if len(buf) != _HEADER.size + n * dtype.itemsize:
        raise FormatError(f"payload size mismatch for {h}x{w}x{c}")
    return np.frombuffer(buf, dtype=dtype, count=n, offset=_HEADER.size).reshape(h, w, c).copy()


def write_raster(path, array):
    data = encode_raster(array)
    with atomic_write(path) as fh:
        fh.write(data)


def read_raster(path):
    """Returns (H, W, C) float32 or uint8."""
    return decode_raster(Path(path).read_bytes())


def write_mask(path, mask):
    write_raster(path, np.asarray(mask, dtype=bool))


def read_mask(path):
    m = read_raster(path)
    if m.dtype != np.uint8 or m.shape[2] != 1:
        raise FormatError(f"{path}: expected a 1-channel uint8 mask")
    return m[..., 0] != 0


def write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    with atomic_write(path, "w") as fh:
        fh.write(text)


def read_json(path):
    return json.loads(Path(path).read_text())


def write_camera(path, camera):
    write_json(path, camera.to_dict())


def read_camera(path):
    return Camera.from_dict(read_json(path))


def encode_ply(cloud):
    pts = np.asarray(cloud.points, dtype="<f4")
    has_color = cloud.colors is not None
    head = ["ply", "format binary_little_endian 1.0", f"element vertex {len(pts)}",
            "property float x", "property float y", "property float z"]
    if has_color:
        head += ["property uchar red", "property uchar green", "property uchar blue"]
    head.append("end_header")
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if has_color:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.empty(len(pts), dtype=fields)
    rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    if has_color:
        rec["red"], rec["green"], rec["blue"] = cloud.colors.T
    return ("\n".join(head) + "\n").encode("ascii") + rec.tobytes()


def write_ply(path, cloud):
    data = encode_ply(cloud)
    with atomic_write(path) as fh:
        fh.write(data)


_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
              "uchar": "u1", "uint8": "u1", "char": "i1", "int": "<i4", "uint": "<u4",
              "short": "<i2", "ushort": "<u2"}


def read_ply(path):
    buf = Path(path).read_bytes()
    end = buf.find(b"end_header\n")
    if not buf.startswith(b"ply\n") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    lines = buf[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise FormatError(f"{path}: only binary little-endian PLY is supported")
    count = None
    fields = []
    for line in lines:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts and parts[0] == "element" and count is not None:
            raise FormatError(f"{path}: only a single vertex element is supported")
        elif parts and parts[0] == "property" and count is not None:
            if parts[1] == "list" or parts[1] not in _PLY_TYPES:
                raise FormatError(f"{path}: unsupported property {line!r}")
            fields.append((parts[2], _PLY_TYPES[parts[1]]))
    if count is None:
        raise FormatError(f"{path}: missing vertex element")
    dt = np.dtype(fields)
    body = buf[end + len(b"end_header\n"):]
    if len(body) != count * dt.itemsize:
        raise FormatError(f"{path}: payload size mismatch")
    rec = np.frombuffer(body, dtype=dt, count=count)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    colors = None
    if {"red", "green", "blue"} <= set(dt.names):
        colors = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1).astype(np.uint8)
    return PointCloud(pts, colors=colors)


def encode_obj(mesh):
    out = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    out += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    return ("\n".join(out) + "\n").encode("ascii")


def write_obj(path, mesh):
    data = encode_obj(mesh)
    with atomic_write(path) as fh:
        fh.write(data)


def read_obj(path):
    from .meshes import TriMesh

    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            if len(idx) != 3:
                raise FormatError(f"{path}:{lineno}: only triangular faces are supported")
            faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    return TriMesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3),
                   np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def write_ppm(path, rgb):
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w = rgb.shape[:2]
    with atomic_write(path) as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb).tobytes())


def read_ppm(path):
    buf = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    pos += 1  # exactly one whitespace byte separates header and raster
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise FormatError(f"{path}: expected an 8-bit binary PPM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3)
