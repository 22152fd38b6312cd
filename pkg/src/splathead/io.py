"""File formats: GGT tensors, PPM images, OBJ mesh subset, checkpoints.

GGT layout: magic "GGTENSOR" | version u32 | dtype u8 (0 = float32) |
ndim u8 | dims ndim*u64 | payload (row-major float32), all little-endian.
"""

import json
import os
import struct
import tempfile

import numpy as np

from .errors import ValidationError

GGT_MAGIC = b"GGTENSOR"
GGT_VERSION = 1


def ggt_bytes(array) -> bytes:
    a = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    header = GGT_MAGIC + struct.pack("<IBB", GGT_VERSION, 0, a.ndim)
    header += struct.pack("<%dQ" % a.ndim, *a.shape)
    return header + a.tobytes()


def write_ggt(path, array) -> None:
    with open(path, "wb") as f:
        f.write(ggt_bytes(array))


def ggt_from_bytes(buf: bytes, offset: int = 0):
    """Parse one GGT record; returns (array, next_offset)."""
    if buf[offset : offset + 8] != GGT_MAGIC:
        raise ValidationError("bad GGT magic")
    version, dtype, ndim = struct.unpack_from("<IBB", buf, offset + 8)
    if version != GGT_VERSION:
        raise ValidationError(f"unsupported GGT version {version}")
    if dtype != 0:
        raise ValidationError(f"unsupported GGT dtype code {dtype}")
    dims = struct.unpack_from("<%dQ" % ndim, buf, offset + 14)
    start = offset + 14 + 8 * ndim
    count = int(np.prod(dims)) if ndim else 1
    end = start + 4 * count
    if end > len(buf):
        raise ValidationError("GGT payload truncated")
    a = np.frombuffer(buf[start:end], dtype="<f4").reshape(dims).copy()
    return a, end


def read_ggt(path):
    with open(path, "rb") as f:
        buf = f.read()
    a, end = ggt_from_bytes(buf)
    if end != len(buf):
        raise ValidationError(f"trailing bytes in GGT file {path}")
    return a


def write_ppm(path, rgb) -> None:
    """Binary PPM (P6, maxval 255) from float RGB in [0, 1], shape H x W x 3."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValidationError(f"expected H x W x 3 image, got shape {rgb.shape}")
    h, w = rgb.shape[:2]
    data = np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


def read_ppm(path):
    """Returns float RGB in [0, 1], shape H x W x 3."""
    with open(path, "rb") as f:
        buf = f.read()
    parts = buf.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6":
        raise ValidationError(f"not a binary PPM: {path}")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValidationError("only maxval 255 PPM supported")
    pix = parts[4][: w * h * 3]
    if len(pix) != w * h * 3:
        raise ValidationError("PPM payload truncated")
    return np.frombuffer(pix, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def write_obj(path, vertices, triangles, uv_corners) -> None:
    """OBJ subset writer: per-corner vt entries, f v/vt indices (1-based)."""
    lines = []
    for v in vertices:
        lines.append("v %.9g %.9g %.9g" % (v[0], v[1], v[2]))
    for f_idx in range(len(triangles)):
        for c in range(3):
            u, vv = uv_corners[f_idx][c]
            lines.append("vt %.9g %.9g" % (u, vv))
    for f_idx, tri in enumerate(triangles):
        a, b, c = (int(t) + 1 for t in tri)
        t0 = 3 * f_idx + 1
        lines.append("f %d/%d %d/%d %d/%d" % (a, t0, b, t0 + 1, c, t0 + 2))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_obj(path):
    """OBJ subset: `v`, `vt`, `f a/at b/bt c/ct`. Returns (V x 3, F x 3, F x 3 x 2)."""
    verts, uvs, faces, face_uvs = [], [], [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            t = line.split()
            if not t or t[0].startswith("#"):
                continue
            if t[0] == "v":
                verts.append([float(x) for x in t[1:4]])
            elif t[0] == "vt":
                uvs.append([float(x) for x in t[1:3]])
            elif t[0] == "f":
                if len(t) != 4:
                    raise ValidationError(f"{path}:{lineno}: only triangle faces supported")
                vi, ti = [], []
                for tok in t[1:]:
                    parts = tok.split("/")
                    if len(parts) < 2 or not parts[1]:
                        raise ValidationError(f"{path}:{lineno}: face needs v/vt indices")
                    vi.append(int(parts[0]) - 1)
                    ti.append(int(parts[1]) - 1)
                faces.append(vi)
                face_uvs.append(ti)
    vertices = np.asarray(verts, dtype=np.float64)
    triangles = np.asarray(faces, dtype=np.int64)
    uv = np.asarray(uvs, dtype=np.float64)
    if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
        raise ValidationError(f"{path}: face vertex index out of range")
    fuv = np.asarray(face_uvs, dtype=np.int64)
    if fuv.size and (fuv.min() < 0 or fuv.max() >= len(uv)):
        raise ValidationError(f"{path}: face uv index out of range")
    uv_corners = uv[fuv] if fuv.size else np.zeros((0, 3, 2))
    return vertices, triangles, uv_corners


def atomic_write_bytes(path, data: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, tensors: dict) -> None:
    """Manifest JSON at `path` plus concatenated GGT records at `path`.bin."""
    path = os.fspath(path)
    names = sorted(tensors)
    blob = b"".join(ggt_bytes(tensors[n]) for n in names)
    manifest = {
        "format": "splathead-checkpoint",
        "version": 1,
        "data": os.path.basename(path) + ".bin",
        "tensors": [{"name": n, "shape": list(np.asarray(tensors[n]).shape)} for n in names],
    }
    atomic_write_bytes(path, json.dumps(manifest, indent=1).encode())
    atomic_write_bytes(path + ".bin", blob)


def load_checkpoint(path) -> dict:
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("format") != "splathead-checkpoint":
        raise ValidationError(f"not a checkpoint manifest: {path}")
    with open(os.path.join(os.path.dirname(os.path.abspath(path)), manifest["data"]), "rb") as f:
        blob = f.read()
    out, offset = {}, 0
    for entry in manifest["tensors"]:
        a, offset = ggt_from_bytes(blob, offset)
        if list(a.shape) != entry["shape"]:
            raise ValidationError(f"checkpoint shape mismatch for {entry['name']}")
        out[entry["name"]] = a
    if offset != len(blob):
        raise ValidationError("trailing bytes in checkpoint data")
    return out


def load_json(path):
    with open(path) as f:
        return json.load(f)


def save_json(path, obj) -> None:
    atomic_write_bytes(path, json.dumps(obj, indent=1).encode())
