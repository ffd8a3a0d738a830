"""Raster and point/mesh file formats.

* colour images: 8-bit RGB PNG
* float maps: PFM, little-endian, rows stored bottom-to-top as the format
  requires; depth is single channel ("Pf"), normals three channel ("PF")
* point clouds: binary little-endian PLY, double x/y/z + uchar RGB
* triangle soups: ASCII PLY polygon mesh, three unshared vertices per face
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def save_png(path, rgb: np.ndarray):
    arr = np.clip(np.round(np.asarray(rgb, float) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_image(path, size: tuple[int, int] | None = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != tuple(size):
            im = im.resize(tuple(size), Image.Resampling.BOX)
        return np.asarray(im, dtype=np.float64) / 255.0


def write_pfm(path, data: np.ndarray):
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        kind = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        kind = b"PF"
    else:
        raise ValueError("PFM maps must be (H, W) or (H, W, 3)")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(kind + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(data).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        dims = f.readline().split()
        if len(dims) != 2:
            raise ValueError(f"{path}: malformed PFM size line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        ch = 3 if kind == b"PF" else 1
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != w * h * ch:
        raise ValueError(f"{path}: payload size mismatch")
    data = data.reshape((h, w, ch) if ch == 3 else (h, w))
    return np.flipud(data).astype(np.float64)


def write_ply_points(path, points: np.ndarray, colors: np.ndarray | None = None):
    pts = np.asarray(points, dtype="<f8").reshape(-1, 3)
    n = len(pts)
    cols = np.zeros((n, 3)) if colors is None else np.asarray(colors, float).reshape(-1, 3)
    rgb = np.clip(np.round(cols * 255), 0, 255).astype(np.uint8)
    rec = np.empty(n, dtype=[("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
                             ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    rec["x"], rec["y"], rec["z"] = pts.T
    rec["red"], rec["green"], rec["blue"] = rgb.T
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {n}\n"
              "property double x\nproperty double y\nproperty double z\n"
              "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n")
    with open(path, "wb") as f:
        f.write(header.encode())
        f.write(rec.tobytes())


_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
              "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1", "short": "<i2",
              "ushort": "<u2", "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4"}


def read_ply_points(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read vertex positions (and colours if present) from a binary-LE or ASCII PLY."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt = None
        props = []
        n = 0
        in_vertex = False
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: unterminated PLY header")
            tok = line.decode().split()
            if not tok:
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    n = int(tok[2])
            elif tok[0] == "property" and in_vertex:
                if tok[1] == "list":
                    raise ValueError(f"{path}: list properties on vertices unsupported")
                props.append((tok[2], _PLY_TYPES[tok[1]]))
            elif tok[0] == "end_header":
                break
        if fmt == "binary_little_endian":
            rec = np.frombuffer(f.read(n * np.dtype(props).itemsize), dtype=props, count=n)
        elif fmt == "ascii":
            rows = [f.readline().split() for _ in range(n)]
            rec = np.array([tuple(r[:len(props)]) for r in rows], dtype=props)
        else:
            raise ValueError(f"{path}: unsupported PLY format {fmt}")
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=-1).astype(np.float64)
    names = [p[0] for p in props]
    cols = None
    if all(c in names for c in ("red", "green", "blue")):
        cols = np.stack([rec["red"], rec["green"], rec["blue"]], axis=-1).astype(np.float64) / 255.0
    return pts, cols


def write_mesh_ply(path, soup):
    """Export triangles as an ASCII PLY polygon mesh with DC vertex colours."""
    from ..sh import sh_to_rgb

    V = soup.vertices().reshape(-1, 3)
    rgb = np.clip(sh_to_rgb(soup.sh[:, :, 0, :]).reshape(-1, 3), 0, 1)
    rgb8 = np.round(rgb * 255).astype(int)
    n = soup.count
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {3 * n}\nproperty double x\nproperty double y\nproperty double z\n")
        f.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        f.write(f"element face {n}\nproperty list uchar int vertex_indices\nend_header\n")
        for p, c in zip(V, rgb8):
            f.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}\n")
        for i in range(n):
            f.write(f"3 {3 * i} {3 * i + 1} {3 * i + 2}\n")


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
