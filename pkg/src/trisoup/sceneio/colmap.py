"""COLMAP text-format sparse reconstruction reader/writer."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..camera import Camera, CameraError
from ..soup import SparseSeed, quat_to_rot, rot_to_quat
from .files import load_image, save_png

SUPPORTED_MODELS = ("PINHOLE", "SIMPLE_PINHOLE")


class ParseError(ValueError):
    pass


@dataclass
class Dataset:
    cameras: list
    images: list
    seed: SparseSeed
    scale: float = 1.0
    holdout: list = field(default_factory=list)
    names: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise ParseError(f"{len(self.cameras)} cameras but {len(self.images)} images")
        for cam, img in zip(self.cameras, self.images):
            if img is not None and img.shape[:2] != (cam.height, cam.width):
                raise ParseError(f"image {cam.name!r} is {img.shape[1]}x{img.shape[0]}, "
                                 f"camera expects {cam.width}x{cam.height}")

    @property
    def train_ids(self) -> list[int]:
        hold = set(self.holdout)
        return [i for i in range(len(self.cameras)) if i not in hold]

    def validate_for_training(self):
        if len(self.train_ids) < 2:
            raise ParseError("training needs at least two posed images")
        for c in self.cameras:
            c.validate()
        if any(img is None for img in self.images):
            raise ParseError("dataset has cameras without images")


def _lines(path: Path):
    if not path.exists():
        raise ParseError(f"missing file: {path}")
    with open(path) as f:
        for no, line in enumerate(f, 1):
            yield no, line.rstrip("\n")


def _nums(tokens, path, no, conv=float):
    try:
        return [conv(t) for t in tokens]
    except ValueError as e:
        raise ParseError(f"{path}:{no}: malformed number ({e})") from e


def read_cameras(path) -> dict:
    path = Path(path)
    out = {}
    for no, line in _lines(path):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        tok = s.split()
        if len(tok) < 4:
            raise ParseError(f"{path}:{no}: expected CAMERA_ID MODEL WIDTH HEIGHT PARAMS")
        cid = _nums(tok[:1], path, no, int)[0]
        model = tok[1]
        w, h = _nums(tok[2:4], path, no, int)
        params = _nums(tok[4:], path, no)
        if model == "PINHOLE":
            if len(params) != 4:
                raise ParseError(f"{path}:{no}: PINHOLE needs 4 params, got {len(params)}")
            fx, fy, cx, cy = params
        elif model == "SIMPLE_PINHOLE":
            if len(params) != 3:
                raise ParseError(f"{path}:{no}: SIMPLE_PINHOLE needs 3 params, got {len(params)}")
            fx, cx, cy = params
            fy = fx
        else:
            raise ParseError(f"{path}:{no}: unsupported camera model {model!r} "
                             f"(supported: {', '.join(SUPPORTED_MODELS)})")
        if cid in out:
            raise ParseError(f"{path}:{no}: duplicate camera id {cid}")
        out[cid] = dict(model=model, width=w, height=h, fx=fx, fy=fy, cx=cx, cy=cy)
    return out


def read_images(path) -> list[dict]:
    path = Path(path)
    out = []
    expect_points = False
    for no, line in _lines(path):
        if line.startswith("#"):
            continue
        if expect_points:
            expect_points = False
            continue
        s = line.strip()
        if not s:
            continue
        tok = s.split()
        if len(tok) < 10:
            raise ParseError(f"{path}:{no}: expected IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME")
        iid = _nums(tok[:1], path, no, int)[0]
        q = np.array(_nums(tok[1:5], path, no))
        t = np.array(_nums(tok[5:8], path, no))
        cid = _nums(tok[8:9], path, no, int)[0]
        name = " ".join(tok[9:])
        if not np.isfinite(q).all() or np.linalg.norm(q) == 0:
            raise ParseError(f"{path}:{no}: invalid quaternion")
        out.append(dict(id=iid, q=q, t=t, camera_id=cid, name=name))
        expect_points = True
    return out


def read_points(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    pts, cols = [], []
    for no, line in _lines(path):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        tok = s.split()
        if len(tok) < 8:
            raise ParseError(f"{path}:{no}: expected POINT3D_ID X Y Z R G B ERROR TRACK[]")
        xyz = _nums(tok[1:4], path, no)
        rgb = _nums(tok[4:7], path, no, int)
        if any(c < 0 or c > 255 for c in rgb):
            raise ParseError(f"{path}:{no}: colour out of range")
        pts.append(xyz)
        cols.append(rgb)
    if not pts:
        raise ParseError(f"{path}: no points")
    return np.array(pts, float), np.array(cols, float) / 255.0


def load_sfm(path, scale: float = 1.0, images_dir: str = "images", load_images: bool = True,
             holdout_every: int = 0) -> Dataset:
    """Read cameras.txt / images.txt / points3D.txt (+ image folder) from ``path``."""
    root = Path(path)
    if not root.is_dir():
        raise ParseError(f"dataset directory not found: {root}")
    sparse = root
    if not (root / "cameras.txt").exists() and (root / "sparse" / "0" / "cameras.txt").exists():
        sparse = root / "sparse" / "0"
    cams = read_cameras(sparse / "cameras.txt")
    imgs = sorted(read_images(sparse / "images.txt"), key=lambda d: d["name"])
    pts, cols = read_points(sparse / "points3D.txt")
    cameras, images, names = [], [], []
    for rec in imgs:
        if rec["camera_id"] not in cams:
            raise ParseError(f"image {rec['name']!r} references unknown camera {rec['camera_id']}")
        c = cams[rec["camera_id"]]
        try:
            cam = Camera(c["width"], c["height"], c["fx"], c["fy"], c["cx"], c["cy"],
                         quat_to_rot(rec["q"]), rec["t"], rec["name"])
        except CameraError as e:
            raise ParseError(str(e)) from e
        if scale != 1.0:
            cam = cam.scaled(scale)
        img = None
        if load_images:
            f = root / images_dir / rec["name"]
            if not f.exists():
                raise ParseError(f"missing image file: {f}")
            img = load_image(f, size=(cam.width, cam.height))
        cameras.append(cam)
        images.append(img)
        names.append(rec["name"])
    holdout = list(range(0, len(cameras), holdout_every)) if holdout_every else []
    return Dataset(cameras, images, SparseSeed(pts, cols), scale, holdout, names)


def _num(*xs) -> str:
    # repr of a Python float round-trips exactly
    return " ".join(repr(float(x)) for x in xs)


def write_sfm(ds: Dataset, path, images_dir: str = "images"):
    """Write a dataset as COLMAP text files (one PINHOLE camera per image) plus PNG images."""
    root = Path(path)
    os.makedirs(root, exist_ok=True)
    with open(root / "cameras.txt", "w") as f:
        f.write("# CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n")
        for i, c in enumerate(ds.cameras, 1):
            f.write(f"{i} PINHOLE {c.width} {c.height} {_num(c.fx, c.fy, c.cx, c.cy)}\n")
    with open(root / "images.txt", "w") as f:
        f.write("# IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n# POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for i, (c, name) in enumerate(zip(ds.cameras, ds.names or [c.name for c in ds.cameras]), 1):
            q = rot_to_quat(c.R)
            f.write(f"{i} {_num(*q)} {_num(*c.t)} {i} {name}\n\n")
    with open(root / "points3D.txt", "w") as f:
        f.write("# POINT3D_ID X Y Z R G B ERROR TRACK[]\n")
        rgb = np.clip(np.round(ds.seed.colors * 255), 0, 255).astype(int)
        for i, (p, c) in enumerate(zip(ds.seed.points, rgb), 1):
            f.write(f"{i} {_num(*p)} {c[0]} {c[1]} {c[2]} 0.0\n")
    if any(img is not None for img in ds.images):
        os.makedirs(root / images_dir, exist_ok=True)
        for img, name in zip(ds.images, ds.names or [c.name for c in ds.cameras]):
            if img is not None:
                save_png(root / images_dir / name, img)
