"""Scene and camera description files, synthetic dataset generation, and dataset loading.

Scene and camera files are YAML.  Schema errors are collected and reported
together, each prefixed with the line it refers to.  A generated dataset is a
directory holding one PPM image and one raw depth map per view plus
``manifest.json``, which lists paths, intrinsics and camera-to-world poses and
embeds the scene description so evaluation can rebuild the oracle.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io
from .scene import Albedo, Box, Camera, Intrinsics, Plane, Scene, Sphere, raycast_batch

MANIFEST = "manifest.json"
FORMAT_VERSION = 1
UNIT_NORM_TOL = 1e-12


class ConfigError(ValueError):
    """Schema violations in a description file; ``problems`` holds every message."""

    def __init__(self, source: str, problems: Sequence[str]):
        self.source = source
        self.problems = list(problems)
        super().__init__(f"{source}: " + "; ".join(self.problems))

    def report(self) -> str:
        return "\n".join(f"{self.source}:{p}" for p in self.problems)


class _Problems:
    def __init__(self):
        self.items: list[str] = []

    def add(self, line: int, msg: str) -> None:
        self.items.append(f"line {line}: {msg}")


def _line(node, key=None) -> int:
    if key is not None and hasattr(node, "line_of"):
        return node.line_of(key)
    return getattr(node, "line", 0)


def _vector(node, key, problems: _Problems, default=None, size: int = 3):
    if key not in node:
        if default is None:
            problems.add(_line(node), f"missing key '{key}'")
        return default
    val = node[key]
    line = _line(node, key)
    if not isinstance(val, list) or len(val) != size or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in val):
        problems.add(line, f"'{key}' must be a list of {size} numbers")
        return default
    return tuple(float(v) for v in val)


def _number(node, key, problems: _Problems, default=None):
    if key not in node:
        if default is None:
            problems.add(_line(node), f"missing key '{key}'")
        return default
    val = node[key]
    if not isinstance(val, (int, float)) or isinstance(val, bool):
        problems.add(_line(node, key), f"'{key}' must be a number")
        return default
    return float(val)


def _unknown(node, allowed: set[str], problems: _Problems, where: str) -> None:
    for key in node:
        if key not in allowed:
            problems.add(_line(node, key), f"unknown key '{key}' in {where}")


# --------------------------------------------------------------------------
# scene files
# --------------------------------------------------------------------------

_SCENE_KEYS = {"near", "far", "bounds", "center", "background", "primitives"}
_PRIM_KEYS = {
    "plane": {"type", "normal", "offset", "albedo"},
    "sphere": {"type", "center", "radius", "albedo"},
    "box": {"type", "min", "max", "albedo"},
}


def _albedo(node, problems: _Problems) -> Albedo:
    if node is None:
        return Albedo()
    if not isinstance(node, dict):
        problems.add(_line(node), "albedo must be a mapping")
        return Albedo()
    kind = node.get("type", "constant")
    try:
        if kind == "constant":
            _unknown(node, {"type", "color"}, problems, "albedo")
            color = _vector(node, "color", problems, default=(0.5, 0.5, 0.5))
            return Albedo("constant", (color,))
        if kind == "checker":
            _unknown(node, {"type", "colors", "size"}, problems, "albedo")
            colors = node.get("colors")
            if not isinstance(colors, list) or len(colors) != 2:
                problems.add(_line(node, "colors"), "checker albedo needs 'colors': two RGB triples")
                return Albedo()
            triples = tuple(tuple(float(c) for c in rgb) for rgb in colors)
            return Albedo("checker", triples, _number(node, "size", problems, default=0.5))
        problems.add(_line(node, "type"), f"unknown albedo type {kind!r}")
    except (ValueError, TypeError) as exc:
        problems.add(_line(node), str(exc))
    return Albedo()


def _primitive(node, problems: _Problems, strict: bool):
    if not isinstance(node, dict):
        problems.add(_line(node), "primitive must be a mapping")
        return None
    kind = node.get("type")
    if kind not in _PRIM_KEYS:
        problems.add(_line(node, "type"), f"unknown primitive type {kind!r} (expected plane, sphere or box)")
        return None
    _unknown(node, _PRIM_KEYS[kind], problems, kind)
    albedo = _albedo(node.get("albedo"), problems)
    before = len(problems.items)
    try:
        if kind == "plane":
            normal = _vector(node, "normal", problems)
            offset = _number(node, "offset", problems)
            if len(problems.items) > before:
                return None
            prim = Plane(normal, offset, albedo)
            if strict and prim.unit_norm_error() > UNIT_NORM_TOL:
                problems.add(_line(node, "normal"), f"plane normal must have unit norm (|n| = {np.linalg.norm(normal)!r})")
                return None
            return prim
        if kind == "sphere":
            center = _vector(node, "center", problems)
            radius = _number(node, "radius", problems)
            if len(problems.items) > before:
                return None
            return Sphere(center, radius, albedo)
        lo = _vector(node, "min", problems)
        hi = _vector(node, "max", problems)
        if len(problems.items) > before:
            return None
        return Box(lo, hi, albedo)
    except ValueError as exc:
        problems.add(_line(node), str(exc))
        return None


def scene_from_dict(doc, source: str = "<scene>", strict: bool = True) -> Scene:
    """Build a :class:`Scene` from a parsed description.

    ``strict=False`` accepts plane normals that are not unit length, so that
    self-checks can load a corrupted scene and report the violation themselves.
    """
    problems = _Problems()
    if not isinstance(doc, dict):
        raise ConfigError(source, ["line 1: scene file must be a mapping"])
    _unknown(doc, _SCENE_KEYS, problems, "scene")
    bounds = doc.get("bounds")
    lo = hi = None
    if not isinstance(bounds, dict):
        problems.add(_line(doc, "bounds"), "missing or invalid 'bounds' mapping with 'min' and 'max'")
    else:
        _unknown(bounds, {"min", "max"}, problems, "bounds")
        lo = _vector(bounds, "min", problems)
        hi = _vector(bounds, "max", problems)
    near = _number(doc, "near", problems, default=0.05)
    far = _number(doc, "far", problems, default=6.0)
    center = _vector(doc, "center", problems, default=())
    background = _vector(doc, "background", problems, default=(0.0, 0.0, 0.0))
    prims = doc.get("primitives")
    built = []
    if not isinstance(prims, list) or not prims:
        problems.add(_line(doc, "primitives"), "'primitives' must be a non-empty list")
    else:
        for item in prims:
            p = _primitive(item, problems, strict)
            if p is not None:
                built.append(p)
    if problems.items:
        raise ConfigError(source, problems.items)
    try:
        return Scene(tuple(built), lo, hi, near, far, center or None, background)
    except ValueError as exc:
        raise ConfigError(source, [f"line {_line(doc)}: {exc}"]) from None


def load_scene(path, strict: bool = True) -> Scene:
    path = Path(path)
    try:
        doc = io.load_yaml(path.read_text())
    except io.yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 0
        raise ConfigError(str(path), [f"line {line}: invalid YAML ({getattr(exc, 'problem', exc)})"]) from None
    return scene_from_dict(doc, str(path), strict)


# --------------------------------------------------------------------------
# camera files
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraSet:
    train: tuple[Camera, ...]
    holdout: tuple[Camera, ...] = ()


def _camera(node, intr: Intrinsics, problems: _Problems) -> Camera | None:
    if not isinstance(node, dict):
        problems.add(_line(node), "view must be a mapping")
        return None
    _unknown(node, {"eye", "target", "up", "pose"}, problems, "view")
    try:
        if "pose" in node:
            pose = np.asarray(node["pose"], dtype=np.float64)
            if pose.shape != (3, 4):
                problems.add(_line(node, "pose"), "'pose' must be a 3x4 camera-to-world matrix")
                return None
            return Camera(intr, pose[:, :3], pose[:, 3])
        eye = _vector(node, "eye", problems)
        target = _vector(node, "target", problems)
        up = _vector(node, "up", problems, default=(0.0, 0.0, 1.0))
        if eye is None or target is None:
            return None
        return Camera.look_at(intr, eye, target, up)
    except (ValueError, TypeError) as exc:
        problems.add(_line(node), str(exc))
        return None


def cameras_from_dict(doc, source: str = "<cameras>") -> CameraSet:
    """Shared intrinsics (``width``, ``height`` and ``focal`` or ``fov_deg``) plus ``views`` and optional ``holdout`` lists."""
    problems = _Problems()
    if not isinstance(doc, dict):
        raise ConfigError(source, ["line 1: camera file must be a mapping"])
    _unknown(doc, {"width", "height", "focal", "fov_deg", "cx", "cy", "views", "holdout"}, problems, "cameras")
    width = _number(doc, "width", problems)
    height = _number(doc, "height", problems)
    intr = None
    if width is not None and height is not None:
        if width < 1 or height < 1 or width != int(width) or height != int(height):
            problems.add(_line(doc, "width"), "width and height must be positive integers")
        elif "focal" in doc:
            f = _number(doc, "focal", problems)
            cx = _number(doc, "cx", problems, default=width / 2)
            cy = _number(doc, "cy", problems, default=height / 2)
            if f is not None and f > 0:
                intr = Intrinsics(f, f, cx, cy, int(width), int(height))
            else:
                problems.add(_line(doc, "focal"), "'focal' must be positive")
        elif "fov_deg" in doc:
            fov = _number(doc, "fov_deg", problems)
            if fov is not None and 0 < fov < 180:
                intr = Intrinsics.from_fov(int(width), int(height), fov)
            else:
                problems.add(_line(doc, "fov_deg"), "'fov_deg' must be in (0, 180)")
        else:
            problems.add(_line(doc), "need 'focal' or 'fov_deg'")
    groups = {}
    for key in ("views", "holdout"):
        nodes = doc.get(key, [] if key == "holdout" else None)
        if not isinstance(nodes, list) or (key == "views" and not nodes):
            problems.add(_line(doc, key), f"'{key}' must be a{' non-empty' if key == 'views' else ''} list")
            continue
        groups[key] = [c for c in (_camera(n, intr, problems) for n in nodes) if c is not None] if intr else []
    if problems.items:
        raise ConfigError(source, problems.items)
    return CameraSet(tuple(groups["views"]), tuple(groups.get("holdout", ())))


def load_cameras(path) -> CameraSet:
    path = Path(path)
    try:
        doc = io.load_yaml(path.read_text())
    except io.yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 0
        raise ConfigError(str(path), [f"line {line}: invalid YAML"]) from None
    return cameras_from_dict(doc, str(path))


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------


def render_view(scene: Scene, cam: Camera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ground-truth ``(rgb (H, W, 3), depth (H, W), hit (H, W))``; depth is the ray distance."""
    o, d = cam.rays()
    hit = raycast_batch(scene, o, d)
    h, w = cam.shape
    return hit.rgb.reshape(h, w, 3), hit.t.reshape(h, w), hit.hit.reshape(h, w)


def generate_dataset(
    scene: Scene,
    cameras: CameraSet | Sequence[Camera],
    out_dir,
    seed: int = 0,
    depth_noise: float = 0.0,
    threads: int = 1,
) -> dict:
    """Ray-cast every view and write images, depth maps and the manifest; returns the manifest.

    Per-view noise streams are spawned from ``seed`` so the output does not
    depend on ``threads``.  The manifest is written last and atomically, so an
    I/O failure never leaves a partial manifest behind.
    """
    if not isinstance(cameras, CameraSet):
        cameras = CameraSet(tuple(cameras))
    if not cameras.train:
        raise ValueError("need at least one camera")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [("train", k, c) for k, c in enumerate(cameras.train)] + [("holdout", k, c) for k, c in enumerate(cameras.holdout)]
    streams = np.random.SeedSequence(seed).spawn(len(jobs))

    def work(job, ss):
        split, k, cam = job
        rgb, depth, hit = render_view(scene, cam)
        if depth_noise > 0:
            noise = np.random.default_rng(ss).normal(0.0, depth_noise, depth.shape)
            depth = np.where(hit, depth + noise, depth)
        stem = f"{split}_{k:03d}"
        io.write_ppm(out / f"{stem}.ppm", rgb)
        io.write_depth(out / f"{stem}.depth", depth)
        return {
            "id": stem,
            "image": f"{stem}.ppm",
            "depth": f"{stem}.depth",
            "intrinsics": cam.intrinsics.to_dict(),
            "pose": cam.pose.tolist(),
            "misses": int((~hit).sum()),
        }

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            entries = list(pool.map(work, jobs, streams))
    else:
        entries = [work(j, s) for j, s in zip(jobs, streams)]
    manifest = {
        "format": "vfnerf-dataset",
        "version": FORMAT_VERSION,
        "seed": seed,
        "depth_noise": depth_noise,
        "depth_sentinel": scene.far,
        "scene": scene.to_dict(),
        "views": [e for e, j in zip(entries, jobs) if j[0] == "train"],
        "holdout": [e for e, j in zip(entries, jobs) if j[0] == "holdout"],
    }
    io.atomic_write(out / MANIFEST, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return manifest


def manifest_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# loading
# --------------------------------------------------------------------------


@dataclass
class Views:
    ids: list[str]
    cameras: list[Camera]
    images: np.ndarray  # (V, H, W, 3)
    depths: np.ndarray  # (V, H, W)

    def __len__(self) -> int:
        return len(self.cameras)


@dataclass
class Dataset:
    root: Path
    scene: Scene
    train: Views
    holdout: Views
    depth_sentinel: float

    @property
    def pixel_count(self) -> int:
        return int(np.prod(self.train.depths.shape))


def _load_views(root: Path, entries: list, source: str) -> Views:
    ids, cams, imgs, deps = [], [], [], []
    for e in entries:
        cam = Camera.from_dict(e)
        img = io.read_ppm(root / e["image"])
        dep = io.read_depth(root / e["depth"])
        if img.shape[:2] != cam.shape or dep.shape != cam.shape:
            raise ConfigError(source, [f"view {e['id']}: image {img.shape[:2]} / depth {dep.shape} do not match camera {cam.shape}"])
        ids.append(e["id"])
        cams.append(cam)
        imgs.append(img)
        deps.append(dep)
    if not cams:
        return Views([], [], np.zeros((0, 1, 1, 3)), np.zeros((0, 1, 1)))
    return Views(ids, cams, np.stack(imgs), np.stack(deps))


def load_dataset(root) -> Dataset:
    root = Path(root)
    path = root / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    doc = json.loads(path.read_text())
    if doc.get("format") != "vfnerf-dataset":
        raise ConfigError(str(path), ["not a dataset manifest"])
    scene = scene_from_dict(doc["scene"], str(path), strict=False)
    train = _load_views(root, doc["views"], str(path))
    if len(train) == 0:
        raise ConfigError(str(path), ["dataset has no views"])
    holdout = _load_views(root, doc.get("holdout", []), str(path))
    return Dataset(root, scene, train, holdout, float(doc.get("depth_sentinel", scene.far)))
