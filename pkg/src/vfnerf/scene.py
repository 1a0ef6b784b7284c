"""Analytic scenes: planes, spheres and axis-aligned boxes.

Provides the exact vector field (direction to the nearest surface point),
ray-cast depth and flat-shaded albedo used to synthesize training data and
to check every later stage against ground truth.  Units are meters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

ON_SURFACE_TOL = 1e-9


# --------------------------------------------------------------------------
# albedo
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Albedo:
    """Constant color, or a two-color checkerboard with square size ``size`` in surface coordinates."""

    kind: str = "constant"
    colors: tuple[tuple[float, float, float], ...] = ((0.5, 0.5, 0.5),)
    size: float = 0.5

    def __post_init__(self):
        if self.kind not in ("constant", "checker"):
            raise ValueError(f"unknown albedo kind {self.kind!r}")
        need = 1 if self.kind == "constant" else 2
        if len(self.colors) != need:
            raise ValueError(f"{self.kind} albedo needs {need} color(s)")
        for c in self.colors:
            if len(c) != 3 or min(c) < 0 or max(c) > 1:
                raise ValueError("albedo colors must be RGB triples in [0, 1]")
        if self.size <= 0:
            raise ValueError("checker size must be positive")

    def __call__(self, coords: np.ndarray) -> np.ndarray:
        """Color at surface coordinates ``coords`` (n, k)."""
        colors = np.asarray(self.colors, dtype=np.float64)
        if self.kind == "constant":
            return np.broadcast_to(colors[0], (len(coords), 3)).copy()
        parity = np.floor(coords / self.size).astype(np.int64).sum(axis=1) % 2
        return colors[parity]

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {"type": "constant", "color": list(self.colors[0])}
        return {"type": "checker", "colors": [list(c) for c in self.colors], "size": self.size}


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------


def _rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(1, 3) if x.ndim == 1 else x


def tangent_basis(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two unit tangents of a plane with normal ``n``; axis-aligned for axis-aligned normals."""
    k = int(np.argmin(np.abs(n)))
    a = np.zeros(3)
    a[k] = 1.0
    t1 = a - (a @ n) * n
    t1 /= np.linalg.norm(t1)
    return t1, np.cross(n, t1)


class Primitive:
    kind = "primitive"
    albedo: Albedo

    def closest(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def intersect(self, o: np.ndarray, d: np.ndarray, t_min: float, t_max: float) -> np.ndarray:
        """Smallest ray parameter in [t_min, t_max] hitting the surface; +inf on miss."""
        raise NotImplementedError

    def outward_normal(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def surface_coords(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def color(self, p: np.ndarray) -> np.ndarray:
        return self.albedo(self.surface_coords(_rows(p)))

    def sample_surface(self, rng: np.random.Generator, density: float, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        """Uniform-area samples (``density`` per m^2) of the surface patch inside the box [lo, hi]."""
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Plane(Primitive):
    """Points with ``normal . p == offset``; ``normal`` points to the outside."""

    normal: tuple[float, float, float]
    offset: float
    albedo: Albedo = field(default_factory=Albedo)
    kind = "plane"

    @property
    def n(self) -> np.ndarray:
        return np.asarray(self.normal, dtype=np.float64)

    def unit_norm_error(self) -> float:
        return abs(float(np.linalg.norm(self.n)) - 1.0)

    def signed_distance(self, x: np.ndarray) -> np.ndarray:
        return _rows(x) @ self.n - self.offset

    def closest(self, x):
        x = _rows(x)
        return x - self.signed_distance(x)[:, None] * self.n[None, :]

    def intersect(self, o, d, t_min, t_max):
        o, d = _rows(o), _rows(d)
        den = d @ self.n
        num = self.offset - o @ self.n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(den != 0, num / np.where(den != 0, den, 1.0), np.inf)
        return np.where((t >= t_min) & (t <= t_max), t, np.inf)

    def outward_normal(self, p):
        return np.broadcast_to(self.n, _rows(p).shape).copy()

    def surface_coords(self, p):
        t1, t2 = tangent_basis(self.n)
        p = _rows(p)
        return np.stack([p @ t1, p @ t2], axis=1)

    def sample_surface(self, rng, density, lo, hi):
        t1, t2 = tangent_basis(self.n)
        corners = np.array([[a, b, c] for a in (lo[0], hi[0]) for b in (lo[1], hi[1]) for c in (lo[2], hi[2])])
        u, v = corners @ t1, corners @ t2
        area = (u.max() - u.min()) * (v.max() - v.min())
        count = int(rng.poisson(density * area)) if area > 0 else 0
        uu = rng.uniform(u.min(), u.max(), count)
        vv = rng.uniform(v.min(), v.max(), count)
        base = self.offset * self.n / (self.n @ self.n)
        pts = base + uu[:, None] * t1 + vv[:, None] * t2
        return pts[np.all((pts >= lo - 1e-9) & (pts <= hi + 1e-9), axis=1)]

    def to_dict(self):
        return {"type": "plane", "normal": list(self.normal), "offset": self.offset, "albedo": self.albedo.to_dict()}


@dataclass(frozen=True)
class Sphere(Primitive):
    center: tuple[float, float, float]
    radius: float
    albedo: Albedo = field(default_factory=Albedo)
    kind = "sphere"

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be > 0")

    @property
    def c(self) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64)

    def closest(self, x):
        x = _rows(x)
        off = x - self.c
        r = np.linalg.norm(off, axis=1, keepdims=True)
        # the center is equidistant to every surface point; pick +x
        direction = np.where(r > 0, off / np.where(r > 0, r, 1.0), np.array([1.0, 0.0, 0.0]))
        return self.c + self.radius * direction

    def intersect(self, o, d, t_min, t_max):
        o, d = _rows(o), _rows(d)
        oc = o - self.c
        a = np.einsum("ij,ij->i", d, d)
        b = np.einsum("ij,ij->i", oc, d)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius**2
        disc = b * b - a * c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t1 = (-b - sq) / a
        t2 = (-b + sq) / a
        ok1 = (disc >= 0) & (t1 >= t_min) & (t1 <= t_max)
        ok2 = (disc >= 0) & (t2 >= t_min) & (t2 <= t_max)
        return np.where(ok1, t1, np.where(ok2, t2, np.inf))

    def outward_normal(self, p):
        off = _rows(p) - self.c
        return off / np.linalg.norm(off, axis=1, keepdims=True)

    def surface_coords(self, p):
        return _rows(p)

    def sample_surface(self, rng, density, lo, hi):
        count = int(rng.poisson(density * 4.0 * np.pi * self.radius**2))
        g = rng.normal(size=(count, 3))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        pts = self.c + self.radius * g
        return pts[np.all((pts >= lo - 1e-9) & (pts <= hi + 1e-9), axis=1)]

    def to_dict(self):
        return {"type": "sphere", "center": list(self.center), "radius": self.radius, "albedo": self.albedo.to_dict()}


@dataclass(frozen=True)
class Box(Primitive):
    """Surface of the axis-aligned box [lo, hi]."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    albedo: Albedo = field(default_factory=Albedo)
    kind = "box"

    def __post_init__(self):
        if not np.all(np.asarray(self.lo) < np.asarray(self.hi)):
            raise ValueError("box min must be < max componentwise")

    @property
    def bmin(self) -> np.ndarray:
        return np.asarray(self.lo, dtype=np.float64)

    @property
    def bmax(self) -> np.ndarray:
        return np.asarray(self.hi, dtype=np.float64)

    def _inside(self, x):
        return np.all((x > self.bmin) & (x < self.bmax), axis=1)

    def closest(self, x):
        x = _rows(x)
        out = np.clip(x, self.bmin, self.bmax)
        inside = self._inside(x)
        if inside.any():
            xi = x[inside]
            gaps = np.concatenate([xi - self.bmin, self.bmax - xi], axis=1)  # (n, 6)
            face = np.argmin(gaps, axis=1)
            axis = face % 3
            target = np.where(face < 3, self.bmin[axis], self.bmax[axis])
            proj = xi.copy()
            proj[np.arange(len(xi)), axis] = target
            out[inside] = proj
        return out

    def intersect(self, o, d, t_min, t_max):
        o, d = _rows(o), _rows(d)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta = (self.bmin - o) * inv
            tb = (self.bmax - o) * inv
        ta = np.where(np.isnan(ta), -np.inf, ta)
        tb = np.where(np.isnan(tb), np.inf, tb)
        t_near = np.minimum(ta, tb).max(axis=1)
        t_far = np.maximum(ta, tb).min(axis=1)
        hit = t_near <= t_far
        first = np.where(hit & (t_near >= t_min) & (t_near <= t_max), t_near, np.inf)
        second = np.where(hit & (t_far >= t_min) & (t_far <= t_max), t_far, np.inf)
        return np.where(np.isfinite(first), first, second)

    def _face_axis(self, p):
        gaps = np.concatenate([np.abs(p - self.bmin), np.abs(self.bmax - p)], axis=1)
        face = np.argmin(gaps, axis=1)
        return face % 3, face < 3

    def outward_normal(self, p):
        p = _rows(p)
        axis, low = self._face_axis(p)
        n = np.zeros_like(p)
        n[np.arange(len(p)), axis] = np.where(low, -1.0, 1.0)
        return n

    def surface_coords(self, p):
        p = _rows(p)
        axis, _ = self._face_axis(p)
        keep = np.ones_like(p, dtype=bool)
        keep[np.arange(len(p)), axis] = False
        return p[keep].reshape(len(p), 2)

    def sample_surface(self, rng, density, lo, hi):
        pts = []
        ext = self.bmax - self.bmin
        for axis in range(3):
            others = [a for a in range(3) if a != axis]
            area = ext[others[0]] * ext[others[1]]
            for value in (self.bmin[axis], self.bmax[axis]):
                count = int(rng.poisson(density * area))
                p = self.bmin + rng.uniform(size=(count, 3)) * ext
                p[:, axis] = value
                pts.append(p)
        pts = np.concatenate(pts) if pts else np.zeros((0, 3))
        return pts[np.all((pts >= lo - 1e-9) & (pts <= hi + 1e-9), axis=1)]

    def to_dict(self):
        return {"type": "box", "min": list(self.lo), "max": list(self.hi), "albedo": self.albedo.to_dict()}


# --------------------------------------------------------------------------
# scene, cameras, rays
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Scene:
    primitives: tuple[Primitive, ...]
    bounds_min: tuple[float, float, float]
    bounds_max: tuple[float, float, float]
    near: float = 0.05
    far: float = 6.0
    center: tuple[float, float, float] | None = None
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not 0 <= self.near < self.far:
            raise ValueError("need 0 <= near < far")
        lo, hi = np.asarray(self.bounds_min), np.asarray(self.bounds_max)
        if not np.all(lo < hi):
            raise ValueError("bounds min must be < max componentwise")
        if self.center is None:
            # default: bounding-box center, stored explicitly so equal scenes compare equal
            object.__setattr__(self, "center", tuple(float(v) for v in 0.5 * (lo + hi)))
        c = self.c_scene
        if not np.all((c >= lo) & (c <= hi)):
            raise ValueError("scene center must lie inside the bounds")

    @property
    def c_scene(self) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64)

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.bounds_min, dtype=np.float64)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.bounds_max, dtype=np.float64)

    @property
    def circumradius(self) -> float:
        return float(0.5 * np.linalg.norm(self.hi - self.lo))

    def to_dict(self) -> dict:
        return {
            "near": self.near,
            "far": self.far,
            "bounds": {"min": list(self.bounds_min), "max": list(self.bounds_max)},
            "center": list(self.c_scene),
            "background": list(self.background),
            "primitives": [p.to_dict() for p in self.primitives],
        }


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float) -> "Intrinsics":
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height}


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map camera to world.  Looks along +z, x right, y down."""

    intrinsics: Intrinsics
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        if R.shape != (3, 3) or np.abs(R.T @ R - np.eye(3)).max() > 1e-9:
            raise ValueError("camera rotation must be orthonormal (R^T R = I within 1e-9)")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def look_at(cls, intrinsics: Intrinsics, eye, target, up=(0.0, 0.0, 1.0)) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            raise ValueError("view direction parallel to up vector")
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        return cls(intrinsics, np.stack([right, down, fwd], axis=1), eye)

    @property
    def pose(self) -> np.ndarray:
        """3x4 camera-to-world matrix."""
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)

    @property
    def shape(self) -> tuple[int, int]:
        return self.intrinsics.height, self.intrinsics.width

    def pixel_directions(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        k = self.intrinsics
        cam = np.stack(
            [(cols + 0.5 - k.cx) / k.fx, (rows + 0.5 - k.cy) / k.fy, np.ones(np.shape(rows))], axis=-1
        )
        d = cam @ self.rotation.T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Origins and unit directions of every pixel, row-major, each (H*W, 3)."""
        h, w = self.shape
        rows, cols = np.divmod(np.arange(h * w), w)
        d = self.pixel_directions(rows, cols)
        return np.broadcast_to(self.translation, d.shape).copy(), d

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pixel (row, col) float coordinates and camera-frame z of world points."""
        cam = (_rows(points) - self.translation) @ self.rotation
        k = self.intrinsics
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            col = cam[:, 0] / z * k.fx + k.cx - 0.5
            row = cam[:, 1] / z * k.fy + k.cy - 0.5
        return row, col, z

    def to_dict(self) -> dict:
        return {"intrinsics": self.intrinsics.to_dict(), "pose": self.pose.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        pose = np.asarray(d["pose"], dtype=np.float64)
        return cls(Intrinsics(**d["intrinsics"]), pose[:, :3], pose[:, 3])


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple[int, int] = (0, 0)

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise ValueError("ray direction must have unit norm (tolerance 1e-12)")
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))


# --------------------------------------------------------------------------
# oracle queries
# --------------------------------------------------------------------------


class Nearest(NamedTuple):
    point: np.ndarray  # (n, 3)
    dist: np.ndarray  # (n,)
    owner: np.ndarray  # (n,) primitive index


def nearest_batch(scene: Scene, x: np.ndarray) -> Nearest:
    if not scene.primitives:
        raise ValueError("scene has no primitives")
    x = _rows(x)
    best = np.full(len(x), np.inf)
    point = np.zeros_like(x)
    owner = np.full(len(x), -1, dtype=np.int64)
    for k, prim in enumerate(scene.primitives):
        p = prim.closest(x)
        dist = np.linalg.norm(x - p, axis=1)
        better = dist < best  # strict: ties keep the lower index
        best = np.where(better, dist, best)
        point[better] = p[better]
        owner[better] = k
    return Nearest(point, best, owner)


def nearest_surface_point(scene: Scene, x) -> tuple[np.ndarray, float]:
    res = nearest_batch(scene, np.asarray(x, dtype=np.float64).reshape(1, 3))
    return res.point[0], float(res.dist[0])


class FieldSample(NamedTuple):
    v: np.ndarray
    on_surface: np.ndarray


def oracle_vf_batch(scene: Scene, x: np.ndarray) -> FieldSample:
    """Unit direction to the nearest surface point.

    Points within 1e-9 of a surface get the negated outward normal of the owning
    primitive and are flagged ``on_surface``.
    """
    x = _rows(x)
    res = nearest_batch(scene, x)
    on = res.dist < ON_SURFACE_TOL
    safe = np.where(on, 1.0, res.dist)[:, None]
    v = (res.point - x) / safe
    if on.any():
        for k in np.unique(res.owner[on]):
            sel = on & (res.owner == k)
            v[sel] = -scene.primitives[k].outward_normal(res.point[sel])
    return FieldSample(v, on)


def oracle_vf(scene: Scene, x) -> tuple[np.ndarray, bool]:
    f = oracle_vf_batch(scene, np.asarray(x, dtype=np.float64).reshape(1, 3))
    return f.v[0], bool(f.on_surface[0])


class Hit(NamedTuple):
    t: np.ndarray  # ray distance; ``far`` on miss
    rgb: np.ndarray
    hit: np.ndarray  # bool
    owner: np.ndarray


def raycast_batch(scene: Scene, origins: np.ndarray, dirs: np.ndarray) -> Hit:
    """First intersection in [near, far]; misses return depth ``far`` and the background color."""
    origins, dirs = _rows(origins), _rows(dirs)
    best = np.full(len(dirs), np.inf)
    owner = np.full(len(dirs), -1, dtype=np.int64)
    for k, prim in enumerate(scene.primitives):
        t = prim.intersect(origins, dirs, scene.near, scene.far)
        better = t < best
        best = np.where(better, t, best)
        owner[better] = k
    hit = np.isfinite(best)
    rgb = np.broadcast_to(np.asarray(scene.background, dtype=np.float64), dirs.shape).copy()
    for k in np.unique(owner[hit]):
        sel = owner == k
        rgb[sel] = scene.primitives[k].color(origins[sel] + best[sel, None] * dirs[sel])
    return Hit(np.where(hit, best, scene.far), rgb, hit, owner)


def raycast(scene: Scene, ray: Ray) -> tuple[float | None, np.ndarray]:
    """``(t_hit, rgb)``; ``t_hit`` is None on a miss."""
    h = raycast_batch(scene, ray.origin[None], ray.direction[None])
    return (float(h.t[0]) if h.hit[0] else None), h.rgb[0]


def oracle_color_batch(scene: Scene, x: np.ndarray) -> np.ndarray:
    """Albedo of the nearest surface point."""
    res = nearest_batch(scene, x)
    rgb = np.zeros((len(res.point), 3))
    for k in np.unique(res.owner):
        sel = res.owner == k
        rgb[sel] = scene.primitives[k].color(res.point[sel])
    return rgb


def sample_surface(scene: Scene, rng: np.random.Generator, density: float = 400.0) -> np.ndarray:
    """Area-uniform samples of every primitive surface inside the scene bounds."""
    parts = [p.sample_surface(rng, density, scene.lo, scene.hi) for p in scene.primitives]
    return np.concatenate(parts) if parts else np.zeros((0, 3))


def visible_mask(scene: Scene, points: np.ndarray, cameras: Sequence[Camera], rel_tol: float = 1e-6) -> np.ndarray:
    """Points seen unoccluded inside the image of at least one camera."""
    points = _rows(points)
    seen = np.zeros(len(points), dtype=bool)
    for cam in cameras:
        h, w = cam.shape
        row, col, z = cam.project(points)
        inside = (z > 0) & (row >= -0.5) & (row <= h - 0.5) & (col >= -0.5) & (col <= w - 0.5) & ~seen
        if not inside.any():
            continue
        idx = np.flatnonzero(inside)
        off = points[idx] - cam.translation
        dist = np.linalg.norm(off, axis=1)
        ok = dist > scene.near
        hit = raycast_batch(scene, np.broadcast_to(cam.translation, off.shape), off / dist[:, None])
        unblocked = hit.hit & (hit.t >= dist * (1 - rel_tol) - 1e-9)
        seen[idx[ok & unblocked]] = True
    return seen
