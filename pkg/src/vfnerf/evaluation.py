"""View sets on disk, reference point clouds and the end-to-end metric report.

A view set is a directory with ``manifest.json`` listing views (``id``, image,
depth, intrinsics, 3x4 pose).  Generated datasets and rendered outputs share
this layout, so either can be evaluated against the other.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .dataset import MANIFEST, ConfigError, load_scene, scene_from_dict
from .metrics import MetricError, MetricReport, evaluate_clouds, fuse_depth_maps, psnr
from .scene import Camera, Scene, sample_surface, visible_mask

RENDER_FORMAT = "vfnerf-render"
GT_DENSITY = 2000.0  # analytic samples per m^2; denser than the 1 cm fusion voxel


class EvaluationError(ValueError):
    """Mismatched or missing views; ``problems`` names every offending view."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class View:
    id: str
    camera: Camera
    image: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) ray distance
    holdout: bool = False


@dataclass
class ViewSet:
    root: Path
    views: list[View]
    scene: Scene | None
    depth_sentinel: float | None

    def by_id(self) -> dict[str, View]:
        return {v.id: v for v in self.views}


def write_view_set(out_dir, views: list[View], scene: Scene | None = None, extra: dict | None = None) -> dict:
    """Write images, depth maps and a manifest (last, atomically)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = {"views": [], "holdout": []}
    for v in views:
        io.write_ppm(out / f"{v.id}.ppm", v.image)
        io.write_depth(out / f"{v.id}.depth", v.depth)
        entry = {"id": v.id, "image": f"{v.id}.ppm", "depth": f"{v.id}.depth", **v.camera.to_dict()}
        entries["holdout" if v.holdout else "views"].append(entry)
    manifest = {"format": RENDER_FORMAT, "version": 1, **entries}
    if scene is not None:
        manifest["scene"] = scene.to_dict()
        manifest["depth_sentinel"] = scene.far
    manifest.update(extra or {})
    io.atomic_write(out / MANIFEST, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return manifest


def load_view_set(root) -> ViewSet:
    """Read a generated dataset or a rendered view set."""
    root = Path(root)
    path = root / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    doc = json.loads(path.read_text())
    if doc.get("format") not in ("vfnerf-dataset", RENDER_FORMAT):
        raise ConfigError(str(path), ["not a dataset or render manifest"])
    views, problems = [], []
    for key, held in (("views", False), ("holdout", True)):
        for e in doc.get(key, []):
            cam = Camera.from_dict(e)
            img = io.read_ppm(root / e["image"])
            dep = io.read_depth(root / e["depth"])
            if img.shape[:2] != cam.shape or dep.shape != cam.shape:
                problems.append(f"view {e['id']}: image {img.shape[:2]} / depth {dep.shape} do not match camera {cam.shape}")
                continue
            views.append(View(e["id"], cam, img, dep, held))
    if problems:
        raise EvaluationError(problems)
    scene = scene_from_dict(doc["scene"], str(path), strict=False) if "scene" in doc else None
    sentinel = doc.get("depth_sentinel")
    return ViewSet(root, views, scene, None if sentinel is None else float(sentinel))


def analytic_cloud(scene: Scene, cameras, density: float = GT_DENSITY, seed: int = 0) -> np.ndarray:
    """Area-uniform surface samples seen by at least one camera."""
    pts = sample_surface(scene, np.random.default_rng([seed, 2]), density)
    return pts[visible_mask(scene, pts, cameras)]


def reference_views(scene: Scene, cameras: dict[str, Camera]) -> list[View]:
    """Ray-cast ground truth for the given cameras, quantized like images on disk."""
    from .dataset import render_view

    out = []
    for vid, cam in cameras.items():
        rgb, depth, _ = render_view(scene, cam)
        out.append(View(vid, cam, io.to_uint8(rgb) / 255.0, depth))
    return out


def match_views(pred: list[View], ref: list[View]) -> list[tuple[View, View]]:
    """Pair views by id; every missing or mismatched view is reported together."""
    ref_ids = {v.id: v for v in ref}
    pred_ids = {v.id: v for v in pred}
    problems = [f"view {k}: missing from prediction" for k in ref_ids if k not in pred_ids]
    problems += [f"view {k}: not present in reference" for k in pred_ids if k not in ref_ids]
    pairs = []
    for k, r in ref_ids.items():
        p = pred_ids.get(k)
        if p is None:
            continue
        if p.image.shape != r.image.shape or p.depth.shape != r.depth.shape:
            problems.append(f"view {k}: prediction {p.depth.shape} vs reference {r.depth.shape}")
            continue
        pairs.append((p, r))
    if problems:
        raise EvaluationError(problems)
    return pairs


def evaluate(
    pred_dir,
    reference,
    out_file=None,
    cloud: str | None = None,
    threshold: float = 0.05,
    voxel: float = 0.01,
    density: float = GT_DENSITY,
    seed: int = 0,
) -> MetricReport:
    """Compare a rendered view set against a reference dataset directory or a scene file.

    PSNR is averaged over the held-out views when the prediction has any,
    otherwise over all views.  The predicted cloud fuses every predicted depth
    map, cropped to the scene bounds.  ``cloud`` selects the reference cloud:
    ``"depth"`` fuses the reference depth maps (default for a dataset
    directory), ``"analytic"`` samples the visible primitive surfaces
    (default, and the only choice, for a scene file).
    """
    pred = load_view_set(pred_dir)
    if not pred.views:
        raise EvaluationError(["prediction has no views"])
    ref_path = Path(reference)
    if ref_path.is_dir():
        ref = load_view_set(ref_path)
        scene = ref.scene
        ref_views = ref.views
        cloud = cloud or "depth"
    else:
        scene = load_scene(ref_path)
        ref_views = reference_views(scene, {v.id: v.camera for v in pred.views})
        cloud = cloud or "analytic"
    if cloud not in ("depth", "analytic"):
        raise ValueError(f"unknown reference cloud {cloud!r}")
    if scene is None and (cloud == "analytic"):
        raise EvaluationError(["reference has no embedded scene for analytic sampling"])
    pairs = match_views(pred.views, ref_views)
    scored = [(p, r) for p, r in pairs if p.holdout] or pairs
    psnr_db = float(np.mean([psnr(p.image, r.image) for p, r in scored]))
    far = scene.far if scene is not None else None
    bounds = (scene.lo, scene.hi) if scene is not None else None
    pred_cloud = fuse_depth_maps([p.depth for p, _ in pairs], [p.camera for p, _ in pairs], far, voxel, bounds)
    if cloud == "depth":
        ref_cloud = fuse_depth_maps([r.depth for _, r in pairs], [r.camera for _, r in pairs], far, voxel, bounds)
    else:
        ref_cloud = analytic_cloud(scene, [r.camera for _, r in pairs], density, seed)
    if len(pred_cloud) == 0:
        raise MetricError("predicted depth maps contain no valid points")
    report = evaluate_clouds(pred_cloud, ref_cloud, threshold, psnr_db)
    if out_file is not None:
        write_report(out_file, report)
    return report


def write_report(path, report: MetricReport) -> None:
    """Structured text plus a one-row CSV next to it (same stem, ``.txt`` / ``.csv``)."""
    path = Path(path)
    text = path.with_suffix(".txt") if path.suffix == ".csv" else path
    io.atomic_write(text, report.to_text().encode())
    io.atomic_write(path.with_suffix(".csv"), (report.csv_header() + "\n" + report.csv_row() + "\n").encode())


def psnr_text(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.2f}"
