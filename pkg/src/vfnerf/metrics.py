"""Image and geometry metrics, and depth-map fusion into point clouds.

Conventions
-----------
* MSE is the per-pixel squared RGB distance (summed over channels) averaged
  over pixels; PSNR = -10 log10(MSE), +inf for identical images.
* Chamfer distance is reported in millimeters as the mean and median of the
  per-point nearest-neighbor Euclidean distances (the square root of the
  squared distances), pooled over both directions.
* Precision counts predicted points within ``threshold`` of the reference
  cloud; recall counts reference points within ``threshold`` of the
  prediction.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .scene import Camera

BRUTE_FORCE_LIMIT = 2000


class MetricError(ValueError):
    pass


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------


def mse(rendered: np.ndarray, reference: np.ndarray) -> float:
    a, b = np.asarray(rendered, dtype=np.float64), np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(((a - b) ** 2).sum(axis=-1).mean())


def psnr(rendered: np.ndarray, reference: np.ndarray) -> float:
    err = mse(rendered, reference)
    if err == 0:
        return math.inf
    return -10.0 * math.log10(err)


# --------------------------------------------------------------------------
# nearest neighbors
# --------------------------------------------------------------------------


def _check_cloud(p, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise MetricError(f"point cloud {name} is empty")
    if not np.all(np.isfinite(p)):
        raise MetricError(f"point cloud {name} has non-finite coordinates")
    return p


def _pair_dist(src: np.ndarray, dst: np.ndarray, idx: np.ndarray) -> np.ndarray:
    diff = src - dst[idx]
    return np.sqrt((diff * diff).sum(axis=1))


def nearest_brute_force(src: np.ndarray, dst: np.ndarray, chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive nearest neighbor in ``dst`` for every ``src`` point; ties go to the lowest index."""
    idx = np.empty(len(src), dtype=np.int64)
    for lo in range(0, len(src), chunk):
        block = src[lo : lo + chunk]
        d2 = ((block[:, None, :] - dst[None, :, :]) ** 2).sum(axis=2)
        idx[lo : lo + chunk] = np.argmin(d2, axis=1)
    return _pair_dist(src, dst, idx), idx


def nearest(src, dst) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbor distances and indices from ``src`` into ``dst``.

    Small problems use the exhaustive search; larger ones a k-d tree.  Distances
    are recomputed from the matched pairs so both paths agree bit for bit.
    """
    src, dst = np.asarray(src, dtype=np.float64), np.asarray(dst, dtype=np.float64)
    if len(src) <= BRUTE_FORCE_LIMIT and len(dst) <= BRUTE_FORCE_LIMIT:
        return nearest_brute_force(src, dst)
    _, idx = cKDTree(dst).query(src, k=1)
    idx = np.asarray(idx, dtype=np.int64)
    return _pair_dist(src, dst, idx), idx


# --------------------------------------------------------------------------
# cloud metrics
# --------------------------------------------------------------------------


def chamfer(P, Q) -> tuple[float, float]:
    """``(mean, median)`` in millimeters over nearest-neighbor distances in both directions."""
    P, Q = _check_cloud(P, "P"), _check_cloud(Q, "Q")
    d_pq, _ = nearest(P, Q)
    d_qp, _ = nearest(Q, P)
    # sorted so the result does not depend on argument order
    both = np.sort(np.concatenate([d_pq, d_qp])) * 1000.0
    return float(both.mean()), float(np.median(both))


def f1_score(precision: float, recall: float) -> float:
    if precision <= 0 or recall <= 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def precision_recall_f1(P, P_star, threshold: float = 0.05) -> tuple[float, float, float]:
    P, P_star = _check_cloud(P, "P"), _check_cloud(P_star, "P*")
    d_p, _ = nearest(P, P_star)
    d_s, _ = nearest(P_star, P)
    precision = float(np.mean(d_p < threshold))
    recall = float(np.mean(d_s < threshold))
    return precision, recall, f1_score(precision, recall)


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    cd_mean: float
    cd_median: float
    precision: float
    recall: float
    f1: float
    threshold: float

    CSV_FIELDS = ("psnr", "cd_mean", "cd_median", "precision", "recall", "f1", "threshold")

    def __post_init__(self):
        for name in ("precision", "recall", "f1"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} outside [0, 1]")

    def csv_header(self) -> str:
        return ",".join(self.CSV_FIELDS)

    def csv_row(self) -> str:
        return ",".join(repr(float(getattr(self, k))) for k in self.CSV_FIELDS)

    def to_text(self) -> str:
        lines = [
            "# metric report",
            "# psnr: dB, -10 log10(mean over pixels of squared RGB distance); inf for identical images",
            "# cd_mean, cd_median: mm, nearest-neighbor Euclidean distances pooled over both directions",
            f"# precision/recall/f1: fraction of points within threshold (m)",
        ]
        lines += [f"{k} = {getattr(self, k)!r}" for k in self.CSV_FIELDS]
        return "\n".join(lines) + "\n"

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate_clouds(pred, gt, threshold: float = 0.05, psnr_db: float = math.nan) -> MetricReport:
    cd_mean, cd_median = chamfer(pred, gt)
    p, r, f = precision_recall_f1(pred, gt, threshold)
    return MetricReport(psnr_db, cd_mean, cd_median, p, r, f, threshold)


# --------------------------------------------------------------------------
# fusion
# --------------------------------------------------------------------------


def backproject(depth: np.ndarray, camera: Camera, valid: np.ndarray | None = None) -> np.ndarray:
    """World points of the valid pixels of a ray-distance depth map."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != camera.shape:
        raise MetricError(f"depth map {depth.shape} does not match camera {camera.shape}")
    if valid is None:
        valid = np.isfinite(depth)
    rows, cols = np.nonzero(valid)
    d = camera.pixel_directions(rows, cols)
    return camera.translation + depth[rows, cols][:, None] * d


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """Keep, per occupied voxel, the input point closest to the voxel center (ties: lowest index).

    Survivors keep their input order, so applying it twice changes nothing.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if voxel <= 0 or len(points) == 0:
        return points.copy()
    keys = np.floor(points / voxel).astype(np.int64)
    center = (keys + 0.5) * voxel
    off = points - center
    dist = (off * off).sum(axis=1)
    order = np.lexsort((np.arange(len(points)), dist, keys[:, 2], keys[:, 1], keys[:, 0]))
    k_sorted = keys[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = np.any(k_sorted[1:] != k_sorted[:-1], axis=1)
    return points[np.sort(order[first])]


def fuse_depth_maps(
    depths: Sequence[np.ndarray],
    cameras: Sequence[Camera],
    far: float | None = None,
    voxel: float = 0.01,
    bounds: tuple[np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    """Back-project every valid pixel of every view and voxel-downsample the union.

    Depths at or beyond ``far`` (the miss sentinel) and non-finite or non-positive
    depths are skipped.  With ``bounds`` the cloud is cropped to that box.
    """
    if len(depths) != len(cameras):
        raise MetricError(f"{len(depths)} depth maps for {len(cameras)} cameras")
    parts = []
    for depth, cam in zip(depths, cameras):
        depth = np.asarray(depth, dtype=np.float64)
        valid = np.isfinite(depth) & (depth > 0)
        if far is not None:
            valid &= depth < far
        parts.append(backproject(depth, cam, valid))
    pts = np.concatenate(parts) if parts else np.zeros((0, 3))
    if bounds is not None:
        lo, hi = np.asarray(bounds[0]), np.asarray(bounds[1])
        pts = pts[np.all((pts >= lo) & (pts <= hi), axis=1)]
    return voxel_downsample(pts, voxel)
