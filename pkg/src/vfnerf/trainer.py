"""Training: losses, vector-field pretraining, pixel batches, schedules and the epoch loop.

All randomness of a batch (pixel choice, coarse jitter, exterior and center
points) is drawn from a generator seeded by ``(seed, epoch, batch)``, so a run
resumed from a checkpoint follows the uninterrupted trajectory exactly.
"""

from __future__ import annotations

import csv
import io as _io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad
from . import io
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .dataset import ConfigError, Dataset, Views
from .density import WindowWeights, anneal_step, anneal_weights
from .metrics import psnr
from .mlp import Model, ModelConfig
from .optim import OptimizerState, optimizer_step
from .render import SamplerConfig, render_batch, sample_distances, update_fine_count
from .scene import Camera, Scene

CSV_HEADER = ("epoch", "lr", "L_c", "L_depth", "L_norm", "L_ext", "L_cen", "total", "psnr_holdout")
CHECKPOINT = "checkpoint.ckpt"
METRICS = "metrics.csv"
RESOLVED_CONFIG = "resolved_config.json"


class TrainingError(RuntimeError):
    pass


class PretrainError(TrainingError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


def _opt(default, help: str):
    return field(default=default, metadata={"help": help})


@dataclass(frozen=True)
class LossWeights:
    w_c: float = 1.0
    w_norm: float = 0.05
    w_ext: float = 0.5
    w_depth: float = 0.25
    w_cen: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) >= 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    """Every training constant; loadable from YAML and overridable per key."""

    # schedule
    epochs: int = _opt(300, "training epochs")
    batches_per_epoch: int = _opt(4, "optimizer steps per epoch")
    rays_per_batch: int = _opt(512, "pixels (rays) per batch")
    anneal_start: int = _opt(70, "epoch where window-weight annealing starts")
    anneal_end: int = _opt(140, "epoch where the window weights become one-hot")
    window_size: int = _opt(6, "sliding-window size M (even)")
    # optimizer
    lr: float = _opt(5e-4, "initial learning rate")
    lr_decay: float = _opt(0.1, "learning rate factor reached at the last epoch")
    adam_beta1: float = _opt(0.9, "Adam first-moment decay")
    adam_beta2: float = _opt(0.999, "Adam second-moment decay")
    adam_eps: float = _opt(1e-8, "Adam epsilon")
    # losses
    w_c: float = _opt(1.0, "color loss weight")
    w_norm: float = _opt(0.05, "unit-norm loss weight")
    w_ext: float = _opt(0.5, "exterior (inward field) loss weight")
    w_depth: float = _opt(0.25, "depth loss weight")
    w_cen: float = _opt(0.5, "center (outward field) loss weight")
    n_ext: int = _opt(128, "exterior points per batch")
    n_cen: int = _opt(128, "center points per batch")
    ext_inner: float = _opt(1.1, "inner exterior shell radius, in bounds circumradii")
    ext_outer: float = _opt(2.0, "outer exterior shell radius, in bounds circumradii")
    cen_radius: float = _opt(0.1, "center ball radius, in bounds circumradii")
    # density
    xi: float = _opt(-0.5, "cosine threshold of the density")
    alpha0: float = _opt(100.0, "initial density gain")
    mu0: float = _opt(0.7, "initial Laplace location")
    beta0: float = _opt(0.5, "initial Laplace scale")
    # sampler
    N_c: int = _opt(100, "coarse samples per ray (intervals)")
    N_f_start: int = _opt(0, "fine samples at epoch 0")
    N_f_max: int = _opt(100, "maximum fine samples")
    N_f_inc: int = _opt(5, "fine samples added per increment")
    n_inc: int = _opt(5, "epochs between fine-sample increments")
    d_samples: float = _opt(0.30, "fine window width in meters")
    # networks
    hidden_width: int = _opt(256, "hidden width of both networks")
    vf_layers: int = _opt(8, "hidden layers of the vector-field network")
    color_layers: int = _opt(4, "hidden layers of the color network")
    feature_dim: int = _opt(256, "geometry feature length")
    pe_x: int = _opt(6, "positional-encoding frequencies for positions")
    pe_d: int = _opt(4, "positional-encoding frequencies for view directions")
    vf_skip: tuple = _opt((4,), "vector-field layers receiving the encoded input again")
    color_pe_x: bool = _opt(False, "feed encoded (not raw) positions to the color network")
    # pretraining
    pretrain_steps: int = _opt(1000, "steps fitting the field to point at the scene center")
    pretrain_batch: int = _opt(1024, "points per pretraining step")
    pretrain_lr: float = _opt(1e-3, "pretraining learning rate")
    # run
    seed: int = _opt(0, "seed for initialization and all sampling")
    checkpoint_every: int = _opt(50, "epochs between checkpoints (the last epoch always writes one)")
    eval_every: int = _opt(50, "epochs between held-out PSNR evaluations (and the last epoch)")
    render_chunk: int = _opt(1024, "rays per chunk when rendering full frames")

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.epochs < 1:
            out.append("epochs must be >= 1")
        if self.rays_per_batch < 1:
            out.append("rays_per_batch must be >= 1")
        if self.batches_per_epoch < 1:
            out.append("batches_per_epoch must be >= 1")
        if not 0 <= self.anneal_start < self.anneal_end <= self.epochs:
            out.append("need 0 <= anneal_start < anneal_end <= epochs")
        if self.window_size < 2 or self.window_size % 2:
            out.append("window_size must be even and >= 2")
        if not -1 <= self.xi <= 1:
            out.append("xi must lie in [-1, 1]")
        if min(self.alpha0, self.beta0) <= 0:
            out.append("alpha0 and beta0 must be > 0")
        if min(self.w_c, self.w_norm, self.w_ext, self.w_depth, self.w_cen) < 0:
            out.append("loss weights must be >= 0")
        if not 0 < self.ext_inner < self.ext_outer:
            out.append("need 0 < ext_inner < ext_outer")
        if self.cen_radius <= 0:
            out.append("cen_radius must be > 0")
        if self.N_c < 2:
            out.append("N_c must be >= 2")
        if not 0 <= self.N_f_start <= self.N_f_max:
            out.append("need 0 <= N_f_start <= N_f_max")
        if self.n_inc < 1:
            out.append("n_inc must be >= 1")
        if self.d_samples <= 0:
            out.append("d_samples must be > 0")
        return out

    # ------------------------------------------------------------------
    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def describe(cls) -> list[tuple[str, object, str]]:
        return [(f.name, f.default, f.metadata.get("help", "")) for f in fields(cls)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vf_skip"] = list(self.vf_skip)
        return d

    @classmethod
    def from_mapping(cls, doc, source: str = "<config>", base: "TrainConfig | None" = None) -> "TrainConfig":
        """Typed construction; every unknown key and bad value is reported at once."""
        base = base or cls()
        problems = []
        kinds = {f.name: type(f.default) for f in fields(cls)}
        values = {}
        for key, raw in (doc or {}).items():
            line = doc.line_of(key) if hasattr(doc, "line_of") else None
            where = f"line {line}: " if line else ""
            if key not in kinds:
                problems.append(f"{where}unknown key '{key}'")
                continue
            try:
                values[key] = _coerce(kinds[key], raw)
            except (TypeError, ValueError):
                problems.append(f"{where}'{key}' expects {kinds[key].__name__}, got {raw!r}")
        if not problems:
            try:
                return replace(base, **values)
            except ValueError as exc:
                problems.extend(str(exc).split("; "))
        raise ConfigError(source, problems)

    def with_overrides(self, pairs: list[str], source: str = "--set") -> "TrainConfig":
        """Apply ``key=value`` strings in order (last wins); values are parsed as YAML scalars."""
        doc = {}
        problems = []
        for pair in pairs:
            key, sep, text = pair.partition("=")
            if not sep:
                problems.append(f"expected key=value, got {pair!r}")
                continue
            doc[key.strip()] = io.yaml.safe_load(text) if text.strip() else ""
        if problems:
            raise ConfigError(source, problems)
        return TrainConfig.from_mapping(doc, source, base=self)

    def with_epochs(self, epochs: int) -> "TrainConfig":
        """Change the run length, scaling the annealing epochs proportionally."""
        if epochs < 1:
            raise ConfigError("--epochs", ["epochs must be >= 1"])
        scale = epochs / self.epochs
        start = min(int(math.floor(self.anneal_start * scale)), epochs - 1)
        end = min(max(int(round(self.anneal_end * scale)), start + 1), epochs)
        return replace(self, epochs=epochs, anneal_start=start, anneal_end=end)

    # ------------------------------------------------------------------
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_c, self.w_norm, self.w_ext, self.w_depth, self.w_cen)

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.N_c, self.N_f_start, self.N_f_max, self.N_f_inc, self.n_inc, self.d_samples, self.N_f_start)

    def model_config(self, scene: Scene) -> ModelConfig:
        return ModelConfig(
            hidden_width=self.hidden_width,
            vf_layers=self.vf_layers,
            color_layers=self.color_layers,
            feature_dim=self.feature_dim,
            pe_x=self.pe_x,
            pe_d=self.pe_d,
            vf_skip=tuple(self.vf_skip),
            color_pe_x=self.color_pe_x,
            center=tuple(float(c) for c in scene.c_scene),
            scale=scene.circumradius,
            alpha0=self.alpha0,
            mu0=self.mu0,
            beta0=self.beta0,
        )

    def window(self, epoch: int) -> WindowWeights:
        n, span = anneal_step(epoch, self.anneal_start, self.anneal_end)
        return anneal_weights(self.window_size, n, span)


def _coerce(kind: type, raw):
    if kind is bool:
        if isinstance(raw, bool):
            return raw
        raise TypeError
    if kind is int:
        if isinstance(raw, bool) or not float(raw).is_integer():
            raise TypeError
        return int(raw)
    if kind is float:
        if isinstance(raw, bool):
            raise TypeError
        return float(raw)
    if kind is tuple:
        if isinstance(raw, (int, float)) and not isinstance(raw, bool):
            raw = [raw]
        if not isinstance(raw, (list, tuple)) or not all(isinstance(v, int) and not isinstance(v, bool) for v in raw):
            raise TypeError
        return tuple(int(v) for v in raw)
    return raw


def load_train_config(path) -> TrainConfig:
    path = Path(path)
    try:
        doc = io.load_yaml(path.read_text())
    except io.yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(str(path), [f"line {mark.line + 1 if mark else 0}: invalid YAML"]) from None
    if not isinstance(doc, dict):
        raise ConfigError(str(path), ["line 1: training config must be a mapping"])
    return TrainConfig.from_mapping(doc, str(path))


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BatchLosses:
    L_c: float
    L_depth: float
    L_norm: float
    L_ext: float
    L_cen: float
    total: float
    depth_excluded: int = 0

    def weighted_total(self, w: LossWeights) -> float:
        return combine(w, self.L_c, self.L_norm, self.L_ext, self.L_depth, self.L_cen)

    def row(self) -> tuple[float, ...]:
        return (self.L_c, self.L_depth, self.L_norm, self.L_ext, self.L_cen, self.total)


def combine(w: LossWeights, L_c, L_norm, L_ext, L_depth, L_cen):
    """Weighted sum in a fixed order, shared by traced and float evaluation so both agree exactly."""
    return w.w_c * L_c + w.w_norm * L_norm + w.w_ext * L_ext + w.w_depth * L_depth + w.w_cen * L_cen


def radial_field(points: np.ndarray, center: np.ndarray, inward: bool) -> np.ndarray:
    off = center - points if inward else points - center
    return off / np.linalg.norm(off, axis=1, keepdims=True)


def compute_losses(
    C,
    D,
    ref_rgb: np.ndarray,
    ref_depth: np.ndarray,
    vf_samples,
    ext_pts: np.ndarray,
    ext_v,
    cen_pts: np.ndarray,
    cen_v,
    center: np.ndarray,
    weights: LossWeights,
    depth_valid: np.ndarray | None = None,
):
    """All five terms and their weighted total.

    Returns ``(BatchLosses, total)`` where ``total`` is traced when the inputs are.
    Pixels whose reference depth is marked invalid (ray misses) are left out of the
    depth term and counted in ``depth_excluded``.
    """
    L_c = ad.mean(ad.sum_(ad.abs_(C - ref_rgb), axis=-1))
    if depth_valid is None:
        depth_valid = np.ones(np.shape(ref_depth), dtype=bool)
    excluded = int((~depth_valid).sum())
    if depth_valid.any():
        keep = np.flatnonzero(depth_valid)
        L_depth = ad.mean(ad.abs_(ad.getitem(D, keep) - ref_depth[keep]))
    else:
        L_depth = np.float64(0.0)
    v = ad.reshape(vf_samples, (-1, 3))
    L_norm = ad.mean(ad.square(ad.norm(v, axis=-1) - 1.0))
    L_ext = ad.mean(ad.norm(ext_v - radial_field(ext_pts, center, inward=True), axis=-1))
    L_cen = ad.mean(ad.norm(cen_v - radial_field(cen_pts, center, inward=False), axis=-1))
    total = combine(weights, L_c, L_norm, L_ext, L_depth, L_cen)
    vals = [float(ad.value(x)) for x in (L_c, L_depth, L_norm, L_ext, L_cen)]
    losses = BatchLosses(*vals, total=float(combine(weights, vals[0], vals[2], vals[3], vals[1], vals[4])), depth_excluded=excluded)
    return losses, total


# --------------------------------------------------------------------------
# sampling helpers
# --------------------------------------------------------------------------


def sample_shell(rng: np.random.Generator, n: int, center: np.ndarray, r0: float, r1: float) -> np.ndarray:
    """Uniform in the volume between radii ``r0`` and ``r1`` around ``center``."""
    g = rng.normal(size=(n, 3))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = rng.uniform(r0**3, r1**3, size=(n, 1)) ** (1.0 / 3.0)
    return center + g * r


def sample_ball(rng: np.random.Generator, n: int, center: np.ndarray, radius: float) -> np.ndarray:
    pts = sample_shell(rng, n, center, 0.0, radius)
    # the exact center has no outward direction; resample such points
    bad = np.linalg.norm(pts - center, axis=1) < 1e-12
    while bad.any():
        pts[bad] = sample_shell(rng, int(bad.sum()), center, 0.0, radius)
        bad = np.linalg.norm(pts - center, axis=1) < 1e-12
    return pts


class PixelBatch(NamedTuple):
    origins: np.ndarray
    dirs: np.ndarray
    rgb: np.ndarray
    depth: np.ndarray
    valid: np.ndarray
    index: np.ndarray  # flat (view, row, col) index


class RayTable:
    """All training rays flattened in (view, row, col) order, with their references."""

    def __init__(self, views: Views, sentinel: float):
        origins, dirs = zip(*(cam.rays() for cam in views.cameras))
        self.origins = np.concatenate(origins)
        self.dirs = np.concatenate(dirs)
        self.rgb = views.images.reshape(-1, 3)
        self.depth = views.depths.reshape(-1)
        self.valid = np.isfinite(self.depth) & (self.depth < sentinel)

    def __len__(self) -> int:
        return len(self.dirs)


def batch_rng(seed: int, epoch: int, batch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, batch])


def sample_pixel_batch(table: RayTable, count: int, rng: np.random.Generator) -> PixelBatch:
    """``count`` distinct (view, pixel) pairs drawn uniformly."""
    if count > len(table):
        raise ValueError(f"batch of {count} exceeds the {len(table)} available pixels")
    if count < 1:
        raise ValueError("batch must contain at least one pixel")
    idx = rng.choice(len(table), size=count, replace=False)
    return PixelBatch(table.origins[idx], table.dirs[idx], table.rgb[idx], table.depth[idx], table.valid[idx], idx)


# --------------------------------------------------------------------------
# pretraining
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PretrainReport:
    steps: int
    final_loss: float
    heldout_cosine: float


def center_targets(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    return radial_field(points, center, inward=True)


def _uniform_in_bounds(rng: np.random.Generator, scene: Scene, n: int) -> np.ndarray:
    pts = rng.uniform(scene.lo, scene.hi, size=(n, 3))
    near = np.linalg.norm(pts - scene.c_scene, axis=1) < 1e-9
    return pts[~near]


def heldout_center_cosine(model: Model, scene: Scene, seed: int, count: int = 1000) -> float:
    rng = np.random.default_rng([seed, 1])
    pts = _uniform_in_bounds(rng, scene, count)
    corners = np.array([[x, y, z] for x in (scene.lo[0], scene.hi[0]) for y in (scene.lo[1], scene.hi[1]) for z in (scene.lo[2], scene.hi[2])])
    pts = np.concatenate([pts, corners])
    v = model.vf(pts).v
    cos = (v * center_targets(pts, scene.c_scene)).sum(axis=1) / np.maximum(np.linalg.norm(v, axis=1), 1e-12)
    return float(cos.mean())


def pretrain_to_center(
    model: Model,
    scene: Scene,
    steps: int = 1000,
    seed: int = 0,
    batch: int = 1024,
    lr: float = 1e-3,
    min_cosine: float = 0.9,
) -> PretrainReport:
    """Fit the field to the unit direction toward the scene center over points uniform in the bounds."""
    center = scene.c_scene
    opt = OptimizerState(len(model.params), base_lr=lr, decay_rate=1.0, total_epochs=1)
    loss_val = math.nan
    for step in range(steps):
        rng = np.random.default_rng([seed, 0, step])
        pts = _uniform_in_bounds(rng, scene, batch)
        target = center_targets(pts, center)
        tape = ad.Tape()
        v = model.vf(pts, tape).v
        loss = ad.mean(ad.sum_(ad.square(v - target), axis=-1))
        tape.backward(loss)
        loss_val = float(ad.value(loss))
        optimizer_step(opt, model.params, 0.0)
    cos = heldout_center_cosine(model, scene, seed)
    if cos < min_cosine:
        raise PretrainError(
            f"pretraining did not converge: held-out cosine {cos:.4f} < {min_cosine} after {steps} steps (final loss {loss_val:.4g})"
        )
    return PretrainReport(steps, loss_val, cos)


# --------------------------------------------------------------------------
# rendering with a model
# --------------------------------------------------------------------------


def model_fns(model: Model):
    field_fn = lambda x, tape: tuple(model.vf(x, tape))  # noqa: E731
    shader = lambda x, v, d, z, tape: model.color(x, v, d, z, tape)  # noqa: E731
    return field_fn, shader


def density_args(model: Model, xi: float, tape: ad.Tape | None = None) -> tuple:
    alpha, mu, beta = model.density_params(tape)
    return alpha, mu, beta, xi


def render_rays(
    model: Model,
    origins: np.ndarray,
    dirs: np.ndarray,
    scene: Scene,
    window: WindowWeights,
    sampler: SamplerConfig,
    xi: float,
    chunk: int = 1024,
):
    """Untraced color, depth and accumulated weight for many rays, without jitter."""
    field_fn, shader = model_fns(model)
    args = density_args(model, xi)
    rgb, depth, acc = [], [], []
    for lo in range(0, len(dirs), chunk):
        o, d = origins[lo : lo + chunk], dirs[lo : lo + chunk]
        t = sample_distances(field_fn, args, o, d, scene.near, scene.far, sampler, window, None)
        out = render_batch(field_fn, shader, args, o, d, t, window).out
        rgb.append(out.C)
        depth.append(out.D)
        acc.append(out.weight_sum)
    return np.concatenate(rgb), np.concatenate(depth), np.concatenate(acc)


def render_camera(model, cam: Camera, scene, window, sampler, xi, chunk=1024, threads: int = 1):
    """Full frame ``(rgb (H, W, 3), depth (H, W), weight_sum (H, W))``.

    With ``threads > 1`` chunks are rendered concurrently and reassembled in pixel order.
    """
    o, d = cam.rays()
    h, w = cam.shape
    if threads > 1 and len(d) > chunk:
        from concurrent.futures import ThreadPoolExecutor

        starts = list(range(0, len(d), chunk))
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda s: render_rays(model, o[s : s + chunk], d[s : s + chunk], scene, window, sampler, xi, chunk), starts))
        rgb, depth, acc = (np.concatenate([p[k] for p in parts]) for k in range(3))
    else:
        rgb, depth, acc = render_rays(model, o, d, scene, window, sampler, xi, chunk)
    return rgb.reshape(h, w, 3), depth.reshape(h, w), acc.reshape(h, w)


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


class BatchResult(NamedTuple):
    losses: BatchLosses
    lr: float


def train_step(
    model: Model,
    opt: OptimizerState,
    cfg: TrainConfig,
    scene: Scene,
    table: RayTable,
    epoch: int,
    batch: int,
) -> BatchResult:
    """One optimizer step on batch ``batch`` of ``epoch``."""
    rng = batch_rng(cfg.seed, epoch, batch)
    window = cfg.window(epoch)
    sampler = update_fine_count(cfg.sampler(), epoch)
    pix = sample_pixel_batch(table, cfg.rays_per_batch, rng)
    field_fn, shader = model_fns(model)
    t = sample_distances(field_fn, density_args(model, cfg.xi), pix.origins, pix.dirs, scene.near, scene.far, sampler, window, rng)
    center = scene.c_scene
    R = scene.circumradius
    ext_pts = sample_shell(rng, cfg.n_ext, center, cfg.ext_inner * R, cfg.ext_outer * R)
    cen_pts = sample_ball(rng, cfg.n_cen, center, cfg.cen_radius * R)

    tape = ad.Tape()
    rb = render_batch(field_fn, shader, density_args(model, cfg.xi, tape), pix.origins, pix.dirs, t, window, tape)
    ext_v = model.vf(ext_pts, tape).v
    cen_v = model.vf(cen_pts, tape).v
    losses, total = compute_losses(
        rb.out.C, rb.out.D, pix.rgb, pix.depth, rb.v, ext_pts, ext_v, cen_pts, cen_v, center, cfg.loss_weights(), pix.valid
    )
    if not all(math.isfinite(x) for x in losses.row()):
        raise TrainingError(f"non-finite loss at epoch {epoch}, batch {batch}: {losses}")
    tape.backward(total)
    lr = optimizer_step(opt, model.params, float(epoch))
    return BatchResult(losses, lr)


@dataclass
class TrainResult:
    model: Model
    optimizer: OptimizerState
    rows: list
    out_dir: Path
    pretrain: PretrainReport | None = None


def _format_row(row: dict) -> list[str]:
    return [str(row["epoch"])] + [repr(float(row[k])) for k in CSV_HEADER[1:]]


def _write_metrics(path: Path, rows: list[dict]) -> None:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow(_format_row(r))
    io.atomic_write(path, buf.getvalue().encode())


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise TrainingError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in reader]


def holdout_psnr(model: Model, data: Dataset, cfg: TrainConfig, epoch: int, threads: int = 1) -> float:
    if len(data.holdout) == 0:
        return math.nan
    window = cfg.window(epoch)
    sampler = update_fine_count(cfg.sampler(), epoch)
    values = []
    for cam, img in zip(data.holdout.cameras, data.holdout.images):
        rgb, _, _ = render_camera(model, cam, data.scene, window, sampler, cfg.xi, cfg.render_chunk, threads)
        values.append(psnr(rgb, img))
    return float(np.mean(values))


def _checkpoint_extra(cfg: TrainConfig, epoch: int, scene: Scene) -> dict:
    sampler = update_fine_count(cfg.sampler(), max(epoch - 1, 0))
    n, span = anneal_step(max(epoch - 1, 0), cfg.anneal_start, cfg.anneal_end)
    return {
        "train_config": cfg.to_dict(),
        "sampler": {"N_f": sampler.N_f},
        "anneal": {"n": n, "N_epochs": span, "M": cfg.window_size},
        "scene": scene.to_dict(),
    }


def train(
    data: Dataset,
    cfg: TrainConfig,
    out_dir,
    resume: bool = False,
    threads: int = 1,
    log: Callable[[str], None] | None = None,
    stop_after: int | None = None,
) -> TrainResult:
    """Run (or continue) training, writing the metrics CSV and checkpoints under ``out_dir``.

    ``stop_after`` ends the run after that many completed epochs without
    changing the schedule, which is how interrupted runs are simulated.
    Training itself is single-threaded; ``threads`` only parallelizes held-out rendering.
    """
    log = log or (lambda msg: None)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / CHECKPOINT
    metrics_path = out / METRICS
    scene = data.scene
    table = RayTable(data.train, data.depth_sentinel)
    excluded = int((~table.valid).sum())
    if excluded:
        log(f"{excluded} reference pixels are ray misses and are excluded from the depth loss")
    pre = None
    if resume and ckpt_path.exists():
        ck = load_checkpoint(ckpt_path)
        saved = TrainConfig.from_mapping(ck.train_config, str(ckpt_path))
        if saved != cfg:
            raise TrainingError("checkpoint was written with a different training configuration")
        model, opt, start = ck.model, ck.optimizer, ck.epoch
        rows = [r for r in read_metrics(metrics_path) if r["epoch"] < start] if metrics_path.exists() else []
        log(f"resumed at epoch {start}")
    else:
        model = Model(cfg.model_config(scene)).init(cfg.seed)
        pre = pretrain_to_center(model, scene, cfg.pretrain_steps, cfg.seed, cfg.pretrain_batch, cfg.pretrain_lr)
        log(f"pretrained field: held-out cosine {pre.heldout_cosine:.4f}")
        opt = OptimizerState(
            len(model.params), cfg.lr, cfg.lr_decay, cfg.epochs, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
        )
        start, rows = 0, []
    io.atomic_write(out / RESOLVED_CONFIG, (json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n").encode())
    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(start, last):
        t0 = time.perf_counter()
        acc = np.zeros(6)
        lr = opt.lr(epoch)
        try:
            for b in range(cfg.batches_per_epoch):
                res = train_step(model, opt, cfg, scene, table, epoch, b)
                acc += res.losses.row()
        except (TrainingError, FloatingPointError) as exc:
            raise TrainingError(f"{exc}; last good checkpoint kept at {ckpt_path}") from exc
        acc /= cfg.batches_per_epoch
        final = epoch == cfg.epochs - 1
        p = holdout_psnr(model, data, cfg, epoch, threads) if (final or (epoch + 1) % cfg.eval_every == 0) else math.nan
        row = dict(zip(CSV_HEADER, [epoch, lr, *acc, p]))
        rows.append(row)
        _write_metrics(metrics_path, rows)
        if final or (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == last:
            save_checkpoint(ckpt_path, model, opt, epoch + 1, _checkpoint_extra(cfg, epoch + 1, scene))
        log(
            f"epoch {epoch:4d} lr {lr:.3g} L_c {acc[0]:.4f} L_depth {acc[1]:.4f} L_norm {acc[2]:.4f} "
            f"L_ext {acc[3]:.4f} L_cen {acc[4]:.4f} total {acc[5]:.4f} psnr {p:.2f} ({time.perf_counter() - t0:.1f}s)"
        )
    return TrainResult(model, opt, rows, out, pre)
