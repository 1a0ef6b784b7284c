"""End-to-end self checks that run the pipeline on the analytic oracle field.

Every check reports the measured value next to its tolerance, so a failure
says by how much it missed.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .density import anneal_weights, density_from_cosine, windowed_cosine
from .mlp import Model
from .render import SamplerConfig, coarse_samples, render_batch, sample_distances
from .scene import Camera, Intrinsics, Plane, Scene, nearest_batch, oracle_color_batch, oracle_vf_batch, raycast_batch

# Sharp density for rendering with the exact field.  A narrow CDF (small beta)
# keeps medial-axis direction changes (cosines around -0.8) from adding density.
ORACLE_DENSITY = (1e4, 0.95, 0.002, -0.5)  # alpha, mu, beta, xi
ORACLE_SAMPLER = SamplerConfig(N_c=400, N_f=100, N_f_max=100, d_samples=0.30)
DEFAULT_DENSITY = (100.0, 0.7, 0.5, -0.5)
ANNEAL_STAGES = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{status} {self.name}: measured {self.measured:.6g}, tolerance {self.tolerance:.6g} ({self.seconds:.2f}s){extra}"


@dataclass
class OracleReport:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_text(self) -> str:
        lines = [r.line() for r in self.results]
        lines.append(f"{sum(r.passed for r in self.results)}/{len(self.results)} checks passed")
        return "\n".join(lines) + "\n"


def _timed(fn, *args, **kw) -> CheckResult:
    t0 = time.perf_counter()
    res = fn(*args, **kw)
    return CheckResult(res.name, res.passed, res.measured, res.tolerance, res.detail, time.perf_counter() - t0)


def _points_in_bounds(scene: Scene, rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.uniform(scene.lo, scene.hi, size=(n, 3))


# --------------------------------------------------------------------------
# field checks
# --------------------------------------------------------------------------


def check_plane_normals(scene: Scene, tol: float = 1e-12) -> CheckResult:
    errs = [(k, p.unit_norm_error()) for k, p in enumerate(scene.primitives) if isinstance(p, Plane)]
    worst = max(errs, key=lambda e: e[1], default=(None, 0.0))
    bad = [k for k, e in errs if e > tol]
    detail = f"non-unit normals on primitives {bad}" if bad else f"{len(errs)} planes"
    return CheckResult("plane_unit_norm", not bad, worst[1], tol, detail)


def check_vf_unit_norm(scene: Scene, rng: np.random.Generator, n: int = 2000, tol: float = 1e-9) -> CheckResult:
    x = _points_in_bounds(scene, rng, n)
    f = oracle_vf_batch(scene, x)
    off = ~f.on_surface
    err = float(np.abs(np.linalg.norm(f.v[off], axis=1) - 1.0).max())
    return CheckResult("vf_unit_norm", err <= tol, err, tol, f"{int(off.sum())} off-surface points")


def check_vf_nearest(scene: Scene, rng: np.random.Generator, n: int = 2000, tol: float = 1e-9) -> CheckResult:
    """The field points exactly at the nearest surface point: v . (x_S - x) = dist."""
    x = _points_in_bounds(scene, rng, n)
    near = nearest_batch(scene, x)
    v = oracle_vf_batch(scene, x).v
    err = float(np.abs(np.einsum("ij,ij->i", v, near.point - x) - near.dist).max())
    return CheckResult("vf_points_to_nearest", err <= tol, err, tol)


def check_surface_criterion(scene: Scene, rng: np.random.Generator, n: int = 500, gap: float = 1e-3, tol: float = 1e-6) -> CheckResult:
    """Pairs straddling a surface within ``gap`` have anti-parallel field vectors.

    Surface points are taken from every primitive; a pair is kept only when that
    primitive owns both points (another surface within ``gap`` would be a corner).
    """
    worst, used = 0.0, 0
    for k, prim in enumerate(scene.primitives):
        pts = prim.sample_surface(rng, 1.0, scene.lo, scene.hi)
        if len(pts) == 0:
            continue
        pts = pts[rng.permutation(len(pts))[:n]]
        normal = prim.outward_normal(pts)
        a, b = pts + 0.5 * gap * normal, pts - 0.5 * gap * normal
        own = (nearest_batch(scene, a).owner == k) & (nearest_batch(scene, b).owner == k)
        if not own.any():
            continue
        va, vb = oracle_vf_batch(scene, a[own]).v, oracle_vf_batch(scene, b[own]).v
        cos = np.einsum("ij,ij->i", va, vb)
        worst = max(worst, float(np.abs(cos + 1.0).max()))
        used += int(own.sum())
    return CheckResult("surface_criterion", used > 0 and worst <= tol, worst, tol, f"{used} straddling pairs")


# --------------------------------------------------------------------------
# density localization
# --------------------------------------------------------------------------


def plane_localization(
    plane: Plane,
    origin: np.ndarray,
    direction: np.ndarray,
    samples: int = 200,
    density: tuple = DEFAULT_DENSITY,
    stages=ANNEAL_STAGES,
    n_epochs: int = 4,
    window_size: int = 6,
    span: float = 1.83,
) -> list[float]:
    """|t(argmax sigma) - t_hit| in units of the sample spacing, for each annealing stage.

    The ray runs from near = 0 to ``span`` times the hit distance; a non-integer
    ratio keeps the plane off the sample grid.
    """
    solo = Scene((plane,), (-1e6,) * 3, (1e6,) * 3, near=0.0, far=1e6, center=(0.0, 0.0, 0.0))
    hit = raycast_batch(solo, origin[None], direction[None])
    if not hit.hit[0]:
        raise ValueError("ray does not cross the plane")
    t_hit = float(hit.t[0])
    t = coarse_samples(0.0, span * t_hit, samples, None)
    spacing = float(t[1] - t[0])
    v = oracle_vf_batch(solo, origin + t[:, None] * direction).v
    alpha, mu, beta, xi = density
    out = []
    for s in stages:
        w = anneal_weights(window_size, int(round(s * n_epochs)), n_epochs)
        sigma = density_from_cosine(windowed_cosine(v, w), alpha, mu, beta, xi)
        out.append(abs(float(t[int(np.argmax(sigma))]) - t_hit) / spacing)
    return out


def check_density_localization(scene: Scene, rng: np.random.Generator, rays_per_plane: int = 4) -> CheckResult:
    """Argmax density within one sample spacing of the hit, at every annealing stage."""
    worst, count = 0.0, 0
    for prim in scene.primitives:
        if not isinstance(prim, Plane):
            continue
        n = prim.n / np.linalg.norm(prim.n)
        for _ in range(rays_per_plane):
            foot = prim.sample_surface(rng, 1.0, scene.lo, scene.hi)
            foot = foot[rng.integers(len(foot))] if len(foot) else prim.n * prim.offset / (prim.n @ prim.n)
            tilt = rng.normal(size=3)
            tilt -= (tilt @ n) * n
            d = -n + 0.5 * tilt / max(np.linalg.norm(tilt), 1e-12) * rng.uniform()
            d /= np.linalg.norm(d)
            origin = foot - rng.uniform(0.5, 2.0) * d
            worst = max(worst, max(plane_localization(prim, origin, d, span=rng.uniform(1.3, 2.7))))
            count += 1
    return CheckResult("density_localization", worst <= 1.0, worst, 1.0, f"{count} rays x {len(ANNEAL_STAGES)} stages, in sample spacings")


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------


def oracle_frame(scene: Scene, size: int = 32, fov_deg: float = 90.0) -> Camera:
    """Square frame from the scene center looking down -z."""
    c = scene.c_scene
    return Camera.look_at(Intrinsics.from_fov(size, size, fov_deg), c, c - np.array([0.0, 0.0, 1.0]), up=(0.0, 1.0, 0.0))


def oracle_render(
    scene: Scene,
    camera: Camera,
    density: tuple = ORACLE_DENSITY,
    sampler: SamplerConfig = ORACLE_SAMPLER,
    window_size: int = 6,
    chunk: int = 1024,
):
    """Render with the exact field and albedo: ``(rgb (H, W, 3), depth (H, W), weight_sum (H, W))``.

    Uses the fully annealed (one-hot) window.
    """
    window = anneal_weights(window_size, 1, 1)
    field_fn = lambda x, tape: (oracle_vf_batch(scene, x).v, None)  # noqa: E731
    shader = lambda x, v, d, z, tape: oracle_color_batch(scene, x)  # noqa: E731
    o, d = camera.rays()
    parts = []
    for lo in range(0, len(d), chunk):
        oc, dc = o[lo : lo + chunk], d[lo : lo + chunk]
        t = sample_distances(field_fn, density, oc, dc, scene.near, scene.far, sampler, window, None)
        parts.append(render_batch(field_fn, shader, density, oc, dc, t, window).out)
    h, w = camera.shape
    rgb = np.concatenate([p.C for p in parts]).reshape(h, w, 3)
    depth = np.concatenate([p.D for p in parts]).reshape(h, w)
    acc = np.concatenate([p.weight_sum for p in parts]).reshape(h, w)
    return rgb, depth, acc


def render_depth_error(scene: Scene, camera: Camera | None = None) -> float:
    """Mean |D - t_hit| over the frame as a fraction of the mean ray-cast depth."""
    camera = camera or oracle_frame(scene)
    _, depth, _ = oracle_render(scene, camera)
    o, d = camera.rays()
    gt = raycast_batch(scene, o, d).t
    return float(np.abs(depth.reshape(-1) - gt).mean() / gt.mean())


def check_render_equivalence(scene: Scene, camera: Camera | None = None, tol: float = 0.01) -> CheckResult:
    err = render_depth_error(scene, camera)
    return CheckResult("render_depth_equivalence", err < tol, err, tol, "mean abs depth error / mean depth")


# --------------------------------------------------------------------------
# gradients
# --------------------------------------------------------------------------


def _tiny_model(scene: Scene, seed: int) -> Model:
    from .trainer import TrainConfig

    cfg = TrainConfig(hidden_width=8, vf_layers=3, color_layers=2, feature_dim=4, pe_x=2, pe_d=1, vf_skip=(2,))
    return Model(cfg.model_config(scene)).init(seed)


def gradient_check(scene: Scene, seed: int = 0, n_params: int = 20, rays: int = 4, h: float = 1e-6, floor: float = 1e-6):
    """Tape gradient of the full training loss vs central differences.

    Rays carry 4 samples each, the window sits mid-annealing so every neighbor
    weight is live, and the density scalars are always among the probed
    parameters.  Returns ``(max relative error, probed names, active density count)``.
    """
    from .trainer import LossWeights, compute_losses, density_args, model_fns

    rng = np.random.default_rng([seed, 3])
    model = _tiny_model(scene, seed)
    o = rng.uniform(scene.lo + 0.25 * (scene.hi - scene.lo), scene.hi - 0.25 * (scene.hi - scene.lo), size=(rays, 3))
    d = rng.normal(size=(rays, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    ref = raycast_batch(scene, o, d)
    t = coarse_samples(scene.near, scene.far, 3, None, rays=rays)
    window = anneal_weights(6, 1, 2)
    xi = -1.0  # lowest threshold: the density branch is live wherever the cosine is below 1
    ext_pts = scene.c_scene + rng.normal(size=(6, 3))
    cen_pts = scene.c_scene + 0.1 * rng.normal(size=(6, 3))
    weights = LossWeights(w_c=1.0, w_norm=0.1, w_ext=0.1, w_depth=0.25, w_cen=0.1)
    field_fn, shader = model_fns(model)

    def loss(tape=None):
        rb = render_batch(field_fn, shader, density_args(model, xi, tape), o, d, t, window, tape)
        ext_v = model.vf(ext_pts, tape).v
        cen_v = model.vf(cen_pts, tape).v
        _, total = compute_losses(rb.out.C, rb.out.D, ref.rgb, ref.t, rb.v, ext_pts, ext_v, cen_pts, cen_v, scene.c_scene, weights, ref.hit)
        return total, rb

    tape = ad.Tape()
    total, rb = loss(tape)
    tape.backward(total)
    grad = model.params.grad.copy()
    active = int((np.asarray(ad.value(rb.sigma)) > 0).sum())

    p = model.params
    density_idx = [p.segments[n].start for n in ("density.log_alpha", "density.mu", "density.log_beta")]
    others = np.setdiff1d(np.arange(len(p)), density_idx)
    probe = list(density_idx) + list(rng.choice(others, size=n_params - len(density_idx), replace=False))
    worst = 0.0
    for i in probe:
        fd = ad.central_difference(lambda: ad.value(loss()[0]), p.data, i, h)
        worst = max(worst, ad.relative_error(float(grad[i]), fd, floor))
    return worst, [int(i) for i in probe], active


def check_gradients(scene: Scene, seed: int, tol: float = 1e-4) -> CheckResult:
    worst, probed, active = gradient_check(scene, seed)
    ok = worst < tol and active > 0
    return CheckResult("gradient_check", ok, worst, tol, f"{len(probed)} parameters incl. density scalars, {active} active density samples")


# --------------------------------------------------------------------------


CHECK_NAMES = (
    "plane_unit_norm",
    "vf_unit_norm",
    "vf_points_to_nearest",
    "surface_criterion",
    "density_localization",
    "render_depth_equivalence",
    "gradient_check",
)


def run_oracle_check(scene: Scene, seed: int = 0) -> OracleReport:
    """Run every check; a check that raises is reported as failed, and the rest still run."""
    rng = np.random.default_rng([seed, 4])
    steps = [
        (check_plane_normals, (scene,)),
        (check_vf_unit_norm, (scene, rng)),
        (check_vf_nearest, (scene, rng)),
        (check_surface_criterion, (scene, rng)),
        (check_density_localization, (scene, rng)),
        (check_render_equivalence, (scene,)),
        (check_gradients, (scene, seed)),
    ]
    report = OracleReport()
    for name, (fn, args) in zip(CHECK_NAMES, steps):
        try:
            report.results.append(_timed(fn, *args))
        except Exception as exc:  # reported, not raised: the report must name every check
            report.results.append(CheckResult(name, False, math.nan, math.nan, f"error: {exc}"))
    return report
