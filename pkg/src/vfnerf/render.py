"""Quadrature volume rendering and the coarse-to-fine ray sampler."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad
from .density import WindowWeights, density_from_cosine, windowed_cosine

MIN_GAP = 1e-9


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    N_c: int = 100
    N_f: int = 0
    N_f_max: int = 100
    N_f_inc: int = 5
    n_inc: int = 50
    d_samples: float = 0.30
    N_f_start: int = 0

    def __post_init__(self):
        if self.N_c < 2:
            raise ValueError("N_c must be >= 2")
        if not 0 <= self.N_f <= self.N_f_max:
            raise ValueError(f"N_f={self.N_f} outside [0, {self.N_f_max}]")
        if self.d_samples <= 0:
            raise ValueError("d_samples must be positive")


class RenderOutput(NamedTuple):
    C: object  # (..., 3)
    D: object  # (...)
    T: object  # (..., N) transmittance before each interval
    weights: object  # (..., N)
    weight_sum: object  # (...)


def render_ray(t, sigma, colors) -> RenderOutput:
    """Alpha-composite ``N`` intervals: ``t`` (..., N+1), ``sigma`` (..., N), ``colors`` (..., N+1, 3).

    Color and depth of interval ``i`` are those of its leading sample; depth is not
    normalized by the accumulated weight.
    """
    t = np.asarray(t, dtype=np.float64)
    sv = ad.value(sigma)
    bad = ~np.isfinite(sv)
    if bad.any():
        idx = np.argwhere(bad)[0]
        raise RenderError(f"non-finite density at sample index {tuple(int(i) for i in idx)}")
    delta = np.diff(t, axis=-1)
    if sv.shape != delta.shape:
        raise RenderError(f"density shape {sv.shape} does not match {delta.shape} intervals")
    if np.any(delta <= 0):
        raise RenderError("sample distances must be strictly increasing")
    n = delta.shape[-1]
    optical = sigma * delta
    alpha = 1.0 - ad.exp(-optical)
    # exclusive prefix sum of optical depth
    before = ad.pad_axis(ad.cumsum(optical, axis=-1)[..., : n - 1], 1, 0, axis=-1)
    trans = ad.exp(-before)
    w = trans * alpha
    C = ad.sum_(w[..., None] * colors[..., :n, :], axis=-2)
    D = ad.sum_(w * t[..., :n], axis=-1)
    return RenderOutput(C, D, trans, w, ad.sum_(w, axis=-1))


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


def coarse_samples(near: float, far: float, N_c: int, rng: np.random.Generator | None = None, rays: int | None = None):
    """``N_c + 1`` stratified distances in [near, far]; interior samples jittered within their bin.

    ``rng=None`` disables jitter.  With ``rays`` given, returns one row per ray.
    """
    if not near < far:
        raise ValueError("need near < far")
    edges = np.linspace(near, far, N_c + 1)
    shape = (N_c + 1,) if rays is None else (rays, N_c + 1)
    t = np.broadcast_to(edges, shape).copy()
    if rng is not None and N_c > 1:
        width = (far - near) / N_c
        jitter = rng.uniform(-0.5, 0.5, size=shape[:-1] + (N_c - 1,))
        t[..., 1:-1] += jitter * width
    return t


def fine_window(t_star: float, N_f: int, d_samples: float, near: float, far: float) -> np.ndarray:
    lo = max(t_star - d_samples / 2, near)
    hi = min(t_star + d_samples / 2, far)
    if N_f == 1:
        return np.array([(lo + hi) / 2])
    return np.linspace(lo, hi, N_f)


def _merge(t: np.ndarray, extra: np.ndarray) -> np.ndarray:
    merged = np.sort(np.concatenate([t, extra]))
    keep = np.ones(merged.size, dtype=bool)
    last = merged[0]
    for k in range(1, merged.size):
        if merged[k] - last < MIN_GAP:
            keep[k] = False
        else:
            last = merged[k]
    return merged[keep]


def fine_samples(coarse_t, sigma, N_f: int, d_samples: float, near: float | None = None, far: float | None = None):
    """Merge ``N_f`` uniform samples in a window of width ``d_samples`` around the density argmax.

    The window is clipped to [near, far] (defaulting to the coarse range).  Ties in
    the argmax resolve to the lowest index.  Samples closer than 1e-9 are merged.
    """
    coarse_t = np.asarray(coarse_t, dtype=np.float64)
    if N_f < 0:
        raise ValueError("N_f must be >= 0")
    if N_f == 0:
        return coarse_t.copy()
    near = coarse_t[0] if near is None else near
    far = coarse_t[-1] if far is None else far
    t_star = coarse_t[int(np.argmax(ad.value(sigma)))]
    return _merge(coarse_t, fine_window(t_star, N_f, d_samples, near, far))


def fine_samples_batch(coarse_t: np.ndarray, sigma: np.ndarray, N_f: int, d_samples: float, near: float, far: float):
    """Row-wise :func:`fine_samples` returning a rectangular (R, N_c + 1 + N_f) array.

    A row that lost samples to de-duplication is padded back by splitting its
    widest gaps, so all rays keep the same sample count.
    """
    if N_f == 0:
        return coarse_t.copy()
    R, S = coarse_t.shape
    t_star = coarse_t[np.arange(R), np.argmax(sigma, axis=1)]
    lo = np.maximum(t_star - d_samples / 2, near)
    hi = np.minimum(t_star + d_samples / 2, far)
    if N_f == 1:
        fine = ((lo + hi) / 2)[:, None]
    else:
        u = np.linspace(0.0, 1.0, N_f)
        fine = lo[:, None] + (hi - lo)[:, None] * u[None, :]
    merged = np.sort(np.concatenate([coarse_t, fine], axis=1), axis=1)
    gaps = np.diff(merged, axis=1)
    for r in np.flatnonzero((gaps < MIN_GAP).any(axis=1)):
        row = _merge(merged[r], np.empty(0))
        while row.size < S + N_f:
            k = int(np.argmax(np.diff(row)))
            row = np.insert(row, k + 1, 0.5 * (row[k] + row[k + 1]))
        merged[r] = row
    return merged


def update_fine_count(cfg: SamplerConfig, epoch: int) -> SamplerConfig:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    n = min(cfg.N_f_max, cfg.N_f_start + cfg.N_f_inc * (epoch // cfg.n_inc))
    return replace(cfg, N_f=n)


# --------------------------------------------------------------------------
# full ray pipeline
# --------------------------------------------------------------------------

# field(x (n, 3), tape) -> (v (n, 3), z (n, F)); shader(x, v, d, z, tape) -> rgb (n, 3)
FieldFn = Callable[..., tuple]
ShaderFn = Callable[..., object]


class BatchRender(NamedTuple):
    t: np.ndarray  # (R, S)
    v: object  # (R, S, 3) predicted field
    sigma: object  # (R, S - 1)
    out: RenderOutput


def sample_distances(
    field: FieldFn,
    density_args: tuple,
    origins: np.ndarray,
    dirs: np.ndarray,
    near: float,
    far: float,
    sampler: SamplerConfig,
    weights: WindowWeights,
    rng: np.random.Generator | None,
) -> np.ndarray:
    """Coarse stratified distances, refined around the (untraced) density peak when N_f > 0."""
    R = len(origins)
    t = coarse_samples(near, far, sampler.N_c, rng, rays=R)
    if sampler.N_f == 0:
        return t
    x = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    v, _ = field(x.reshape(-1, 3), None)
    v = np.asarray(v).reshape(R, -1, 3)
    alpha, mu, beta, xi = (ad.value(a) for a in density_args)
    sigma = density_from_cosine(windowed_cosine(v, weights), alpha, mu, beta, float(xi))
    return fine_samples_batch(t, sigma, sampler.N_f, sampler.d_samples, near, far)


def render_batch(
    field: FieldFn,
    shader: ShaderFn,
    density_args: tuple,
    origins: np.ndarray,
    dirs: np.ndarray,
    t: np.ndarray,
    weights: WindowWeights,
    tape: ad.Tape | None = None,
) -> BatchRender:
    """Evaluate field, density and color at distances ``t`` (R, S) and composite every ray."""
    R, S = t.shape
    x = (origins[:, None, :] + t[..., None] * dirs[:, None, :]).reshape(-1, 3)
    d = np.repeat(dirs, S, axis=0)
    v, z = field(x, tape)
    rgb = shader(x, v, d, z, tape)
    v3 = ad.reshape(v, (R, S, 3))
    alpha, mu, beta, xi = density_args
    sigma = density_from_cosine(windowed_cosine(v3, weights), alpha, mu, beta, float(ad.value(xi)))
    out = render_ray(t, sigma, ad.reshape(rgb, (R, S, 3)))
    return BatchRender(t, v3, sigma, out)
