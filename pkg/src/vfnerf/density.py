"""Surface density from vector-field predictions along a ray.

Neighboring samples whose predicted directions disagree (cosine near -1) sit
on either side of a surface.  The sliding-window cosine averages that signal
over ``M`` neighbors, and a Laplace CDF turns it into a nonnegative density.

Conventions that differ from a literal reading of the formulas:

* ``laplace_cdf`` is the standard Laplace CDF (with the 1/2 factors), which
  is continuous at ``mu``.
* Window weights are L1-normalized.
* Near the ends of a ray, neighbor terms that fall outside the ray are
  dropped and the remaining weights renormalized to sum to one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

COSINE_EPS = 1e-12


@dataclass(frozen=True)
class WindowWeights:
    M: int
    w: np.ndarray
    n: int
    n_epochs: int

    @property
    def half(self) -> int:
        return self.M // 2

    def backward(self, lag: int) -> float:
        """Weight of the neighbor ``lag`` samples behind (lag >= 1)."""
        return float(self.w[lag - 1])

    def forward(self, lag: int) -> float:
        """Weight of the neighbor ``lag`` samples ahead (lag >= 1)."""
        return float(self.w[lag - 1 + self.half])


@dataclass(frozen=True)
class DensityParams:
    log_alpha: float
    mu: float
    log_beta: float
    xi: float = -0.5

    def __post_init__(self):
        if abs(self.xi) > 1:
            raise ValueError("xi must lie in [-1, 1]")

    @classmethod
    def from_values(cls, alpha: float, mu: float, beta: float, xi: float = -0.5) -> "DensityParams":
        if alpha <= 0 or beta <= 0:
            raise ValueError("alpha and beta must be positive")
        return cls(float(np.log(alpha)), float(mu), float(np.log(beta)), float(xi))

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha))

    @property
    def beta(self) -> float:
        return float(np.exp(self.log_beta))


@dataclass
class RaySamples:
    """Ordered samples on one ray: ``N + 1`` distances with positions, predicted field and colors."""

    t: np.ndarray
    x: np.ndarray | None = None
    v: object = None
    c: object = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.t.ndim != 1 or self.t.size < 2:
            raise ValueError("need at least two samples")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("sample distances must be strictly increasing")
        for name in ("x", "v", "c"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != self.t.size:
                raise ValueError(f"{name} has {len(arr)} rows for {self.t.size} samples")

    @property
    def delta(self) -> np.ndarray:
        return np.diff(self.t)

    @property
    def n_intervals(self) -> int:
        return self.t.size - 1


def anneal_weights(M: int, n: int, n_epochs: int) -> WindowWeights:
    """Window weights at annealing step ``n`` of ``n_epochs``: uniform at 0, one-hot at index M/2 at the end."""
    if M < 2 or M % 2:
        raise ValueError("window size M must be even and >= 2")
    if n_epochs < 0 or not 0 <= n <= max(n_epochs, 0):
        raise ValueError(f"annealing step {n} outside [0, {n_epochs}]")
    i = np.arange(M, dtype=np.float64)
    if n_epochs == 0:
        ratio = 1.0
    else:
        ratio = n / n_epochs
    raw = (M / 2) * np.maximum(0.0, 1.0 - ratio * np.abs(i - M / 2))
    return WindowWeights(M, raw / raw.sum(), n, n_epochs)


def anneal_step(epoch: int, start: int, end: int) -> tuple[int, int]:
    """Map a training epoch onto the annealing clock ``(n, n_epochs)``."""
    span = max(end - start, 0)
    return int(min(max(epoch - start, 0), span)), span


def windowed_cosine(v, weights: WindowWeights, return_degenerate: bool = False):
    """Weighted sliding-window cosine similarity along the sample axis.

    ``v`` has shape (..., N + 1, 3); the result has shape (..., N).
    With ``return_degenerate`` also returns a boolean mask of the N + 1 samples
    whose predicted vector has (near) zero norm.
    """
    vv = ad.value(v)
    if vv.ndim < 2 or vv.shape[-1] != 3:
        raise ValueError(f"expected (..., N+1, 3) vectors, got {vv.shape}")
    S = vv.shape[-2]
    N = S - 1
    if N < 1:
        raise ValueError("need at least two samples")
    axis = vv.ndim - 2
    total = None
    den = np.zeros(N)
    lead = (slice(None),) * axis
    for lag in range(1, weights.half + 1):
        wf, wb = weights.forward(lag), weights.backward(lag)
        if (wf == 0 and wb == 0) or lag > N:
            continue
        # cosine between samples i and i + lag, for i = 0 .. S - 1 - lag
        c = ad.cosine(v[lead + (slice(0, S - lag),)], v[lead + (slice(lag, S),)], eps=COSINE_EPS)
        if wf:
            # forward neighbor exists for i <= N - lag
            term = ad.pad_axis(c, 0, lag - 1, axis=-1) * wf
            total = term if total is None else total + term
            den[: N - lag + 1] += wf
        if wb and lag < N:
            # backward neighbor exists for i >= lag; uses pair (i - lag, i)
            part = c[(Ellipsis, slice(0, N - lag))]
            term = ad.pad_axis(part, lag, 0, axis=-1) * wb
            total = term if total is None else total + term
            den[lag:] += wb
    out = total / den
    if return_degenerate:
        return out, np.linalg.norm(vv, axis=-1) <= np.sqrt(COSINE_EPS)
    return out


def windowed_cosine_reference(v: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Direct double loop over samples and window slots; the independent check for :func:`windowed_cosine`."""
    v = np.asarray(v, dtype=np.float64)
    M = len(w)
    N = len(v) - 1
    out = np.empty(N)
    for i in range(N):
        acc = 0.0
        wsum = 0.0
        for j in range(M // 2):
            for nb, wj in ((i - j - 1, w[j]), (i + j + 1, w[j + M // 2])):
                if 0 <= nb <= N:
                    a, b = v[i], v[nb]
                    den = max(np.sqrt(a @ a) * np.sqrt(b @ b), COSINE_EPS)
                    acc += wj * (a @ b) / den
                    wsum += wj
        out[i] = acc / wsum
    return out


def laplace_cdf(x, mu, beta):
    """Standard Laplace CDF; accepts arrays or traced values for all three arguments."""
    if np.any(ad.value(beta) <= 0):
        raise ValueError("beta must be positive")
    diff = x - mu
    e = ad.exp(-(ad.abs_(diff) / beta))
    below = np.asarray(ad.value(diff) <= 0)
    return ad.where(below, 0.5 * e, 1.0 - 0.5 * e)


def density_from_cosine(c_sim, alpha, mu, beta, xi: float):
    """``ReLU(alpha * Psi(-c_sim) - alpha * Psi(xi))``."""
    threshold = laplace_cdf(np.float64(xi), mu, beta)
    return ad.relu(alpha * laplace_cdf(-c_sim, mu, beta) - alpha * threshold)


def density(samples: RaySamples, weights: WindowWeights, params: DensityParams) -> np.ndarray:
    """Density for the N intervals of one ray, from its predicted field ``samples.v``."""
    if samples.v is None:
        raise ValueError("samples carry no vector-field predictions")
    c_sim = windowed_cosine(samples.v, weights)
    return density_from_cosine(c_sim, params.alpha, params.mu, params.beta, params.xi)
