"""The two coordinate networks: a vector-field net and a color net.

The vector-field net maps a position to an unnormalized direction ``v`` plus
a geometry feature ``z``.  The color net maps (position, ``v``, view
direction, ``z``) to RGB in (0, 1).  All weights live in one
:class:`~vfnerf.autodiff.ParamStore`, together with the three learnable
density scalars.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tape


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_width: int
    hidden_layers: int
    output_dim: int
    pe_frequencies: int = 0
    skip_connections: tuple[int, ...] = ()

    def __post_init__(self):
        if self.hidden_layers < 1:
            raise ValueError("hidden_layers must be >= 1")
        if self.pe_frequencies < 0:
            raise ValueError("pe_frequencies must be >= 0")
        for s in self.skip_connections:
            if not 0 < s < self.hidden_layers:
                raise ValueError(f"skip connection index {s} outside 1..{self.hidden_layers - 1}")


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of both networks and the initial density parameters."""

    hidden_width: int = 256
    vf_layers: int = 8
    color_layers: int = 4
    feature_dim: int = 256
    pe_x: int = 6
    pe_d: int = 4
    vf_skip: tuple[int, ...] = (4,)
    color_pe_x: bool = False
    # positions are encoded as (x - center) / scale
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: float = 1.0
    alpha0: float = 100.0
    mu0: float = 0.7
    beta0: float = 0.5

    def vf_mlp(self) -> MlpConfig:
        return MlpConfig(
            input_dim=3,
            hidden_width=self.hidden_width,
            hidden_layers=self.vf_layers,
            output_dim=3 + self.feature_dim,
            pe_frequencies=self.pe_x,
            skip_connections=tuple(self.vf_skip),
        )

    def color_mlp(self) -> MlpConfig:
        x_dim = encoded_dim(3, self.pe_x) if self.color_pe_x else 3
        return MlpConfig(
            input_dim=x_dim + 3 + encoded_dim(3, self.pe_d) + self.feature_dim,
            hidden_width=self.hidden_width,
            hidden_layers=self.color_layers,
            output_dim=3,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vf_skip"] = list(self.vf_skip)
        d["center"] = list(self.center)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["vf_skip"] = tuple(d.get("vf_skip", ()))
        d["center"] = tuple(float(c) for c in d.get("center", (0.0, 0.0, 0.0)))
        return cls(**d)


class VfOutput(NamedTuple):
    v: object  # (n, 3) array or Node
    z: object  # (n, feature_dim)


def encoded_dim(k: int, frequencies: int) -> int:
    return k * 2 * frequencies + k


def positional_encoding(x, frequencies: int):
    """``[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]`` on the last axis."""
    if frequencies < 0:
        raise ValueError("frequencies must be >= 0")
    parts = [x]
    for level in range(frequencies):
        scaled = x * (2.0**level * math.pi)
        parts.append(ad.sin(scaled))
        parts.append(ad.cos(scaled))
    if len(parts) == 1:
        return x
    return ad.concat(parts, axis=-1)


def _layer_dims(cfg: MlpConfig, enc_dim: int) -> list[tuple[int, int]]:
    dims = []
    for layer in range(cfg.hidden_layers):
        fan_in = enc_dim if layer == 0 else cfg.hidden_width
        if layer in cfg.skip_connections:
            fan_in += enc_dim
        dims.append((fan_in, cfg.hidden_width))
    dims.append((cfg.hidden_width, cfg.output_dim))
    return dims


def mlp_layout(prefix: str, cfg: MlpConfig, enc_dim: int) -> list[tuple[str, tuple[int, ...]]]:
    layout = []
    for k, (fan_in, fan_out) in enumerate(_layer_dims(cfg, enc_dim)):
        layout.append((f"{prefix}.{k}.weight", (fan_in, fan_out)))
        layout.append((f"{prefix}.{k}.bias", (fan_out,)))
    return layout


DENSITY_NAMES = ("density.log_alpha", "density.mu", "density.log_beta")


class Model:
    """Both networks plus density scalars over a single flat parameter vector."""

    def __init__(self, config: ModelConfig, params: ParamStore | None = None):
        self.config = config
        self.vf_cfg = config.vf_mlp()
        self.color_cfg = config.color_mlp()
        self._vf_enc = encoded_dim(3, self.vf_cfg.pe_frequencies)
        layout = (
            mlp_layout("vf", self.vf_cfg, self._vf_enc)
            + mlp_layout("color", self.color_cfg, self.color_cfg.input_dim)
            + [(name, ()) for name in DENSITY_NAMES]
        )
        if params is None:
            params = ParamStore(layout)
        elif [(s.name, s.shape) for s in params.segments.values()] != layout:
            raise ValueError("parameter layout does not match the model configuration")
        self.params = params
        self._center = np.asarray(config.center, dtype=np.float64)

    # ------------------------------------------------------------------
    def init(self, seed: int) -> "Model":
        """He-style uniform fan-in initialization, zero biases, density scalars at their initial values."""
        rng = np.random.default_rng(seed)
        for name, seg in self.params.segments.items():
            if name.endswith(".weight"):
                bound = math.sqrt(6.0 / seg.shape[0])
                self.params[name] = rng.uniform(-bound, bound, size=seg.shape)
            elif name.endswith(".bias"):
                self.params[name] = 0.0
        self.params["density.log_alpha"] = math.log(self.config.alpha0)
        self.params["density.mu"] = self.config.mu0
        self.params["density.log_beta"] = math.log(self.config.beta0)
        return self

    def _mlp(self, prefix: str, cfg: MlpConfig, enc, tape: Tape | None):
        p = self.params
        h = enc
        for layer in range(cfg.hidden_layers):
            if layer in cfg.skip_connections:
                h = ad.concat([h, enc], axis=-1)
            h = ad.linear(h, p.var(f"{prefix}.{layer}.weight", tape), p.var(f"{prefix}.{layer}.bias", tape), relu=True)
        last = cfg.hidden_layers
        return ad.linear(h, p.var(f"{prefix}.{last}.weight", tape), p.var(f"{prefix}.{last}.bias", tape))

    def normalize(self, x):
        return (x - self._center) * (1.0 / self.config.scale)

    def vf(self, x, tape: Tape | None = None) -> VfOutput:
        """Vector-field prediction for positions ``x`` of shape (n, 3) (or a single 3-vector)."""
        single = np.ndim(ad.value(x)) == 1
        if single:
            x = ad.reshape(x, (1, 3))
        enc = positional_encoding(self.normalize(x), self.vf_cfg.pe_frequencies)
        out = self._mlp("vf", self.vf_cfg, enc, tape)
        v, z = out[:, :3], out[:, 3:]
        if single:
            v, z = v[0], z[0]
        return VfOutput(v, z)

    def color(self, x, v, d, z, tape: Tape | None = None):
        """RGB in (0, 1) for positions, predicted field, unit view directions and features."""
        dv = ad.value(d)
        if np.any(np.abs(np.linalg.norm(dv, axis=-1) - 1.0) > 1e-9):
            raise ValueError("view directions must have unit norm (tolerance 1e-9)")
        single = np.ndim(ad.value(x)) == 1
        if single:
            x, v, d, z = (ad.reshape(a, (1, -1)) for a in (x, v, d, z))
        xn = self.normalize(x)
        x_in = positional_encoding(xn, self.config.pe_x) if self.config.color_pe_x else xn
        enc = ad.concat([x_in, v, positional_encoding(d, self.config.pe_d), z], axis=-1)
        rgb = ad.sigmoid(self._mlp("color", self.color_cfg, enc, tape))
        return rgb[0] if single else rgb

    def density_params(self, tape: Tape | None = None):
        """``(alpha, mu, beta)``; alpha and beta are exp of their stored logs."""
        p = self.params
        return (
            ad.exp(p.var("density.log_alpha", tape)),
            p.var("density.mu", tape),
            ad.exp(p.var("density.log_beta", tape)),
        )

    def copy(self) -> "Model":
        return Model(self.config, self.params.copy())


def vf_forward(model: Model, x, tape: Tape | None = None) -> VfOutput:
    return model.vf(x, tape)


def color_forward(model: Model, x, v, d, z, tape: Tape | None = None):
    return model.color(x, v, d, z, tape)
