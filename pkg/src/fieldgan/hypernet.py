"""The hypernetwork: Gaussian noise in, low-rank field modulations out.

A leaky-ReLU MLP trunk maps the latent to a shared feature; one linear head
per field layer emits that layer's A and B factors. Head biases start at the
rank-1 all-ones pattern, so a fresh sample modulates the shared field only
slightly and all early diversity comes from small generated perturbations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError
from .field import FieldConfig, ModulationSet


@dataclass
class GeneratorConfig:
    z_dim: int = 64
    trunk_layers: int = 3
    trunk_width: int = 256
    head_scale: float = 0.05  # std of generated A/B entries is head_scale/sqrt(k)

    def __post_init__(self):
        if self.z_dim < 1 or self.trunk_layers < 1 or self.trunk_width < 1:
            raise ContractError("generator dimensions must be >= 1")
        if self.head_scale <= 0.0:
            raise ContractError(f"head_scale must be > 0, got {self.head_scale}")


@dataclass
class GeneratorParams:
    cfg: GeneratorConfig
    field_cfg: FieldConfig
    trunk_weights: list[Tensor]
    trunk_biases: list[Tensor]
    head_a_weights: list[Tensor]
    head_a_biases: list[Tensor]
    head_b_weights: list[Tensor]
    head_b_biases: list[Tensor]

    @classmethod
    def init(cls, cfg: GeneratorConfig, field_cfg: FieldConfig,
             rng: np.random.Generator) -> "GeneratorParams":
        tw, tb = [], []
        last = cfg.z_dim
        gain = math.sqrt(2.0 / (1.0 + ad.LEAKY_SLOPE ** 2))
        for _ in range(cfg.trunk_layers):
            tw.append(Tensor(rng.normal(0.0, gain / math.sqrt(last),
                                        size=(cfg.trunk_width, last)), requires_grad=True))
            tb.append(Tensor(np.zeros(cfg.trunk_width), requires_grad=True))
            last = cfg.trunk_width
        k = field_cfg.fmm_rank
        head_std = cfg.head_scale / (math.sqrt(k) * math.sqrt(cfg.trunk_width))
        haw, hab, hbw, hbb = [], [], [], []
        for n_in, n_out in field_cfg.layer_shapes:
            haw.append(Tensor(rng.normal(0.0, head_std, size=(n_out * k, cfg.trunk_width)),
                              requires_grad=True))
            a_bias = np.zeros((n_out, k))
            a_bias[:, 0] = 1.0  # rank-1 all-ones product with the B bias below
            hab.append(Tensor(a_bias.reshape(-1), requires_grad=True))
            hbw.append(Tensor(rng.normal(0.0, head_std, size=(k * n_in, cfg.trunk_width)),
                              requires_grad=True))
            b_bias = np.zeros((k, n_in))
            b_bias[0, :] = 1.0
            hbb.append(Tensor(b_bias.reshape(-1), requires_grad=True))
        return cls(cfg, field_cfg, tw, tb, haw, hab, hbw, hbb)

    def trainables(self) -> list[Tensor]:
        return [*self.trunk_weights, *self.trunk_biases,
                *self.head_a_weights, *self.head_a_biases,
                *self.head_b_weights, *self.head_b_biases]


def sample_latent(rng: np.random.Generator, z_dim: int = 64,
                  batch: int | None = None) -> np.ndarray:
    """Standard normal latent draw, (z_dim,) or (batch, z_dim)."""
    shape = (z_dim,) if batch is None else (batch, z_dim)
    return rng.standard_normal(shape)


def interpolate_latents(z0: np.ndarray, z1: np.ndarray, steps: int) -> list[np.ndarray]:
    """Linear path from z0 to z1 inclusive; endpoints are the inputs verbatim."""
    if steps < 2:
        raise ContractError(f"interpolation needs steps >= 2, got {steps}")
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if z0.shape != z1.shape:
        raise ShapeError(f"latent shapes differ: {z0.shape} vs {z1.shape}")
    out = [(1.0 - t) * z0 + t * z1 for t in np.linspace(0.0, 1.0, steps)]
    out[0] = z0.copy()
    out[-1] = z1.copy()
    return out


def generate_modulations(z: np.ndarray, gparams: GeneratorParams,
                         cfg: FieldConfig | None = None) -> ModulationSet:
    """Run the trunk and heads; pure in (z, gparams).

    z of shape (z_dim,) yields 2-D factors; (B, z_dim) yields stacked 3-D
    factors evaluating B generated fields at once.
    """
    cfg = cfg or gparams.field_cfg
    if cfg.layer_shapes != gparams.field_cfg.layer_shapes:
        raise ContractError("generator heads were built for a different field layout")
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    if z.shape[-1] != gparams.cfg.z_dim:
        raise ContractError(f"latent dim {z.shape[-1]} != configured {gparams.cfg.z_dim}")
    h = Tensor(z.reshape(1, -1) if single else z)
    for w, b in zip(gparams.trunk_weights, gparams.trunk_biases):
        h = ad.leaky_relu(ad.add(ad.tensor_matmul(h, ad.transpose(w)), b))
    batch = h.shape[0]
    k = cfg.fmm_rank
    a_mats, b_mats = [], []
    for l, (n_in, n_out) in enumerate(cfg.layer_shapes):
        a_flat = ad.add(ad.tensor_matmul(h, ad.transpose(gparams.head_a_weights[l])),
                        gparams.head_a_biases[l])
        b_flat = ad.add(ad.tensor_matmul(h, ad.transpose(gparams.head_b_weights[l])),
                        gparams.head_b_biases[l])
        if single:
            a_mats.append(ad.reshape(a_flat, (n_out, k)))
            b_mats.append(ad.reshape(b_flat, (k, n_in)))
        else:
            a_mats.append(ad.reshape(a_flat, (batch, n_out, k)))
            b_mats.append(ad.reshape(b_flat, (batch, k, n_in)))
    return ModulationSet(a_mats, b_mats)
