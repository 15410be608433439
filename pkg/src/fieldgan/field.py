"""The view-direction-free radiance field built from factorized-modulation layers.

Each layer computes y = (W ⊙ (A·B))·x + b where W, b are shared trainable
parameters and the low-rank pair (A, B) is produced per sample by the
hypernetwork. The field maps a 3-D point to (color, density).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError


@dataclass
class FieldConfig:
    hidden_layers: int = 4
    hidden_width: int = 128
    pe_frequencies: int = 6
    include_raw_input: bool = True
    fmm_rank: int = 10

    def __post_init__(self):
        if self.hidden_layers < 1:
            raise ContractError(f"hidden_layers must be >= 1, got {self.hidden_layers}")
        if self.hidden_width < 8:
            raise ContractError(f"hidden_width must be >= 8, got {self.hidden_width}")
        if self.pe_frequencies < 0:
            raise ContractError(f"pe_frequencies must be >= 0, got {self.pe_frequencies}")
        if self.fmm_rank < 1:
            raise ContractError(f"fmm_rank must be >= 1, got {self.fmm_rank}")

    @property
    def input_width(self) -> int:
        return (3 if self.include_raw_input else 0) + 6 * self.pe_frequencies

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        """(n_in, n_out) per modulated layer: hidden stack, density head, color head."""
        shapes = [(self.input_width, self.hidden_width)]
        shapes += [(self.hidden_width, self.hidden_width)] * (self.hidden_layers - 1)
        shapes.append((self.hidden_width, 1))  # density head
        shapes.append((self.hidden_width, 3))  # color head
        return shapes

    @property
    def n_layers(self) -> int:
        return self.hidden_layers + 2


# Density head bias starts negative so fresh fields render nearly transparent;
# the GAN then grows density instead of carving a fog cube away.
DENSITY_BIAS_INIT = -4.0


@dataclass
class FieldParams:
    """Shared weights and biases, one pair per modulated layer."""

    weights: list[Tensor]
    biases: list[Tensor]
    cfg: FieldConfig

    @classmethod
    def init(cls, cfg: FieldConfig, rng: np.random.Generator) -> "FieldParams":
        weights, biases = [], []
        for n_in, n_out in cfg.layer_shapes:
            w = rng.normal(0.0, math.sqrt(2.0 / n_in), size=(n_out, n_in))
            weights.append(Tensor(w, requires_grad=True))
            biases.append(Tensor(np.zeros(n_out), requires_grad=True))
        biases[cfg.hidden_layers].data[:] = DENSITY_BIAS_INIT
        return cls(weights, biases, cfg)

    def trainables(self) -> list[Tensor]:
        return [*self.weights, *self.biases]

    @property
    def n_layers(self) -> int:
        return len(self.weights)


@dataclass
class ModulationSet:
    """Per-sample low-rank modulation pair (A_l, B_l) for every field layer."""

    a_mats: list[Tensor]
    b_mats: list[Tensor]

    def __post_init__(self):
        if len(self.a_mats) != len(self.b_mats):
            raise ContractError(
                f"{len(self.a_mats)} A matrices vs {len(self.b_mats)} B matrices")

    @property
    def n_layers(self) -> int:
        return len(self.a_mats)

    @classmethod
    def identity(cls, cfg: FieldConfig) -> "ModulationSet":
        """Rank-1 all-ones modulation: every layer degenerates to W·x + b."""
        a_mats, b_mats = [], []
        for n_in, n_out in cfg.layer_shapes:
            a = np.zeros((n_out, cfg.fmm_rank))
            b = np.zeros((cfg.fmm_rank, n_in))
            a[:, 0] = 1.0
            b[0, :] = 1.0
            a_mats.append(Tensor(a))
            b_mats.append(Tensor(b))
        return cls(a_mats, b_mats)


@dataclass
class RadianceBatch:
    """Evaluated field outputs: sigmoid colors and softplus densities."""

    color: Tensor  # (M, 3)
    density: Tensor  # (M,)


def positional_encode(x: Tensor, frequencies: int, include_raw: bool = True) -> Tensor:
    """Map points to [x?, sin(2^j πx), cos(2^j πx) for j < frequencies].

    Works along the last axis, so (3,), (M, 3) and (B, M, 3) inputs all encode.
    Constant inputs take a single vectorized pass with no tape nodes.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if frequencies == 0 and not include_raw:
        raise ContractError("encoding with no frequencies and no raw input is empty")
    if not (x.requires_grad and ad.grad_enabled()):
        return Tensor(_encode_np(x.data, frequencies, include_raw))
    parts = [x] if include_raw else []
    if frequencies > 0:
        s = ad.sin(x * math.pi)
        c = ad.cos(x * math.pi)
        parts += [s, c]
        for _ in range(frequencies - 1):
            # angle doubling: sin 2a = 2 sin a cos a, cos 2a = 1 - 2 sin^2 a
            s, c = ad.mul(s * 2.0, c), 1.0 - ad.mul(s * 2.0, s)
            parts += [s, c]
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=-1)


def _encode_np(x: np.ndarray, frequencies: int, include_raw: bool) -> np.ndarray:
    if frequencies == 0:
        return x.copy()
    out = np.empty(x.shape[:-1] + ((3 if include_raw else 0) + 6 * frequencies,))
    col = 0
    if include_raw:
        out[..., :3] = x
        col = 3
    s = np.sin(math.pi * x)
    c = np.cos(math.pi * x)
    for j in range(frequencies):
        if j:
            s, c = (s * 2.0) * c, 1.0 - (s * 2.0) * s
        out[..., col:col + 3] = s
        out[..., col + 3:col + 6] = c
        col += 6
    return out


def fmm_apply(x: Tensor, w: Tensor, b: Tensor, a: Tensor, bmod: Tensor) -> Tensor:
    """One modulated layer: (W ⊙ (A·B))·x + b.

    x rows are points; a leading batch axis on x plus 3-D A/B evaluates one
    modulation set per batch item in a single stacked product.
    """
    x, w, b, a, bmod = (t if isinstance(t, Tensor) else Tensor(t) for t in (x, w, b, a, bmod))
    n_out, n_in = w.shape
    if a.shape[-2] != n_out or bmod.shape[-1] != n_in or a.shape[-1] != bmod.shape[-2]:
        raise ShapeError(
            f"modulation {a.shape}x{bmod.shape} incompatible with weight {w.shape}")
    squeeze = x.ndim == 1
    if squeeze:
        x = ad.reshape(x, (1, -1))
    if x.shape[-1] != n_in:
        raise ShapeError(f"input width {x.shape[-1]} vs weight {w.shape}")
    modulated = ad.mul(w, ad.tensor_matmul(a, bmod))  # (..., n_out, n_in)
    if modulated.ndim == 3:
        if x.ndim != 3 or x.shape[0] != modulated.shape[0]:
            raise ShapeError(
                f"batched modulation {modulated.shape} needs matching B,M,{n_in} input, "
                f"got {x.shape}")
        y = ad.add(ad.tensor_matmul(x, ad.transpose(modulated, (0, 2, 1))), b)
    else:
        y = ad.add(ad.tensor_matmul(x, ad.transpose(modulated)), b)
    return ad.reshape(y, (-1,)) if squeeze else y


def field_eval(points, params: FieldParams, mods: ModulationSet,
               cfg: FieldConfig) -> RadianceBatch:
    """Evaluate the field at a batch of 3-D points (pure; order-independent).

    points (M, 3) with a plain modulation set gives (M,) densities; points
    (B, M, 3) with a batched set gives (B, M), one generated field per item.
    """
    if mods.n_layers != cfg.n_layers:
        raise ContractError(
            f"modulation set has {mods.n_layers} layers, field needs {cfg.n_layers}")
    if params.n_layers != cfg.n_layers:
        raise ContractError(
            f"params have {params.n_layers} layers, field needs {cfg.n_layers}")
    h = positional_encode(points, cfg.pe_frequencies, cfg.include_raw_input)
    for l in range(cfg.hidden_layers):
        h = ad.relu(fmm_apply(h, params.weights[l], params.biases[l],
                              mods.a_mats[l], mods.b_mats[l]))
    ld, lc = cfg.hidden_layers, cfg.hidden_layers + 1
    density = ad.softplus(fmm_apply(h, params.weights[ld], params.biases[ld],
                                    mods.a_mats[ld], mods.b_mats[ld]))
    color = ad.sigmoid(fmm_apply(h, params.weights[lc], params.biases[lc],
                                 mods.a_mats[lc], mods.b_mats[lc]))
    lead = density.shape[:-1]
    return RadianceBatch(color=color, density=ad.reshape(density, lead))
