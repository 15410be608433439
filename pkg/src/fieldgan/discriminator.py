"""2-D convolutional critic mapping images to realness logits."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError

CHANNELS = (16, 32, 64)
KERNEL = 3
STRIDE = 2
PAD = 1


@dataclass
class DiscriminatorParams:
    """Three stride-2 conv blocks (3->16->32->64) plus a linear logit head."""

    input_size: int
    kernels: list[Tensor]
    conv_biases: list[Tensor]
    head_weight: Tensor
    head_bias: Tensor

    @classmethod
    def init(cls, input_size: int, rng: np.random.Generator) -> "DiscriminatorParams":
        if input_size not in (16, 32):
            raise ContractError(f"discriminator input size must be 16 or 32, got {input_size}")
        kernels, biases = [], []
        c_in = 3
        s = input_size
        for c_out in CHANNELS:
            fan_in = c_in * KERNEL * KERNEL
            kernels.append(Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in),
                                             size=(c_out, c_in, KERNEL, KERNEL)),
                                  requires_grad=True))
            biases.append(Tensor(np.zeros(c_out), requires_grad=True))
            c_in = c_out
            s = (s + 2 * PAD - KERNEL) // STRIDE + 1
        feat = CHANNELS[-1] * s * s
        head_w = Tensor(rng.normal(0.0, 1.0 / math.sqrt(feat), size=(1, feat)),
                        requires_grad=True)
        return cls(input_size, kernels, biases, head_w,
                   Tensor(np.zeros(1), requires_grad=True))

    def trainables(self) -> list[Tensor]:
        return [*self.kernels, *self.conv_biases, self.head_weight, self.head_bias]


def discriminate(images, dparams: DiscriminatorParams) -> Tensor:
    """Raw logits, one per image of a (B, 3, S, S) batch in [0, 1]."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected (B, 3, S, S) images, got {x.shape}")
    if x.shape[2] != dparams.input_size or x.shape[3] != dparams.input_size:
        raise ShapeError(
            f"images are {x.shape[2]}x{x.shape[3]}, critic wants "
            f"{dparams.input_size}x{dparams.input_size}")
    b = x.shape[0]
    for kern, bias in zip(dparams.kernels, dparams.conv_biases):
        x = ad.conv2d_forward(x, kern, stride=STRIDE, pad=PAD)
        x = ad.leaky_relu(ad.add(x, ad.reshape(bias, (1, -1, 1, 1))))
    x = ad.reshape(x, (b, -1))
    # row-wise dot with the head weight; summing per row keeps each logit
    # bit-independent of where its image sits in the batch
    logits = ad.add(ad.tensor_reduce(ad.mul(x, dparams.head_weight), "sum", axis=1),
                    dparams.head_bias)
    return logits
