"""Convolutional encoder and decoder built from residual stages.

Encoder::

    Conv_n(kw) -> [EncRes_n] x r -> MaxPool -> [EncRes_2n] x r -> MaxPool
               -> [EncRes_4n] x r -> Conv_out(1x1)

Decoder::

    [DecRes_4n] x r -> Upsample -> [DecRes_2n] x r -> Upsample
                    -> [DecRes_n] x r -> ReLU -> Conv_3(1x1)

``EncRes`` is ``3 x (ReLU -> Conv 3x3) -> ReLU -> Conv 1x1`` plus identity and
``DecRes`` is ``ReLU -> Conv 1x1 -> 3 x (ReLU -> Conv 3x3)`` plus identity.
When a block changes the channel count its skip path is a 1x1 projection.
Every 1x1 convolution has padding 0, which preserves spatial extents.

Conv weights are uniform in ``+-bound`` with ``bound = 1/sqrt(fan_in)`` by
default (``weight_init="fan_in_uniform"``) or ``sqrt(6/fan_in)`` (``"he_uniform"``).
Biases start at zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor

__all__ = [
    "ArchConfig",
    "INIT_BOUNDS",
    "Conv2d",
    "EncResBlock",
    "DecResBlock",
    "Encoder",
    "Decoder",
    "enc_res_block",
    "dec_res_block",
    "build_encoder",
    "build_decoder",
]


INIT_BOUNDS = {
    "fan_in_uniform": lambda fan_in: 1.0 / math.sqrt(fan_in),
    "he_uniform": lambda fan_in: math.sqrt(6.0 / fan_in),
}


@dataclass
class ArchConfig:
    base_channels: int = 16
    input_extent: int = 32
    first_kernel: int = 3
    latent_channels: int = 64
    decoder_in_channels: int = 16
    res_blocks_per_stage: int = 2
    image_channels: int = 3
    weight_init: str = "fan_in_uniform"

    def __post_init__(self):
        if self.weight_init not in INIT_BOUNDS:
            raise ValueError(f"unknown weight init {self.weight_init!r}")
        if self.input_extent % 4:
            raise ValueError(f"input extent must be divisible by 4, got {self.input_extent}")
        if self.first_kernel not in (3, 7):
            raise ValueError(f"first kernel must be 3 or 7, got {self.first_kernel}")
        for name in ("base_channels", "latent_channels", "decoder_in_channels", "res_blocks_per_stage"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def latent_extent(self) -> int:
        return self.input_extent // 4


class Module:
    """Minimal parameter container; parameters are listed in creation order."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((full, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(full + "."))
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{full}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, x):
        return self.forward(x)


class Conv2d(Module):
    """Convolution with uniform fan-in scaled weights and zero bias."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0,
                 gen: np.random.Generator | None = None, init: str = "he_uniform"):
        bound = INIT_BOUNDS[init](in_ch * kernel * kernel)
        w = gen.uniform(-bound, bound, size=(out_ch, in_ch, kernel, kernel)) if gen is not None \
            else np.zeros((out_ch, in_ch, kernel, kernel))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros((out_ch, 1, 1)), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.add(T.conv2d(x, self.weight, self.stride, self.padding), self.bias)


def _conv3(i, o, gen):
    return Conv2d(i, o, 3, 1, 1, gen)


def _conv1(i, o, gen):
    return Conv2d(i, o, 1, 1, 0, gen)


class EncResBlock(Module):
    def __init__(self, in_ch: int, n: int, gen=None):
        self.convs = [_conv3(in_ch, n, gen), _conv3(n, n, gen), _conv3(n, n, gen)]
        self.out = _conv1(n, n, gen)
        self.skip = _conv1(in_ch, n, gen) if in_ch != n else None

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for conv in self.convs:
            h = conv(T.relu(h))
        h = self.out(T.relu(h))
        return T.add(h, self.skip(x) if self.skip is not None else x)


class DecResBlock(Module):
    def __init__(self, in_ch: int, n: int, gen=None):
        self.inp = _conv1(in_ch, n, gen)
        self.convs = [_conv3(n, n, gen), _conv3(n, n, gen), _conv3(n, n, gen)]
        self.skip = _conv1(in_ch, n, gen) if in_ch != n else None

    def forward(self, x: Tensor) -> Tensor:
        h = self.inp(T.relu(x))
        for conv in self.convs:
            h = conv(T.relu(h))
        return T.add(h, self.skip(x) if self.skip is not None else x)


def enc_res_block(x: Tensor, block: EncResBlock) -> Tensor:
    return block(x)


def dec_res_block(x: Tensor, block: DecResBlock) -> Tensor:
    return block(x)


class Encoder(Module):
    def __init__(self, cfg: ArchConfig, gen=None):
        n, r = cfg.base_channels, cfg.res_blocks_per_stage
        kw = cfg.first_kernel
        self.cfg = cfg
        self.stem = Conv2d(cfg.image_channels, n, kw, 1, kw // 2, gen)
        self.stages = []
        ch = n
        for mult in (1, 2, 4):
            blocks = []
            for _ in range(r):
                blocks.append(EncResBlock(ch, mult * n, gen))
                ch = mult * n
            self.stages.append(_Stage(blocks))
        self.head = _conv1(ch, cfg.latent_channels, gen)

    def forward(self, x: Tensor) -> Tensor:
        h = self.stem(x)
        for i, stage in enumerate(self.stages):
            h = stage(h)
            if i < 2:
                h = T.maxpool2(h)
        return self.head(h)


class Decoder(Module):
    def __init__(self, cfg: ArchConfig, gen=None):
        n, r = cfg.base_channels, cfg.res_blocks_per_stage
        self.cfg = cfg
        self.stages = []
        ch = cfg.decoder_in_channels
        for mult in (4, 2, 1):
            blocks = []
            for _ in range(r):
                blocks.append(DecResBlock(ch, mult * n, gen))
                ch = mult * n
            self.stages.append(_Stage(blocks))
        self.head = _conv1(ch, cfg.image_channels, gen)

    def forward(self, z: Tensor) -> Tensor:
        h = z
        for i, stage in enumerate(self.stages):
            h = stage(h)
            if i < 2:
                h = T.upsample_nearest2(h)
        return self.head(T.relu(h))


class _Stage(Module):
    def __init__(self, blocks):
        self.blocks = blocks

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x


def _gen(rng):
    if rng is None:
        return None
    return rng.stream("init") if isinstance(rng, Rng) else rng


def _rescale(module: Module, init: str) -> Module:
    # blocks draw He-uniform weights; a uniform draw rescales exactly to another bound
    if init != "he_uniform":
        for name, p in module.named_parameters():
            if name.endswith("weight"):
                fan_in = int(np.prod(p.data.shape[1:]))
                p.data = p.data * (INIT_BOUNDS[init](fan_in) / INIT_BOUNDS["he_uniform"](fan_in))
    return module


def build_encoder(cfg: ArchConfig, rng=None) -> Encoder:
    """Encoder mapping ``B x 3 x w x w`` to ``B x latent x w/4 x w/4``.

    ``rng=None`` gives all-zero weights.
    """
    return _rescale(Encoder(cfg, _gen(rng)), cfg.weight_init)


def build_decoder(cfg: ArchConfig, rng=None) -> Decoder:
    """Decoder mapping ``B x D x w/4 x w/4`` to ``B x 3 x w x w``."""
    return _rescale(Decoder(cfg, _gen(rng)), cfg.weight_init)

