"""Input preprocessors: map a stacked ``[B, 5, H, W]`` tile batch to ``[B, C', H, W]`` features.

Five variants share one interface so the perceiver behind them stays fixed:

* ``identity``      raw channels, no parameters
* ``single_conv2d`` one 3x3 convolution + ReLU
* ``unet2d``        2D UNet with 2 or 3 stages
* ``dual_local``    2-stage 2D UNet whose encoder layers run 1x1 and 3x3 paths in parallel
* ``unet3d``        volumetric UNet treating the modality axis as depth
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Conv, ConvTranspose, Module
from .tensor import Tensor, add, concat, relu, reshape
from . import kernels

KINDS = ("identity", "single_conv2d", "unet2d", "dual_local", "unet3d")


@dataclass(frozen=True)
class PreprocessorKind:
    name: str = "unet3d"
    filters: int = 32          # single_conv2d output filters
    base_filters: int = 16     # F of the UNet variants
    stages: int = 2            # unet2d depth
    out_features: int = 64     # C' of the UNet variants

    def __post_init__(self):
        if self.name not in KINDS:
            raise ValueError(f"unknown preprocessor {self.name!r}; choose from {KINDS}")
        if self.name == "unet2d" and self.stages not in (2, 3):
            raise ValueError("unet2d supports 2 or 3 stages")

    @property
    def label(self) -> str:
        if self.name == "unet2d":
            return f"unet2d-{self.stages}stage"
        return self.name

    @property
    def spatial_multiple(self) -> int:
        """H and W must be divisible by this."""
        if self.name in ("unet2d",):
            return 2 ** (self.stages - 1)
        if self.name == "dual_local":
            return 2
        if self.name == "unet3d":
            return 4
        return 1


class Identity(Module):
    out_channels = 5

    def forward(self, x: Tensor) -> Tensor:
        return x


class SingleConv2D(Module):
    def __init__(self, filters: int, rng: np.random.Generator, in_channels: int = 5):
        self.conv = Conv(in_channels, filters, (3, 3), rng)
        self.out_channels = filters

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.conv(x))


class ConvBlock(Module):
    """Two same-padded 3x3 (or 3x3x3) convolutions with ReLU."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, nd: int = 2):
        k = (3,) * nd
        self.conv1 = Conv(c_in, c_out, k, rng)
        self.conv2 = Conv(c_out, c_out, k, rng)

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.conv2(relu(self.conv1(x))))


class DualLocalLayer(Module):
    """Parallel 1x1 and 3x3 convolutions with equal filters, summed then ReLU."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.point = Conv(c_in, c_out, (1, 1), rng)
        self.local = Conv(c_in, c_out, (3, 3), rng)

    def forward(self, x: Tensor) -> Tensor:
        return relu(add(self.point(x), self.local(x)))


class DualLocalBlock(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.layer1 = DualLocalLayer(c_in, c_out, rng)
        self.layer2 = DualLocalLayer(c_out, c_out, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.layer2(self.layer1(x))


class UNet2D(Module):
    """Conv/pool encoder with doubling filters, transpose-conv decoder with skips, 1x1 head."""

    def __init__(self, stages: int, base_filters: int, out_features: int, rng: np.random.Generator,
                 in_channels: int = 5, dual_local: bool = False):
        block = DualLocalBlock if dual_local else ConvBlock
        widths = [base_filters * 2 ** i for i in range(stages)]
        self.stages = stages
        self.encoders = []
        c = in_channels
        for w in widths:
            self.encoders.append(block(c, w, rng))
            c = w
        self.ups, self.decoders = [], []
        for lo, hi in zip(reversed(widths[:-1]), reversed(widths[1:])):
            self.ups.append(ConvTranspose(hi, lo, (2, 2), rng, stride=2))
            self.decoders.append(Conv(2 * lo, lo, (3, 3), rng))
        self.head = Conv(widths[0], out_features, (1, 1), rng)
        self.out_channels = out_features

    def forward(self, x: Tensor) -> Tensor:
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x)
            if i < self.stages - 1:
                skips.append(x)
                x = kernels.maxpool2d(x, (2, 2))
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = relu(dec(concat([up(x), skip], axis=1)))
        return self.head(x)


class UNet3D(Module):
    """Volumetric UNet over ``[B, 1, D=5, H, W]``; depth (the modality axis) is never pooled.

    Encoder: three blocks of two 3x3x3 convolutions (F, 2F, 4F filters) with
    (1, 2, 2) max pools after the first two.  Decoder: two transpose
    convolutions doubling H and W, each followed by skip concatenation and a
    3x3x3 convolution.  Head: fold depth into channels, then a 1x1 2D conv.
    """

    def __init__(self, base_filters: int, out_features: int, rng: np.random.Generator, depth: int = 5):
        f = base_filters
        self.depth = depth
        self.enc1 = ConvBlock(1, f, rng, nd=3)
        self.enc2 = ConvBlock(f, 2 * f, rng, nd=3)
        self.enc3 = ConvBlock(2 * f, 4 * f, rng, nd=3)
        # kernel depth 3 with depth padding 1 and depth stride 1 keeps D unchanged
        self.up2 = ConvTranspose(4 * f, 2 * f, (3, 2, 2), rng, stride=(1, 2, 2), padding=(1, 0, 0))
        self.dec2 = Conv(4 * f, 2 * f, (3, 3, 3), rng)
        self.up1 = ConvTranspose(2 * f, f, (3, 2, 2), rng, stride=(1, 2, 2), padding=(1, 0, 0))
        self.dec1 = Conv(2 * f, f, (3, 3, 3), rng)
        self.head = Conv(f * depth, out_features, (1, 1), rng)
        self.out_channels = out_features

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        if c != self.depth:
            raise ValueError(f"expected {self.depth} modality planes, got {c}")
        v = reshape(x, (b, 1, c, h, w))
        s1 = self.enc1(v)
        s2 = self.enc2(kernels.maxpool3d(s1, (1, 2, 2)))
        bottom = self.enc3(kernels.maxpool3d(s2, (1, 2, 2)))
        y = relu(self.dec2(concat([self.up2(bottom), s2], axis=1)))
        y = relu(self.dec1(concat([self.up1(y), s1], axis=1)))
        f = y.shape[1]
        return self.head(reshape(y, (b, f * c, h, w)))


def build_preprocessor(kind: PreprocessorKind, rng: np.random.Generator, in_channels: int = 5) -> Module:
    if kind.name == "identity":
        return Identity()
    if kind.name == "single_conv2d":
        return SingleConv2D(kind.filters, rng, in_channels)
    if kind.name == "unet2d":
        return UNet2D(kind.stages, kind.base_filters, kind.out_features, rng, in_channels)
    if kind.name == "dual_local":
        return UNet2D(2, kind.base_filters, kind.out_features, rng, in_channels, dual_local=True)
    return UNet3D(kind.base_filters, kind.out_features, rng, depth=in_channels)


def check_tile(kind: PreprocessorKind, x: Tensor, in_channels: int = 5) -> None:
    if x.shape[-3] != in_channels:
        raise ValueError(f"tile has {x.shape[-3]} channels, expected {in_channels}")
    m = kind.spatial_multiple
    if x.shape[-2] % m or x.shape[-1] % m:
        raise ValueError(f"{kind.label}: tile extents {x.shape[-2:]} must be divisible by {m}")
