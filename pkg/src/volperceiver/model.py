"""Preprocessor + positional encoding + perceiver, wired into one segmentation model."""
from __future__ import annotations

import numpy as np

from .nn import Module
from .perceiver import Perceiver, PerceiverConfig, PositionalEncoding
from .preprocess import PreprocessorKind, build_preprocessor, check_tile
from .tensor import Tensor, concat, pad, permute, reshape, softmax


def flatten_pixels(features: Tensor) -> Tensor:
    """``[B, C, H, W]`` -> ``[B, H*W, C]`` in row-major pixel order."""
    b, c, h, w = features.shape
    return reshape(permute(features, (0, 2, 3, 1)), (b, h * w, c))


def with_positions(pixels: Tensor, positions: Tensor) -> Tensor:
    """Append the ``[M, P]`` position table to every item of a ``[B, M, C]`` batch."""
    b = pixels.shape[0]
    pos = reshape(positions, (1,) + positions.shape)
    if b > 1:
        pos = concat([pos] * b, axis=0)
    return concat([pixels, pos], axis=-1)


def pad_features(pixels: Tensor, width: int) -> Tensor:
    """Zero-pad ``[B, M, C]`` to ``[B, M, width]`` along the channel axis."""
    c = pixels.shape[-1]
    if c > width:
        raise ValueError(f"preprocessor emits {c} channels, more than the perceiver feature width {width}")
    if c == width:
        return pixels
    return pad(pixels, ((0, 0), (0, 0), (0, width - c)))


class SegmentationModel(Module):
    """Preprocessor -> zero-pad to ``feature_width`` -> append positions -> perceiver.

    The padding gives every preprocessor the same perceiver (same shapes and
    parameter count), so only the preprocessor differs between variants.
    """

    def __init__(self, kind: PreprocessorKind, perceiver: dict | None, tile_size: int,
                 seed: int = 0, in_channels: int = 5, feature_width: int = 64):
        rng = np.random.default_rng(seed)
        self.kind = kind
        self.tile_size = tile_size
        self.in_channels = in_channels
        self.feature_width = feature_width
        self.preprocessor = build_preprocessor(kind, rng, in_channels)
        if self.preprocessor.out_channels > feature_width:
            raise ValueError(f"{kind.label} emits {self.preprocessor.out_channels} channels; "
                             f"feature_width is {feature_width}")
        perceiver = dict(perceiver or {})
        probe = PerceiverConfig(input_channels=1, **perceiver)
        self.config = PerceiverConfig(input_channels=feature_width + probe.pos_channels, **perceiver)
        self.positions = PositionalEncoding(self.config, tile_size, tile_size, rng)
        self.perceiver = Perceiver(self.config, rng, query_feature_channels=feature_width)

    def features(self, tiles: Tensor) -> Tensor:
        """Padded preprocessed pixels with positions appended: ``[B, H*W, feature_width + P]``."""
        check_tile(self.kind, tiles, self.in_channels)
        if tiles.shape[-1] != self.tile_size or tiles.shape[-2] != self.tile_size:
            raise ValueError(f"model built for {self.tile_size}px tiles, got {tiles.shape[-2:]}")
        return self._features(tiles)[1]

    def _features(self, tiles: Tensor):
        pixels = pad_features(flatten_pixels(self.preprocessor(tiles)), self.feature_width)
        return pixels, with_positions(pixels, self.positions())

    def forward(self, tiles: Tensor) -> Tensor:
        """``[B, 5, T, T]`` tiles -> ``[B, T*T, K]`` logits."""
        if tiles.ndim == 3:
            tiles = reshape(tiles, (1,) + tiles.shape)
        check_tile(self.kind, tiles, self.in_channels)
        if tiles.shape[-2:] != (self.tile_size, self.tile_size):
            raise ValueError(f"model built for {self.tile_size}px tiles, got {tiles.shape[-2:]}")
        pixels, inputs = self._features(tiles)
        return self.perceiver(inputs, self.positions(), pixels)

    def predict_proba(self, tiles: Tensor) -> Tensor:
        return softmax(self.forward(tiles), axis=-1)

    def preprocessor_parameters(self) -> int:
        return self.preprocessor.num_parameters()

    def perceiver_parameters(self) -> int:
        return self.perceiver.num_parameters() + self.positions.num_parameters()
