"""Encoder, guidance head, multi-scale UGHR refinement path and decoder."""

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import Conv2d, Module
from .tensor_core import Tensor, add, bilinear_resize, reshape, sigmoid
from .ughr import ACTIVATIONS, BlockConfig, UGHRBlock
from .uncertainty import resize_to_scale

logger = logging.getLogger(__name__)

PRETRAINED_PREFIXES = ("encoder.", "guidance.")


@dataclass
class NetworkSpec:
    scales: int = 3
    channels: Tuple[int, ...] = (16, 32, 64)
    in_channels: int = 1
    refine_channels: int = 16
    activation: str = "silu"
    embed_scale: int = 1
    block: BlockConfig = field(default_factory=lambda: BlockConfig(channels=16))

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.scales < 2:
            raise ConfigError(f"scales must be >= 2, got {self.scales}")
        if len(self.channels) != self.scales:
            raise ConfigError(f"{self.scales} scales need {self.scales} channel counts, got {list(self.channels)}")
        if any(c < 1 for c in self.channels):
            raise ConfigError(f"channel counts must be positive, got {list(self.channels)}")
        if any(b < a for a, b in zip(self.channels, self.channels[1:])):
            raise ConfigError(f"channels must be non-decreasing with depth, got {list(self.channels)}")
        if self.in_channels not in (1, 3):
            raise ConfigError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if not 0 <= self.embed_scale < self.scales:
            raise ConfigError(f"embed_scale must index a scale in [0, {self.scales}), got {self.embed_scale}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {sorted(ACTIVATIONS)}, got {self.activation!r}")
        self.block = replace(self.block, channels=self.refine_channels, activation=self.activation)

    @property
    def stride(self) -> int:
        return 2 ** (self.scales - 1)


@dataclass
class ForwardResult:
    y_hat: Tensor
    m_hat: Tensor
    m_hat_up: Tensor
    refined: List[Tensor]
    features: List[Tensor]
    captures: List[dict] = field(default_factory=list)


class EncoderStage(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, downsample: bool, act):
        self.convs = [Conv2d(c_in, c_out, 3, rng, stride=2 if downsample else 1),
                      Conv2d(c_out, c_out, 3, rng)]
        self.act = act

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = self.act(conv(x))
        return x


class Encoder(Module):
    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        act = ACTIVATIONS[spec.activation]
        widths = (spec.in_channels,) + spec.channels
        self.stages = [EncoderStage(widths[i], widths[i + 1], rng, downsample=i > 0, act=act)
                       for i in range(spec.scales)]

    def __call__(self, image: Tensor) -> List[Tensor]:
        features = []
        x = image
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return features


class Decoder(Module):
    """Sum of upsampled refined features, 3x3 conv, then a zero-initialised 1x1 logit conv."""

    def __init__(self, channels: int, rng: np.random.Generator, act):
        self.fuse = Conv2d(channels, channels, 3, rng)
        self.logits = Conv2d(channels, 1, 1, rng, zero_init=True)
        self.act = act

    def __call__(self, refined: Sequence[Tensor], size: Tuple[int, int]) -> Tensor:
        merged = None
        for e in refined:
            up = e if e.shape[1:] == tuple(size) else bilinear_resize(e, size)
            merged = up if merged is None else add(merged, up)
        return reshape(sigmoid(self.logits(self.act(self.fuse(merged)))), size)


class SegmentationNet(Module):
    def __init__(self, spec: NetworkSpec, seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        act = ACTIVATIONS[spec.activation]
        self.encoder = Encoder(spec, rng)
        self.guidance = Conv2d(spec.channels[-1], 1, 1, rng)
        self.align = [Conv2d(c, spec.refine_channels, 1, rng) for c in spec.channels]
        self.blocks = [UGHRBlock(spec.block, rng) for _ in range(spec.scales)]
        self.decoder = Decoder(spec.refine_channels, rng, act)

    def check_input(self, image: Tensor) -> Tuple[int, int]:
        if image.ndim != 3 or image.shape[0] != self.spec.in_channels:
            raise ShapeError(f"expected a {self.spec.in_channels} x H x W image, got {image.shape}")
        height, width = image.shape[1:]
        stride = self.spec.stride
        if height % stride or width % stride:
            pad_h, pad_w = (-height) % stride, (-width) % stride
            raise ConfigError(
                f"input {height}x{width} is not divisible by {stride}; "
                f"pad by {pad_h} rows and {pad_w} columns to {height + pad_h}x{width + pad_w}")
        return height, width

    def encode(self, image: Union[Tensor, np.ndarray]) -> Tuple[List[Tensor], Tensor, Tensor]:
        """Encoder features, coarse map M_hat and M_hat upsampled to the input size."""
        image = image if isinstance(image, Tensor) else Tensor(image)
        size = self.check_input(image)
        features = self.encoder(image)
        deepest = features[-1]
        m_hat = reshape(sigmoid(self.guidance(deepest)), deepest.shape[1:])
        return features, m_hat, bilinear_resize(m_hat, size)

    def pretrain_forward(self, image: Union[Tensor, np.ndarray]) -> Tuple[Tensor, Tensor]:
        """(embedding features F~, Y_hat^cp) for instance contrastive pretraining."""
        features, _, m_hat_up = self.encode(image)
        return features[self.spec.embed_scale], m_hat_up

    def __call__(self, image: Union[Tensor, np.ndarray], capture: bool = False) -> ForwardResult:
        image = image if isinstance(image, Tensor) else Tensor(image)
        features, m_hat, m_hat_up = self.encode(image)
        size = image.shape[1:]

        refined: List[Optional[Tensor]] = [None] * self.spec.scales
        captures: List[dict] = [{} for _ in range(self.spec.scales)] if capture else []
        for i in reversed(range(self.spec.scales)):
            d = self.align[i](features[i])
            if i + 1 < self.spec.scales:
                d = add(d, bilinear_resize(refined[i + 1], d.shape[1:]))
            m_i = resize_to_scale(m_hat, d.shape[1:])
            refined[i] = self.blocks[i](d, m_i, captures[i] if capture else None)

        y_hat = self.decoder(refined, size)
        return ForwardResult(y_hat=y_hat, m_hat=m_hat, m_hat_up=m_hat_up, refined=refined,
                             features=features, captures=captures)

    def pretrained_state(self) -> dict:
        return {name: value for name, value in self.state_dict().items()
                if name.startswith(PRETRAINED_PREFIXES)}

    def load_pretrained(self, state: dict) -> List[str]:
        """Copy encoder and guidance-head weights; everything else keeps its fresh init."""
        subset = {name: value for name, value in state.items() if name.startswith(PRETRAINED_PREFIXES)}
        loaded = self.load_state_dict(subset, strict=False)
        logger.info("loaded %d pretrained tensors", len(loaded))
        return loaded
