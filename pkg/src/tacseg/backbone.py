"""Toy convolutional encoder with per-stage channel adapters.

Stage ``i`` is conv3x3(pad 1) -> relu -> 2x2 mean pool, so a ``H x W`` input
yields maps at ``H/2, H/4, ...``. Each stage output is pushed through a 1x1
convolution to the shared embedding width ``E`` before it leaves the module.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError
from .rng import stream

Params = Dict[str, np.ndarray]


@dataclass(frozen=True)
class BackboneConfig:
    depth: int = 5
    stage_channels: Tuple[int, ...] = (8, 16, 32, 64, 128)
    embed_dim: int = 32
    input_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if len(self.stage_channels) != self.depth:
            raise ConfigError(f"stage_channels has {len(self.stage_channels)} entries for depth {self.depth}")
        if self.embed_dim < 1 or self.input_channels < 1 or min(self.stage_channels) < 1:
            raise ConfigError("channel counts and embed_dim must be positive")

    @property
    def reduction(self) -> int:
        return 2 ** self.depth

    def check_input(self, shape) -> None:
        c, h, w = shape
        if c != self.input_channels:
            raise DimensionError(f"backbone expects {self.input_channels} input channels, got {c}")
        if h % self.reduction or w % self.reduction:
            raise ConfigError(
                f"image {h}x{w} not divisible by 2^depth = {self.reduction} (depth {self.depth}); "
                f"height and width must be multiples of {self.reduction}")


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_backbone(cfg: BackboneConfig, seed: int) -> Params:
    params: Params = {}
    cin = cfg.input_channels
    for i, cout in enumerate(cfg.stage_channels):
        name = f"backbone.stage{i}"
        params[f"{name}.w"] = kaiming_uniform(stream(seed, "init", f"{name}.w"), (cout, cin, 3, 3), cin * 9)
        params[f"{name}.b"] = np.zeros(cout)
        name = f"backbone.adapt{i}"
        params[f"{name}.w"] = kaiming_uniform(stream(seed, "init", f"{name}.w"), (cfg.embed_dim, cout, 1, 1), cout)
        params[f"{name}.b"] = np.zeros(cfg.embed_dim)
        cin = cout
    return params


def identity_adapter(channels: int) -> np.ndarray:
    """1x1 kernel that copies ``channels`` input channels straight through."""
    return np.eye(channels).reshape(channels, channels, 1, 1)


def adapt_channels(g: ad.Graph, feat: ad.Node, name: str, params: Params) -> ad.Node:
    return ad.conv2d(feat, g.param(f"{name}.w", params[f"{name}.w"]), stride=1, pad=0,
                     bias=g.param(f"{name}.b", params[f"{name}.b"]))


def backbone_forward(g: ad.Graph, image: ad.Node, cfg: BackboneConfig, params: Params) -> List[ad.Node]:
    """One ``[E, H/2^(i+1), W/2^(i+1)]`` map per stage, shallowest first."""
    cfg.check_input(image.shape)
    x = image
    maps = []
    for i in range(cfg.depth):
        name = f"backbone.stage{i}"
        x = ad.conv2d(x, g.param(f"{name}.w", params[f"{name}.w"]), stride=1, pad=1,
                      bias=g.param(f"{name}.b", params[f"{name}.b"]))
        x = ad.mean_pool2x2(ad.relu(x))
        maps.append(adapt_channels(g, x, f"backbone.adapt{i}", params))
    return maps


def flatten_map(feat: ad.Node) -> ad.Node:
    """``[E, H, W]`` -> ``[H*W, E]``; row ``y*W + x`` holds pixel ``(y, x)``."""
    if len(feat.shape) != 3:
        raise DimensionError(f"flatten_map: expected [E, H, W], got {feat.shape}")
    e, h, w = feat.shape
    return ad.transpose2d(ad.reshape(feat, (e, h * w)))


def unflatten_map(x: ad.Node, h: int, w: int) -> ad.Node:
    if len(x.shape) != 2 or x.shape[0] != h * w:
        raise DimensionError(f"unflatten_map: {x.shape} has no {h}x{w} pixel rows")
    return ad.reshape(ad.transpose2d(x), (x.shape[1], h, w))
