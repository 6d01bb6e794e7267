"""Small ViT-style token encoder, one token state per backbone depth."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .backbone import flatten_map, kaiming_uniform
from .errors import ConfigError, DimensionError
from .rng import stream

Params = Dict[str, np.ndarray]


@dataclass(frozen=True)
class TokenConfig:
    patch_size: int = 8
    embed_dim: int = 32
    depth: int = 5
    heads: int = 4
    mlp_ratio: int = 2
    input_channels: int = 3

    def __post_init__(self):
        if self.patch_size < 1 or self.depth < 1 or self.heads < 1 or self.mlp_ratio < 1:
            raise ConfigError("patch_size, depth, heads and mlp_ratio must be positive")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    def grid(self, h: int, w: int) -> Tuple[int, int]:
        p = self.patch_size
        if h % p or w % p:
            raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
        return h // p, w // p

    def latent_dim(self, h: int, w: int) -> int:
        gh, gw = self.grid(h, w)
        return gh * gw


def init_tokens(cfg: TokenConfig, image_hw: Tuple[int, int], seed: int) -> Params:
    e, hid = cfg.embed_dim, cfg.mlp_ratio * cfg.embed_dim
    patch_in = cfg.input_channels * cfg.patch_size ** 2
    params: Params = {
        "tokens.patch.w": kaiming_uniform(stream(seed, "init", "tokens.patch.w"), (patch_in, e), patch_in),
        "tokens.patch.b": np.zeros(e),
        "tokens.pos": np.zeros((cfg.latent_dim(*image_hw), e)),
    }

    def linear(name, fan_in, fan_out, bias=True):
        bound = 1.0 / np.sqrt(fan_in)
        params[f"{name}.w"] = stream(seed, "init", f"{name}.w").uniform(-bound, bound, (fan_in, fan_out))
        if bias:
            params[f"{name}.b"] = np.zeros(fan_out)

    for i in range(cfg.depth):
        name = f"tokens.block{i}"
        for ln in ("ln1", "ln2"):
            params[f"{name}.{ln}.g"] = np.ones(e)
            params[f"{name}.{ln}.b"] = np.zeros(e)
        # no q/k/v bias: a key bias only shifts each logit row by a constant
        for proj in ("q", "k", "v"):
            linear(f"{name}.attn.{proj}", e, e, bias=False)
        linear(f"{name}.attn.o", e, e)
        linear(f"{name}.mlp.fc1", e, hid)
        linear(f"{name}.mlp.fc2", hid, e)
    return params


def _linear(g: ad.Graph, x: ad.Node, name: str, params: Params) -> ad.Node:
    return ad.add_bias(ad.matmul(x, g.param(f"{name}.w", params[f"{name}.w"])),
                       g.param(f"{name}.b", params[f"{name}.b"]))


def _layer_norm(g: ad.Graph, x: ad.Node, name: str, params: Params) -> ad.Node:
    return ad.layer_norm(x, g.param(f"{name}.g", params[f"{name}.g"]), g.param(f"{name}.b", params[f"{name}.b"]))


def patch_embed(g: ad.Graph, image: ad.Node, cfg: TokenConfig, params: Params) -> ad.Node:
    """Project non-overlapping ``P x P`` patches to ``[L, E]`` tokens and add positions.

    Patch vectors are flattened channel-major then row-major within the patch,
    and tokens follow the patch grid row by row. Implemented as a stride-P
    convolution whose kernel is the projection matrix reshaped.
    """
    c, h, w = image.shape
    if c != cfg.input_channels:
        raise DimensionError(f"patch_embed expects {cfg.input_channels} channels, got {c}")
    cfg.grid(h, w)
    p, e = cfg.patch_size, cfg.embed_dim
    proj = g.param("tokens.patch.w", params["tokens.patch.w"])
    kernel = ad.reshape(ad.transpose2d(proj), (e, c, p, p))
    grid = ad.conv2d(image, kernel, stride=p, pad=0, bias=g.param("tokens.patch.b", params["tokens.patch.b"]))
    tokens = flatten_map(grid)
    pos = g.param("tokens.pos", params["tokens.pos"])
    if pos.shape != tokens.shape:
        raise ConfigError(f"positional embedding {pos.shape} does not match {tokens.shape} tokens")
    return ad.add(tokens, pos)


def transformer_block(g: ad.Graph, x: ad.Node, name: str, params: Params, heads: int,
                      trace: Optional[list] = None) -> ad.Node:
    """Pre-norm encoder block: ``x + MHSA(LN(x))`` then ``+ MLP(LN(.))``."""
    h = _layer_norm(g, x, f"{name}.ln1", params)
    q, k, v = (ad.matmul(h, g.param(f"{name}.attn.{p}.w", params[f"{name}.attn.{p}.w"])) for p in "qkv")
    heads_out = _attend(q, k, v, heads, trace)
    x = ad.add(x, _linear(g, heads_out, f"{name}.attn.o", params))

    h = _layer_norm(g, x, f"{name}.ln2", params)
    h = ad.relu(_linear(g, h, f"{name}.mlp.fc1", params))
    return ad.add(x, _linear(g, h, f"{name}.mlp.fc2", params))


def _attend(q: ad.Node, k: ad.Node, v: ad.Node, heads: int, trace: Optional[list]) -> ad.Node:
    e = q.shape[1]
    d = e // heads
    outs = []
    for hd in range(heads):
        lo, hi = hd * d, (hd + 1) * d
        qh, kh, vh = (ad.slice_axis(t, 1, lo, hi) if heads > 1 else t for t in (q, k, v))
        logits = ad.mul_scalar(ad.matmul(qh, ad.transpose2d(kh)), 1.0 / np.sqrt(d))
        weights = ad.softmax_rows(logits)
        if trace is not None:
            trace.append(weights.value)
        outs.append(ad.matmul(weights, vh))
    return outs[0] if heads == 1 else ad.concat(outs, axis=1)


def token_states(g: ad.Graph, image: ad.Node, cfg: TokenConfig, params: Params,
                 trace: Optional[list] = None) -> List[ad.Node]:
    x = patch_embed(g, image, cfg, params)
    states = []
    for i in range(cfg.depth):
        x = transformer_block(g, x, f"tokens.block{i}", params, cfg.heads, trace)
        states.append(x)
    return states
