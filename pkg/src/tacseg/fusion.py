"""Attention-style projection that merges feature maps with token states.

For a feature map viewed as ``C`` (``[HW, E]``, one row per pixel) and token
states ``T`` (``[L, E]``)::

    S = C + softmax_rows((C @ Wq) @ (T @ Wk).T) @ T

Pixels act as queries, tokens as keys and values. The softmax runs over the
token axis, so each pixel row receives a convex combination of token rows.
There is no ``1/sqrt(E)`` scale and no value projection.
"""

from __future__ import annotations

from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .backbone import flatten_map, unflatten_map
from .errors import ConfigError, DimensionError
from .rng import stream

Params = Dict[str, np.ndarray]

INIT_GAIN = 0.1


def init_fusion(depth: int, embed_dim: int, seed: int) -> Params:
    params: Params = {}
    bound = INIT_GAIN * np.sqrt(6.0 / embed_dim)
    for i in range(depth):
        for which in ("wq", "wk"):
            name = f"fusion.{i}.{which}"
            params[name] = stream(seed, "init", name).uniform(-bound, bound, (embed_dim, embed_dim))
    return params


def _check_shapes(c, t, wq, wk) -> None:
    e = c.shape[1] if len(c.shape) == 2 else None
    if e is None:
        raise DimensionError(f"fuse: C must be [HW, E], got {c.shape}")
    if len(t.shape) != 2 or t.shape[1] != e:
        raise DimensionError(f"fuse: T has shape {t.shape}, expected [L, {e}] to match C {c.shape}")
    if wq.shape != (e, e):
        raise DimensionError(f"fuse: W_q has shape {wq.shape}, expected ({e}, {e}) to match C {c.shape}")
    if wk.shape != (e, e):
        raise DimensionError(f"fuse: W_k has shape {wk.shape}, expected ({e}, {e}) to match C {c.shape}")


def fuse(c: ad.Node, t: ad.Node, wq: ad.Node, wk: ad.Node,
         trace: Optional[list] = None) -> ad.Node:
    """Merge pixel rows ``c`` ``[HW, E]`` with tokens ``t`` ``[L, E]``; returns ``[HW, E]``."""
    _check_shapes(c, t, wq, wk)
    logits = ad.matmul(ad.matmul(c, wq), ad.transpose2d(ad.matmul(t, wk)))
    weights = ad.softmax_rows(logits)
    if trace is not None:
        trace.append(weights.value)
    return ad.add(c, ad.matmul(weights, t))


def fuse_arrays(c, t, wq, wk) -> np.ndarray:
    """Plain-array convenience wrapper around :func:`fuse`."""
    g = ad.Graph()
    return fuse(g.constant(c), g.constant(t), g.constant(wq), g.constant(wk)).value


def fuse_all(g: ad.Graph, cmaps: Sequence[ad.Node], tokens: Sequence[ad.Node], params: Params,
             trace: Optional[list] = None) -> List[ad.Node]:
    """Fuse each ``[E, H_i, W_i]`` map with the token state of the same depth."""
    n_fusion = sum(1 for k in params if k.startswith("fusion.") and k.endswith(".wq"))
    if not (len(cmaps) == len(tokens) == n_fusion):
        raise ConfigError(
            f"fuse_all: depth mismatch ({len(cmaps)} maps, {len(tokens)} token states, {n_fusion} fusion layers)")
    out = []
    for i, (cmap, tok) in enumerate(zip(cmaps, tokens)):
        _, h, w = cmap.shape
        wq = g.param(f"fusion.{i}.wq", params[f"fusion.{i}.wq"])
        wk = g.param(f"fusion.{i}.wk", params[f"fusion.{i}.wk"])
        out.append(unflatten_map(fuse(flatten_map(cmap), tok, wq, wk, trace), h, w))
    return out
