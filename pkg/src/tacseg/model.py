"""Vanilla and transformer-assisted segmentation models sharing one decoder.

Both variants run the same convolutional backbone and the same U-Net-like
decoder. The fused variant additionally computes token states and merges them
into every backbone map before decoding, so switching the fusion path off
(zero token and fusion parameters) reproduces the vanilla model exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from . import autodiff as ad
from . import ftnsr
from .backbone import BackboneConfig, backbone_forward, init_backbone, kaiming_uniform
from .errors import ConfigError
from .fusion import fuse_all, init_fusion
from .rng import stream
from .tokens import TokenConfig, init_tokens, token_states

Params = Dict[str, np.ndarray]

KINDS = ("vanilla", "fused")
FUSION_PREFIXES = ("tokens.", "fusion.")
CHECKPOINT_FORMAT = "tacseg-checkpoint/1"


@dataclass(frozen=True)
class ModelVariant:
    kind: str = "fused"
    image_hw: Tuple[int, int] = (64, 64)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    tokens: TokenConfig = field(default_factory=TokenConfig)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; choose from {KINDS}")
        object.__setattr__(self, "image_hw", tuple(int(v) for v in self.image_hw))
        b, t = self.backbone, self.tokens
        if t.depth != b.depth or t.embed_dim != b.embed_dim or t.input_channels != b.input_channels:
            raise ConfigError("token encoder must share depth, embed_dim and input_channels with the backbone")
        self.check_image((b.input_channels,) + self.image_hw)

    @property
    def fused(self) -> bool:
        return self.kind == "fused"

    def check_image(self, shape) -> None:
        self.backbone.check_input(shape)
        if self.fused:
            self.tokens.grid(shape[1], shape[2])
            if tuple(shape[1:]) != self.image_hw:
                # the positional table has one row per patch of an image_hw image
                raise ConfigError(f"fused model was built for {self.image_hw[0]}x{self.image_hw[1]} images, "
                                  f"got {shape[1]}x{shape[2]}")

    def with_kind(self, kind: str) -> "ModelVariant":
        return ModelVariant(kind, self.image_hw, self.backbone, self.tokens)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "image_hw": list(self.image_hw),
                "backbone": {**asdict(self.backbone), "stage_channels": list(self.backbone.stage_channels)},
                "tokens": asdict(self.tokens)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelVariant":
        return cls(d["kind"], tuple(d["image_hw"]), BackboneConfig(**d["backbone"]), TokenConfig(**d["tokens"]))


def init_decoder(cfg: BackboneConfig, seed: int) -> Params:
    e = cfg.embed_dim
    params: Params = {}
    for j in range(cfg.depth - 1):
        name = f"decoder.up{j}"
        params[f"{name}.w"] = kaiming_uniform(stream(seed, "init", f"{name}.w"), (e, 2 * e, 3, 3), 2 * e * 9)
        params[f"{name}.b"] = np.zeros(e)
    params["decoder.head.w"] = kaiming_uniform(stream(seed, "init", "decoder.head.w"), (1, e, 1, 1), e, gain=0.5)
    params["decoder.head.b"] = np.zeros(1)
    return params


def init_params(variant: ModelVariant, seed: int) -> Params:
    """Fresh parameters. Every tensor draws from its own named stream, so the
    backbone and decoder weights are identical across variants for one seed."""
    params = init_backbone(variant.backbone, seed)
    params.update(init_decoder(variant.backbone, seed))
    if variant.fused:
        params.update(init_tokens(variant.tokens, variant.image_hw, seed))
        params.update(init_fusion(variant.backbone.depth, variant.backbone.embed_dim, seed))
    return params


def zero_fusion_path(params: Params) -> Params:
    """Copy of ``params`` with every token-encoder and fusion tensor zeroed."""
    return {k: np.zeros_like(v) if k.startswith(FUSION_PREFIXES) else v for k, v in params.items()}


def decode(g: ad.Graph, maps, params: Params) -> ad.Node:
    x = maps[-1]
    for j in reversed(range(len(maps) - 1)):
        name = f"decoder.up{j}"
        x = ad.concat([ad.upsample_nearest2x(x), maps[j]], axis=0)
        x = ad.relu(ad.conv2d(x, g.param(f"{name}.w", params[f"{name}.w"]), stride=1, pad=1,
                              bias=g.param(f"{name}.b", params[f"{name}.b"])))
    x = ad.conv2d(x, g.param("decoder.head.w", params["decoder.head.w"]), stride=1, pad=0,
                  bias=g.param("decoder.head.b", params["decoder.head.b"]))
    return ad.upsample_nearest2x(x)


def forward(variant: ModelVariant, image, params: Params, g: Optional[ad.Graph] = None,
            trace: Optional[list] = None) -> ad.Node:
    """Per-pixel foreground logits ``[1, H, W]`` for one ``[Cin, H, W]`` image."""
    g = g if g is not None else ad.Graph()
    img = image if isinstance(image, ad.Node) else g.constant(image, name="image")
    variant.check_image(img.shape)
    maps = backbone_forward(g, img, variant.backbone, params)
    if variant.fused:
        states = token_states(g, img, variant.tokens, params, trace)
        maps = fuse_all(g, maps, states, params, trace)
    return decode(g, maps, params)


def predict_logits(variant: ModelVariant, image, params: Params) -> np.ndarray:
    return forward(variant, image, params).value


def bce_loss(logits: ad.Node, target) -> ad.Node:
    return ad.bce_with_logits(logits, np.asarray(target, dtype=np.float64).reshape(logits.shape))


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

def save_checkpoint(path: Union[str, Path], variant: ModelVariant, params: Params,
                    extra: Optional[dict] = None) -> Path:
    """Write ``manifest.json`` plus one FTNSR1 file per named tensor into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = sorted(params)
    for name in names:
        ftnsr.save(path / f"{name}.ftnsr", params[name])
    manifest = {"format": CHECKPOINT_FORMAT, "variant": variant.to_dict(), "tensors": names}
    if extra:
        manifest["extra"] = extra
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[ModelVariant, Params, dict]:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"no checkpoint manifest in {path}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    variant = ModelVariant.from_dict(manifest["variant"])
    params = {name: ftnsr.load(path / f"{name}.ftnsr") for name in manifest["tensors"]}
    expected = set(init_params_shapes(variant))
    if set(params) != expected:
        missing, unknown = expected - set(params), set(params) - expected
        raise ConfigError(f"{path}: tensor set does not match manifest variant "
                          f"(missing {sorted(missing)}, unexpected {sorted(unknown)})")
    return variant, params, manifest.get("extra", {})


def init_params_shapes(variant: ModelVariant) -> Dict[str, Tuple[int, ...]]:
    return {k: v.shape for k, v in init_params(variant, 0).items()}
