"""Shared small configurations so unit tests run in milliseconds."""

from tacseg.backbone import BackboneConfig
from tacseg.model import ModelVariant
from tacseg.tokens import TokenConfig


def small_variant(kind="fused", hw=(16, 16)):
    return ModelVariant(kind, hw, BackboneConfig(2, (4, 8), 8, 3), TokenConfig(4, 8, 2, 2, 2, 3))
