"""Deterministic frozen encoder producing a four-level feature pyramid.

A seeded stand-in for a large pretrained backbone: four stages, each a
stride-2 3x3 convolution + ReLU followed by a stride-1 3x3 convolution +
ReLU, yielding strides (2, 4, 8, 16) with configurable channel widths.
Weights come from a He-style normal initializer keyed per parameter name,
so the same seed always yields bit-identical parameters.

In frozen mode the weights carry `requires_grad=False`; gradients can still
flow through the encoder to the *input* (needed by the FGSM attack).  The
`frozen` flag is a configuration, not a separate code path: unfreezing just
flips `requires_grad` on the weights.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import GeometryError, ShapeError
from .seeding import rng_for

__all__ = ["FeaturePyramid", "Encoder", "build_encoder", "encode"]

DEFAULT_WIDTHS = (16, 32, 64, 128)


@dataclass
class FeaturePyramid:
    """Encoder features F1..F4 at strides 2, 4, 8, 16."""

    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor

    @property
    def levels(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return (self.f1, self.f2, self.f3, self.f4)


class Encoder:
    """Four-stage convolutional feature extractor with named parameters."""

    def __init__(self, params: dict[str, Tensor], in_channels: int,
                 widths: tuple[int, ...], frozen: bool):
        self.params = params
        self.in_channels = in_channels
        self.widths = tuple(widths)
        self._frozen = frozen

    @property
    def frozen(self) -> bool:
        return self._frozen

    def set_frozen(self, frozen: bool) -> None:
        self._frozen = frozen
        for p in self.params.values():
            p.requires_grad = not frozen

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def checksum(self) -> str:
        """SHA-256 over all parameter bytes, in name order."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()


def _he_conv(rng: np.random.Generator, cout: int, cin: int, k: int) -> np.ndarray:
    std = np.sqrt(2.0 / (cin * k * k))
    return rng.normal(0.0, std, size=(cout, cin, k, k))


def build_encoder(seed: int, in_channels: int, widths=DEFAULT_WIDTHS,
                  frozen: bool = True) -> Encoder:
    """Construct the seeded encoder.  Identical seeds give identical weights."""
    widths = tuple(int(w) for w in widths)
    if len(widths) != 4 or any(w <= 0 for w in widths):
        raise ShapeError(f"encoder needs 4 positive widths, got {widths}")
    if in_channels <= 0:
        raise ShapeError(f"in_channels must be positive, got {in_channels}")

    params: dict[str, Tensor] = {}
    cin = in_channels
    for stage, cout in enumerate(widths, start=1):
        for conv_idx, conv_cin in ((1, cin), (2, cout)):
            wname = f"enc.s{stage}.conv{conv_idx}.w"
            bname = f"enc.s{stage}.conv{conv_idx}.b"
            rng = rng_for(seed, wname)
            params[wname] = Tensor(_he_conv(rng, cout, conv_cin, 3),
                                   requires_grad=not frozen)
            params[bname] = Tensor(np.zeros(cout), requires_grad=not frozen)
        cin = cout
    return Encoder(params, in_channels, widths, frozen)


def encode(enc: Encoder, images: Tensor) -> FeaturePyramid:
    """Run the four stages; spatial extents halve at every stage."""
    if images.ndim != 4:
        raise ShapeError(f"expected [B,C,H,W] images, got {images.shape}")
    B, C, H, W = images.shape
    if C != enc.in_channels:
        raise ShapeError(f"encoder expects {enc.in_channels} channels, got {C}")
    if H % 16 or W % 16:
        raise GeometryError(f"input extents must be multiples of 16, got {H}x{W}")

    feats = []
    h = images
    for stage in range(1, 5):
        p = enc.params
        h = ad.relu(ad.conv2d(h, p[f"enc.s{stage}.conv1.w"], p[f"enc.s{stage}.conv1.b"],
                              stride=2, padding=1))
        h = ad.relu(ad.conv2d(h, p[f"enc.s{stage}.conv2.w"], p[f"enc.s{stage}.conv2.b"],
                              stride=1, padding=1))
        feats.append(h)
    return FeaturePyramid(*feats)
