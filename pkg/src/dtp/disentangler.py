"""Reflectance/illumination disentanglement network.

Encoder-decoder with long skip connections from every encoder stage to the
matching decoder stage. The reflectance head emits 3 channels in [0,1];
the illumination head emits a single channel floored at ILLUM_FLOOR so the
multiplicative model never collapses to a zero illumination. Inputs of any
size are padded to a multiple of 2^depth and cropped back.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, DimensionError
from .layers import Conv, relu, sigmoid

ILLUM_FLOOR = 1e-3
# slope of the output heads: steeper sigmoids let the low paper learning
# rate traverse the output range within a desk-scale iteration budget
HEAD_GAIN = 4.0
# the illumination head starts at plausible night ambient (pre-gain logit)
ILL_BIAS = -0.3
_RATIO_CLIP = (0.02, 0.98)

PRESETS: dict[str, tuple[int, ...]] = {
    "small": (6, 12),
    "base": (8, 16, 32),
    "large": (16, 32, 64, 128),
}


@dataclass
class DisentangleOutput:
    reflectance: Tensor   # (B,3,H,W) in [0,1]
    illumination: Tensor  # (B,1,H,W) in [ILLUM_FLOOR, 1]


class DisentangleNet:
    """U-shaped net mapping an RGB image to (reflectance, illumination)."""

    def __init__(self, preset: str = "base", seed: int = 0):
        if preset not in PRESETS:
            raise ConfigError(f"unknown disentangler preset {preset!r}; "
                              f"choose from {sorted(PRESETS)}")
        self.preset = preset
        chans = PRESETS[preset]
        self.depth = len(chans)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x01]))

        self.stem = Conv(rng, 3, chans[0])
        self.enc = []
        enc_in = chans[0]
        for c in chans:
            self.enc.append(Conv(rng, enc_in, c, stride=2))
            enc_in = c
        # decoder mirrors the encoder; stage i consumes [upsampled, skip]
        self.dec = []
        skip_chans = [chans[0], *chans[:-1]]  # stem + all but the bottom stage
        dec_in = chans[-1]
        self.head_width = max(8, chans[0] // 2)
        dec_out = [*chans[:-1][::-1], self.head_width]
        for skip_c, out_c in zip(skip_chans[::-1], dec_out):
            self.dec.append(Conv(rng, dec_in + skip_c, out_c))
            dec_in = out_c
        # both heads see the raw image (the long jump connection); the
        # reflectance head additionally sees the image-to-illumination ratio
        # in pre-sigmoid units, so the exact multiplicative inverse is one
        # identity weight away. Its cue channels start at that identity.
        self.ill_head = Conv(rng, self.head_width + 3, 1, k=1)
        self.ill_head.b.data[:] = ILL_BIAS
        self.refl_head = Conv(rng, self.head_width + 6, 3, k=1)
        self.refl_head.b.data[:] = 0.0
        for c in range(3):
            self.refl_head.w.data[c, self.head_width + 3 + c, 0, 0] = 1.0

    def named_params(self):
        named = self.stem.named_params("dis.stem")
        for i, c in enumerate(self.enc):
            named += c.named_params(f"dis.enc{i}")
        for i, c in enumerate(self.dec):
            named += c.named_params(f"dis.dec{i}")
        named += self.refl_head.named_params("dis.refl")
        named += self.ill_head.named_params("dis.ill")
        return named

    def params(self):
        return [t for _, t in self.named_params()]

    def forward(self, x: Tensor) -> DisentangleOutput:
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected (B,3,H,W) input, got {x.shape}")
        h, w = x.shape[2], x.shape[3]
        mult = 1 << self.depth
        pad_h = (-h) % mult
        pad_w = (-w) % mult
        if pad_h or pad_w:
            x = dc.pad2d(x, pad_h, pad_w)

        t = relu(self.stem(x))
        skips = [t]
        for conv in self.enc:
            t = relu(conv(t))
            skips.append(t)
        d = skips.pop()
        for conv in self.dec:
            skip = skips.pop()
            up = dc.pool_and_resize(d, "bilinear", (skip.shape[2], skip.shape[3]))
            d = relu(conv(dc.concat([up, skip], axis=1)))

        head_in = dc.concat([d, x], axis=1)
        ill = sigmoid(self.ill_head(head_in) * HEAD_GAIN) * (1.0 - ILLUM_FLOOR) + ILLUM_FLOOR

        ratio = dc.clipval(dc.elementwise("mul", x, dc.reciprocal(ill)), *_RATIO_CLIP)
        inv_ratio = ratio * (-1.0) + 1.0
        cue = (dc.log(ratio) - dc.log(inv_ratio)) * (1.0 / HEAD_GAIN)
        refl = sigmoid(self.refl_head(dc.concat([head_in, cue], axis=1)) * HEAD_GAIN)
        if pad_h or pad_w:
            refl = dc.crop2d(refl, h, w)
            ill = dc.crop2d(ill, h, w)
        return DisentangleOutput(reflectance=refl, illumination=ill)


def init_weights(preset: str, seed: int) -> DisentangleNet:
    return DisentangleNet(preset=preset, seed=seed)


def disentangle(net: DisentangleNet, x: Tensor) -> DisentangleOutput:
    return net.forward(x)


def recombine(r: Tensor, i: Tensor) -> Tensor:
    """Compose an image from its parts: reflectance times illumination."""
    if r.ndim != 4 or i.ndim != 4 or r.shape[2:] != i.shape[2:] or r.shape[0] != i.shape[0]:
        raise DimensionError(f"cannot recombine {r.shape} with {i.shape}")
    return dc.elementwise("mul", r, i)
