"""Illumination-aware parser.

Two feature branches at quarter resolution: a dilated conv encoder on the
reflectance and a pyramid-pooling branch on the illumination. A sigmoid
attention mask blends them per pixel before a shared 1x1 classifier; the
same classifier applied to the illumination features alone gives the
auxiliary logits used by the guidance loss term.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import DimensionError
from .layers import Conv, relu, sigmoid

PPM_BINS = (1, 2, 3, 6)


@dataclass
class FusionOutput:
    logits: Tensor      # (B,K,H,W) at the requested output size
    attention: Tensor   # (B,1,H/4,W/4) in (0,1)
    aux_logits: Tensor  # (B,K,H/4,W/4), illumination branch through the classifier


class IAParserNet:
    def __init__(self, k_classes: int, feat_channels: int = 32, seed: int = 0):
        self.k_classes = k_classes
        self.feat_channels = c = feat_channels
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x02]))

        half = max(8, c // 2)
        self.ref_convs = [
            Conv(rng, 3, half, stride=2),
            Conv(rng, half, c, stride=2),
            Conv(rng, c, c, dilation=2),
            Conv(rng, c, c, dilation=4),
        ]
        self.ill_stem = [
            Conv(rng, 1, half, stride=2),
            Conv(rng, half, c, stride=2),
        ]
        bin_out = max(4, c // len(PPM_BINS))
        self.ppm_convs = [Conv(rng, c, bin_out, k=1) for _ in PPM_BINS]
        self.ill_fuse = Conv(rng, c + bin_out * len(PPM_BINS), c)
        self.w_ai = Conv(rng, c, c, k=1)
        self.w_ar = Conv(rng, c, c, k=1)
        self.w_a = Conv(rng, c, 1, k=1)
        self.w_cls = Conv(rng, c, k_classes, k=1)

    def named_params(self):
        named = []
        for i, conv in enumerate(self.ref_convs):
            named += conv.named_params(f"seg.ref{i}")
        for i, conv in enumerate(self.ill_stem):
            named += conv.named_params(f"seg.ill{i}")
        for i, conv in enumerate(self.ppm_convs):
            named += conv.named_params(f"seg.ppm{i}")
        named += self.ill_fuse.named_params("seg.illfuse")
        named += self.w_ai.named_params("seg.wai")
        named += self.w_ar.named_params("seg.war")
        named += self.w_a.named_params("seg.wa")
        named += self.w_cls.named_params("seg.wcls")
        return named

    def params(self):
        return [t for _, t in self.named_params()]


def extract_features(net: IAParserNet, r: Tensor, i: Tensor) -> tuple[Tensor, Tensor]:
    """Quarter-resolution feature maps; reflectance and illumination stay isolated."""
    if r.shape[1] != 3:
        raise DimensionError(f"reflectance must have 3 channels, got {r.shape}")
    if i.shape[1] != 1:
        raise DimensionError(f"illumination must have 1 channel, got {i.shape}")
    if r.shape[2:] != i.shape[2:]:
        raise DimensionError(f"spatial mismatch {r.shape} vs {i.shape}")

    t = r
    for conv in net.ref_convs:
        t = relu(conv(t))
    f_ref = t

    g = i
    for conv in net.ill_stem:
        g = relu(conv(g))
    hw = (g.shape[2], g.shape[3])
    pieces = [g]
    for nbins, conv in zip(PPM_BINS, net.ppm_convs):
        pooled = dc.pool_and_resize(g, "adaptive_avg", (min(nbins, hw[0]), min(nbins, hw[1])))
        pieces.append(dc.pool_and_resize(relu(conv(pooled)), "bilinear", hw))
    f_ill = relu(net.ill_fuse(dc.concat(pieces, axis=1)))
    return f_ref, f_ill


def attention_mask(net: IAParserNet, f_ill: Tensor, f_ref: Tensor) -> Tensor:
    if f_ill.shape != f_ref.shape:
        raise DimensionError(f"feature shapes differ: {f_ill.shape} vs {f_ref.shape}")
    pre = net.w_a(net.w_ai(f_ill) + net.w_ar(f_ref))
    return sigmoid(pre)


def fuse_classify(net: IAParserNet, f_ref: Tensor, f_ill: Tensor, a_mask: Tensor,
                  out_hw: tuple[int, int]) -> FusionOutput:
    """Convex per-pixel blend of the two branches through the shared classifier."""
    inv_mask = a_mask * (-1.0) + 1.0
    fused = dc.elementwise("mul", f_ref, inv_mask) + dc.elementwise("mul", f_ill, a_mask)
    logits = dc.pool_and_resize(net.w_cls(fused), "bilinear", out_hw)
    aux = net.w_cls(f_ill)
    return FusionOutput(logits=logits, attention=a_mask, aux_logits=aux)


def parse(net: IAParserNet, r: Tensor, i: Tensor) -> FusionOutput:
    """Full parser pass on a disentangled pair, logits at input resolution."""
    h, w = r.shape[2], r.shape[3]
    pad_h = (-h) % 4
    pad_w = (-w) % 4
    if pad_h or pad_w:
        r = dc.pad2d(r, pad_h, pad_w)
        i = dc.pad2d(i, pad_h, pad_w)
    f_ref, f_ill = extract_features(net, r, i)
    mask = attention_mask(net, f_ill, f_ref)
    out = fuse_classify(net, f_ref, f_ill, mask, (h + pad_h, w + pad_w))
    if pad_h or pad_w:
        out = FusionOutput(logits=dc.crop2d(out.logits, h, w),
                           attention=out.attention, aux_logits=out.aux_logits)
    return out


def iaparser_loss(out: FusionOutput, labels: np.ndarray, lambda_ill: float = 1.0,
                  ignore_index: int = 255) -> Tensor:
    """Cross-entropy on the fused logits plus the weighted illumination term."""
    main = dc.cross_entropy(out.logits, labels, ignore_index)
    if lambda_ill == 0.0:
        return main
    hw = (out.logits.shape[2], out.logits.shape[3])
    aux_full = dc.pool_and_resize(out.aux_logits, "bilinear", hw)
    aux = dc.cross_entropy(aux_full, labels, ignore_index)
    return aux * lambda_ill + main


def forward(net_dis, net_seg: IAParserNet, x: Tensor) -> FusionOutput:
    """Disentangle then parse, end to end."""
    decomp = net_dis.forward(x)
    return parse(net_seg, decomp.reflectance, decomp.illumination)
