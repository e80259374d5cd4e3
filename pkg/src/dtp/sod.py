"""Semantic-oriented disentanglement training.

One training step takes a paired batch, disentangles both halves, disturbs
the predicted illuminations toward guidance noise (strongly early, barely
at all late), swaps components to synthesize new images, re-disentangles
them with the same weights, and scores four losses:

  consistency  - reconstructed parts match the parts they were built from
  retinex      - every decomposition multiplies back to its source image
  smoothness   - illumination gradients are cheap except across
                 reflectance edges
  semantic     - the parser must segment well from both real and synthetic
                 reflectance (this is what disciplines the reflectance)

Guidance noise is a constant input, never a gradient path.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .disentangler import DisentangleNet, DisentangleOutput, recombine
from .errors import ConfigError, ContractError, DimensionError
from .iaparser import IAParserNet, iaparser_loss, parse


@dataclass
class DisturbSchedule:
    t: int
    t_max: int

    def __post_init__(self):
        if self.t_max <= 0:
            raise ConfigError("schedule length must be positive")
        if not 0 <= self.t <= self.t_max:
            raise ConfigError(f"iteration {self.t} outside [0, {self.t_max}]")


def sample_beta(schedule: DisturbSchedule, rng: np.random.Generator) -> float:
    """Noise weight drawn from Uniform(1 - t/T, 1); starts at exactly 1."""
    lo = 1.0 - schedule.t / schedule.t_max
    return float(rng.uniform(lo, 1.0))


@dataclass
class GuidanceNoiseConfig:
    mixture: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)  # constant, low-frequency, ramp
    smooth_cell: int = 32
    floor: float = 1e-3
    max_mean_gradient: float = 0.05

    def __post_init__(self):
        if any(w < 0 for w in self.mixture) or abs(sum(self.mixture) - 1.0) > 1e-6:
            raise ConfigError("mixture weights must be non-negative and sum to 1")


def generate_guidance_noise(cfg: GuidanceNoiseConfig, shape: tuple[int, ...],
                            rng: np.random.Generator) -> np.ndarray:
    """Smooth illumination-like fields in [floor, 1], one kind per sample."""
    if len(shape) != 4 or shape[1] != 1:
        raise DimensionError(f"noise shape must be (B,1,H,W), got {shape}")
    b, _, h, w = shape
    if h < 2 or w < 2:
        raise DimensionError(f"noise field needs at least 2x2, got {h}x{w}")
    lo = cfg.floor
    out = np.empty(shape, dtype=np.float32)
    kinds = rng.choice(3, size=b, p=cfg.mixture)
    for idx in range(b):
        kind = kinds[idx]
        if kind == 0:
            out[idx, 0] = rng.uniform(lo, 1.0)
        elif kind == 1:
            gh = max(2, h // cfg.smooth_cell + 1)
            gw = max(2, w // cfg.smooth_cell + 1)
            coarse = rng.uniform(lo, 1.0, (gh, gw))
            from .dataset import _resize_bilinear_2d
            out[idx, 0] = _resize_bilinear_2d(coarse, (h, w))
        else:
            a, bval = rng.uniform(lo, 1.0, 2)
            axis = int(rng.integers(0, 2))
            n = h if axis == 0 else w
            ramp = np.linspace(a, bval, n, dtype=np.float32)
            out[idx, 0] = ramp[:, None] if axis == 0 else ramp[None, :]
    return np.clip(out, lo, 1.0)


def disturb(illumination: Tensor, noise: np.ndarray, beta: float) -> Tensor:
    """Blend toward the guidance field: (1-beta) * I + beta * N."""
    if not 0.0 <= beta <= 1.0:
        raise ContractError(f"beta must lie in [0,1], got {beta}")
    if tuple(noise.shape) != illumination.shape:
        raise DimensionError(f"noise {noise.shape} does not match {illumination.shape}")
    if beta == 0.0:
        return illumination
    scaled_noise = Tensor(noise * np.float32(beta), dtype=illumination.data.dtype)
    return illumination * (1.0 - beta) + scaled_noise


def cross_entangle_redisentangle(net: DisentangleNet, r_j: Tensor, i_k_prime: Tensor,
                                 r_k: Tensor, i_j_prime: Tensor):
    """Swap partners, recombine, and run both syntheses through the same net."""
    n = r_j.shape[0]
    synth = dc.concat([recombine(r_j, i_k_prime), recombine(r_k, i_j_prime)], axis=0)
    redo = net.forward(synth)
    r_j_s = dc.slice_batch(redo.reflectance, 0, n)
    i_k_s = dc.slice_batch(redo.illumination, 0, n)
    r_k_s = dc.slice_batch(redo.reflectance, n, 2 * n)
    i_j_s = dc.slice_batch(redo.illumination, n, 2 * n)
    return r_j_s, i_k_s, r_k_s, i_j_s, synth


def disentangle_loss(r_j_s, r_j, r_k_s, r_k, i_j_s, i_j_prime, i_k_s, i_k_prime) -> Tensor:
    """Mean-absolute consistency of re-disentangled parts with their sources."""
    return (dc.norm_loss("mean_abs", r_j_s - r_j)
            + dc.norm_loss("mean_abs", r_k_s - r_k)
            + dc.norm_loss("mean_abs", i_j_s - i_j_prime)
            + dc.norm_loss("mean_abs", i_k_s - i_k_prime))


def retinex_loss(r: Tensor, i: Tensor, x: Tensor) -> Tensor:
    """Mean-squared error of the multiplicative recomposition."""
    return dc.norm_loss("mean_sq", recombine(r, i) - x)


def smooth_loss(i: Tensor, r: Tensor, lambda_g: float = 10.0) -> Tensor:
    """Edge-aware illumination smoothness over both gradient directions.

    Reflectance gradients are channel-averaged before the exponential
    weight, so a strong edge in any color suppresses the penalty there.
    """
    if i.shape[2:] != r.shape[2:]:
        raise DimensionError(f"spatial mismatch {i.shape} vs {r.shape}")
    giw, gih = dc.spatial_gradient(i)
    grw, grh = dc.spatial_gradient(r)
    ww = dc.activation("exp", dc.mean_channels(dc.absval(grw)) * (-lambda_g))
    wh = dc.activation("exp", dc.mean_channels(dc.absval(grh)) * (-lambda_g))
    return (dc.norm_loss("mean_sq", dc.elementwise("mul", giw, ww))
            + dc.norm_loss("mean_sq", dc.elementwise("mul", gih, wh)))


def semantic_disentangle_loss(seg_net: IAParserNet, r_j, i_j, y_j, r_k, i_k, y_k,
                              r_j_s, r_k_s, lambda_ill: float = 1.0,
                              ignore_index: int = 255,
                              parse_fn=None) -> Tensor:
    """Segmentation loss over the two real and two synthetic-reflectance views.

    The synthetic-reflectance terms pair each R^s with its ORIGINAL
    illumination, so the parser grades reflectance quality in isolation.
    """
    run = parse_fn if parse_fn is not None else parse
    n = r_j.shape[0]
    r_all = dc.concat([r_j, r_k, r_j_s, r_k_s], axis=0)
    i_all = dc.concat([i_j, i_k, i_j, i_k], axis=0)
    out = run(seg_net, r_all, i_all)
    total = None
    labels = [y_j, y_k, y_j, y_k]
    for term in range(4):
        sl = _slice_output(out, term * n, (term + 1) * n)
        part = iaparser_loss(sl, labels[term], lambda_ill, ignore_index)
        total = part if total is None else total + part
    return total


def _slice_output(out, start, stop):
    from .iaparser import FusionOutput
    return FusionOutput(logits=dc.slice_batch(out.logits, start, stop),
                        attention=dc.slice_batch(out.attention, start, stop),
                        aux_logits=dc.slice_batch(out.aux_logits, start, stop))


@dataclass
class SodWeights:
    w_dis: float = 1.0
    w_ret: float = 1.0
    w_smooth: float = 1.0
    w_sede: float = 1.0
    lambda_g: float = 10.0
    lambda_ill: float = 1.0


@dataclass
class SodLossTerms:
    l_disentangle: float
    l_retinex: float
    l_smooth: float
    l_sede: float
    total: float

    def csv_row(self, step: int) -> str:
        return (f"{step},{self.l_disentangle:.6f},{self.l_retinex:.6f},"
                f"{self.l_smooth:.6f},{self.l_sede:.6f},{self.total:.6f}")


def sod_losses(dis_net: DisentangleNet, seg_net: IAParserNet,
               x_j: Tensor, y_j: np.ndarray, x_k: Tensor, y_k: np.ndarray,
               beta: float, noise_j: np.ndarray, noise_k: np.ndarray,
               weights: SodWeights, ignore_index: int = 255) -> tuple[Tensor, SodLossTerms]:
    """Deterministic loss graph for one paired batch, given frozen randomness."""
    n = x_j.shape[0]
    x_all = dc.concat([x_j, x_k], axis=0)
    decomp: DisentangleOutput = dis_net.forward(x_all)
    r_all, i_all = decomp.reflectance, decomp.illumination

    noise = np.concatenate([noise_j, noise_k], axis=0)
    i_prime = disturb(i_all, noise, beta)

    r_j = dc.slice_batch(r_all, 0, n)
    r_k = dc.slice_batch(r_all, n, 2 * n)
    i_j = dc.slice_batch(i_all, 0, n)
    i_k = dc.slice_batch(i_all, n, 2 * n)
    i_j_p = dc.slice_batch(i_prime, 0, n)
    i_k_p = dc.slice_batch(i_prime, n, 2 * n)

    r_j_s, i_k_s, r_k_s, i_j_s, synth = cross_entangle_redisentangle(
        dis_net, r_j, i_k_p, r_k, i_j_p)

    l_dis = disentangle_loss(r_j_s, r_j, r_k_s, r_k, i_j_s, i_j_p, i_k_s, i_k_p)

    r_s_all = dc.concat([r_j_s, r_k_s], axis=0)
    i_s_all = dc.concat([i_k_s, i_j_s], axis=0)
    l_ret = retinex_loss(r_all, i_all, x_all) + retinex_loss(r_s_all, i_s_all, synth)
    l_smooth = (smooth_loss(i_all, r_all, weights.lambda_g)
                + smooth_loss(i_s_all, r_s_all, weights.lambda_g))
    l_sede = semantic_disentangle_loss(seg_net, r_j, i_j, y_j, r_k, i_k, y_k,
                                       r_j_s, r_k_s, weights.lambda_ill, ignore_index)

    total = (l_dis * weights.w_dis + l_ret * weights.w_ret
             + l_smooth * weights.w_smooth + l_sede * weights.w_sede)
    terms = SodLossTerms(l_disentangle=l_dis.item(), l_retinex=l_ret.item(),
                         l_smooth=l_smooth.item(), l_sede=l_sede.item(),
                         total=total.item())
    return total, terms


def sod_train_step(dis_net: DisentangleNet, seg_net: IAParserNet, optimizer,
                   batch_images: np.ndarray, batch_labels: np.ndarray,
                   schedule: DisturbSchedule, weights: SodWeights,
                   noise_cfg: GuidanceNoiseConfig, rng: np.random.Generator,
                   tape: dc.Tape | None = None, ignore_index: int = 255) -> SodLossTerms:
    """Full step: pair, disturb, cross-entangle, losses, backward, update.

    Adjacent samples form the (j,k) pairs, so the batch must be even.
    """
    if batch_images.shape[0] % 2:
        raise ConfigError(f"paired training needs an even batch, got {batch_images.shape[0]}")
    n = batch_images.shape[0] // 2
    x_j = Tensor(batch_images[0::2])
    x_k = Tensor(batch_images[1::2])
    y_j = batch_labels[0::2]
    y_k = batch_labels[1::2]

    beta = sample_beta(schedule, rng)
    noise_shape = (n, 1) + batch_images.shape[2:]
    noise_j = generate_guidance_noise(noise_cfg, noise_shape, rng)
    noise_k = generate_guidance_noise(noise_cfg, noise_shape, rng)

    tape = tape if tape is not None else dc.Tape()
    tape.reset()
    with dc.use_tape(tape):
        total, terms = sod_losses(dis_net, seg_net, x_j, y_j, x_k, y_k,
                                  beta, noise_j, noise_k, weights, ignore_index)
        if not np.isfinite(total.item()):
            raise ContractError(f"non-finite training loss: {terms}")
        dc.backward(total)
    optimizer.step()
    optimizer.zero_grad()
    return terms
