"""Central finite-difference checks for every differentiable op.

All checks run in 64-bit mode. ``run_op_suite`` exercises each op on small
random tensors; ``check_function`` is the generic scaffold reused by the
end-to-end sampled-parameter check in the CLI.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tape, Tensor, backward, precision, use_tape

FD_STEP = 1e-5
REL_FLOOR = 1e-2  # gradients below this are compared absolutely


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_function(fn: Callable[[Sequence[Tensor]], Tensor], arrays: Sequence[np.ndarray],
                   step: float = FD_STEP) -> float:
    """Max relative error of analytic vs central-difference gradients.

    ``fn`` maps a list of leaf tensors to a scalar loss tensor and must be
    deterministic. All arrays are checked in float64.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]

    def loss_and_grads():
        leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
        with use_tape(Tape()):
            loss = fn(leaves)
            backward(loss)
        return loss.item(), [lf.grad.copy() for lf in leaves]

    def loss_at(idx: int, flat_pos: int, value: float) -> float:
        probe = [a.copy() for a in arrays]
        probe[idx].reshape(-1)[flat_pos] = value
        leaves = [Tensor(a, requires_grad=False, dtype=np.float64) for a in probe]
        with use_tape(None):
            return fn(leaves).item()

    with precision(np.float64):
        _, grads = loss_and_grads()
        worst = 0.0
        for idx, a in enumerate(arrays):
            flat = a.reshape(-1)
            numeric = np.empty_like(flat)
            for pos in range(flat.size):
                x0 = flat[pos]
                up = loss_at(idx, pos, x0 + step)
                dn = loss_at(idx, pos, x0 - step)
                numeric[pos] = (up - dn) / (2.0 * step)
            worst = max(worst, rel_error(grads[idx].reshape(-1), numeric))
    return worst


def _suite_cases(rng: np.random.Generator):
    x = rng.uniform(-1.0, 1.0, (2, 3, 4, 5))
    # kink-safe values for relu/abs: keep them away from 0 where FD is invalid
    xk = rng.uniform(0.1, 1.0, (2, 3, 4, 5)) * rng.choice([-1.0, 1.0], (2, 3, 4, 5))
    b = rng.uniform(-1.0, 1.0, (2, 3, 4, 5))
    bc = rng.uniform(0.1, 1.0, (2, 1, 4, 5))
    w = rng.uniform(-0.5, 0.5, (4, 3, 3, 3))
    wb = rng.uniform(-0.5, 0.5, (4,))
    labels = rng.integers(0, 3, (2, 4, 5))
    labels[0, 0, 0] = 255

    def reduce(t: Tensor) -> Tensor:
        return ops.norm_loss("mean_sq", t)

    cases: dict[str, tuple] = {
        "elementwise_add": (lambda lv: reduce(ops.elementwise("add", lv[0], lv[1])), [x, b]),
        "elementwise_sub": (lambda lv: reduce(ops.elementwise("sub", lv[0], lv[1])), [x, b]),
        "elementwise_mul": (lambda lv: reduce(ops.elementwise("mul", lv[0], lv[1])), [x, b]),
        "elementwise_broadcast": (lambda lv: reduce(ops.elementwise("mul", lv[0], lv[1])), [x, bc]),
        "conv2d": (lambda lv: reduce(ops.conv2d(lv[0], lv[1], lv[2], stride=2, padding=1)),
                   [rng.uniform(-1, 1, (2, 3, 5, 5)), w, wb]),
        "conv2d_dilated": (lambda lv: reduce(ops.conv2d(lv[0], lv[1], None, padding=2, dilation=2)),
                           [rng.uniform(-1, 1, (1, 3, 7, 7)), w]),
        "sigmoid": (lambda lv: reduce(ops.activation("sigmoid", lv[0])), [x]),
        "relu": (lambda lv: reduce(ops.activation("relu", lv[0])), [xk]),
        "exp": (lambda lv: reduce(ops.activation("exp", lv[0])), [x]),
        "spatial_gradient": (lambda lv: reduce(ops.concat(ops.spatial_gradient(lv[0]), axis=1)), [x]),
        "norm_mean_abs": (lambda lv: ops.norm_loss("mean_abs", lv[0]), [xk]),
        "norm_mean_sq": (lambda lv: ops.norm_loss("mean_sq", lv[0]), [x]),
        "adaptive_avg": (lambda lv: reduce(ops.pool_and_resize(lv[0], "adaptive_avg", (2, 3))), [x]),
        "bilinear": (lambda lv: reduce(ops.pool_and_resize(lv[0], "bilinear", (7, 9))), [x]),
        "cross_entropy": (lambda lv: ops.cross_entropy(lv[0], labels), [rng.uniform(-1, 1, (2, 3, 4, 5))]),
        "concat": (lambda lv: reduce(ops.concat([lv[0], lv[1]], axis=1)), [x, b]),
        "pad_crop": (lambda lv: reduce(ops.crop2d(ops.pad2d(lv[0], 2, 3), 4, 5)), [x]),
        "mean_channels": (lambda lv: reduce(ops.mean_channels(lv[0])), [x]),
        "absval": (lambda lv: reduce(ops.absval(lv[0])), [xk]),
        "slice_batch": (lambda lv: reduce(ops.slice_batch(lv[0], 0, 1)), [x]),
        "reciprocal": (lambda lv: reduce(ops.reciprocal(lv[0])), [np.abs(x) + 0.2]),
        "log": (lambda lv: reduce(ops.log(lv[0])), [np.abs(x) + 0.2]),
        "clipval": (lambda lv: reduce(ops.clipval(lv[0], -0.5, 0.5)), [xk]),
    }
    return cases


def run_op_suite(seed: int = 0) -> dict[str, float]:
    """Finite-difference every op; returns max relative error per op."""
    rng = np.random.default_rng(seed)
    return {name: check_function(fn, arrays) for name, (fn, arrays) in _suite_cases(rng).items()}


def run_full_check(n_params: int = 60, seed: int = 0, step: float = 1e-5) -> float:
    """Sampled-parameter finite differences through the complete training loss.

    Builds small 64-bit nets, freezes the disturb draw and guidance noise,
    and perturbs randomly chosen parameters of both networks against the
    analytic gradients of the full loss. Returns the max relative error.
    """
    from ..disentangler import DisentangleNet
    from ..iaparser import IAParserNet
    from ..sod import SodWeights, sod_losses

    rng = np.random.default_rng(seed)
    with precision(np.float64):
        dis_net = DisentangleNet("small", seed=seed)
        seg_net = IAParserNet(4, 8, seed=seed + 1)
        x_j = Tensor(rng.uniform(0.05, 0.95, (1, 3, 16, 32)))
        x_k = Tensor(rng.uniform(0.05, 0.95, (1, 3, 16, 32)))
        y_j = rng.integers(0, 4, (1, 16, 32))
        y_k = rng.integers(0, 4, (1, 16, 32))
        beta = 0.6
        noise_j = rng.uniform(0.1, 1.0, (1, 1, 16, 32))
        noise_k = rng.uniform(0.1, 1.0, (1, 1, 16, 32))
        weights = SodWeights()

        def loss_graph() -> Tensor:
            total, _ = sod_losses(dis_net, seg_net, x_j, y_j, x_k, y_k,
                                  beta, noise_j, noise_k, weights)
            return total

        with use_tape(Tape()):
            backward(loss_graph())
        params = dis_net.params() + seg_net.params()
        grads = [p.grad.copy() for p in params]
        for p in params:
            p.grad = None

        flat_index = [(pi, ei) for pi, p in enumerate(params)
                      for ei in range(0, p.size, max(1, p.size // 4))]
        picks = rng.choice(len(flat_index), size=min(n_params, len(flat_index)),
                           replace=False)
        def probe(pi: int, ei: int, h: float) -> float:
            flat = params[pi].data.reshape(-1)
            saved = flat[ei]
            flat[ei] = saved + h
            with use_tape(None):
                up = loss_graph().item()
            flat[ei] = saved - h
            with use_tape(None):
                dn = loss_graph().item()
            flat[ei] = saved
            numeric = (up - dn) / (2.0 * h)
            analytic = grads[pi].reshape(-1)[ei]
            return rel_error(np.array([analytic]), np.array([numeric]))

        worst = 0.0
        for pick in picks:
            pi, ei = flat_index[pick]
            err = probe(pi, ei, step)
            if err >= 1e-4:
                # a +-h interval can straddle a relu kink; a genuine backward
                # bug stays wrong as h shrinks, a kink crossing does not
                err = probe(pi, ei, step / 10.0)
            worst = max(worst, err)
    return worst
