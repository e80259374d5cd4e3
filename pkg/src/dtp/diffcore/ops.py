"""Differentiable operations.

Every op computes its forward value with numpy and registers a backward
rule on the active tape. Rules accumulate additively so fan-out works.
Convolution and the pooling/resize family are expressed as dense matrix
products (im2col / interpolation matrices), which keeps them deterministic
for a fixed thread count and fast under BLAS.
"""
from __future__ import annotations

import functools

import numpy as np

from ..errors import ContractError, DimensionError, LabelError
from .tensor import Tensor, record

__all__ = [
    "elementwise", "conv2d", "activation", "spatial_gradient", "norm_loss",
    "pool_and_resize", "cross_entropy", "concat", "pad2d", "crop2d",
    "mean_channels", "absval", "reciprocal", "log", "clipval",
    "slice_batch", "as_tensor",
]

_EW_KINDS = ("add", "sub", "mul")
_ACT_KINDS = ("sigmoid", "relu", "exp")


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(value), dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def elementwise(op_kind: str, a, b) -> Tensor:
    """Elementwise add/sub/mul; ``b`` may broadcast over ``a``'s dims."""
    if op_kind not in _EW_KINDS:
        raise ContractError(f"unknown elementwise kind {op_kind!r}")
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    try:
        bd = np.broadcast_to(b.data, a.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {b.shape} over {a.shape}") from None

    if op_kind == "add":
        out = a.data + bd
    elif op_kind == "sub":
        out = a.data - bd
    else:
        out = a.data * bd

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            if op_kind == "mul":
                a.accumulate_grad(g * bd, owned=True)
            else:
                a.accumulate_grad(g)
        if b.requires_grad:
            if op_kind == "mul":
                gb = g * a.data
            elif op_kind == "sub":
                gb = -g
            else:
                gb = g
            red = _unbroadcast(gb, b.shape)
            b.accumulate_grad(red, owned=red is not g)

    return record((a, b), out, rule)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
            hout: int, wout: int) -> np.ndarray:
    """Patch matrix (B, C*kh*kw, Ho*Wo), laid out for a batched GEMM."""
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, hout, wout), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            ii, jj = i * dilation, j * dilation
            cols[:, :, i, j] = xp[:, :, ii:ii + stride * hout:stride, jj:jj + stride * wout:stride]
    return cols.reshape(b, c * kh * kw, hout * wout)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation of (B,Cin,H,W) with (Cout,Cin,kh,kw) weights."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    bsz, cin, h, wdt = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise DimensionError(f"input has {cin} channels but weight expects {cin_w}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} does not match {cout} output channels")
    ekh = (kh - 1) * dilation + 1
    ekw = (kw - 1) * dilation + 1
    hout = (h + 2 * padding - ekh) // stride + 1
    wout = (wdt + 2 * padding - ekw) // stride + 1
    if hout < 1 or wout < 1:
        raise DimensionError(f"kernel {kh}x{kw} (dilation {dilation}) does not fit input {h}x{wdt}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data

    if stride == 1:
        out, rule = _conv_shift_gemm(x, w, xp, kh, kw, dilation, hout, wout)
    else:
        out, rule = _conv_im2col_gemm(x, w, xp, kh, kw, stride, padding, dilation, hout, wout)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)

    def full_rule(g: np.ndarray) -> None:
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)), owned=True)
        rule(g)

    inputs = (x, w) if bias is None else (x, w, bias)
    return record(inputs, out, full_rule)


def _conv_shift_gemm(x: Tensor, w: Tensor, xp: np.ndarray, kh: int, kw: int,
                     dilation: int, hout: int, wout: int):
    """Stride-1 convolution as a sum of shifted batched GEMMs.

    Works on contiguous flat views of the padded input, so nothing the
    size of a patch matrix is ever materialized; the working set stays
    cache-resident for small nets.
    """
    bsz, cin, hp, wp = xp.shape
    cout = w.shape[0]
    m = hp * wp
    ln = bsz * m - (kh - 1) * dilation * wp - (kw - 1) * dilation
    # channel-major flat layout: every shifted window is one contiguous slice,
    # so each kernel offset is a single large GEMM. Window starts past a
    # sample's valid rows only produce rows that the final crop discards.
    xcm = np.ascontiguousarray(xp.transpose(1, 0, 2, 3)).reshape(cin, bsz * m)
    wflat = np.ascontiguousarray(w.data.transpose(2, 3, 0, 1))
    out_cm = np.zeros((cout, bsz * m), dtype=xp.dtype)
    acc = out_cm[:, :ln]
    scratch = np.empty((cout, ln), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            s = (i * wp + j) * dilation
            np.matmul(wflat[i, j], xcm[:, s:s + ln], out=scratch)
            if i == 0 and j == 0:
                np.copyto(acc, scratch)
            else:
                acc += scratch
    out4 = out_cm.reshape(cout, bsz, hp, wp)[:, :, :hout, :wout]
    out = np.ascontiguousarray(out4.transpose(1, 0, 2, 3))

    def rule(g: np.ndarray) -> None:
        gcm = np.zeros((cout, bsz, hp, wp), dtype=g.dtype)
        gcm[:, :, :hout, :wout] = g.transpose(1, 0, 2, 3)
        gf = gcm.reshape(cout, bsz * m)[:, :ln]
        need_w, need_x = w.requires_grad, x.requires_grad
        gw = np.empty_like(w.data) if need_w else None
        gx_cm = np.zeros((cin, bsz * m), dtype=xp.dtype) if need_x else None
        scratch = np.empty((cin, ln), dtype=xp.dtype) if need_x else None
        for i in range(kh):
            for j in range(kw):
                s = (i * wp + j) * dilation
                if need_w:
                    gw[:, :, i, j] = np.matmul(gf, xcm[:, s:s + ln].T)
                if need_x:
                    np.matmul(wflat[i, j].T, gf, out=scratch)
                    gx_cm[:, s:s + ln] += scratch
        if need_w:
            w.accumulate_grad(gw, owned=True)
        if need_x:
            gx4 = gx_cm.reshape(cin, bsz, hp, wp)
            ph = (hp - x.shape[2]) // 2
            pw = (wp - x.shape[3]) // 2
            if ph or pw:
                gx4 = gx4[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]]
            x.accumulate_grad(np.ascontiguousarray(gx4.transpose(1, 0, 2, 3)), owned=True)

    return out, rule


def _conv_im2col_gemm(x: Tensor, w: Tensor, xp: np.ndarray, kh: int, kw: int,
                      stride: int, padding: int, dilation: int, hout: int, wout: int):
    """Strided convolution via an explicit patch matrix (small at low res)."""
    bsz, cin = xp.shape[:2]
    cout = w.shape[0]
    wmat = w.data.reshape(cout, cin * kh * kw)
    cols = _im2col(xp, kh, kw, stride, dilation, hout, wout)
    out = np.matmul(wmat, cols).reshape(bsz, cout, hout, wout)

    def rule(g: np.ndarray) -> None:
        g3 = g.reshape(bsz, cout, hout * wout)
        if w.requires_grad:
            gw = np.matmul(g3, cols.swapaxes(1, 2)).sum(axis=0)
            w.accumulate_grad(np.ascontiguousarray(gw.reshape(cout, cin, kh, kw)), owned=True)
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g3)
            gv = gcols.reshape(bsz, cin, kh, kw, hout, wout)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    ii, jj = i * dilation, j * dilation
                    gxp[:, :, ii:ii + stride * hout:stride, jj:jj + stride * wout:stride] += gv[:, :, i, j]
            if padding:
                gxp = gxp[:, :, padding:padding + x.shape[2], padding:padding + x.shape[3]]
            x.accumulate_grad(np.ascontiguousarray(gxp), owned=True)

    return out, rule


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(kind: str, x: Tensor) -> Tensor:
    if kind not in _ACT_KINDS:
        raise ContractError(f"unknown activation kind {kind!r}")
    if kind == "sigmoid":
        out = _sigmoid(x.data)

        def rule(g: np.ndarray) -> None:
            x.accumulate_grad(g * out * (1.0 - out), owned=True)
    elif kind == "relu":
        out = np.maximum(x.data, 0)

        def rule(g: np.ndarray) -> None:
            x.accumulate_grad(g * (x.data > 0), owned=True)
    else:
        out = np.exp(x.data)

        def rule(g: np.ndarray) -> None:
            x.accumulate_grad(g * out, owned=True)

    return record((x,), out, rule)


def spatial_gradient(x: Tensor) -> tuple[Tensor, Tensor]:
    """Forward differences along width and height, zero at the trailing edge.

    Returns (d_width, d_height), both with the input's shape.
    """
    if x.ndim != 4:
        raise DimensionError(f"spatial_gradient expects (B,C,H,W), got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    if h < 2 or w < 2:
        raise DimensionError(f"spatial extents must be >= 2, got {h}x{w}")
    xd = x.data
    gw = np.zeros_like(xd)
    gw[:, :, :, :-1] = xd[:, :, :, 1:] - xd[:, :, :, :-1]
    gh = np.zeros_like(xd)
    gh[:, :, :-1, :] = xd[:, :, 1:, :] - xd[:, :, :-1, :]

    def rule_w(g: np.ndarray) -> None:
        gx = np.zeros_like(xd)
        gx[:, :, :, 1:] += g[:, :, :, :-1]
        gx[:, :, :, :-1] -= g[:, :, :, :-1]
        x.accumulate_grad(gx, owned=True)

    def rule_h(g: np.ndarray) -> None:
        gx = np.zeros_like(xd)
        gx[:, :, 1:, :] += g[:, :, :-1, :]
        gx[:, :, :-1, :] -= g[:, :, :-1, :]
        x.accumulate_grad(gx, owned=True)

    return record((x,), gw, rule_w), record((x,), gh, rule_h)


def norm_loss(kind: str, x: Tensor) -> Tensor:
    """Mean absolute value or mean square, as a scalar."""
    if kind not in ("mean_abs", "mean_sq"):
        raise ContractError(f"unknown norm kind {kind!r}")
    if x.size == 0:
        raise DimensionError("norm_loss of an empty tensor")
    n = x.size
    if kind == "mean_abs":
        out = np.abs(x.data).mean(dtype=x.data.dtype)

        def rule(g: np.ndarray) -> None:
            x.accumulate_grad((g / n) * np.sign(x.data), owned=True)
    else:
        out = np.square(x.data).mean(dtype=x.data.dtype)

        def rule(g: np.ndarray) -> None:
            x.accumulate_grad((g * 2.0 / n) * x.data, owned=True)

    return record((x,), np.asarray(out, dtype=x.data.dtype), rule)


@functools.lru_cache(maxsize=256)
def _pool_matrix(n_in: int, n_out: int, dtype_name: str) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=np.dtype(dtype_name))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)  # ceil
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


@functools.lru_cache(maxsize=256)
def _bilinear_matrix(n_in: int, n_out: int, dtype_name: str) -> np.ndarray:
    # align_corners=false convention: src = (dst + 0.5) * n_in/n_out - 0.5
    m = np.zeros((n_out, n_in), dtype=np.dtype(dtype_name))
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    i1 = np.clip(i0 + 1, 0, n_in - 1)
    i0 = np.clip(i0, 0, n_in - 1)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), (1.0 - frac).astype(m.dtype))
    np.add.at(m, (rows, i1), frac.astype(m.dtype))
    return m


def _apply_separable(xd: np.ndarray, my: np.ndarray, mx: np.ndarray) -> np.ndarray:
    # out[b,c,o,p] = sum_{h,w} my[o,h] * x[b,c,h,w] * mx[p,w]
    return np.matmul(my, np.matmul(xd, mx.T))


def pool_and_resize(x: Tensor, mode: str, target_hw: tuple[int, int]) -> Tensor:
    """Adaptive average pooling or bilinear resize to ``target_hw``."""
    if mode not in ("adaptive_avg", "bilinear"):
        raise ContractError(f"unknown pool/resize mode {mode!r}")
    if x.ndim != 4:
        raise DimensionError(f"pool_and_resize expects (B,C,H,W), got {x.shape}")
    th, tw = target_hw
    if th < 1 or tw < 1:
        raise DimensionError(f"target extents must be >= 1, got {target_hw}")
    h, w = x.shape[2], x.shape[3]
    dt = x.data.dtype.name
    build = _pool_matrix if mode == "adaptive_avg" else _bilinear_matrix
    my = build(h, th, dt)
    mx = build(w, tw, dt)
    out = _apply_separable(x.data, my, mx)

    def rule(g: np.ndarray) -> None:
        x.accumulate_grad(_apply_separable(g, my.T, mx.T), owned=True)

    return record((x,), out, rule)


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean pixel cross-entropy of (B,K,H,W) logits against integer labels.

    Pixels whose label equals ``ignore_index`` contribute nothing; if every
    pixel is ignored the loss is 0 with zero gradient.
    """
    if logits.ndim != 4:
        raise DimensionError(f"cross_entropy expects (B,K,H,W) logits, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    k = logits.shape[1]
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= k))
    if np.any(bad):
        raise LabelError(f"labels outside [0,{k}) that are not ignore={ignore_index}: "
                         f"{np.unique(labels[bad]).tolist()}")
    n_valid = int(valid.sum())
    ld = logits.data
    z = ld - ld.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(sez)
    safe = np.where(valid, labels, 0)
    nll = -np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = nll[valid].mean(dtype=ld.dtype) if n_valid else ld.dtype.type(0.0)

    def rule(g: np.ndarray) -> None:
        if not n_valid:
            return
        scale = (g / n_valid) * valid
        grad = (ez / sez) * scale[:, None]
        # subtract the one-hot part without materializing it
        idx_b, idx_h, idx_w = np.nonzero(valid)
        grad[idx_b, safe[idx_b, idx_h, idx_w], idx_h, idx_w] -= scale[idx_b, idx_h, idx_w]
        logits.accumulate_grad(grad, owned=True)

    return record((logits,), np.asarray(loss, dtype=ld.dtype), rule)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def rule(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(lo), int(hi))
                t.accumulate_grad(g[tuple(sl)])

    return record(tensors, out, rule)


def pad2d(x: Tensor, pad_bottom: int, pad_right: int) -> Tensor:
    """Zero-pad the bottom/right spatial edges."""
    if x.ndim != 4:
        raise DimensionError(f"pad2d expects (B,C,H,W), got {x.shape}")
    out = np.pad(x.data, ((0, 0), (0, 0), (0, pad_bottom), (0, pad_right)))
    h, w = x.shape[2], x.shape[3]

    def rule(g: np.ndarray) -> None:
        x.accumulate_grad(g[:, :, :h, :w])

    return record((x,), out, rule)


def crop2d(x: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left height x width window."""
    if x.ndim != 4:
        raise DimensionError(f"crop2d expects (B,C,H,W), got {x.shape}")
    if height > x.shape[2] or width > x.shape[3]:
        raise DimensionError(f"crop {height}x{width} exceeds input {x.shape[2]}x{x.shape[3]}")
    out = np.ascontiguousarray(x.data[:, :, :height, :width])

    def rule(g: np.ndarray) -> None:
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[:, :, :height, :width] += g

    return record((x,), out, rule)


def mean_channels(x: Tensor) -> Tensor:
    """Mean over the channel axis, keeping it as size 1."""
    if x.ndim != 4:
        raise DimensionError(f"mean_channels expects (B,C,H,W), got {x.shape}")
    c = x.shape[1]
    out = x.data.mean(axis=1, keepdims=True, dtype=x.data.dtype)

    def rule(g: np.ndarray) -> None:
        x.accumulate_grad(np.broadcast_to(g / c, x.shape).copy(), owned=True)

    return record((x,), out, rule)


def absval(x: Tensor) -> Tensor:
    out = np.abs(x.data)

    def rule(g: np.ndarray) -> None:
        x.accumulate_grad(g * np.sign(x.data), owned=True)

    return record((x,), out, rule)


def reciprocal(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Elementwise 1/x for inputs bounded away from zero."""
    if np.any(np.abs(x.data) < eps):
        raise ContractError(f"reciprocal needs |x| >= {eps}")
    out = 1.0 / x.data

    def rule(g: np.ndarray) -> None:
        x.accumulate_grad(-g * out * out, owned=True)

    return record((x,), out, rule)


def log(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Elementwise natural log for strictly positive inputs."""
    if np.any(x.data < eps):
        raise ContractError("log needs strictly positive inputs")
    out = np.log(x.data)

    def rule(g: np.ndarray) -> None:
        x.accumulate_grad(g / x.data, owned=True)

    return record((x,), out, rule)


def clipval(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only through the interior."""
    if lo >= hi:
        raise ContractError(f"clip bounds inverted: [{lo}, {hi}]")
    out = np.clip(x.data, lo, hi)

    def rule(g: np.ndarray) -> None:
        inside = (x.data > lo) & (x.data < hi)
        x.accumulate_grad(g * inside, owned=True)

    return record((x,), out, rule)


def slice_batch(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous sub-range of the leading (batch) axis."""
    if not 0 <= start < stop <= x.shape[0]:
        raise DimensionError(f"batch slice [{start},{stop}) invalid for size {x.shape[0]}")
    out = np.ascontiguousarray(x.data[start:stop])

    def rule(g: np.ndarray) -> None:
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[start:stop] += g

    return record((x,), out, rule)
