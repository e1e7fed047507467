"""Differentiable operations recorded on a tape.

Each function takes `TapeNode` inputs, validates extents eagerly (bad
geometry should fail at call time, not deep inside a backward pass),
computes the forward value with numpy, and records a backward rule that
adds the parents' gradient contributions into their buffers.

Convolution is cross-correlation (no kernel flip) over zero-padded
input, lowered to one matrix product per batch via im2col: the column
matrix is built by kH*kW strided slice copies, so there is no
per-output-pixel Python loop.  The column matrix is recomputed in the
backward pass instead of kept alive; that trades a little work for not
holding every layer's lowered input in memory at once.

Output extents follow the floor convention used by stride-2 3x3 blocks:
oH = (H + 2*pH - kH) // sH + 1, and likewise for pooling.  Rows or
columns past the last full window are unused.  Outputs must stay >= 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .autograd import TapeNode
from .tensor import ShapeError, Tensor


def _value(node: TapeNode) -> np.ndarray:
    return node.value.data


def _pair(v, kind: str) -> Tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        v = (int(v), int(v))
    v = (int(v[0]), int(v[1]))
    lo = 1 if kind == "stride" else 0
    if v[0] < lo or v[1] < lo:
        raise ShapeError(f"{kind} must be >= {lo}, got {v}")
    return v


# ---------------------------------------------------------------------------
# arithmetic

def add(a: TapeNode, b: TapeNode) -> TapeNode:
    av, bv = _value(a), _value(b)
    if av.shape == bv.shape:
        out = Tensor._own(av + bv)

        def rule(g):
            if a.requires_grad:
                a.grad += g
            if b.requires_grad:
                b.grad += g
    elif bv.ndim == 1 and av.ndim == 4 and bv.shape[0] == av.shape[1]:
        out = Tensor._own(av + bv.reshape(1, -1, 1, 1))

        def rule(g):
            if a.requires_grad:
                a.grad += g
            if b.requires_grad:
                b.grad += g.sum(axis=(0, 2, 3))
    else:
        raise ShapeError(f"add shapes {av.shape} and {bv.shape} do not line up")
    return a.tape.record(out, (a, b), rule)


def mul(a: TapeNode, b: TapeNode) -> TapeNode:
    av, bv = _value(a), _value(b)
    if av.shape != bv.shape:
        raise ShapeError(f"mul shapes differ: {av.shape} vs {bv.shape}")
    out = Tensor._own(av * bv)

    def rule(g):
        if a.requires_grad:
            a.grad += g * bv
        if b.requires_grad:
            b.grad += g * av
    return a.tape.record(out, (a, b), rule)


def scale(x: TapeNode, factor: float) -> TapeNode:
    v = _value(x)
    c = v.dtype.type(factor)
    out = Tensor._own(v * c)

    def rule(g):
        if x.requires_grad:
            x.grad += g * c
    return x.tape.record(out, (x,), rule)


def tsum(x: TapeNode) -> TapeNode:
    """Sum of all elements, as a scalar node."""
    v = _value(x)
    out = Tensor._own(np.asarray(v.sum()))

    def rule(g):
        if x.requires_grad:
            x.grad += g  # broadcast of the scalar upstream
    return x.tape.record(out, (x,), rule)


def matmul(a: TapeNode, b: TapeNode) -> TapeNode:
    av, bv = _value(a), _value(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul needs (N,K) @ (K,M), got {av.shape} @ {bv.shape}")
    out = Tensor._own(av @ bv)

    def rule(g):
        if a.requires_grad:
            a.grad += g @ bv.T
        if b.requires_grad:
            b.grad += av.T @ g
    return a.tape.record(out, (a, b), rule)


def reshape(x: TapeNode, shape: Sequence[int]) -> TapeNode:
    v = _value(x)
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape)) != v.size:
        raise ShapeError(f"cannot reshape {v.shape} to {shape}")
    out = Tensor._own(v.reshape(shape).copy())

    def rule(g):
        if x.requires_grad:
            x.grad += g.reshape(v.shape)
    return x.tape.record(out, (x,), rule)


def relu(x: TapeNode) -> TapeNode:
    v = _value(x)
    out = Tensor._own(np.maximum(v, 0))

    def rule(g):
        if x.requires_grad:
            x.grad += g * (v > 0)
    return x.tape.record(out, (x,), rule)


def concat_channels(a: TapeNode, b: TapeNode) -> TapeNode:
    """Concatenate along axis 1 (a's channels first); backward splits."""
    av, bv = _value(a), _value(b)
    if av.ndim != bv.ndim or av.ndim not in (2, 4):
        raise ShapeError(f"concat_channels needs matching rank 2 or 4, got {av.shape}, {bv.shape}")
    if av.shape[0] != bv.shape[0] or av.shape[2:] != bv.shape[2:]:
        raise ShapeError(f"non-channel extents differ: {av.shape} vs {bv.shape}")
    ca = av.shape[1]
    out = Tensor._own(np.concatenate([av, bv], axis=1))

    def rule(g):
        if a.requires_grad:
            a.grad += g[:, :ca]
        if b.requires_grad:
            b.grad += g[:, ca:]
    return a.tape.record(out, (a, b), rule)


# ---------------------------------------------------------------------------
# convolution

@dataclass
class Conv2dParams:
    weight: TapeNode                      # (outC, inC, kH, kW)
    bias: Optional[TapeNode] = None       # (outC,)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)


def _conv_geometry(xshape, wshape, stride, padding):
    n, c, h, w = xshape
    oc, ic, kh, kw = wshape
    sh, sw = stride
    ph, pw = padding
    if ic != c:
        raise ShapeError(f"input has {c} channels but kernel expects {ic}")
    hp, wp = h + 2 * ph, w + 2 * pw
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel ({kh},{kw}) exceeds padded input ({hp},{wp})")
    oh = (hp - kh) // sh + 1
    ow = (wp - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"convolution output would be empty: ({oh},{ow})")
    return n, c, oc, kh, kw, sh, sw, ph, pw, oh, ow


def _im2col(xp: np.ndarray, kh, kw, sh, sw, oh, ow) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C*kH*kW, oH*oW) by kernel-position slices."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw]
    return cols.reshape(n, c * kh * kw, oh * ow)


def conv2d(x: TapeNode, p: Conv2dParams) -> TapeNode:
    xv, wv = _value(x), _value(p.weight)
    if xv.ndim != 4 or wv.ndim != 4:
        raise ShapeError(f"conv2d needs rank-4 input and kernel, got {xv.shape}, {wv.shape}")
    stride, padding = _pair(p.stride, "stride"), _pair(p.padding, "padding")
    n, c, oc, kh, kw, sh, sw, ph, pw, oh, ow = _conv_geometry(xv.shape, wv.shape, stride, padding)
    if p.bias is not None and _value(p.bias).shape != (oc,):
        raise ShapeError(f"bias shape {_value(p.bias).shape} != ({oc},)")

    def lower(a):
        ap = np.pad(a, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else a
        return ap, _im2col(ap, kh, kw, sh, sw, oh, ow)

    _, cmat = lower(xv)
    wmat = wv.reshape(oc, c * kh * kw)
    outv = (wmat @ cmat).reshape(n, oc, oh, ow)
    if p.bias is not None:
        outv = outv + _value(p.bias).reshape(1, -1, 1, 1)
    out = Tensor._own(outv)

    def rule(g):
        gmat = g.reshape(n, oc, oh * ow)
        if p.weight.requires_grad:
            _, cols = lower(xv)  # recomputed; see module docstring
            gw = np.tensordot(gmat, cols, axes=([0, 2], [0, 2]))
            p.weight.grad += gw.reshape(wv.shape)
        if p.bias is not None and p.bias.requires_grad:
            p.bias.grad += g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(n, c, kh, kw, oh, ow)
            hp, wp = xv.shape[2] + 2 * ph, xv.shape[3] + 2 * pw
            gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += gcols[:, :, i, j]
            x.grad += gxp[:, :, ph:ph + xv.shape[2], pw:pw + xv.shape[3]]

    parents = (x, p.weight) if p.bias is None else (x, p.weight, p.bias)
    return x.tape.record(out, parents, rule)


# ---------------------------------------------------------------------------
# batch normalization

@dataclass
class BatchNormParams:
    gamma: TapeNode                  # (C,)
    beta: TapeNode                   # (C,)
    running_mean: np.ndarray         # (C,) updated in train mode
    running_var: np.ndarray          # (C,) biased variance
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"


def batchnorm(x: TapeNode, p: BatchNormParams) -> TapeNode:
    """Per-channel normalization over the (N, H, W) axes.

    Train mode normalizes with batch statistics (variance is the biased
    1/M estimate) and folds them into the running buffers as
    running = (1 - momentum) * running + momentum * batch.  Eval mode
    applies the running statistics as fixed constants.
    """
    xv = _value(x)
    if xv.ndim != 4:
        raise ShapeError(f"batchnorm expects (N, C, H, W), got {xv.shape}")
    n, c, h, w = xv.shape
    gv, bv = _value(p.gamma), _value(p.beta)
    if gv.shape != (c,) or bv.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},), got {gv.shape}, {bv.shape}")
    if p.mode not in ("train", "eval"):
        raise ShapeError(f"batchnorm mode must be 'train' or 'eval', got {p.mode!r}")
    m = n * h * w

    def per_c(v):
        return v.reshape(1, c, 1, 1)

    if p.mode == "train":
        if m < 2:
            raise ShapeError("train-mode batchnorm needs at least 2 values per channel")
        mean = xv.mean(axis=(0, 2, 3))
        var = xv.var(axis=(0, 2, 3))  # biased, matches the running buffer
        p.running_mean = ((1.0 - p.momentum) * p.running_mean + p.momentum * mean).astype(xv.dtype)
        p.running_var = ((1.0 - p.momentum) * p.running_var + p.momentum * var).astype(xv.dtype)
    else:
        mean = p.running_mean.astype(xv.dtype)
        var = p.running_var.astype(xv.dtype)

    inv = 1.0 / np.sqrt(var + xv.dtype.type(p.eps))
    xhat = (xv - per_c(mean)) * per_c(inv)
    out = Tensor._own(xhat * per_c(gv) + per_c(bv))

    def rule(g):
        if p.gamma.requires_grad:
            p.gamma.grad += (g * xhat).sum(axis=(0, 2, 3))
        if p.beta.requires_grad:
            p.beta.grad += g.sum(axis=(0, 2, 3))
        if not x.requires_grad:
            return
        gx = g * per_c(gv)
        if p.mode == "eval":
            x.grad += gx * per_c(inv)
            return
        # batch statistics were functions of x
        s1 = gx.sum(axis=(0, 2, 3))
        s2 = (gx * xhat).sum(axis=(0, 2, 3))
        x.grad += (per_c(inv) / m) * (m * gx - per_c(s1) - xhat * per_c(s2))

    return x.tape.record(out, (x, p.gamma, p.beta), rule)


# ---------------------------------------------------------------------------
# pooling

def maxpool2d(x: TapeNode, window, stride) -> TapeNode:
    """Max over sliding windows; ties route gradient to the first
    maximal element in row-major window order."""
    xv = _value(x)
    if xv.ndim != 4:
        raise ShapeError(f"maxpool2d expects (N, C, H, W), got {xv.shape}")
    wh, ww = _pair(window, "window")
    sh, sw = _pair(stride, "stride")
    n, c, h, w = xv.shape
    if wh > h or ww > w:
        raise ShapeError(f"window ({wh},{ww}) exceeds input ({h},{w})")
    oh = (h - wh) // sh + 1
    ow = (w - ww) // sw + 1

    sn, sc, sh_b, sw_b = xv.strides
    win = np.lib.stride_tricks.as_strided(
        xv, (n, c, oh, ow, wh, ww),
        (sn, sc, sh_b * sh, sw_b * sw, sh_b, sw_b), writeable=False)
    flat = win.reshape(n, c, oh, ow, wh * ww)
    idx = flat.argmax(axis=-1)  # first max wins on ties
    outv = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out = Tensor._own(outv.copy())

    def rule(g):
        if not x.requires_grad:
            return
        nn, cc, oi, oj = np.indices((n, c, oh, ow), sparse=True)
        hi = oi * sh + idx // ww
        wi = oj * sw + idx % ww
        gx = np.zeros_like(xv)
        np.add.at(gx, (np.broadcast_to(nn, idx.shape), np.broadcast_to(cc, idx.shape), hi, wi), g)
        x.grad += gx

    return x.tape.record(out, (x,), rule)


def global_avgpool(x: TapeNode) -> TapeNode:
    """(N, C, H, W) -> (N, C): mean over W, then over H."""
    xv = _value(x)
    if xv.ndim != 4:
        raise ShapeError(f"global_avgpool expects (N, C, H, W), got {xv.shape}")
    n, c, h, w = xv.shape
    out = Tensor._own(xv.mean(axis=3).mean(axis=2))

    def rule(g):
        if x.requires_grad:
            x.grad += (g / (h * w))[:, :, None, None]

    return x.tape.record(out, (x,), rule)


# ---------------------------------------------------------------------------
# fully connected

def linear(x: TapeNode, weight: TapeNode, bias: Optional[TapeNode] = None) -> TapeNode:
    xv, wv = _value(x), _value(weight)
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise ShapeError(f"linear needs (N,D) @ (D,M), got {xv.shape} @ {wv.shape}")
    outv = xv @ wv
    if bias is not None:
        bv = _value(bias)
        if bv.shape != (wv.shape[1],):
            raise ShapeError(f"bias shape {bv.shape} != ({wv.shape[1]},)")
        outv = outv + bv
    out = Tensor._own(outv)

    def rule(g):
        if x.requires_grad:
            x.grad += g @ wv.T
        if weight.requires_grad:
            weight.grad += xv.T @ g
        if bias is not None and bias.requires_grad:
            bias.grad += g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return x.tape.record(out, parents, rule)


# ---------------------------------------------------------------------------
# loss

def softmax_cross_entropy(logits: TapeNode, labels: np.ndarray):
    """Mean cross entropy over the batch.

    Returns (loss_node, probs); probs is the (N, C) softmax matrix as a
    plain array.  Shift-invariant: the row max is subtracted before
    exponentiation, so translated logits give identical probabilities.
    """
    zv = _value(logits)
    if zv.ndim != 2:
        raise ShapeError(f"logits must be (N, C), got {zv.shape}")
    n, c = zv.shape
    labels = np.asarray(labels)
    if labels.shape != (n,) or not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError(f"labels must be {n} integers, got {labels.shape} {labels.dtype}")
    if labels.min() < 0 or labels.max() >= c:
        raise ShapeError(f"labels must lie in [0, {c})")

    zmax = zv.max(axis=1, keepdims=True)
    ez = np.exp(zv - zmax)
    denom = ez.sum(axis=1, keepdims=True)
    probs = ez / denom
    # loss via logsumexp keeps full precision for well-separated logits
    logsumexp = np.log(denom[:, 0]) + zmax[:, 0]
    loss_val = (logsumexp - zv[np.arange(n), labels]).mean()
    out = Tensor._own(np.asarray(loss_val, dtype=zv.dtype))

    onehot_scale = 1.0 / n

    def rule(g):
        if logits.requires_grad:
            d = probs.copy()
            d[np.arange(n), labels] -= 1.0
            logits.grad += (float(g.reshape(())) * onehot_scale) * d

    node = logits.tape.record(out, (logits,), rule)
    return node, probs
