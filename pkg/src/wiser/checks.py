"""Finite-difference audit suites for the CLI's gradcheck command.

Three scopes, all in double precision with h = 1e-5:

* ops: every differentiable operation on small random shapes, the
  gradient of every input element checked exhaustively (tolerance 1e-6)
* blocks: the architectural sub-graphs (residual blocks with and
  without projection, the slice branch, the fused head), exhaustive
  on their inputs (tolerance 1e-5)
* model: a toy end-to-end forward incl. the loss, probing a seeded
  subset of every parameter tensor (tolerance 1e-4)

Non-scalar outputs are reduced with a fixed random weighting, so every
output element influences the probed loss.  ReLU inputs are pushed away
from the kink and pooling inputs are made tie-free; a finite-difference
probe straddling a non-differentiable point would report a false alarm.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from . import ops
from .autograd import GradCheckResult, Tape, grad_check
from .model import SliceSpec, WiserModel, WiserModelSpec, residual_block, slice_conv, slice_pool
from .rng import Stream
from .tensor import Tensor

OPS_TOLERANCE = 1e-6
BLOCKS_TOLERANCE = 1e-5
MODEL_TOLERANCE = 1e-4

FD_STEP = 1e-5


@dataclass
class CheckCase:
    name: str
    scope: str
    tolerance: float
    result: GradCheckResult

    @property
    def passed(self) -> bool:
        return self.result.max_rel_err < self.tolerance


def _dbl(stream: Stream, shape, spread=1.0) -> Tensor:
    vals = stream.normal(int(np.prod(shape))).reshape(shape) * spread
    return Tensor(vals, precision="double")


def _kink_free(stream: Stream, shape, margin=0.05) -> Tensor:
    """Gaussian values pushed at least `margin` away from zero."""
    vals = stream.normal(int(np.prod(shape))).reshape(shape)
    vals = vals + np.sign(vals) * margin
    vals[vals == 0] = margin
    return Tensor(vals, precision="double")


def _tie_free(stream: Stream, shape) -> Tensor:
    """All-distinct values with gaps far exceeding the FD step."""
    n = int(np.prod(shape))
    vals = stream.permutation(n).astype(np.float64) * 0.01
    return Tensor(vals.reshape(shape), precision="double")


def _weighted(tape: Tape, node, weights: np.ndarray):
    r = tape.leaf(Tensor(weights, precision="double"))
    return ops.tsum(ops.mul(node, r))


def _run(name, scope, tol, build, params, max_elements=None) -> CheckCase:
    res = grad_check(build, params, h=FD_STEP, max_elements=max_elements)
    return CheckCase(name=name, scope=scope, tolerance=tol, result=res)


# ---------------------------------------------------------------------------
# ops scope

def ops_suite(seed: int = 0) -> List[CheckCase]:
    s = Stream(seed)
    cases: List[CheckCase] = []

    def wcase(name, build, params):
        cases.append(_run(name, "ops", OPS_TOLERANCE, build, params))

    # add, same shapes
    r = s.spawn("add").normal(24).reshape(2, 3, 2, 2)
    wcase("add", lambda t, v: _weighted(
        t, ops.add(t.leaf(v["a"], True, "a"), t.leaf(v["b"], True, "b")), r),
        {"a": _dbl(s.spawn("add.a"), (2, 3, 2, 2)), "b": _dbl(s.spawn("add.b"), (2, 3, 2, 2))})

    # add, per-channel vector
    r2 = s.spawn("addc").normal(24).reshape(2, 3, 2, 2)
    wcase("add_channel_vector", lambda t, v: _weighted(
        t, ops.add(t.leaf(v["a"], True, "a"), t.leaf(v["b"], True, "b")), r2),
        {"a": _dbl(s.spawn("addc.a"), (2, 3, 2, 2)), "b": _dbl(s.spawn("addc.b"), (3,))})

    r3 = s.spawn("mul").normal(12).reshape(3, 4)
    wcase("mul", lambda t, v: _weighted(
        t, ops.mul(t.leaf(v["a"], True, "a"), t.leaf(v["b"], True, "b")), r3),
        {"a": _dbl(s.spawn("mul.a"), (3, 4)), "b": _dbl(s.spawn("mul.b"), (3, 4))})

    r4 = s.spawn("matmul").normal(10).reshape(2, 5)
    wcase("matmul", lambda t, v: _weighted(
        t, ops.matmul(t.leaf(v["a"], True, "a"), t.leaf(v["b"], True, "b")), r4),
        {"a": _dbl(s.spawn("matmul.a"), (2, 3)), "b": _dbl(s.spawn("matmul.b"), (3, 5))})

    r5 = s.spawn("reshape").normal(24).reshape(4, 6)
    wcase("reshape", lambda t, v: _weighted(
        t, ops.reshape(t.leaf(v["x"], True, "x"), (4, 6)), r5),
        {"x": _dbl(s.spawn("reshape.x"), (2, 3, 2, 2))})

    r6 = s.spawn("concat").normal(2 * 5 * 2 * 2).reshape(2, 5, 2, 2)
    wcase("concat_channels", lambda t, v: _weighted(
        t, ops.concat_channels(t.leaf(v["a"], True, "a"), t.leaf(v["b"], True, "b")), r6),
        {"a": _dbl(s.spawn("concat.a"), (2, 2, 2, 2)), "b": _dbl(s.spawn("concat.b"), (2, 3, 2, 2))})

    r7 = s.spawn("relu").normal(18).reshape(3, 6)
    wcase("relu", lambda t, v: _weighted(
        t, ops.relu(t.leaf(v["x"], True, "x")), r7),
        {"x": _kink_free(s.spawn("relu.x"), (3, 6))})

    wcase("sum", lambda t, v: ops.tsum(t.leaf(v["x"], True, "x")),
          {"x": _dbl(s.spawn("sum.x"), (2, 3, 4))})

    # convolutions: plain, strided+padded, full-width slice kernel, biased
    conv_geoms = [
        ("conv2d_plain", (1, 2, 6, 6), (3, 2, 3, 3), (1, 1), (0, 0), False),
        ("conv2d_strided", (2, 3, 7, 8), (4, 3, 3, 3), (2, 2), (1, 1), True),
        ("conv2d_asym", (1, 2, 8, 5), (2, 2, 3, 2), (2, 1), (1, 2), False),
        ("conv2d_full_width", (2, 3, 9, 7), (4, 3, 4, 7), (1, 1), (0, 0), True),
    ]
    for name, xs, ws, stride, pad, bias in conv_geoms:
        oc = ws[0]
        hp = xs[2] + 2 * pad[0]
        wp = xs[3] + 2 * pad[1]
        oh = (hp - ws[2]) // stride[0] + 1
        ow = (wp - ws[3]) // stride[1] + 1
        rw = s.spawn(name).normal(xs[0] * oc * oh * ow).reshape(xs[0], oc, oh, ow)
        params = {"x": _dbl(s.spawn(name + ".x"), xs),
                  "w": _dbl(s.spawn(name + ".w"), ws, spread=0.5)}
        if bias:
            params["b"] = _dbl(s.spawn(name + ".b"), (oc,))

        def build(t, v, stride=stride, pad=pad, rw=rw, bias=bias):
            p = ops.Conv2dParams(
                weight=t.leaf(v["w"], True, "w"),
                bias=t.leaf(v["b"], True, "b") if bias else None,
                stride=stride, padding=pad)
            return _weighted(t, ops.conv2d(t.leaf(v["x"], True, "x"), p), rw)

        wcase(name, build, params)

    # batchnorm, both modes
    for mode in ("train", "eval"):
        name = f"batchnorm_{mode}"
        rb = s.spawn(name).normal(2 * 3 * 4 * 4).reshape(2, 3, 4, 4)
        rm = s.spawn(name + ".rm").normal(3) * 0.2
        rv = np.abs(s.spawn(name + ".rv").normal(3)) + 0.5

        def build(t, v, mode=mode, rb=rb, rm=rm, rv=rv):
            p = ops.BatchNormParams(
                gamma=t.leaf(v["gamma"], True, "gamma"),
                beta=t.leaf(v["beta"], True, "beta"),
                running_mean=rm.copy(), running_var=rv.copy(), mode=mode)
            return _weighted(t, ops.batchnorm(t.leaf(v["x"], True, "x"), p), rb)

        wcase(name, build, {
            "x": _dbl(s.spawn(name + ".x"), (2, 3, 4, 4)),
            "gamma": _dbl(s.spawn(name + ".g"), (3,), spread=0.5),
            "beta": _dbl(s.spawn(name + ".b"), (3,), spread=0.5)})

    r8 = s.spawn("maxpool").normal(1 * 2 * 3 * 3).reshape(1, 2, 3, 3)
    wcase("maxpool2d", lambda t, v: _weighted(
        t, ops.maxpool2d(t.leaf(v["x"], True, "x"), (2, 2), (2, 2)), r8),
        {"x": _tie_free(s.spawn("maxpool.x"), (1, 2, 7, 7))})

    r9 = s.spawn("gap").normal(6).reshape(2, 3)
    wcase("global_avgpool", lambda t, v: _weighted(
        t, ops.global_avgpool(t.leaf(v["x"], True, "x")), r9),
        {"x": _dbl(s.spawn("gap.x"), (2, 3, 4, 5))})

    r10 = s.spawn("linear").normal(8).reshape(2, 4)
    wcase("linear", lambda t, v: _weighted(
        t, ops.linear(t.leaf(v["x"], True, "x"), t.leaf(v["w"], True, "w"),
                      t.leaf(v["b"], True, "b")), r10),
        {"x": _dbl(s.spawn("linear.x"), (2, 3)),
         "w": _dbl(s.spawn("linear.w"), (3, 4)),
         "b": _dbl(s.spawn("linear.b"), (4,))})

    labels = np.array([1, 4, 0], dtype=np.int64)
    wcase("softmax_cross_entropy", lambda t, v: ops.softmax_cross_entropy(
        t.leaf(v["z"], True, "z"), labels)[0],
        {"z": _dbl(s.spawn("xent.z"), (3, 5))})

    return cases


# ---------------------------------------------------------------------------
# blocks scope

def _bn_params(t: Tape, v, prefix: str, c: int, mode="train"):
    return ops.BatchNormParams(
        gamma=t.leaf(v[f"{prefix}.gamma"], True, f"{prefix}.gamma"),
        beta=t.leaf(v[f"{prefix}.beta"], True, f"{prefix}.beta"),
        running_mean=np.zeros(c), running_var=np.ones(c), mode=mode)


def blocks_suite(seed: int = 0) -> List[CheckCase]:
    s = Stream(seed)
    cases: List[CheckCase] = []

    # identity-path block: in == out, stride 1
    cin, cout, hw = 3, 3, 6
    name = "residual_block_identity"
    r = s.spawn(name).normal(2 * cout * hw * hw).reshape(2, cout, hw, hw)

    def build_ident(t, v):
        bn1 = _bn_params(t, v, "bn1", cin)
        bn2 = _bn_params(t, v, "bn2", cout)
        c1 = ops.Conv2dParams(t.leaf(v["w1"], True, "w1"), stride=(1, 1), padding=(1, 1))
        c2 = ops.Conv2dParams(t.leaf(v["w2"], True, "w2"), stride=(1, 1), padding=(1, 1))
        out = residual_block(t.leaf(v["x"], True, "x"), bn1, c1, bn2, c2, None)
        return _weighted(t, out, r)

    cases.append(_run(name, "blocks", BLOCKS_TOLERANCE, build_ident, {
        "x": _dbl(s.spawn(name + ".x"), (2, cin, hw, hw)),
        "bn1.gamma": _dbl(s.spawn(name + ".g1"), (cin,), 0.5),
        "bn1.beta": _dbl(s.spawn(name + ".b1"), (cin,), 0.5),
        "w1": _dbl(s.spawn(name + ".w1"), (cout, cin, 3, 3), 0.4),
        "bn2.gamma": _dbl(s.spawn(name + ".g2"), (cout,), 0.5),
        "bn2.beta": _dbl(s.spawn(name + ".b2"), (cout,), 0.5),
        "w2": _dbl(s.spawn(name + ".w2"), (cout, cout, 3, 3), 0.4)}))

    # projection block: channel growth + stride 2
    cin2, cout2, hw2 = 2, 4, 8
    name = "residual_block_projection"
    oh = (hw2 - 1) // 2 + 1
    r2 = s.spawn(name).normal(1 * cout2 * oh * oh).reshape(1, cout2, oh, oh)

    def build_proj(t, v):
        bn1 = _bn_params(t, v, "bn1", cin2)
        bn2 = _bn_params(t, v, "bn2", cout2)
        c1 = ops.Conv2dParams(t.leaf(v["w1"], True, "w1"), stride=(2, 2), padding=(1, 1))
        c2 = ops.Conv2dParams(t.leaf(v["w2"], True, "w2"), stride=(1, 1), padding=(1, 1))
        pr = ops.Conv2dParams(t.leaf(v["wp"], True, "wp"), stride=(2, 2), padding=(0, 0))
        out = residual_block(t.leaf(v["x"], True, "x"), bn1, c1, bn2, c2, pr)
        return _weighted(t, out, r2)

    cases.append(_run(name, "blocks", BLOCKS_TOLERANCE, build_proj, {
        "x": _dbl(s.spawn(name + ".x"), (1, cin2, hw2, hw2)),
        "bn1.gamma": _dbl(s.spawn(name + ".g1"), (cin2,), 0.5),
        "bn1.beta": _dbl(s.spawn(name + ".b1"), (cin2,), 0.5),
        "w1": _dbl(s.spawn(name + ".w1"), (cout2, cin2, 3, 3), 0.4),
        "bn2.gamma": _dbl(s.spawn(name + ".g2"), (cout2,), 0.5),
        "bn2.beta": _dbl(s.spawn(name + ".b2"), (cout2,), 0.5),
        "w2": _dbl(s.spawn(name + ".w2"), (cout2, cout2, 3, 3), 0.4),
        "wp": _dbl(s.spawn(name + ".wp"), (cout2, cin2, 1, 1), 0.6)}))

    # slice branch: full-width conv + BN/ReLU + tall pooling + flatten
    name = "slice_branch"
    f, kh, h, w = 3, 4, 12, 9
    hp = h - kh + 1  # 9
    wh, sh = 3, 2
    hpp = (hp - wh) // sh + 1
    r3 = s.spawn(name).normal(2 * f * hpp).reshape(2, f * hpp)

    def build_slice(t, v):
        conv = ops.Conv2dParams(t.leaf(v["w"], True, "w"), stride=(1, 1), padding=(0, 0))
        bn = _bn_params(t, v, "bn", f)
        out = slice_conv(t.leaf(v["x"], True, "x"), conv, bn)
        out = slice_pool(out, wh, sh)
        out = ops.reshape(out, (2, f * hpp))
        return _weighted(t, out, r3)

    cases.append(_run(name, "blocks", BLOCKS_TOLERANCE, build_slice, {
        "x": _dbl(s.spawn(name + ".x"), (2, 3, h, w)),
        "w": _dbl(s.spawn(name + ".w"), (f, 3, kh, w), 0.3),
        "bn.gamma": _dbl(s.spawn(name + ".g"), (f,), 0.5),
        "bn.beta": _dbl(s.spawn(name + ".b"), (f,), 0.5)}))

    # fused head: concat two feature blocks, two fc layers, loss
    name = "fused_head"
    labels = np.array([2, 0], dtype=np.int64)

    def build_head(t, v):
        fa = t.leaf(v["fa"], True, "fa")
        fb = t.leaf(v["fb"], True, "fb")
        fused = ops.concat_channels(fa, fb)
        hdn = ops.relu(ops.linear(fused, t.leaf(v["w1"], True, "w1"),
                                  t.leaf(v["b1"], True, "b1")))
        logits = ops.linear(hdn, t.leaf(v["w2"], True, "w2"), t.leaf(v["b2"], True, "b2"))
        return ops.softmax_cross_entropy(logits, labels)[0]

    cases.append(_run(name, "blocks", BLOCKS_TOLERANCE, build_head, {
        "fa": _dbl(s.spawn(name + ".fa"), (2, 4)),
        "fb": _dbl(s.spawn(name + ".fb"), (2, 3)),
        "w1": _dbl(s.spawn(name + ".w1"), (7, 6), 0.4),
        "b1": _dbl(s.spawn(name + ".b1"), (6,), 0.2),
        "w2": _dbl(s.spawn(name + ".w2"), (6, 4), 0.4),
        "b2": _dbl(s.spawn(name + ".b2"), (4,), 0.2)}))

    return cases


# ---------------------------------------------------------------------------
# model scope

def toy_model_spec() -> WiserModelSpec:
    return WiserModelSpec(
        input_size=(16, 16), num_classes=5, widen_factor=1, blocks_per_stage=1,
        slice_spec=SliceSpec(kernel_height=5, feature_maps=4), fc_hidden=32, mode="full")


def model_suite(seed: int = 0, max_elements: int = 4) -> List[CheckCase]:
    model = WiserModel(toy_model_spec(), seed=seed, precision="double")
    s = Stream(seed)
    x = Tensor(s.spawn("model.x").normal(1 * 3 * 16 * 16).reshape(1, 3, 16, 16),
               precision="double")
    labels = np.array([3], dtype=np.int64)

    def build(t, v):
        model.params = dict(v)
        logits = model.forward(t, x, training=True)
        return ops.softmax_cross_entropy(logits, labels)[0]

    case = _run("toy_full_model", "model", MODEL_TOLERANCE, build,
                dict(model.params), max_elements=max_elements)
    return [case]


def run_scope(scope: str, seed: int = 0) -> List[CheckCase]:
    if scope == "ops":
        return ops_suite(seed)
    if scope == "blocks":
        return blocks_suite(seed)
    if scope == "model":
        return model_suite(seed)
    raise ValueError(f"unknown gradcheck scope {scope!r}")
