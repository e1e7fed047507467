"""The two-branch image classifier.

Branch one is a wide residual network: a 3x3 stem to 16 channels, then
three stages of pre-activation blocks at widths (16k, 32k, 64k) for
widen factor k, the first block of stages two and three downsampling by
stride 2, closed by BN -> ReLU -> global average pooling into a 64k
feature vector.  Each block computes x + F(x) where F is
BN -> ReLU -> Conv3x3(stride) -> BN -> ReLU -> Conv3x3;
when the block changes channel count or stride, the skip path applies a
1x1 strided projection to the raw block input so the sum lines up.
Convolutions carry no bias (a BN immediately follows each one).

Branch two is a "slice" convolution: kernels span the full input width
(kernel (F, 3, kh, W), valid padding), so each output row summarizes one
horizontal band of the image; output width is exactly 1.  After BN ->
ReLU, max pooling over vertically elongated windows ((wh, 1) window,
(sh, 1) stride) keeps band responses tolerant to small vertical shifts;
the pooled maps flatten to F * H'' features.

The fused vector (residual features first, then slice features,
according to the active mode) feeds two fully connected layers with a
ReLU between; the second emits the class logits.

Modes: "full" uses both branches, "residual_only" / "slice_only" use
one.  All parameters exist in every mode; an inactive branch is simply
never evaluated, which keeps checkpoints layout-compatible across modes
of the same geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, Optional

import numpy as np

from . import ops
from .autograd import Tape, TapeNode
from .rng import Stream
from .tensor import ShapeError, Tensor

MODES = ("full", "residual_only", "slice_only")

STEM_CHANNELS = 16


@dataclass(frozen=True)
class SliceSpec:
    kernel_height: int = 5
    feature_maps: int = 32
    pool_window_height: int = 0  # 0 = ceil(H'/4)
    pool_stride_height: int = 0  # 0 = ceil(H'/8)


@dataclass(frozen=True)
class WiserModelSpec:
    input_size: tuple = (64, 64)
    num_classes: int = 10
    widen_factor: int = 4
    blocks_per_stage: int = 2
    stage_base_widths: tuple = (16, 32, 64)
    slice_spec: SliceSpec = field(default_factory=SliceSpec)
    fc_hidden: int = 512
    mode: str = "full"

    def validate(self):
        h, w = self.input_size
        if h < 1 or w < 1:
            raise ShapeError(f"input size must be positive, got {self.input_size}")
        if self.num_classes < 2:
            raise ShapeError("need at least 2 classes")
        if self.widen_factor < 1 or self.blocks_per_stage < 1 or self.fc_hidden < 1:
            raise ShapeError("widen_factor, blocks_per_stage, fc_hidden must be >= 1")
        if len(self.stage_base_widths) != 3:
            raise ShapeError("expected exactly 3 stages")
        if self.mode not in MODES:
            raise ShapeError(f"mode must be one of {MODES}, got {self.mode!r}")
        s = self.slice_spec
        if s.kernel_height < 1 or s.feature_maps < 1:
            raise ShapeError("slice kernel_height and feature_maps must be >= 1")
        if s.kernel_height > h:
            raise ShapeError(f"slice kernel height {s.kernel_height} exceeds input height {h}")
        wh, sh = self.slice_pool_geometry()
        hp = self.slice_conv_height()
        if wh > hp:
            raise ShapeError(f"slice pool window {wh} exceeds slice column height {hp}")

    # -- derived geometry ---------------------------------------------------

    def stage_widths(self) -> tuple:
        return tuple(wd * self.widen_factor for wd in self.stage_base_widths)

    def residual_feature_len(self) -> int:
        return self.stage_widths()[-1]

    def slice_conv_height(self) -> int:
        return self.input_size[0] - self.slice_spec.kernel_height + 1

    def slice_pool_geometry(self) -> tuple:
        hp = self.slice_conv_height()
        wh = self.slice_spec.pool_window_height or math.ceil(hp / 4)
        sh = self.slice_spec.pool_stride_height or math.ceil(hp / 8)
        return wh, sh

    def slice_pooled_height(self) -> int:
        hp = self.slice_conv_height()
        wh, sh = self.slice_pool_geometry()
        return (hp - wh) // sh + 1

    def slice_feature_len(self) -> int:
        return self.slice_spec.feature_maps * self.slice_pooled_height()

    def fused_feature_len(self) -> int:
        if self.mode == "residual_only":
            return self.residual_feature_len()
        if self.mode == "slice_only":
            return self.slice_feature_len()
        return self.residual_feature_len() + self.slice_feature_len()

    def resolved(self) -> "WiserModelSpec":
        """Same spec with the slice pool geometry made explicit."""
        wh, sh = self.slice_pool_geometry()
        return replace(self, slice_spec=replace(
            self.slice_spec, pool_window_height=wh, pool_stride_height=sh))


@dataclass(frozen=True)
class ResidualBlockSpec:
    in_channels: int
    out_channels: int
    stride: int = 1

    @property
    def needs_projection(self) -> bool:
        return self.in_channels != self.out_channels or self.stride != 1


def block_specs(spec: WiserModelSpec):
    """(stage_index, block_index, ResidualBlockSpec) triples in order."""
    out = []
    in_c = STEM_CHANNELS
    for s, width in enumerate(spec.stage_widths()):
        for b in range(spec.blocks_per_stage):
            stride = 2 if (s > 0 and b == 0) else 1
            out.append((s, b, ResidualBlockSpec(in_c, width, stride)))
            in_c = width
    return out


# ---------------------------------------------------------------------------
# parameter bookkeeping

def param_shapes(spec: WiserModelSpec) -> Dict[str, tuple]:
    """Name -> shape for every trainable parameter, in layer order.

    This single map drives initialization, counting, the optimizer, and
    checkpoint layout.
    """
    spec.validate()
    h, w = spec.input_size
    shapes: Dict[str, tuple] = {}
    shapes["residual.stem.weight"] = (STEM_CHANNELS, 3, 3, 3)
    for s, b, bs in block_specs(spec):
        p = f"residual.stage{s + 1}.block{b + 1}"
        shapes[f"{p}.bn1.gamma"] = (bs.in_channels,)
        shapes[f"{p}.bn1.beta"] = (bs.in_channels,)
        shapes[f"{p}.conv1.weight"] = (bs.out_channels, bs.in_channels, 3, 3)
        shapes[f"{p}.bn2.gamma"] = (bs.out_channels,)
        shapes[f"{p}.bn2.beta"] = (bs.out_channels,)
        shapes[f"{p}.conv2.weight"] = (bs.out_channels, bs.out_channels, 3, 3)
        if bs.needs_projection:
            shapes[f"{p}.proj.weight"] = (bs.out_channels, bs.in_channels, 1, 1)
    top = spec.residual_feature_len()
    shapes["residual.head_bn.gamma"] = (top,)
    shapes["residual.head_bn.beta"] = (top,)
    ss = spec.slice_spec
    shapes["slice.conv.weight"] = (ss.feature_maps, 3, ss.kernel_height, w)
    shapes["slice.bn.gamma"] = (ss.feature_maps,)
    shapes["slice.bn.beta"] = (ss.feature_maps,)
    shapes["head.fc1.weight"] = (spec.fused_feature_len(), spec.fc_hidden)
    shapes["head.fc1.bias"] = (spec.fc_hidden,)
    shapes["head.fc2.weight"] = (spec.fc_hidden, spec.num_classes)
    shapes["head.fc2.bias"] = (spec.num_classes,)
    return shapes


def buffer_shapes(spec: WiserModelSpec) -> Dict[str, tuple]:
    shapes: Dict[str, tuple] = {}
    for s, b, bs in block_specs(spec):
        p = f"residual.stage{s + 1}.block{b + 1}"
        for i, c in ((1, bs.in_channels), (2, bs.out_channels)):
            shapes[f"{p}.bn{i}.running_mean"] = (c,)
            shapes[f"{p}.bn{i}.running_var"] = (c,)
    top = spec.residual_feature_len()
    shapes["residual.head_bn.running_mean"] = (top,)
    shapes["residual.head_bn.running_var"] = (top,)
    shapes["slice.bn.running_mean"] = (spec.slice_spec.feature_maps,)
    shapes["slice.bn.running_var"] = (spec.slice_spec.feature_maps,)
    shapes["input_norm.mean"] = (3,)
    shapes["input_norm.std"] = (3,)
    return shapes


def parameter_count(spec: WiserModelSpec) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(spec).values())


def _init_one(name: str, shape: tuple, stream: Stream, dtype) -> np.ndarray:
    if name.endswith(".gamma") or name == "input_norm.std":
        return np.ones(shape, dtype=dtype)
    if name.endswith((".beta", ".bias")) or name == "input_norm.mean":
        return np.zeros(shape, dtype=dtype)
    if name.endswith("running_var"):
        return np.ones(shape, dtype=dtype)
    if name.endswith("running_mean"):
        return np.zeros(shape, dtype=dtype)
    # conv / linear weight: fan-in scaled gaussian
    if len(shape) == 4:
        fan_in = shape[1] * shape[2] * shape[3]
    else:
        fan_in = shape[0]
    std = math.sqrt(2.0 / fan_in)
    vals = stream.spawn("init", name).normal(int(np.prod(shape)))
    return (vals * std).reshape(shape).astype(dtype)


# ---------------------------------------------------------------------------
# reusable sub-graphs

def residual_block(x: TapeNode,
                   bn1: ops.BatchNormParams, conv1: ops.Conv2dParams,
                   bn2: ops.BatchNormParams, conv2: ops.Conv2dParams,
                   proj: Optional[ops.Conv2dParams] = None) -> TapeNode:
    """x + F(x) with F = BN/ReLU/Conv3x3(stride) -> BN/ReLU/Conv3x3.

    The projection, when given, is applied to the raw x (not the
    pre-activated value) so the skip path stays parameter-free whenever
    geometry allows an identity.
    """
    h = ops.relu(ops.batchnorm(x, bn1))
    h = ops.conv2d(h, conv1)
    h = ops.relu(ops.batchnorm(h, bn2))
    h = ops.conv2d(h, conv2)
    shortcut = x if proj is None else ops.conv2d(x, proj)
    return ops.add(shortcut, h)


def slice_conv(x: TapeNode, conv: ops.Conv2dParams, bn: ops.BatchNormParams) -> TapeNode:
    """Full-width valid convolution, then BN -> ReLU.

    The kernel width must equal the input width, which collapses the
    output to a single column: shape (N, F, H - kh + 1, 1).
    """
    wv = conv.weight.value
    if wv.shape[3] != x.value.shape[3]:
        raise ShapeError(
            f"slice kernels span the full input width: kernel width "
            f"{wv.shape[3]} != input width {x.value.shape[3]}")
    if conv.stride != (1, 1) or conv.padding != (0, 0):
        raise ShapeError("slice convolution is unstrided and unpadded")
    return ops.relu(ops.batchnorm(ops.conv2d(x, conv), bn))


def slice_pool(x: TapeNode, window_height: int, stride_height: int) -> TapeNode:
    """Max pooling over vertically elongated (wh, 1) windows."""
    return ops.maxpool2d(x, (window_height, 1), (stride_height, 1))


# ---------------------------------------------------------------------------
# the model

class WiserModel:
    """Holds parameters and buffers; `forward` records onto a caller tape."""

    def __init__(self, spec: WiserModelSpec, seed: int = 0, precision: str = "single"):
        spec.validate()
        self.spec = spec
        self.precision = precision
        dtype = np.float32 if precision == "single" else np.float64
        stream = Stream(seed)
        self.params: Dict[str, Tensor] = {
            name: Tensor._own(_init_one(name, shape, stream, dtype))
            for name, shape in param_shapes(spec).items()}
        self.buffers: Dict[str, np.ndarray] = {
            name: _init_one(name, shape, stream, dtype)
            for name, shape in buffer_shapes(spec).items()}

    @classmethod
    def from_state(cls, spec: WiserModelSpec, params: Dict[str, Tensor],
                   buffers: Dict[str, np.ndarray], precision: str = "single"):
        model = cls(spec, seed=0, precision=precision)
        for name in model.params:
            if name not in params:
                raise ShapeError(f"missing parameter {name!r}")
            if params[name].shape != model.params[name].shape:
                raise ShapeError(f"parameter {name!r} has shape {params[name].shape}, "
                                 f"expected {model.params[name].shape}")
        for name in model.buffers:
            if name not in buffers:
                raise ShapeError(f"missing buffer {name!r}")
        model.params = dict(params)
        model.buffers = {k: np.array(v) for k, v in buffers.items()}
        return model

    def parameter_count(self) -> int:
        return parameter_count(self.spec)

    # -- forward ------------------------------------------------------------

    def forward(self, tape: Tape, x, training: bool, trace: Optional[dict] = None) -> TapeNode:
        """Record the forward graph for a batch; returns the logits node."""
        if not isinstance(x, TapeNode):
            x = tape.leaf(x if isinstance(x, Tensor) else Tensor(x))
        h, w = self.spec.input_size
        if x.value.data.ndim != 4 or x.value.shape[1] != 3 or x.value.shape[2:] != (h, w):
            raise ShapeError(f"expected input (N, 3, {h}, {w}), got {x.value.shape}")
        if x.value.precision != self.precision:
            raise ShapeError(f"input precision {x.value.precision} != model {self.precision}")

        leaves = {name: tape.leaf(t, requires_grad=True, name=name)
                  for name, t in self.params.items()}
        trace = trace if trace is not None else {}

        feats = []
        if self.spec.mode != "slice_only":
            feats.append(self._residual_branch(x, leaves, training, trace))
        if self.spec.mode != "residual_only":
            feats.append(self._slice_branch(x, leaves, training, trace))
        fused = feats[0] if len(feats) == 1 else ops.concat_channels(feats[0], feats[1])
        trace["fused"] = fused

        hidden = ops.relu(ops.linear(fused, leaves["head.fc1.weight"], leaves["head.fc1.bias"]))
        logits = ops.linear(hidden, leaves["head.fc2.weight"], leaves["head.fc2.bias"])
        trace["logits"] = logits
        return logits

    def _bn_params(self, prefix: str, leaves, training: bool):
        return ops.BatchNormParams(
            gamma=leaves[f"{prefix}.gamma"], beta=leaves[f"{prefix}.beta"],
            running_mean=self.buffers[f"{prefix}.running_mean"],
            running_var=self.buffers[f"{prefix}.running_var"],
            mode="train" if training else "eval")

    def _store_bn(self, prefix: str, p: ops.BatchNormParams, training: bool):
        if training:
            self.buffers[f"{prefix}.running_mean"] = p.running_mean
            self.buffers[f"{prefix}.running_var"] = p.running_var

    def _residual_branch(self, x: TapeNode, leaves, training: bool, trace: dict) -> TapeNode:
        h = ops.conv2d(x, ops.Conv2dParams(leaves["residual.stem.weight"],
                                           stride=(1, 1), padding=(1, 1)))
        trace["stem"] = h
        for s, b, bs in block_specs(self.spec):
            p = f"residual.stage{s + 1}.block{b + 1}"
            bn1 = self._bn_params(f"{p}.bn1", leaves, training)
            bn2 = self._bn_params(f"{p}.bn2", leaves, training)
            conv1 = ops.Conv2dParams(leaves[f"{p}.conv1.weight"],
                                     stride=(bs.stride, bs.stride), padding=(1, 1))
            conv2 = ops.Conv2dParams(leaves[f"{p}.conv2.weight"], stride=(1, 1), padding=(1, 1))
            proj = None
            if bs.needs_projection:
                proj = ops.Conv2dParams(leaves[f"{p}.proj.weight"],
                                        stride=(bs.stride, bs.stride), padding=(0, 0))
            h = residual_block(h, bn1, conv1, bn2, conv2, proj)
            self._store_bn(f"{p}.bn1", bn1, training)
            self._store_bn(f"{p}.bn2", bn2, training)
            if b == self.spec.blocks_per_stage - 1:
                trace[f"stage{s + 1}"] = h
        hb = self._bn_params("residual.head_bn", leaves, training)
        h = ops.relu(ops.batchnorm(h, hb))
        self._store_bn("residual.head_bn", hb, training)
        feat = ops.global_avgpool(h)
        trace["residual"] = feat
        return feat

    def _slice_branch(self, x: TapeNode, leaves, training: bool, trace: dict) -> TapeNode:
        conv = ops.Conv2dParams(leaves["slice.conv.weight"], stride=(1, 1), padding=(0, 0))
        bn = self._bn_params("slice.bn", leaves, training)
        h = slice_conv(x, conv, bn)
        self._store_bn("slice.bn", bn, training)
        trace["slice_conv"] = h
        wh, sh = self.spec.slice_pool_geometry()
        h = slice_pool(h, wh, sh)
        trace["slice_pool"] = h
        n = h.value.shape[0]
        feat = ops.reshape(h, (n, self.spec.slice_feature_len()))
        trace["slice"] = feat
        return feat


# ---------------------------------------------------------------------------
# spec <-> flat vector (for self-describing checkpoints)

_SPEC_VECTOR_LEN = 15


def spec_to_vector(spec: WiserModelSpec) -> np.ndarray:
    spec = spec.resolved()
    s = spec.slice_spec
    vals = [spec.input_size[0], spec.input_size[1], spec.num_classes,
            spec.widen_factor, spec.blocks_per_stage,
            spec.stage_base_widths[0], spec.stage_base_widths[1], spec.stage_base_widths[2],
            s.kernel_height, s.feature_maps, s.pool_window_height, s.pool_stride_height,
            spec.fc_hidden, MODES.index(spec.mode), 0]
    return np.asarray(vals, dtype=np.float32)


def spec_from_vector(vals) -> WiserModelSpec:
    v = [int(round(float(x))) for x in np.asarray(vals).reshape(-1)]
    if len(v) != _SPEC_VECTOR_LEN:
        raise ShapeError(f"model descriptor has {len(v)} fields, expected {_SPEC_VECTOR_LEN}")
    return WiserModelSpec(
        input_size=(v[0], v[1]), num_classes=v[2], widen_factor=v[3],
        blocks_per_stage=v[4], stage_base_widths=(v[5], v[6], v[7]),
        slice_spec=SliceSpec(kernel_height=v[8], feature_maps=v[9],
                             pool_window_height=v[10], pool_stride_height=v[11]),
        fc_hidden=v[12], mode=MODES[v[13]])
