"""SGD with momentum, the stepped learning-rate schedule, and the
training loop.

The schedule is piecewise constant: the base rate holds until the first
milestone iteration, each milestone switches to its rate, and training
stops at max_iterations.  A run can be shrunk to desk scale with
scale_factor, which multiplies every milestone and the stop point by
the factor (rounded to the nearest iteration) while keeping the rate
values themselves untouched.

Weight decay is applied to every parameter, normalization scales and
biases included, by folding decay * w into the gradient before the
momentum update:

    g' = g + weight_decay * w
    v  = momentum * v + g'
    w  = w - lr * v

The training loop shuffles sample order once per epoch, walks batches
of batch_size (final short batch included), and emits one metrics line
per log interval: `iter=<n> loss=<f> lr=<f> top1=<f>`.  Everything that
moves is derived from the run seed, so two runs with the same inputs
produce byte-identical logs and checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import ops
from .autograd import Tape, backward
from .model import WiserModel
from .rng import Stream
from .tensor import NonFiniteError, Tensor


class DivergenceError(RuntimeError):
    """Loss or gradients went non-finite; parameters hold the last good step."""

    def __init__(self, iteration: int, what: str):
        super().__init__(f"training diverged at iteration {iteration}: {what}")
        self.iteration = iteration


@dataclass(frozen=True)
class SgdConfig:
    base_lr: float = 0.01
    milestones: tuple = ((50_000, 0.002), (90_000, 0.0004))
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 24
    max_iterations: int = 100_000
    scale_factor: float = 1.0

    def validate(self):
        if self.base_lr <= 0 or self.batch_size < 1 or self.max_iterations < 1:
            raise ValueError("base_lr, batch_size, max_iterations must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0 or self.scale_factor <= 0:
            raise ValueError("weight_decay must be >= 0 and scale_factor > 0")
        last = 0
        for it, lr in self.milestones:
            if it <= last:
                raise ValueError("milestone iterations must increase")
            if lr <= 0:
                raise ValueError("milestone rates must be positive")
            last = it

    def scaled_milestones(self) -> tuple:
        return tuple((int(round(it * self.scale_factor)), lr) for it, lr in self.milestones)

    def scaled_max_iterations(self) -> int:
        return max(1, int(round(self.max_iterations * self.scale_factor)))


def lr_at(iteration: int, cfg: SgdConfig) -> float:
    """Learning rate in force for the step taken at `iteration` (0-based)."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    lr = cfg.base_lr
    for it, rate in cfg.scaled_milestones():
        if iteration >= it:
            lr = rate
    return lr


@dataclass
class SgdState:
    iteration: int = 0
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray],
             state: SgdState, cfg: SgdConfig) -> None:
    """One update of every parameter; zeroes the grads after.

    The step commits all-or-nothing: a non-finite gradient or an update
    that overflows raises DivergenceError with every parameter and
    velocity still holding the last good values.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise DivergenceError(state.iteration, f"non-finite gradient in {name!r}")
    lr = lr_at(state.iteration, cfg)
    staged = []
    for name, t in params.items():
        w = t.data
        dt = w.dtype.type
        gp = grads[name] + dt(cfg.weight_decay) * w
        v = state.velocity.get(name)
        v = gp if v is None else dt(cfg.momentum) * v + gp
        new_w = w - dt(lr) * v
        # an infinite velocity always lands here too: w - lr*inf is inf
        if not np.isfinite(new_w).all():
            raise DivergenceError(state.iteration, f"update overflowed in {name!r}")
        staged.append((name, v, new_w))
    for name, v, new_w in staged:
        state.velocity[name] = v
        params[name] = Tensor._own(new_w)
        grads[name][...] = 0
    state.iteration += 1


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    state: SgdState
    metrics_lines: List[str]


def _batches(n: int, batch_size: int, seed: int):
    """Yield (epoch, index array) forever; fresh shuffle each epoch."""
    stream = Stream(seed)
    epoch = 0
    while True:
        perm = stream.spawn("shuffle", epoch).permutation(n)
        for lo in range(0, n, batch_size):
            yield epoch, perm[lo:lo + batch_size]
        epoch += 1


def format_metrics_line(iteration: int, loss: float, lr: float, top1: float) -> str:
    return f"iter={iteration} loss={loss:.6f} lr={lr:g} top1={top1:.4f}"


def train_loop(model: WiserModel, samples, cfg: SgdConfig, seed: int,
               augment_fn: Optional[Callable] = None,
               log_interval: int = 50,
               on_log: Optional[Callable[[str], None]] = None,
               checkpoint_interval: int = 0,
               on_checkpoint: Optional[Callable] = None) -> TrainResult:
    """Train `model` on `samples` (a list with .pixels and .label).

    `augment_fn(sample, epoch) -> pixels` replaces a sample's pixels for
    one pass when given; pixels are then normalized with the model's
    per-channel input statistics.  Checkpoint callbacks receive
    (iteration, model, state) every `checkpoint_interval` steps and once
    after the final step.
    """
    cfg.validate()
    if len(samples) == 0:
        raise ValueError("training set is empty")
    if cfg.batch_size > len(samples):
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {len(samples)}")

    dtype = np.float32 if model.precision == "single" else np.float64
    mean = model.buffers["input_norm.mean"].reshape(1, 3, 1, 1).astype(dtype)
    std = model.buffers["input_norm.std"].reshape(1, 3, 1, 1).astype(dtype)
    labels_all = np.array([s.label for s in samples], dtype=np.int64)

    state = SgdState()
    lines: List[str] = []
    total = cfg.scaled_max_iterations()
    batch_iter = _batches(len(samples), cfg.batch_size, seed)

    for step in range(total):
        epoch, idx = next(batch_iter)
        if augment_fn is None:
            x = np.stack([samples[i].pixels for i in idx])
        else:
            x = np.stack([augment_fn(samples[i], epoch) for i in idx])
        x = (x.astype(dtype) - mean) / std
        labels = labels_all[idx]

        lr = lr_at(state.iteration, cfg)
        tape = Tape()
        try:
            logits = model.forward(tape, Tensor._own(x), training=True)
            loss, probs = ops.softmax_cross_entropy(logits, labels)
            loss_val = loss.value.item()
            if not np.isfinite(loss_val):
                raise DivergenceError(state.iteration, f"loss = {loss_val}")
            backward(loss)
            grads = {name: tape.params[name].grad for name in model.params}
            sgd_step(model.params, grads, state, cfg)
        except NonFiniteError as e:
            # activations overflowed mid-graph; params still hold the last step
            raise DivergenceError(state.iteration, str(e)) from e

        it = step + 1
        if it % log_interval == 0 or it == total:
            top1 = float(np.mean(np.argmax(probs, axis=1) == labels))
            line = format_metrics_line(it, loss_val, lr, top1)
            lines.append(line)
            if on_log is not None:
                on_log(line)
        if on_checkpoint is not None and (
                (checkpoint_interval > 0 and it % checkpoint_interval == 0) or it == total):
            on_checkpoint(it, model, state)

    return TrainResult(state=state, metrics_lines=lines)
