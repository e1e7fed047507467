"""Top-k evaluation over a dataset split.

Samples are resized so the short side matches the checkpoint's recorded
eval size, center-cropped to the model input (or expanded to the ten
corner/center/mirror crops), normalized with the model's stored channel
statistics, and pushed through an eval-mode forward.  Ten-crop scores
average the ten softmax vectors before ranking.

Rank ties break toward the lower class index, and a top-1 hit is by
construction also a top-5 hit, so top5 >= top1 always holds; the
aggregation is a plain mean over samples, independent of batch
grouping.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import data
from .autograd import Tape
from .model import WiserModel
from .tensor import ShapeError, Tensor


@dataclass
class EvalResult:
    top1: float
    top5: float
    count: int


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward_probs(model: WiserModel, batch: np.ndarray) -> np.ndarray:
    """Eval-mode class probabilities for a normalized (B, 3, H, W) batch."""
    tape = Tape()
    logits = model.forward(tape, Tensor._own(batch), training=False)
    return softmax(logits.value.data)


def topk_hits(probs: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Boolean per-row: does the label sit in the k highest scores?
    Equal scores rank by ascending class index."""
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return (order == labels[:, None]).any(axis=1)


def _views(sample: data.ImageSample, model: WiserModel, eval_resize: int,
           ten: bool) -> List[np.ndarray]:
    px = sample.pixels
    if eval_resize > 0:
        px = data.resize_min_side(px, eval_resize)
    size = model.spec.input_size
    if ten:
        return data.ten_crop(px, size)
    return [data.center_crop(px, size)]


def evaluate(model: WiserModel, samples: Sequence[data.ImageSample],
             batch_size: int = 64, ten: bool = False,
             eval_resize: int = 0) -> EvalResult:
    """Top-1/top-5 accuracy of `model` over `samples`."""
    if len(samples) == 0:
        raise ShapeError("cannot evaluate an empty sample list")
    views_per = 10 if ten else 1
    chunk = max(1, batch_size // views_per)
    mean = model.buffers["input_norm.mean"].reshape(1, 3, 1, 1).astype(np.float32)
    std = model.buffers["input_norm.std"].reshape(1, 3, 1, 1).astype(np.float32)

    k5 = min(5, model.spec.num_classes)
    hits1 = 0
    hits5 = 0
    for lo in range(0, len(samples), chunk):
        part = samples[lo:lo + chunk]
        stack = np.stack([v for s in part for v in _views(s, model, eval_resize, ten)])
        stack = (stack.astype(np.float32) - mean) / std
        probs = forward_probs(model, stack)
        probs = probs.reshape(len(part), views_per, -1).mean(axis=1)
        labels = np.array([s.label for s in part], dtype=np.int64)
        hits1 += int(topk_hits(probs, labels, 1).sum())
        hits5 += int(topk_hits(probs, labels, k5).sum())
    n = len(samples)
    return EvalResult(top1=hits1 / n, top5=hits5 / n, count=n)
