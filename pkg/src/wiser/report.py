"""Training-curve figures rendered from a metrics log.

`wiser train` leaves a line-oriented metrics.log in the run directory;
this module parses it back into arrays and draws the loss, accuracy,
and learning-rate trajectories to PNG files next to the log, so a run
directory is self-contained: the delimited numbers and their pictures
travel together.
"""

from __future__ import annotations

import os
import re
from typing import Dict, List

import numpy as np

_LINE = re.compile(
    r"^iter=(\d+) loss=([-+0-9.eE]+) lr=([-+0-9.eE]+) top1=([-+0-9.eE]+)$")


class MetricsParseError(ValueError):
    pass


def parse_metrics_log(text: str) -> Dict[str, np.ndarray]:
    iters: List[int] = []
    loss: List[float] = []
    lr: List[float] = []
    top1: List[float] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        m = _LINE.match(line)
        if m is None:
            raise MetricsParseError(f"line {lineno}: not a metrics record: {line!r}")
        iters.append(int(m.group(1)))
        loss.append(float(m.group(2)))
        lr.append(float(m.group(3)))
        top1.append(float(m.group(4)))
    if not iters:
        raise MetricsParseError("metrics log holds no records")
    return {"iter": np.array(iters), "loss": np.array(loss),
            "lr": np.array(lr), "top1": np.array(top1)}


def render_training_report(metrics_path: str, out_dir: str = "") -> List[str]:
    """Draw loss/top1/lr curves; returns the written figure paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(metrics_path, "r", encoding="utf-8") as f:
        m = parse_metrics_log(f.read())
    out_dir = out_dir or os.path.dirname(os.path.abspath(metrics_path))
    os.makedirs(out_dir, exist_ok=True)

    fig, axes = plt.subplots(3, 1, figsize=(7, 9), sharex=True)
    axes[0].plot(m["iter"], m["loss"], color="tab:red", lw=1.2)
    axes[0].set_ylabel("training loss")
    axes[0].grid(alpha=0.3)
    axes[1].plot(m["iter"], m["top1"], color="tab:blue", lw=1.2)
    axes[1].set_ylabel("batch top-1")
    axes[1].set_ylim(-0.02, 1.02)
    axes[1].grid(alpha=0.3)
    axes[2].step(m["iter"], m["lr"], where="post", color="tab:green", lw=1.4)
    axes[2].set_ylabel("learning rate")
    axes[2].set_yscale("log")
    axes[2].set_xlabel("iteration")
    axes[2].grid(alpha=0.3)
    fig.tight_layout()
    curves = os.path.join(out_dir, "metrics.png")
    fig.savefig(curves, dpi=130, metadata={"Software": "wiser"})
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(m["iter"], np.maximum(m["loss"], 1e-12), color="tab:red", lw=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel("training loss (log scale)")
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    logloss = os.path.join(out_dir, "loss_log.png")
    fig.savefig(logloss, dpi=130, metadata={"Software": "wiser"})
    plt.close(fig)

    return [curves, logloss]
