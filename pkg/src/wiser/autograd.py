"""Tape-based reverse-mode differentiation.

A `Tape` records every operation of one forward computation as a
`TapeNode` in creation order (a Wengert list).  Each non-leaf node
carries a backward rule: a closure that takes the node's accumulated
output gradient and adds each parent's contribution into that parent's
grad buffer.  `backward(loss)` seeds the scalar loss with gradient one
and replays the list in reverse creation order, invoking every rule at
most once; nodes that cannot reach the loss are skipped and keep zero
gradients.

Gradient buffers are plain float arrays of the node's value shape,
zero-initialized, accumulated with +=, so a value feeding several
consumers collects the sum of their contributions.

`grad_check` compares those gradients against central finite
differences in double precision; it is the numerical referee for every
operation and for whole models.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .rng import Stream
from .tensor import Tensor


class TapeError(RuntimeError):
    """Mixing tapes, re-running backward, or a non-scalar loss."""


class TapeNode:
    # The tape backref is weak so a dropped tape frees its whole graph by
    # refcount alone; training loops build one tape per step and cyclic
    # garbage there piles up into gigabytes before the collector notices.
    __slots__ = ("_tape_ref", "value", "grad", "parents", "requires_grad",
                 "name", "rule", "backward_calls", "__weakref__")

    def __init__(self, tape, value: Tensor, parents: tuple, rule, requires_grad: bool, name):
        self._tape_ref = weakref.ref(tape)
        self.value = value
        self.grad = np.zeros(value.shape, dtype=value.data.dtype)
        self.parents = parents
        self.rule = rule
        self.requires_grad = requires_grad
        self.name = name
        self.backward_calls = 0  # each rule must fire at most once per backward

    @property
    def tape(self) -> "Tape":
        t = self._tape_ref()
        if t is None:
            raise TapeError("the tape this node was recorded on no longer exists")
        return t

    def __repr__(self):
        kind = "leaf" if self.rule is None else "op"
        return f"TapeNode({kind}, shape={self.value.shape}, name={self.name!r})"


class Tape:
    """One forward computation's operation record."""

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self.params: Dict[str, TapeNode] = {}
        self._backward_done = False

    def leaf(self, value: Tensor, requires_grad: bool = False, name: Optional[str] = None) -> TapeNode:
        if not isinstance(value, Tensor):
            value = Tensor(value)
        node = TapeNode(self, value, (), None, requires_grad, name)
        self.nodes.append(node)
        if name is not None:
            if name in self.params:
                raise TapeError(f"duplicate leaf name {name!r}")
            self.params[name] = node
        return node

    def record(self, value: Tensor, parents: Sequence[TapeNode], rule: Callable[[np.ndarray], None],
               name: Optional[str] = None) -> TapeNode:
        """Append an op node whose `rule(upstream)` adds into parent grads."""
        parents = tuple(parents)
        for p in parents:
            if p.tape is not self:
                raise TapeError("operands were recorded on a different tape")
        node = TapeNode(self, value, parents, rule, any(p.requires_grad for p in parents), name)
        self.nodes.append(node)
        return node


def backward(loss: TapeNode) -> None:
    """Accumulate d(loss)/d(node) into every node reachable from `loss`."""
    tape = loss.tape
    if tape._backward_done:
        raise TapeError("backward was already run on this tape")
    if loss.value.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.value.shape}")
    tape._backward_done = True

    reachable = {id(loss)}
    stack = [loss]
    while stack:
        node = stack.pop()
        for p in node.parents:
            if id(p) not in reachable:
                reachable.add(id(p))
                stack.append(p)

    loss.grad += np.ones((), dtype=loss.grad.dtype)
    for node in reversed(tape.nodes):
        if id(node) in reachable and node.rule is not None:
            node.rule(node.grad)
            node.backward_calls += 1


@dataclass
class GradCheckResult:
    max_rel_err: float
    checked: int
    worst: str = ""


def grad_check(build: Callable[[Tape, Dict[str, Tensor]], TapeNode],
               params: Dict[str, Tensor],
               h: float = 1e-5,
               max_elements: Optional[int] = None,
               seed: int = 0) -> GradCheckResult:
    """Check analytic gradients of a scalar-valued graph builder.

    `build(tape, values)` must deterministically construct a scalar loss
    from the given value tensors, registering each differentiated value
    as a named leaf on the tape (a model forward already does; ad-hoc
    cases call tape.leaf(values[k], True, k) themselves).  Every value
    must be double precision.

    Central differences (f(x+h) - f(x-h)) / 2h with the given h are
    compared elementwise against the tape gradient; the reported error
    for analytic a versus numeric n is |a - n| / max(1, |a|, |n|).
    With `max_elements`, a seeded subset of each value's elements is
    probed (whole-model checks would otherwise take hours); without it
    every element is.
    """
    for pname, t in params.items():
        if t.precision != "double":
            raise TapeError(f"grad_check requires double precision, {pname!r} is {t.precision}")

    def run(values: Dict[str, Tensor]) -> Tuple[Tape, TapeNode]:
        t2 = Tape()
        loss = build(t2, values)
        if loss.value.size != 1:
            raise TapeError("grad_check wants a scalar loss; wrap outputs in a weighted sum")
        for pname in values:
            if pname not in t2.params:
                raise TapeError(f"build did not register a leaf named {pname!r}")
        return t2, loss

    tape, loss = run(params)
    backward(loss)
    analytic = {pname: tape.params[pname].grad.copy() for pname in params}

    max_rel = 0.0
    worst = ""
    checked = 0

    for pname, base in params.items():
        flat = base.data.reshape(-1)
        n = flat.size
        if max_elements is not None and n > max_elements:
            order = Stream(seed).spawn("grad_check", pname).permutation(n)
            idxs = np.sort(order[:max_elements])
        else:
            idxs = np.arange(n)
        a_flat = analytic[pname].reshape(-1)
        for i in idxs:
            i = int(i)
            probes = []
            for delta in (h, -h):
                bumped = flat.copy()
                bumped[i] = flat[i] + delta
                values = {**params, pname: Tensor._own(bumped.reshape(base.shape))}
                probes.append(run(values)[1].value.item())
            numeric = (probes[0] - probes[1]) / (2.0 * h)
            a = float(a_flat[i])
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = f"{pname}[{i}] analytic={a:.3e} numeric={numeric:.3e}"
    return GradCheckResult(max_rel_err=max_rel, checked=checked, worst=worst)
