"""Reverse-mode differentiation: tape recording, backward traversal, and the
finite-difference verification harness.

Every differentiable op in :mod:`crin.tensor` calls :func:`record` with a
closure that maps the output gradient to per-input partials.  A tape is a
plain ordered list of these records; construction order is topological by
definition, so one reversed sweep suffices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

if TYPE_CHECKING:
    from .tensor import Tensor


class AutogradError(ValueError):
    """Raised for malformed backward requests (non-scalar loss, dangling refs)."""


class Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple, output: "Tensor",
                 backward_fn: Callable[[np.ndarray], Sequence]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_STACK: list["Tape"] = []


class Tape:
    """Single-owner recording context.  Nodes are appended in execution order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _STACK.pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def __len__(self):
        return len(self.nodes)


def active_tape() -> Tape | None:
    return _STACK[-1] if _STACK else None


def record(op: str, inputs: tuple, output: "Tensor",
           backward_fn: Callable[[np.ndarray], Sequence]) -> None:
    tape = active_tape()
    if tape is not None:
        tape.nodes.append(Node(op, inputs, output, backward_fn))


class Gradients:
    """Result of a backward pass; zero for tensors not on the loss path."""

    def __init__(self, table: dict[int, np.ndarray]):
        self._table = table

    def get(self, tensor: "Tensor") -> np.ndarray:
        g = self._table.get(id(tensor))
        if g is None:
            return np.zeros_like(tensor.data)
        return g


def backward(loss: "Tensor", tape: Tape) -> Gradients:
    """Propagate d(loss)/d(node) through the tape, newest node first.

    Each node is visited exactly once; a value consumed by several nodes
    accumulates the sum of the incoming partials.
    """
    if loss.data.size != 1:
        raise AutogradError(f"loss must be scalar, got shape {loss.data.shape}")
    produced = {id(n.output) for n in tape.nodes}
    if id(loss) not in produced:
        raise AutogradError("loss was not produced on this tape (dangling reference)")
    table: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = table.get(id(node.output))
        if g is None:
            continue  # node not on the path from loss
        partials = node.backward_fn(g)
        for t, p in zip(node.inputs, partials):
            if p is None or not t.requires_grad:
                continue
            if p.shape != t.data.shape:
                raise AutogradError(
                    f"op {node.op!r}: partial shape {p.shape} does not match "
                    f"input shape {t.data.shape}")
            key = id(t)
            if key in table:
                table[key] = table[key] + p
            else:
                table[key] = p
    return Gradients(table)


def backward_named(loss: "Tensor", tape: Tape,
                   params: dict[str, "Tensor"]) -> dict[str, np.ndarray]:
    """Backward pass returning gradients keyed by parameter name."""
    grads = backward(loss, tape)
    return {name: grads.get(t) for name, t in params.items()}


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    mean_rel_err: float
    worst_index: tuple
    n_checked: int


@dataclass
class GradientReport:
    entries: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def to_csv(self) -> str:
        lines = ["param,max_rel_err,mean_rel_err"]
        for e in self.entries:
            lines.append(f"{e.name},{e.max_rel_err:.3e},{e.mean_rel_err:.3e}")
        return "\n".join(lines) + "\n"


def grad_check(fn: Callable[[], "Tensor"], params: dict[str, "Tensor"],
               eps: float = 1e-4, max_coords_per_param: int | None = None,
               seed: int = 0) -> GradientReport:
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` must be a deterministic closure over ``params`` returning a scalar
    tensor.  The relative error denominator is ``max(|a|, |n|, 1e-8)``.  With
    ``max_coords_per_param`` set, a fixed-seed subset of coordinates per
    parameter is checked instead of all of them.
    """
    if eps <= 0:
        raise AutogradError("eps must be positive")
    with Tape() as tape:
        loss = fn()
    with Tape():
        loss2 = fn()
    if not np.array_equal(loss.data, loss2.data):
        raise AutogradError("fn is not deterministic: two forward passes disagree")
    grads = backward(loss, tape)

    rng = np.random.default_rng(seed)
    report = GradientReport()
    for name, p in params.items():
        analytic = grads.get(p).reshape(-1)
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = np.arange(n)
        errs = np.empty(len(coords))
        worst = (0,)
        for k, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = float(fn().data.reshape(()))
            flat[c] = orig - eps
            f_minus = float(fn().data.reshape(()))
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[c])
            errs[k] = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if len(coords):
            worst = np.unravel_index(int(coords[int(np.argmax(errs))]), p.data.shape)
        report.entries.append(ParamCheck(
            name=name,
            max_rel_err=float(errs.max()) if len(coords) else 0.0,
            mean_rel_err=float(errs.mean()) if len(coords) else 0.0,
            worst_index=tuple(int(i) for i in worst),
            n_checked=len(coords),
        ))
    return report
