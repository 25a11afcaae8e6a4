"""Dense float64 tensor with reverse-mode autodiff on an explicit tape.

Every differentiable operation records one node on the active tape; the
tape list is in construction order, which is already a topological order,
so the backward pass is a single reverse sweep. Tensors created while no
tape is active are plain values (inference mode).
"""

from __future__ import annotations

import threading

import numpy as np

from ..errors import GraphError, ShapeError

_TLS = threading.local()


def active_tape():
    """The innermost tape on this thread, or None."""
    return getattr(_TLS, "stack", None)[-1] if getattr(_TLS, "stack", None) else None


class Tensor:
    """A dense real array (float64) that can participate in a gradient tape.

    `node_id` is the index of the tape node that produced this tensor,
    or -1 for leaves and constants.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.node_id = -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Copy of the value with no tape history."""
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}{flag})"

    # operator sugar; implementations live in ops.py
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops

        return ops.div(other, self)

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        from . import ops

        return ops.sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def permute(self, *axes):
        from . import ops

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.permute(self, axes)


class _Node:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output, inputs, backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive applications for one backward sweep.

    Single-writer: one training step builds and consumes one tape on one
    thread. Nested tapes are allowed; ops record on the innermost.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self):
        stack = getattr(_TLS, "stack", None)
        if stack is None:
            stack = _TLS.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TLS.stack.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def record(self, output: Tensor, inputs, backward_fn) -> int:
        output.node_id = len(self._nodes)
        self._nodes.append(_Node(output, inputs, backward_fn))
        return output.node_id

    def backward(self, loss: Tensor) -> None:
        """Reverse sweep from `loss`, populating .grad on requires_grad leaves.

        Intermediate gradients and closures are released as soon as each
        node has been processed.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        nid = loss.node_id
        if nid < 0 or nid >= len(self._nodes) or self._nodes[nid].output is not loss:
            raise GraphError("loss tensor was not recorded on this tape (detached graph)")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes[: nid + 1]):
            out = node.output
            if out.grad is None or node.backward_fn is None:
                continue
            node.backward_fn(out.grad)
            out.grad = None  # non-leaf intermediates are releasable
            node.backward_fn = None


def backward(loss: Tensor, tape: Tape) -> None:
    """Functional alias for Tape.backward."""
    tape.backward(loss)


def accumulate_grad(t: Tensor, g: np.ndarray, fresh: bool = False) -> None:
    """Add a gradient contribution to `t`.

    `fresh` asserts that `g` is a newly allocated array no other node
    holds, so it can be owned directly; otherwise the first contribution
    is copied so in-place accumulation never aliases another buffer.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if fresh else np.array(g, dtype=np.float64)
    else:
        t.grad += g
