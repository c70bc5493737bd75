"""Dense float64 matrices and a small tape-based reverse-mode autodiff core.

Matrices are plain 2-D, C-contiguous ``numpy.float64`` arrays. A :class:`Tape`
records a fixed set of primitives (matmul, add, elementwise multiply, row
softmax, paired rotation, column/row gathers, cross entropy) so that the
gradient of any recorded scalar with respect to any registered leaf can be
replayed. Every matmul recorded on a tape adds ``2 * rows * cols * inner`` to
the tape's FLOPs counter, broken down by an optional tag.

All reductions run in numpy's deterministic single-threaded order, so repeated
runs over the same inputs are bitwise reproducible.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

Matrix = np.ndarray


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> Matrix:
    """Coerce ``values`` to a 2-D float64 matrix, optionally checking its shape."""
    m = np.ascontiguousarray(np.asarray(values, dtype=np.float64))
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise ValueError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ValueError(f"expected {cols} cols, got {m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix entries must be finite")
    return m


class Node:
    """One recorded value on a tape."""

    __slots__ = ("idx", "value", "parents", "backward", "grad_enabled", "name")

    def __init__(self, idx, value, parents=(), backward=None, grad_enabled=True, name=None):
        self.idx = idx
        self.value = value
        self.parents = parents
        self.backward = backward
        self.grad_enabled = grad_enabled
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(idx={self.idx}, shape={self.value.shape}, name={self.name})"


class Tape:
    """Single-writer record of primitive operations.

    Leaves registered through :meth:`leaf` are deduplicated by name, so a
    weight used twice in one pass (e.g. a tied embedding) accumulates gradient
    from both uses into a single node.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, Node] = {}
        self.flops: int = 0
        self.flops_by_tag: dict[str, int] = {}

    # -- node creation -----------------------------------------------------

    def _record(self, value, parents=(), backward=None, grad_enabled=True, name=None) -> Node:
        node = Node(len(self.nodes), value, tuple(parents), backward, grad_enabled, name)
        self.nodes.append(node)
        return node

    def leaf(self, value, name: str) -> Node:
        """Register (or fetch) a differentiable input by name."""
        if name in self.leaves:
            existing = self.leaves[name]
            if existing.value is not value and not np.array_equal(existing.value, value):
                raise ValueError(f"leaf {name!r} re-registered with different values")
            return existing
        node = self._record(as_matrix(value), name=name)
        self.leaves[name] = node
        return node

    def constant(self, value) -> Node:
        """A non-differentiable value (masks, cached rows, teacher logits)."""
        m = np.asarray(value, dtype=np.float64)
        if m.ndim == 1:
            m = m.reshape(1, -1)
        return self._record(m, grad_enabled=False)

    def _count(self, flops: int, tag: str | None):
        self.flops += flops
        if tag is not None:
            self.flops_by_tag[tag] = self.flops_by_tag.get(tag, 0) + flops

    # -- primitives ----------------------------------------------------------

    def matmul(self, a: Node, b: Node, tag: str | None = None) -> Node:
        if a.value.shape[1] != b.value.shape[0]:
            raise ValueError(
                f"matmul dimension mismatch: {a.value.shape} @ {b.value.shape}"
            )
        out = a.value @ b.value
        m, inner = a.value.shape
        n = b.value.shape[1]
        self._count(2 * m * n * inner, tag)

        def backward(g, acc):
            acc(a, g @ b.value.T)
            acc(b, a.value.T @ g)

        return self._record(out, (a, b), backward)

    def add(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise ValueError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")
        out = a.value + b.value

        def backward(g, acc):
            acc(a, g)
            acc(b, g)

        return self._record(out, (a, b), backward)

    def sub(self, a: Node, b: Node) -> Node:
        return self.add(a, self.scale(b, -1.0))

    def scale(self, a: Node, c: float) -> Node:
        out = a.value * c

        def backward(g, acc):
            acc(a, g * c)

        return self._record(out, (a,), backward)

    def mul(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise ValueError(f"mul shape mismatch: {a.value.shape} vs {b.value.shape}")
        out = a.value * b.value

        def backward(g, acc):
            acc(a, g * b.value)
            acc(b, g * a.value)

        return self._record(out, (a, b), backward)

    def transpose(self, a: Node) -> Node:
        def backward(g, acc):
            acc(a, g.T)

        return self._record(np.ascontiguousarray(a.value.T), (a,), backward)

    def gather_cols(self, a: Node, idx: Sequence[int]) -> Node:
        idx = np.asarray(idx, dtype=np.intp)
        if idx.size and (idx.min() < 0 or idx.max() >= a.value.shape[1]):
            raise ValueError("gather_cols index out of range")
        out = np.ascontiguousarray(a.value[:, idx])

        def backward(g, acc):
            ga = np.zeros_like(a.value)
            np.add.at(ga, (slice(None), idx), g)
            acc(a, ga)

        return self._record(out, (a,), backward)

    def gather_rows(self, a: Node, idx: Sequence[int]) -> Node:
        idx = np.asarray(idx, dtype=np.intp)
        if idx.size and (idx.min() < 0 or idx.max() >= a.value.shape[0]):
            raise ValueError("gather_rows index out of range")
        out = np.ascontiguousarray(a.value[idx, :])

        def backward(g, acc):
            ga = np.zeros_like(a.value)
            np.add.at(ga, (idx, slice(None)), g)
            acc(a, ga)

        return self._record(out, (a,), backward)

    def concat_cols(self, parts: Sequence[Node]) -> Node:
        parts = list(parts)
        widths = [p.value.shape[1] for p in parts]
        out = np.concatenate([p.value for p in parts], axis=1)
        offsets = np.cumsum([0] + widths)

        def backward(g, acc):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                acc(p, g[:, lo:hi])

        return self._record(out, tuple(parts), backward)

    def row_softmax(self, a: Node) -> Node:
        z = a.value - np.max(a.value, axis=1, keepdims=True)
        e = np.exp(z)
        out = e / np.sum(e, axis=1, keepdims=True)

        def backward(g, acc):
            dot = np.sum(g * out, axis=1, keepdims=True)
            acc(a, out * (g - dot))

        return self._record(out, (a,), backward)

    def row_log_softmax(self, a: Node) -> Node:
        z = a.value - np.max(a.value, axis=1, keepdims=True)
        lse = np.log(np.sum(np.exp(z), axis=1, keepdims=True))
        out = z - lse
        soft = np.exp(out)

        def backward(g, acc):
            acc(a, g - soft * np.sum(g, axis=1, keepdims=True))

        return self._record(out, (a,), backward)

    def rotate_pairs(self, a: Node, cos: np.ndarray, sin: np.ndarray,
                     first: np.ndarray, second: np.ndarray) -> Node:
        """Apply independent 2x2 rotations to column pairs of each row.

        ``cos``/``sin`` have shape (rows, n_pairs); pair ``k`` couples columns
        ``first[k]`` and ``second[k]``. The rotation is orthogonal, so the
        backward pass rotates the incoming gradient by the negated angles.
        """
        xa = a.value[:, first]
        xb = a.value[:, second]
        out = a.value.copy()
        out[:, first] = xa * cos - xb * sin
        out[:, second] = xa * sin + xb * cos

        def backward(g, acc):
            ga = np.zeros_like(a.value)
            gfa = g[:, first]
            gfb = g[:, second]
            ga[:, first] = gfa * cos + gfb * sin
            ga[:, second] = -gfa * sin + gfb * cos
            # columns outside any pair pass through untouched
            covered = np.zeros(a.value.shape[1], dtype=bool)
            covered[first] = True
            covered[second] = True
            if not covered.all():
                ga[:, ~covered] = g[:, ~covered]
            acc(a, ga)

        return self._record(out, (a,), backward)

    def cross_entropy(self, logits: Node, labels: Sequence[int]) -> Node:
        """Mean next-token cross entropy: one row of logits per label."""
        labels = np.asarray(labels, dtype=np.intp)
        if labels.shape[0] != logits.value.shape[0]:
            raise ValueError("one label per logits row required")
        z = logits.value - np.max(logits.value, axis=1, keepdims=True)
        lse = np.log(np.sum(np.exp(z), axis=1, keepdims=True))
        logp = z - lse
        n = labels.shape[0]
        loss = -np.sum(logp[np.arange(n), labels]) / n
        soft = np.exp(logp)

        def backward(g, acc):
            grad = soft.copy()
            grad[np.arange(n), labels] -= 1.0
            acc(logits, grad * (g[0, 0] / n))

        return self._record(np.array([[loss]]), (logits,), backward)

    def sum_all(self, a: Node) -> Node:
        def backward(g, acc):
            acc(a, np.full_like(a.value, g[0, 0]))

        return self._record(np.array([[a.value.sum()]]), (a,), backward)

    def mean_all(self, a: Node) -> Node:
        size = a.value.size

        def backward(g, acc):
            acc(a, np.full_like(a.value, g[0, 0] / size))

        return self._record(np.array([[a.value.mean()]]), (a,), backward)

    # -- differentiation -----------------------------------------------------

    def backward_from(self, output: Node) -> dict[int, np.ndarray]:
        """Gradients of a recorded 1x1 scalar w.r.t. every reachable node."""
        if output.value.shape != (1, 1):
            raise ValueError("backward_from expects a scalar (1x1) output node")
        grads: dict[int, np.ndarray] = {output.idx: np.ones((1, 1))}

        def acc(node: Node, g: np.ndarray):
            if not node.grad_enabled:
                return
            if node.idx in grads:
                grads[node.idx] = grads[node.idx] + g
            else:
                grads[node.idx] = g

        for node in reversed(self.nodes[: output.idx + 1]):
            if node.backward is None or node.idx not in grads:
                continue
            node.backward(grads[node.idx], acc)
        return grads


def grad(tape: Tape, output: Node, leaf: Node) -> Matrix:
    """Gradient of ``output`` (a recorded scalar) w.r.t. one tape leaf."""
    return gradients(tape, output, [leaf])[0]


def gradients(tape: Tape, output: Node, leaves: Iterable[Node]) -> list[Matrix]:
    leaves = list(leaves)
    for leaf in leaves:
        if leaf.idx >= len(tape.nodes) or tape.nodes[leaf.idx] is not leaf:
            raise ValueError("leaf is not a node of this tape")
    table = tape.backward_from(output)
    return [table.get(leaf.idx, np.zeros_like(leaf.value)) for leaf in leaves]
