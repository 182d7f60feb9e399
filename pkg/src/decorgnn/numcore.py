"""Dense float64 matrices with a reverse-mode gradient tape.

Every value is a 2-D float64 array. Operations record their inputs and a
backward rule on the output node; ``backward`` walks the recorded graph in
reverse topological order and accumulates partial derivatives, once per path.
The tape is rebuilt on every forward pass, so parameter arrays may be swapped
between passes without invalidating anything.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not fit the requested operation."""


class NonFiniteError(ArithmeticError):
    """A produced value contains NaN or infinity."""


class ContractError(ValueError):
    """An operation was called outside its contract."""


def _as_matrix(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


class Tensor:
    """A matrix node on the gradient tape.

    ``grad`` is lazily allocated and accumulates across backward calls until
    reset; call ``zero_grad`` before a fresh pass. Constants (inputs no
    gradient should flow into) are created with ``requires_grad=False`` and
    are skipped during backpropagation.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_grad_fns")

    def __init__(self, values, requires_grad: bool = True,
                 _parents: tuple = (), _grad_fns: tuple = ()):
        value = _as_matrix(values)
        if not np.isfinite(value).all():
            raise NonFiniteError("matrix contains non-finite entries")
        self.value = value
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._grad_fns = _grad_fns

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def _accumulate(self, contribution: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(contribution, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + contribution

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(values) -> Tensor:
    """Wrap values as a tape constant that never receives gradient."""
    return Tensor(values, requires_grad=False)


def op_node(value: np.ndarray, inputs: Sequence[tuple[Tensor, Callable]]) -> Tensor:
    """Create an operation result node.

    ``inputs`` pairs each parent tensor with a function mapping the output
    gradient to that parent's gradient contribution. Modules building their
    own structured operations (e.g. graph aggregation) use this hook instead
    of growing this module.
    """
    parents = tuple(t for t, _ in inputs)
    fns = tuple(f for _, f in inputs)
    needs = any(t.requires_grad for t in parents)
    return Tensor(value, requires_grad=needs, _parents=parents, _grad_fns=fns)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product a @ b."""
    if a.cols != b.rows:
        raise DimensionError(
            f"cannot multiply shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return op_node(av @ bv, [
        (a, lambda g: g @ bv.T),
        (b, lambda g: av.T @ g),
    ])


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape matrices."""
    if a.shape != b.shape:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}")
    return op_node(a.value + b.value, [
        (a, lambda g: g),
        (b, lambda g: g),
    ])


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a 1×C bias row to every row of x. The only broadcast supported."""
    if bias.rows != 1 or bias.cols != x.cols:
        raise DimensionError(
            f"bias shape {bias.shape} does not broadcast over {x.shape}")
    return op_node(x.value + bias.value, [
        (x, lambda g: g),
        (bias, lambda g: g.sum(axis=0, keepdims=True)),
    ])


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0). Derivative is exactly zero at x == 0."""
    mask = x.value > 0.0
    return op_node(np.where(mask, x.value, 0.0), [
        (x, lambda g: g * mask),
    ])


def smul(s: Tensor, x: Tensor) -> Tensor:
    """Scale a matrix by a 1×1 tensor."""
    if s.shape != (1, 1):
        raise DimensionError(f"scale must be 1x1, got {s.shape}")
    s00 = s.value[0, 0]
    xv = x.value
    return op_node(s00 * xv, [
        (s, lambda g: np.array([[np.sum(g * xv)]])),
        (x, lambda g: s00 * g),
    ])


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries, as a 1×1 tensor."""
    shape = x.shape
    return op_node(np.array([[x.value.sum()]]), [
        (x, lambda g: np.full(shape, g[0, 0])),
    ])


def softmax_cross_entropy(logits: Tensor, labels, weights) -> Tensor:
    """Weighted mean softmax cross-entropy over a batch.

    Row n of ``logits`` scores the classes of sample n. The loss is
    (1/B) * sum_n weights[n] * CE(softmax(logits_n), labels[n]). Weights are
    constants: no gradient flows into them.

    Args:
        logits: [B × C] tensor.
        labels: length-B integer class indices.
        weights: length-B nonnegative reals.

    Returns:
        1×1 loss tensor.
    """
    batch, num_classes = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise DimensionError(
            f"labels shape {labels.shape} does not match batch {batch}")
    if labels.dtype.kind not in "iu":
        raise ContractError("labels must be integers")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise IndexError(
            f"label out of range [0, {num_classes}) in {labels!r}")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (batch,):
        raise DimensionError(
            f"weights shape {w.shape} does not match batch {batch}")

    z = logits.value
    shifted = z - z.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(batch)
    loss = float((w * -log_probs[rows, labels]).sum() / batch)
    probs = np.exp(log_probs)

    def grad_logits(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (g[0, 0] / batch) * (w[:, None] * d)

    return op_node(np.array([[loss]]), [(logits, grad_logits)])


def _ordered_nodes(root: Tensor) -> list[Tensor]:
    # Iterative post-order DFS; parents precede the nodes consuming them.
    order: list[Tensor] = []
    seen = {id(root)}
    stack: list[tuple[Tensor, any]] = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        pushed = False
        for p in parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                pushed = True
                break
        if not pushed:
            order.append(node)
            stack.pop()
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(node) into ``grad`` of every reachable node.

    ``root`` must be 1×1. Gradients add to whatever is already stored, which
    makes repeated calls sum their results; callers reset with ``zero_grad``
    first for a fresh pass. Shared subexpressions receive exactly one
    contribution per consumer.
    """
    if root.shape != (1, 1):
        raise ContractError(f"backward root must be 1x1, got {root.shape}")
    if not root.requires_grad:
        return
    order = _ordered_nodes(root)
    # Per-call partials keep earlier accumulated grads out of this pass.
    partial: dict[int, np.ndarray] = {id(root): np.ones((1, 1))}
    for node in reversed(order):
        g = partial.get(id(node))
        if g is None:
            continue
        for parent, fn in zip(node._parents, node._grad_fns):
            if parent.requires_grad:
                key = id(parent)
                contribution = fn(g)
                if key in partial:
                    partial[key] = partial[key] + contribution
                else:
                    partial[key] = contribution
    for node in order:
        g = partial.get(id(node))
        if g is not None:
            node._accumulate(g)


def zero_grad(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray,
               step: float = 1e-5) -> float:
    """Compare the tape gradient of f at x against central differences.

    ``f`` must be a deterministic function from one matrix tensor to a 1×1
    tensor. Returns the maximum relative error over entries, with the
    denominator floored at 1e-8 so near-zero gradients compare absolutely.
    """
    x = _as_matrix(x).copy()
    leaf = Tensor(x)
    out = f(leaf)
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x)

    numeric = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        bump = x.copy()
        bump[idx] += step
        hi = f(Tensor(bump)).value[0, 0]
        bump[idx] -= 2.0 * step
        lo = f(Tensor(bump)).value[0, 0]
        numeric[idx] = (hi - lo) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())


def glorot_uniform(rows: int, cols: int, rng: np.random.Generator) -> Tensor:
    """Weight matrix drawn from uniform(±sqrt(6 / (rows + cols)))."""
    limit = np.sqrt(6.0 / (rows + cols))
    return Tensor(rng.uniform(-limit, limit, size=(rows, cols)))


def zeros_param(rows: int, cols: int) -> Tensor:
    return Tensor(np.zeros((rows, cols)))


class Adam:
    """Adaptive moment estimation over a fixed list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros(p.shape) for p in self.params]
        self._v = [np.zeros(p.shape) for p in self.params]

    def step(self) -> None:
        """Apply one update from the gradients currently on the parameters."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad if p.grad is not None else 0.0
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            p.value = p.value - self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
