"""Reverse-mode automatic differentiation over dense float64 arrays.

Small by design: the planning network needs linear maps, a handful of
elementwise nonlinearities, softmax variants and cross-entropy, all over
matrices of at most a few hundred rows.  Every operation returns a new
``Tensor`` holding its inputs and a closure that maps the output gradient
to input gradients; ``backward`` walks the recorded graph once in reverse
topological order.  Graphs live for a single decision and are dropped
afterwards, so there is no cross-step gradient flow by construction.

Gradients accumulate into ``Tensor.grad`` (sum semantics), which lets a
batch of separately built graphs share parameter leaves; call
``zero_grads`` between optimization steps.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """A node in the computation graph.

    ``value`` is always a float64 ndarray.  Leaves (parameters, constants)
    have no parents; interior nodes carry the closure that backpropagates
    through the op that built them.
    """

    def __init__(self, value, parents=(), backward=None, name=""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.name = name
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.value.shape})"


def constant(value, name="") -> Tensor:
    """Leaf tensor; gradients accumulate but nothing is learned from them."""
    return Tensor(value, name=name)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor, seed_grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable tensor's ``grad``.

    ``loss`` must be scalar-valued unless ``seed_grad`` supplies the output
    gradient explicitly (used to weight a loss term by a constant).
    """
    if seed_grad is None:
        if loss.value.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        seed_grad = np.ones_like(loss.value)
    else:
        seed_grad = np.asarray(seed_grad, dtype=np.float64)
        if seed_grad.shape != loss.value.shape:
            raise ValueError(
                f"seed gradient shape {seed_grad.shape} does not match loss {loss.value.shape}"
            )

    # Iterative post-order: every tensor is appended after all of its
    # parents, so the reversed list visits consumers before producers.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): seed_grad}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None:
                continue
            pid = id(parent)
            grads[pid] = pg if pid not in grads else grads[pid] + pg


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    value = a.value + b.value
    return Tensor(
        value,
        parents=(a, b),
        backward=lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    value = a.value - b.value
    return Tensor(
        value,
        parents=(a, b),
        backward=lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    value = a.value * b.value
    return Tensor(
        value,
        parents=(a, b),
        backward=lambda g: (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return Tensor(a.value * s, parents=(a,), backward=lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.value.shape} x {b.value.shape}")
    value = a.value @ b.value
    return Tensor(
        value,
        parents=(a, b),
        backward=lambda g: (g @ b.value.T, a.value.T @ g),
    )


def transpose(a: Tensor) -> Tensor:
    return Tensor(a.value.T, parents=(a,), backward=lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor(
        a.value.reshape(shape), parents=(a,), backward=lambda g: (g.reshape(a.value.shape),)
    )


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two matrices along the feature (last) axis."""
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[0] != b.value.shape[0]:
        raise ValueError(f"concat_cols shape mismatch: {a.value.shape} | {b.value.shape}")
    split = a.value.shape[1]
    value = np.concatenate([a.value, b.value], axis=1)
    return Tensor(value, parents=(a, b), backward=lambda g: (g[:, :split], g[:, split:]))


def pick(a: Tensor, index: int) -> Tensor:
    """Select one entry of a vector as a scalar tensor."""
    if a.value.ndim != 1:
        raise ValueError(f"pick expects a vector, got shape {a.value.shape}")
    index = int(index)

    def back(g):
        out = np.zeros_like(a.value)
        out[index] = g
        return (out,)

    return Tensor(a.value[index], parents=(a,), backward=back)


def sum_all(a: Tensor) -> Tensor:
    return Tensor(a.value.sum(), parents=(a,), backward=lambda g: (g * np.ones_like(a.value),))


def relu(a: Tensor) -> Tensor:
    keep = a.value > 0
    return Tensor(a.value * keep, parents=(a,), backward=lambda g: (g * keep,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.value
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return Tensor(s, parents=(a,), backward=lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.value)
    return Tensor(t, parents=(a,), backward=lambda g: (g * (1.0 - t * t),))


def row_softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis of a matrix, max-subtracted for stability."""
    if a.value.ndim != 2:
        raise ValueError(f"row_softmax expects a matrix, got shape {a.value.shape}")
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return Tensor(p, parents=(a,), backward=back)


def masked_softmax(logits: Tensor, mask) -> Tensor:
    """Softmax over the unmasked entries of a vector.

    ``mask`` is boolean, True where the entry stays in play.  Masked
    entries come out exactly 0 and receive no gradient.
    """
    mask = np.asarray(mask, dtype=bool)
    if logits.value.ndim != 1 or mask.shape != logits.value.shape:
        raise ValueError(
            f"masked_softmax shapes disagree: logits {logits.value.shape}, mask {mask.shape}"
        )
    if not mask.any():
        raise ValueError("masked_softmax: no remaining nodes")
    z = logits.value - logits.value[mask].max()
    e = np.where(mask, np.exp(z), 0.0)
    p = e / e.sum()

    def back(g):
        dot = (g * p).sum()
        return (p * (g - dot),)

    return Tensor(p, parents=(logits,), backward=back)


def cross_entropy(probs: Tensor, target: int) -> Tensor:
    """Negative log-likelihood of ``target`` under an explicit distribution.

    Composed after a softmax this backpropagates the familiar
    (probabilities minus one-hot) gradient into the logits.
    """
    target = int(target)
    if probs.value.ndim != 1:
        raise ValueError(f"cross_entropy expects a probability vector, got {probs.value.shape}")
    if not (0 <= target < probs.value.size):
        raise ValueError(f"cross_entropy target {target} out of range")
    p = float(probs.value[target])
    if p <= 0.0:
        raise ValueError(f"cross_entropy: target {target} has zero probability (masked)")

    def back(g):
        out = np.zeros_like(probs.value)
        out[target] = -g / p
        return (out,)

    return Tensor(-np.log(p), parents=(probs,), backward=back)


# ---------------------------------------------------------------------------
# Numerical gradient checking
# ---------------------------------------------------------------------------


def grad_check(f, tensors, h=1e-5, sample=None, seed=0) -> float:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` takes no arguments, reads the current values of ``tensors`` and
    returns a scalar Tensor; it must be deterministic.  Returns the max
    relative error over all checked coordinates, with denominator
    max(|analytic|, |numeric|, 1e-8).  ``sample`` caps the number of
    coordinates probed per tensor (seeded choice) to keep large checks
    inside a time budget.
    """
    tensors = list(tensors)
    zero_grads(tensors)
    backward(f())
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.value) for t in tensors
    ]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(tensors, analytic):
        flat = t.value.reshape(-1)
        a_flat = a.reshape(-1)
        if sample is not None and flat.size > sample:
            idxs = np.sort(rng.choice(flat.size, size=sample, replace=False))
        else:
            idxs = np.arange(flat.size)
        for i in idxs:
            kept = flat[i]
            flat[i] = kept + h
            up = float(f().value)
            flat[i] = kept - h
            down = float(f().value)
            flat[i] = kept
            numeric = (up - down) / (2.0 * h)
            rel = abs(a_flat[i] - numeric) / max(abs(a_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, rel)
    zero_grads(tensors)
    return worst
