"""Minimal reverse-mode differentiation on numpy arrays.

A ``Tape`` records operations as they execute (define-by-run) and replays
them in reverse to accumulate gradients into ``Parameter`` objects. Only
the handful of ops the ranking model needs are provided: dense layers,
component-wise activations, embedding lookups, elementwise arithmetic,
reductions, concatenation and a stop-gradient barrier.

Everything is float64. Tapes are single-use: build one per forward pass.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when operand shapes do not conform."""


class EmbeddingIndexError(IndexError):
    """Raised on an out-of-vocabulary embedding lookup."""


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Node:
    """A value produced on a tape. Holds data and (during backward) a grad."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = _as_f64(data)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape


class Parameter:
    """Named trainable array with a persistent gradient buffer."""

    def __init__(self, name: str, value, trainable: bool = True):
        self.name = name
        self.value = _as_f64(value)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


class EmbeddingTable:
    """Lookup table for a categorical feature; rows is a [vocab, dim] Parameter."""

    def __init__(self, name: str, vocab_size: int, dim: int, rng: np.random.Generator):
        if vocab_size < 1 or dim < 1:
            raise ValueError(f"bad embedding size ({vocab_size}, {dim})")
        self.vocab_size = vocab_size
        self.dim = dim
        self.rows = Parameter(name, rng.normal(0.0, 0.01, size=(vocab_size, dim)))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tape:
    """Ordered op record; backward() replays it in strict reverse order."""

    def __init__(self):
        self._ops = []  # (output Node, backward fn taking output grad)

    # -- leaves ---------------------------------------------------------

    def constant(self, data) -> Node:
        return Node(data)

    def leaf(self, param: Parameter) -> Node:
        node = Node(param.value)

        def back(g):
            if param.trainable:
                param.grad += g

        self._ops.append((node, back))
        return node

    # -- elementwise ----------------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        out = Node(a.data + b.data)

        def back(g):
            self._accum(a, _unbroadcast(g, a.data.shape))
            self._accum(b, _unbroadcast(g, b.data.shape))

        self._ops.append((out, back))
        return out

    def sub(self, a: Node, b: Node) -> Node:
        out = Node(a.data - b.data)

        def back(g):
            self._accum(a, _unbroadcast(g, a.data.shape))
            self._accum(b, _unbroadcast(-g, b.data.shape))

        self._ops.append((out, back))
        return out

    def mul(self, a: Node, b: Node) -> Node:
        out = Node(a.data * b.data)

        def back(g):
            self._accum(a, _unbroadcast(g * b.data, a.data.shape))
            self._accum(b, _unbroadcast(g * a.data, b.data.shape))

        self._ops.append((out, back))
        return out

    def scale(self, a: Node, c: float) -> Node:
        out = Node(a.data * c)

        def back(g):
            self._accum(a, g * c)

        self._ops.append((out, back))
        return out

    def relu(self, a: Node) -> Node:
        out = Node(np.maximum(a.data, 0.0))
        mask = (a.data > 0.0).astype(np.float64)

        def back(g):
            self._accum(a, g * mask)

        self._ops.append((out, back))
        return out

    def sigmoid(self, a: Node) -> Node:
        s = 1.0 / (1.0 + np.exp(-a.data))
        out = Node(s)

        def back(g):
            self._accum(a, g * s * (1.0 - s))

        self._ops.append((out, back))
        return out

    def log(self, a: Node) -> Node:
        out = Node(np.log(a.data))

        def back(g):
            self._accum(a, g / a.data)

        self._ops.append((out, back))
        return out

    def abs(self, a: Node) -> Node:
        out = Node(np.abs(a.data))
        sign = np.sign(a.data)

        def back(g):
            self._accum(a, g * sign)

        self._ops.append((out, back))
        return out

    def clip(self, a: Node, lo: float, hi: float) -> Node:
        """Clamp values; gradient passes through only where unclipped."""
        out = Node(np.clip(a.data, lo, hi))
        mask = ((a.data > lo) & (a.data < hi)).astype(np.float64)

        def back(g):
            self._accum(a, g * mask)

        self._ops.append((out, back))
        return out

    def softmax(self, a: Node) -> Node:
        """Softmax over the last axis."""
        shifted = a.data - a.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        s = e / e.sum(axis=-1, keepdims=True)
        out = Node(s)

        def back(g):
            dot = (g * s).sum(axis=-1, keepdims=True)
            self._accum(a, s * (g - dot))

        self._ops.append((out, back))
        return out

    # -- reductions -----------------------------------------------------

    def sum(self, a: Node, axis=None) -> Node:
        out = Node(a.data.sum(axis=axis))

        def back(g):
            if axis is None:
                self._accum(a, np.full_like(a.data, g))
            else:
                self._accum(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

        self._ops.append((out, back))
        return out

    def mean(self, a: Node, axis=None) -> Node:
        n = a.data.size if axis is None else a.data.shape[axis]
        return self.scale(self.sum(a, axis=axis), 1.0 / n)

    # -- linear algebra -------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
            raise ShapeMismatchError(
                f"matmul shapes do not conform: {a.data.shape} @ {b.data.shape}"
            )
        out = Node(a.data @ b.data)

        def back(g):
            self._accum(a, g @ b.data.T)
            self._accum(b, a.data.T @ g)

        self._ops.append((out, back))
        return out

    def dense(self, x: Node, weights: Parameter, bias: Parameter) -> Node:
        """x @ W + b with [batch, in] x [in, out] + [out]."""
        if x.data.ndim != 2 or x.data.shape[1] != weights.shape[0]:
            raise ShapeMismatchError(
                f"dense input {x.data.shape} does not match weights {weights.shape}"
            )
        if bias.shape != (weights.shape[1],):
            raise ShapeMismatchError(
                f"dense bias {bias.shape} does not match weights {weights.shape}"
            )
        w = self.leaf(weights)
        b = self.leaf(bias)
        return self.add(self.matmul(x, w), b)

    def concat(self, nodes: list, axis: int = 1) -> Node:
        datas = [n.data for n in nodes]
        out = Node(np.concatenate(datas, axis=axis))
        sizes = [d.shape[axis] for d in datas]
        splits = np.cumsum(sizes)[:-1]

        def back(g):
            for node, piece in zip(nodes, np.split(g, splits, axis=axis)):
                self._accum(node, piece)

        self._ops.append((out, back))
        return out

    def slice_cols(self, a: Node, start: int, stop: int) -> Node:
        out = Node(a.data[:, start:stop])

        def back(g):
            full = np.zeros_like(a.data)
            full[:, start:stop] = g
            self._accum(a, full)

        self._ops.append((out, back))
        return out

    # -- embeddings -----------------------------------------------------

    def embedding(self, table: EmbeddingTable, indices) -> Node:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= table.vocab_size):
            bad = idx[(idx < 0) | (idx >= table.vocab_size)][0]
            raise EmbeddingIndexError(
                f"index {bad} out of range for vocab of {table.vocab_size}"
            )
        param = table.rows
        out = Node(param.value[idx])

        def back(g):
            if param.trainable:
                np.add.at(param.grad, idx, g)

        self._ops.append((out, back))
        return out

    # -- control --------------------------------------------------------

    def stop_gradient(self, a: Node) -> Node:
        """Forward identity; nothing is recorded, so no gradient flows back."""
        return Node(a.data.copy())

    def backward(self, loss: Node):
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, back in reversed(self._ops):
            if out.grad is not None:
                back(out.grad)

    def dispose(self):
        """Drop the op record so the tape is freed by plain refcounting.

        Backward closures capture the tape, so every tape is a reference
        cycle that only the cyclic GC can reclaim. Callers that build many
        short-lived tapes (chunked prediction over large candidate sets)
        call this to release the recorded arrays immediately.
        """
        self._ops.clear()

    @staticmethod
    def _accum(node: Node, g: np.ndarray):
        if node.grad is None:
            node.grad = np.zeros_like(node.data)
        node.grad += g


class Adam:
    """Adam with bias correction; state is serializable for warm starts."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state = {
            p.name: {"m": np.zeros_like(p.value), "v": np.zeros_like(p.value), "t": 0}
            for p in self.params
        }

    def zero_grads(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p in self.params:
            if not p.trainable:
                continue
            st = self.state[p.name]
            st["t"] += 1
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * p.grad
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * p.grad**2
            m_hat = st["m"] / (1.0 - self.beta1 ** st["t"])
            v_hat = st["v"] / (1.0 - self.beta2 ** st["t"])
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {
            name: {"m": st["m"].copy(), "v": st["v"].copy(), "t": st["t"]}
            for name, st in self.state.items()
        }

    def load_state_dict(self, state: dict):
        for name, st in state.items():
            self.state[name] = {
                "m": _as_f64(st["m"]).reshape(self.state[name]["m"].shape),
                "v": _as_f64(st["v"]).reshape(self.state[name]["v"].shape),
                "t": int(st["t"]),
            }


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))
