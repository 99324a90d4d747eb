"""Dense float64 tensors with reverse-mode autodiff.

Everything downstream (attention stacks, seq2seq models, the action decoder,
both training losses) is built from the primitives here. Models are tiny, so
the design optimizes for checkable math, not throughput: float64 everywhere,
plain numpy forward ops, one backward closure per op, gradients accumulated
into `Tensor.grad` in reverse topological order.
"""

from __future__ import annotations

import numpy as np

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_grad_enabled = True


class no_grad:
    """Context manager that skips graph construction (generation/eval paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A numpy array plus the graph edges needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward_fn", "_recompute")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._recompute = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape})"


def param(data, name: str | None = None) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(data, requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, recompute) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
        out._recompute = recompute
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# The tape: topological record of one forward computation.
# ---------------------------------------------------------------------------


class Tape:
    """The recorded op graph below one output node.

    `nodes` is in topological order (parents before children), so `replay`
    reproduces every forward value bit-for-bit and `backward` visits nodes in
    reverse topological order.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

    def replay(self) -> np.ndarray:
        """Recompute every non-leaf value in order; returns the root's data."""
        for node in self.nodes:
            if node._recompute is not None:
                node.data = node._recompute()
        return self.root.data

    def backward(self) -> None:
        if self.root.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.root.data.shape}")
        self.root.accumulate_grad(np.ones_like(self.root.data))
        for node in reversed(self.nodes):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into `.grad` of every reachable leaf."""
    Tape(loss).backward()


# ---------------------------------------------------------------------------
# Primitive ops.
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd, lambda: a.data + b.data)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), bwd, lambda: a.data - b.data)


def mul(a, b) -> Tensor:
    """Elementwise product; either side may be a plain scalar/array constant."""
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bwd, lambda: a.data * b.data)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    data = a.data * c

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * c)

    return _make(data, (a,), bwd, lambda: a.data * c)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _make(data, (a, b), bwd, lambda: a.data @ b.data)


def transpose(a: Tensor) -> Tensor:
    data = a.data.T

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.T)

    return _make(data, (a,), bwd, lambda: a.data.T)


def narrow(a: Tensor, axis: int, start: int, size: int) -> Tensor:
    """Contiguous slice along one axis."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + size)
    idx = tuple(idx)
    data = a.data[idx].copy()

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            a.accumulate_grad(full)

    return _make(data, (a,), bwd, lambda: a.data[idx].copy())


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def bwd(g):
        offset = 0
        for p, size in zip(parts, sizes):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + size)
                p.accumulate_grad(g[tuple(idx)])
            offset += size

    return _make(data, tuple(parts), bwd, lambda: np.concatenate([p.data for p in parts], axis=axis))


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0))

    return _make(data, (a,), bwd, lambda: np.maximum(a.data, 0.0))


def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        if a.requires_grad:
            s = 1.0 / (1.0 + np.exp(-a.data))
            a.accumulate_grad(g * s * (1.0 - s))

    return _make(data, (a,), bwd, lambda: 1.0 / (1.0 + np.exp(-a.data)))


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bwd(g):
        if a.requires_grad:
            t = np.tanh(a.data)
            a.accumulate_grad(g * (1.0 - t * t))

    return _make(data, (a,), bwd, lambda: np.tanh(a.data))


def sum_all(a: Tensor) -> Tensor:
    data = np.array(a.data.sum())

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, float(g)))

    return _make(data, (a,), bwd, lambda: np.array(a.data.sum()))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    data = np.array(a.data.mean())

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, float(g) / n))

    return _make(data, (a,), bwd, lambda: np.array(a.data.mean()))


def dot(a: Tensor, b) -> Tensor:
    """Inner product of two vectors; `b` may be a constant weight array."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape or a.data.ndim != 1:
        raise ShapeError(f"dot expects equal-length vectors: {a.data.shape} vs {b.data.shape}")
    data = np.array(a.data @ b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(float(g) * b.data)
        if b.requires_grad:
            b.accumulate_grad(float(g) * a.data)

    return _make(data, (a, b), bwd, lambda: np.array(a.data @ b.data))


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise stabilized softmax over the last axis.

    `mask` (same shape, True = attend) zeroes excluded positions; a row with
    no attendable position is rejected. Non-finite inputs are rejected.
    """
    if not np.isfinite(x.data).all():
        raise ValueError("softmax input contains non-finite values")
    scores = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != scores.shape:
            raise ShapeError(f"mask shape {mask.shape} != input shape {scores.shape}")
        if not mask.any(axis=-1).all():
            raise ValueError("softmax mask excludes all positions for some query")
        scores = np.where(mask, scores, -np.inf)

    def fwd(s):
        m = s.max(axis=-1, keepdims=True)
        e = np.exp(s - m)
        return e / e.sum(axis=-1, keepdims=True)

    data = fwd(scores)

    def bwd(g):
        if x.requires_grad:
            p = data
            inner = (g * p).sum(axis=-1, keepdims=True)
            x.accumulate_grad((g - inner) * p)

    def recompute():
        s = x.data if mask is None else np.where(mask, x.data, -np.inf)
        return fwd(s)

    return _make(data, (x,), bwd, recompute)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log softmax over the last axis."""

    def fwd(s):
        m = s.max(axis=-1, keepdims=True)
        z = s - m
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    data = fwd(x.data)

    def bwd(g):
        if x.requires_grad:
            p = np.exp(data)
            x.accumulate_grad(g - p * g.sum(axis=-1, keepdims=True))

    return _make(data, (x,), bwd, lambda: fwd(x.data))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Variance is the biased estimator with eps 1e-5 inside the square root;
    last-axis length must be >= 2.
    """
    if x.data.shape[-1] < 2:
        raise ShapeError("layer_norm requires vectors of length >= 2")
    gain, bias = _as_tensor(gain), _as_tensor(bias)

    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data

    def bwd(g):
        d = x.data.shape[-1]
        if gain.requires_grad:
            gain.accumulate_grad(_unbroadcast(g * xhat, gain.data.shape))
        if bias.requires_grad:
            bias.accumulate_grad(_unbroadcast(g, bias.data.shape))
        if x.requires_grad:
            gx = g * gain.data
            term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(term * inv)

    def recompute():
        m = x.data.mean(axis=-1, keepdims=True)
        v = ((x.data - m) ** 2).mean(axis=-1, keepdims=True)
        return (x.data - m) / np.sqrt(v + LAYER_NORM_EPS) * gain.data + bias.data

    return _make(data, (x, gain, bias), bwd, recompute)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of `table` by an integer id array of any shape."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.data.shape[0]})")

    data = table.data[ids]

    def bwd(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
            table.accumulate_grad(acc)

    return _make(data, (table,), bwd, lambda: table.data[ids])


def gather_rows(x: Tensor, idx) -> Tensor:
    """Pick x[i, idx[i]] for each row, giving a vector."""
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(x.data.shape[0])
    data = x.data[rows, idx]

    def bwd(g):
        if x.requires_grad:
            acc = np.zeros_like(x.data)
            acc[rows, idx] = g
            x.accumulate_grad(acc)

    return _make(data, (x,), bwd, lambda: x.data[rows, idx])


def pair_bias_scores(q: Tensor, r: Tensor) -> Tensor:
    """scores[i, j] = q[i] . r[i, j] for per-pair bias vectors r [n, n, d]."""
    data = np.einsum("id,ijd->ij", q.data, r.data)

    def bwd(g):
        if q.requires_grad:
            q.accumulate_grad(np.einsum("ij,ijd->id", g, r.data))
        if r.requires_grad:
            r.accumulate_grad(np.einsum("ij,id->ijd", g, q.data))

    return _make(data, (q, r), bwd, lambda: np.einsum("id,ijd->ij", q.data, r.data))


def pair_bias_values(a: Tensor, r: Tensor) -> Tensor:
    """out[i] = sum_j a[i, j] * r[i, j] for attention weights a and biases r."""
    data = np.einsum("ij,ijd->id", a.data, r.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.einsum("id,ijd->ij", g, r.data))
        if r.requires_grad:
            r.accumulate_grad(np.einsum("ij,id->ijd", a.data, g))

    return _make(data, (a, r), bwd, lambda: np.einsum("ij,ijd->id", a.data, r.data))


# ---------------------------------------------------------------------------
# Optimizers.
# ---------------------------------------------------------------------------


def sgd_step(params, grads, learning_rate: float):
    """p <- p - lr * g for parallel lists of tensors/arrays; returns params."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params vs {len(grads)} grads")
    for p, g in zip(params, grads):
        target = p.data if isinstance(p, Tensor) else p
        garr = np.asarray(g, dtype=np.float64)
        if target.shape != garr.shape:
            raise ShapeError(f"param shape {target.shape} != grad shape {garr.shape}")
        target -= learning_rate * garr
    return params


class SGD:
    """Plain gradient descent over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for p in self.params.values():
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class Adam:
    """Adaptive-moment variant. Parameters with no grad are left untouched."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if name not in self._m:
                self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
                self._t[name] = 0
            self._t[name] += 1
            t = self._t[name]
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def make_optimizer(kind: str, params: dict[str, Tensor], lr: float):
    if kind == "sgd":
        return SGD(params, lr)
    if kind == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer kind {kind!r}")


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all grads so their global L2 norm is at most `max_norm`."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
