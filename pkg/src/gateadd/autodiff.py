"""Small reverse-mode autodiff over float64 numpy arrays.

Graphs are built define-by-run. Each graph is single use: ``backward`` walks
the tape once, pushes gradients into the leaf tensors (parameters), and then
releases the intermediate closures. Running ``backward`` on a consumed graph
raises :class:`GraphConsumedError`. Gradients on leaves accumulate across
graphs until :func:`zero_grad` is called.
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "DenseLayer", "Mlp", "AdamW",
    "ShapeError", "NonFiniteError", "GraphConsumedError",
    "no_grad", "is_grad_enabled", "concat", "zero_grad", "clip_grad_norm",
    "finite_difference_grad", "relative_error",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphConsumedError(RuntimeError):
    pass


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (per thread)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, _op: str = ""):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if (requires_grad and _backward is None) else None
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._consumed = False

    @classmethod
    def leaf(cls, data, requires_grad: bool = False) -> "Tensor":
        arr = _as_array(data)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor values must be finite")
        return cls(arr, requires_grad=requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._consumed

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph plumbing ---------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> "Tensor":
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, _op=op)
        return Tensor(data)

    def backward(self) -> None:
        if self._consumed:
            raise GraphConsumedError("graph already consumed by a previous backward()")
        if self.data.shape != (1,):
            raise ShapeError(f"backward() needs a scalar of shape (1,), got {self.shape}")
        if not np.isfinite(self.data[0]):
            raise NonFiniteError(f"non-finite loss {self.data[0]}")
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node._consumed:
                    raise GraphConsumedError("tensor belongs to an already consumed graph")
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._consumed = True

    # -- elementwise arithmetic ------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._make(self.data + other.data, (self, other), backward, "add")

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), -_unbroadcast(g, b_shape)

        return Tensor._make(self.data - other.data, (self, other), backward, "sub")

    def __rsub__(self, other) -> "Tensor":
        return Tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        if not isinstance(other, Tensor):
            const = np.asarray(other, dtype=np.float64)
            a_shape = self.shape
            return Tensor._make(self.data * const, (self,),
                                lambda g: (_unbroadcast(g * const, a_shape),), "mul_const")
        a, b = self, other

        def backward(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._make(a.data * b.data, (a, b), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, scalar: float) -> "Tensor":
        if isinstance(scalar, Tensor):
            raise TypeError("division is only supported by constants")
        return self * (1.0 / scalar)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        if self.data.ndim != 2 or other.data.ndim != 2 or self.shape[1] != other.shape[0]:
            raise ShapeError(f"matmul shape mismatch {self.shape} @ {other.shape}")
        a, b = self, other

        def backward(g):
            return g @ b.data.T, a.data.T @ g

        return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")

    def square(self) -> "Tensor":
        x = self.data
        return Tensor._make(x * x, (self,), lambda g: (2.0 * x * g,), "square")

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)

        def backward(g):
            with np.errstate(divide="ignore", invalid="ignore"):
                d = np.where(out > 0, 0.5 / out, 0.0)
            return (g * d,)

        return Tensor._make(out, (self,), backward, "sqrt")

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._make(self.data * mask, (self,), lambda g: (g * mask,), "relu")

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    # -- reductions and reshaping ----------------------------------------

    def sum(self, axis: int | None = None) -> "Tensor":
        shape = self.shape
        if axis is None:
            return Tensor._make(np.array([self.data.sum()]), (self,),
                                lambda g: (np.broadcast_to(g[0], shape).copy(),), "sum")
        out = self.data.sum(axis=axis)

        def backward(g):
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

        return Tensor._make(out, (self,), backward, "sum_axis")

    def mean(self, axis: int | None = None) -> "Tensor":
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis) * (1.0 / n)

    def norm_rows(self) -> "Tensor":
        """Euclidean norm over the last axis; gradient at a zero row is taken as 0."""
        x = self.data
        out = np.sqrt(np.sum(x * x, axis=-1))

        def backward(g):
            with np.errstate(divide="ignore", invalid="ignore"):
                scale = np.where(out > 0, g / out, 0.0)
            return (x * scale[..., None],)

        return Tensor._make(out, (self,), backward, "norm_rows")

    def reshape(self, *shape) -> "Tensor":
        src = self.shape
        return Tensor._make(self.data.reshape(*shape), (self,), lambda g: (g.reshape(src),), "reshape")

    def __getitem__(self, index) -> "Tensor":
        src = self.shape

        out = self.data[index]
        view_shape = np.shape(out)

        basic = isinstance(index, slice) or (
            isinstance(index, tuple) and all(isinstance(i, slice) for i in index))

        def backward(g):
            full = np.zeros(src)
            if basic:
                full[index] = g.reshape(view_shape)
            else:
                np.add.at(full, index, g.reshape(view_shape))
            return (full,)

        if out.ndim == 0:
            out = out.reshape(1)
        return Tensor._make(out, (self,), backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._make(data, tuple(tensors), backward, "concat")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Fused ``x @ weight.T + bias`` for a [batch, in] input and [out, in] weight."""
    def backward(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return Tensor._make(x.data @ weight.data.T + bias.data, (x, weight, bias), backward, "linear")


# -- layers -----------------------------------------------------------------

ACTIVATIONS = ("relu", "tanh", "identity")


class DenseLayer:
    """Affine map with optional inverted dropout on its input."""

    def __init__(self, in_dim: int, out_dim: int, activation: str = "relu",
                 dropout: float = 0.0, rng: np.random.Generator | None = None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {dropout}")
        rng = rng if rng is not None else np.random.default_rng(0)
        if activation == "relu":
            bound = math.sqrt(6.0 / in_dim)
        else:
            bound = math.sqrt(6.0 / (in_dim + out_dim))
        self.weight = Tensor(rng.uniform(-bound, bound, size=(out_dim, in_dim)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)
        self.activation = activation
        self.dropout = float(dropout)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        if train and self.dropout > 0.0:
            if rng is None:
                raise ValueError("train-mode dropout needs a random generator")
            keep = rng.random(x.shape) >= self.dropout
            x = x * (keep / (1.0 - self.dropout))
        out = linear(x, self.weight, self.bias)
        if self.activation == "relu":
            return out.relu()
        if self.activation == "tanh":
            return out.tanh()
        return out


class Mlp:
    """Chain of dense layers with a single freeze switch."""

    def __init__(self, layers: list[DenseLayer]):
        if not layers:
            raise ValueError("an Mlp needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}")
        self.layers = layers
        self._frozen = False

    @classmethod
    def build(cls, sizes: Sequence[int], hidden_activation: str = "relu",
              output_activation: str = "identity", dropout: float = 0.0,
              rng: np.random.Generator | None = None) -> "Mlp":
        """``sizes`` lists every width, input first: ``[100, 50, 50]`` is two layers."""
        if len(sizes) < 2:
            raise ValueError("sizes needs an input and an output width")
        rng = rng if rng is not None else np.random.default_rng(0)
        n = len(sizes) - 1
        layers = [
            DenseLayer(sizes[k], sizes[k + 1],
                       hidden_activation if k < n - 1 else output_activation,
                       dropout, rng)
            for k in range(n)
        ]
        return cls(layers)

    @classmethod
    def identity(cls, dim: int) -> "Mlp":
        layer = DenseLayer(dim, dim, "identity", 0.0)
        layer.weight.data[...] = np.eye(dim)
        return cls([layer])

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self._frozen = bool(value)
        for _, p in self.named_parameters():
            p.requires_grad = not self._frozen
            if self._frozen:
                p.grad = None
            elif p.grad is None:
                p.grad = np.zeros_like(p.data)

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for k, layer in enumerate(self.layers):
            out.append((f"{prefix}{k}.weight", layer.weight))
            out.append((f"{prefix}{k}.bias", layer.bias))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def spec(self) -> dict:
        return {
            "sizes": [self.in_dim] + [layer.out_dim for layer in self.layers],
            "activations": [layer.activation for layer in self.layers],
            "dropout": [layer.dropout for layer in self.layers],
            "frozen": self.frozen,
        }

    @classmethod
    def from_spec(cls, spec: dict) -> "Mlp":
        sizes = spec["sizes"]
        layers = [
            DenseLayer(sizes[k], sizes[k + 1], spec["activations"][k], spec["dropout"][k])
            for k in range(len(sizes) - 1)
        ]
        mlp = cls(layers)
        mlp.frozen = spec.get("frozen", False)
        return mlp

    def __call__(self, x: Tensor, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"expected last dim {self.in_dim}, got {x.shape}")
        if not np.all(np.isfinite(x.data)):
            raise NonFiniteError("non-finite input to Mlp")
        train = mode == "train"
        for layer in self.layers:
            x = layer(x, train, rng)
        return x


def forward_mlp(mlp: Mlp, x: Tensor, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
    return mlp(x, mode, rng)


# -- optimisation -------------------------------------------------------------

def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        if p.grad is not None:
            p.grad.fill(0.0)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


class AdamW:
    """Adam with decoupled weight decay (Loshchilov & Hutter)."""

    def __init__(self, params: Sequence[Tensor], lr: float = 5e-4, betas: tuple = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        if not 0.0 < betas[0] < 1.0 or not 0.0 < betas[1] < 1.0:
            raise ValueError(f"betas must lie in (0, 1), got {betas}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if not p.requires_grad:
                raise ValueError("frozen parameter passed to the optimizer")
            if p.grad is None:
                raise ValueError("parameter has no gradient")
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteError("non-finite gradient")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{k}"] = m
            out[f"v.{k}"] = v
        return out


# -- gradient checking ------------------------------------------------------

def finite_difference_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar-valued closure with respect to ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            plus = fn().item()
            flat[k] = orig - h
            minus = fn().item()
            flat[k] = orig
            gflat[k] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = float(np.linalg.norm(a - b))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-8)
    return num / den
