"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Every backward rule is written with ``Tensor`` operations. Running a
backward pass with ``create_graph=True`` therefore records a graph of the
gradient computation itself, which can be differentiated again; the
alignment-aware training objective needs exactly that.
"""

from __future__ import annotations

import contextlib
import json
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import CapacityError, DimensionError, NumericError

DEFAULT_MAX_JACOBIAN_ENTRIES = 10**7

_grad_enabled = True


@contextlib.contextmanager
def grad_mode(enabled: bool):
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = enabled
    try:
        yield
    finally:
        _grad_enabled = prev


def no_grad():
    return grad_mode(False)


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense float64 array with an optional link into the autodiff tape."""

    __slots__ = ("data", "requires_grad", "op", "parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        n = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return scale(tsum(self, axis=axis, keepdims=keepdims), 1.0 / n)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)

    @property
    def T(self) -> Tensor:
        return transpose(self, None)

    def tanh(self) -> Tensor:
        return tanh(self)

    def relu(self) -> Tensor:
        return relu(self)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def sqrt(self) -> Tensor:
        return sqrt(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1
    )
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    return reshape(g, shape)


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(scale(g, -1.0), b.shape)

    return _node(a.data - b.data, "add", (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _node(a.data * c, "scale", (a,), lambda g: (scale(g, c),))


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)) and not isinstance(a, (int, float)):
        return scale(a, b)
    if isinstance(a, (int, float)) and not isinstance(b, (int, float)):
        return scale(b, a)
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)

    return _node(a.data * b.data, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return scale(a, 1.0 / b)
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = a.data / b.data

    def backward(g):
        ga = div(g, b)
        gb = scale(div(mul(ga, a), b), -1.0)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(val, "mul", (a, b), backward)


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(t, tuple(axes))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul node needs operands of rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul node: inner dimensions differ, {a.shape} @ {b.shape}")

    def backward(g):
        return (
            _unbroadcast(matmul(g, _swap_last(b)), a.shape),
            _unbroadcast(matmul(_swap_last(a), g), b.shape),
        )

    return _node(np.matmul(a.data, b.data), "matmul", (a, b), backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), "transpose", (a,), lambda g: (transpose(g, inverse),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _node(a.data.reshape(shape), "reshape", (a,), lambda g: (reshape(g, src),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _node(
        np.broadcast_to(a.data, shape).copy(), "broadcast", (a,), lambda g: (_unbroadcast(g, src),)
    )


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    if axis is not None:
        axis = tuple(ax % a.ndim for ax in np.atleast_1d(axis))

    def backward(g):
        if not keepdims:
            kept = tuple(1 if (axis is None or i in axis) else s for i, s in enumerate(src))
            g = reshape(g, kept)
        return (broadcast_to(g, src),)

    return _node(np.sum(a.data, axis=axis, keepdims=keepdims), "sum", (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    val = np.tanh(a.data)

    def backward(g):
        t = tanh(a) if _grad_enabled else Tensor(val)
        return (mul(g, sub(1.0, mul(t, t))),)

    return _node(val, "tanh", (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = Tensor((a.data > 0).astype(np.float64))
    return _node(a.data * mask.data, "relu", (a,), lambda g: (mul(g, mask),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    val = np.exp(a.data)

    def backward(g):
        e = exp(a) if _grad_enabled else Tensor(val)
        return (mul(g, e),)

    return _node(val, "exp", (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.log(a.data)
    return _node(val, "log", (a,), lambda g: (div(g, a),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    val = np.sqrt(a.data)

    def backward(g):
        r = sqrt(a) if _grad_enabled else Tensor(val)
        return (div(scale(g, 0.5), r),)

    return _node(val, "sqrt", (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    val = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def backward(g):
        p = exp(log_softmax(a, axis)) if _grad_enabled else Tensor(np.exp(val))
        return (sub(g, mul(p, tsum(g, axis=axis, keepdims=True))),)

    return _node(val, "softmax", (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    val = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        s = softmax(a, axis) if _grad_enabled else Tensor(val)
        return (mul(s, sub(g, tsum(mul(g, s), axis=axis, keepdims=True))),)

    return _node(val, "softmax", (a,), backward)


def take(a, idx) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _node(a.data[idx], "slice", (a,), lambda g: (_scatter(g, idx, src),))


def _scatter(g: Tensor, idx, shape) -> Tensor:
    out = np.zeros(shape)
    np.add.at(out, idx, g.data)
    return _node(out, "scatter", (g,), lambda h: (take(h, idx),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            parts.append(take(g, tuple(idx)))
        return tuple(parts)

    return _node(np.concatenate([t.data for t in tensors], axis=axis), "concat", tuple(tensors), backward)


def norm(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return sqrt(tsum(mul(a, a), axis=axis, keepdims=keepdims))


# ------------------------------------------------------------ backward pass


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(
    output: Tensor,
    inputs: Tensor | Sequence[Tensor],
    seed=None,
    create_graph: bool = False,
    check_finite: bool = False,
):
    """Vector-Jacobian product ``seed^T d(output)/d(inputs)``.

    Returns a Tensor (or list of Tensors, matching ``inputs``). With
    ``create_graph=True`` the returned gradients are themselves on the tape.
    Inputs the output does not depend on get zero gradients.
    """
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    if seed is None:
        seed = np.ones_like(output.data)
    seed = as_tensor(seed)
    if seed.shape != output.shape:
        raise DimensionError(f"seed shape {seed.shape} does not match output shape {output.shape}")

    wanted = {id(t): i for i, t in enumerate(inputs)}
    results: list[Tensor | None] = [None] * len(inputs)
    grads: dict[int, Tensor] = {id(output): seed}
    if output.requires_grad:
        order = _toposort(output)
    else:
        order = [output]

    with grad_mode(create_graph):
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in wanted:
                results[wanted[id(node)]] = g
            if node._backward is None:
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if not parent.requires_grad or pg is None:
                    continue
                if check_finite and not np.all(np.isfinite(pg.data)):
                    raise NumericError(
                        f"non-finite gradient flowing from '{node.op}' node into '{parent.op}' node"
                    )
                key = id(parent)
                grads[key] = pg if key not in grads else add(grads[key], pg)

    out = [r if r is not None else Tensor(np.zeros(t.shape)) for r, t in zip(results, inputs)]
    return out[0] if single else out


# ------------------------------------------------------------ differentiable maps


class DiffMap:
    """A differentiable map acting row-wise on batches of inputs."""

    input_dim: int
    output_dim: int

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def __call__(self, x) -> Tensor:
        return self.forward(as_tensor(x))


class FunctionMap(DiffMap):
    """Wraps a plain function built from Tensor operations."""

    def __init__(self, fn: Callable[[Tensor], Tensor], input_dim: int, output_dim: int, name: str = "fn"):
        self.fn = fn
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.name = name

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.input_dim:
            raise DimensionError(f"{self.name}: expected input dim {self.input_dim}, got {x.shape[-1]}")
        return self.fn(x)


_ACTIVATIONS = {"tanh": tanh, "relu": relu}


class MLP(DiffMap):
    """Stack of linear layers and elementwise nonlinearities.

    ``layers`` is a list of descriptors, e.g. ``{"type": "linear", "in": 4,
    "out": 32}`` or ``{"type": "tanh"}``. Linear layer ``i`` owns parameters
    ``"{i}.weight"`` (shape ``(out, in)``) and ``"{i}.bias"``, and computes
    ``x @ W.T + b`` on row batches.
    """

    def __init__(self, layers: list[dict], params: dict[str, np.ndarray]):
        self.layers = [dict(layer) for layer in layers]
        self._params = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in params.items()}
        linears = [l for l in self.layers if l["type"] == "linear"]
        if not linears:
            raise ValueError("MLP needs at least one linear layer")
        self.input_dim = linears[0]["in"]
        self.output_dim = linears[-1]["out"]
        for i, layer in enumerate(self.layers):
            if layer["type"] == "linear":
                w = self._params[f"{i}.weight"]
                if w.shape != (layer["out"], layer["in"]):
                    raise DimensionError(f"layer {i}: weight shape {w.shape} != {(layer['out'], layer['in'])}")
            elif layer["type"] not in _ACTIVATIONS:
                raise ValueError(f"unknown layer type {layer['type']!r}")

    @classmethod
    def create(
        cls,
        sizes: Sequence[int],
        activation: str = "tanh",
        rng: np.random.Generator | None = None,
        init_scale: float = 1.0,
    ) -> MLP:
        """LeCun-normal initialised MLP with ``activation`` between linear layers."""
        rng = rng if rng is not None else np.random.default_rng(0)
        layers, params = [], {}
        for j, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            idx = len(layers)
            layers.append({"type": "linear", "in": int(fan_in), "out": int(fan_out)})
            params[f"{idx}.weight"] = rng.normal(0.0, init_scale / np.sqrt(fan_in), size=(fan_out, fan_in))
            params[f"{idx}.bias"] = np.zeros(fan_out)
            if j < len(sizes) - 2:
                layers.append({"type": activation})
        return cls(layers, params)

    def parameters(self) -> dict[str, Tensor]:
        return self._params

    def _run(self, x: Tensor, stop: int) -> Tensor:
        squeeze = x.ndim == 1
        if squeeze:
            x = reshape(x, (1, x.shape[0]))
        if x.shape[-1] != self.input_dim:
            raise DimensionError(
                f"layer 0 (linear {self.input_dim}->{self.layers[0].get('out')}) expects input dim "
                f"{self.input_dim}, got {x.shape[-1]}"
            )
        for i, layer in enumerate(self.layers[:stop]):
            if layer["type"] == "linear":
                x = add(matmul(x, transpose(self._params[f"{i}.weight"])), self._params[f"{i}.bias"])
            else:
                x = _ACTIVATIONS[layer["type"]](x)
            if not np.all(np.isfinite(x.data)):
                raise NumericError(f"non-finite output at layer {i} ({layer['type']})")
        if squeeze:
            x = reshape(x, (x.shape[-1],))
        return x

    def forward(self, x: Tensor) -> Tensor:
        return self._run(x, len(self.layers))

    def features(self, x) -> Tensor:
        """Output of the layer feeding the final linear layer (penultimate features)."""
        last = max(i for i, l in enumerate(self.layers) if l["type"] == "linear")
        return self._run(as_tensor(x), last)

    @property
    def feature_dim(self) -> int:
        last = max(i for i, l in enumerate(self.layers) if l["type"] == "linear")
        return self.layers[last]["in"]

    def copy(self) -> MLP:
        return MLP(self.layers, {k: v.data.copy() for k, v in self._params.items()})

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([self._params[k].data.ravel() for k in sorted(self._params)])

    def set_flat_parameters(self, flat: np.ndarray) -> None:
        pos = 0
        for k in sorted(self._params):
            t = self._params[k]
            t.data = np.asarray(flat[pos : pos + t.size], dtype=np.float64).reshape(t.shape).copy()
            pos += t.size

    def to_dict(self) -> dict:
        return {
            "arch": self.layers,
            "params": {k: {"shape": list(v.shape), "data": v.data.ravel().tolist()} for k, v in self._params.items()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> MLP:
        params = {
            k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["params"].items()
        }
        return cls(doc["arch"], params)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> MLP:
        return cls.from_dict(json.loads(Path(path).read_text()))


# ------------------------------------------------------------ map-level operations


def _vector(x, dim: int, what: str) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.shape != (dim,):
        raise DimensionError(f"{what}: expected shape ({dim},), got {x.shape}")
    return x


def evaluate(fmap: DiffMap, x) -> Tensor:
    """Forward pass; the returned Tensor carries the tape for later backward passes."""
    x = Tensor(_vector(x, fmap.input_dim, "evaluate input"), requires_grad=True)
    with grad_mode(True):
        return fmap(x)


def gradient(fmap: DiffMap, x, seed) -> np.ndarray:
    """``seed^T J(x)`` as an array of the input's shape. Parameters are not touched."""
    xt = Tensor(_vector(x, fmap.input_dim, "gradient input"), requires_grad=True)
    with grad_mode(True):
        out = fmap(xt)
    seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=np.float64)
    if seed.shape != out.shape:
        raise DimensionError(f"seed shape {seed.shape} does not match output shape {out.shape}")
    return grad(out, xt, seed, check_finite=True).data


def jacobian(fmap: DiffMap, x, max_entries: int = DEFAULT_MAX_JACOBIAN_ENTRIES) -> np.ndarray:
    """Dense ``(d_out, d_in)`` Jacobian, one reverse pass per output row."""
    need = fmap.output_dim * fmap.input_dim
    if need > max_entries:
        raise CapacityError(need, max_entries)
    xt = Tensor(_vector(x, fmap.input_dim, "jacobian input"), requires_grad=True)
    with grad_mode(True):
        out = fmap(xt)
    rows = np.empty((fmap.output_dim, fmap.input_dim))
    for i in range(fmap.output_dim):
        e = np.zeros(fmap.output_dim)
        e[i] = 1.0
        rows[i] = grad(out, xt, e, check_finite=True).data
    return rows


def batch_jacobian(fmap: DiffMap, X, max_entries: int = DEFAULT_MAX_JACOBIAN_ENTRIES) -> np.ndarray:
    """Jacobians at every row of ``X``, shape ``(n, d_out, d_in)``.

    Uses one reverse pass per output coordinate for the whole batch, which is
    valid because the map acts on rows independently.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    need = n * fmap.output_dim * fmap.input_dim
    if need > max_entries:
        raise CapacityError(need, max_entries)
    xt = Tensor(X, requires_grad=True)
    with grad_mode(True):
        out = fmap(xt)
    J = np.empty((n, fmap.output_dim, fmap.input_dim))
    for i in range(fmap.output_dim):
        seed = np.zeros(out.shape)
        seed[:, i] = 1.0
        J[:, i, :] = grad(out, xt, seed, check_finite=True).data
    return J


def finite_difference_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float) -> np.ndarray:
    """Central-difference Jacobian of a plain array function."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2.0 * step))
    return np.stack([np.atleast_1d(c) for c in cols], axis=-1)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max-abs difference scaled by the larger max-abs magnitude."""
    denom = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), 1e-300)
    return float(np.max(np.abs(a - b), initial=0.0) / denom)


def grad_check(fmap: DiffMap, x, step: float = 1e-5) -> float:
    """Max over output rows of the relative error between ``jacobian`` and central differences."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = _vector(x, fmap.input_dim, "grad_check input")
    J = jacobian(fmap, x)
    with no_grad():
        F = finite_difference_jacobian(lambda v: fmap(Tensor(v)).data, x, step)
    F = F.reshape(J.shape)
    return max(relative_error(J[i], F[i]) for i in range(J.shape[0]))

