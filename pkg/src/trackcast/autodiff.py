"""Dense float64 tensors, a recording tape, and reverse-mode gradients.

Every learned component in the package (node encoder, message passing,
affinity head, trajectory generator, sampling network) is written against
this module. A forward pass records each primitive on a :class:`Tape`;
:func:`backward` replays the tape in reverse.

Broadcasting is deliberately limited to scalar-vs-tensor plus the explicit
``add_bias`` row broadcast, so shape mistakes fail loudly.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

CHECKPOINT_FORMAT = "trackcast-params"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NumericalError(ArithmeticError):
    """Raised when a non-finite value appears where finite values are required."""


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericalError("non-finite value in tensor input")
    return arr


class Tensor:
    """A value recorded on a tape. ``data`` is a float64 ndarray."""

    __slots__ = ("data", "tape", "index")
    __array_ufunc__ = None

    def __init__(self, data: np.ndarray, tape: "Tape", index: int):
        self.data = data
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, index={self.index})"

    def __add__(self, other):
        return self.tape.apply("add", self, other)

    def __radd__(self, other):
        return self.tape.apply("add", other, self)

    def __sub__(self, other):
        return self.tape.apply("sub", self, other)

    def __rsub__(self, other):
        return self.tape.apply("sub", other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.tape.apply("scalar_mul", self, c=float(other))
        return self.tape.apply("mul_elementwise", self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return self.tape.apply("scalar_mul", self, c=-1.0)

    def __matmul__(self, other):
        return self.tape.apply("matmul", self, other)

    @property
    def T(self):
        return self.tape.apply("transpose", self)


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    attrs: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# forward / backward rules
# ---------------------------------------------------------------------------


def _check_same_or_scalar(kind, a, b):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


def _out_shape(a, b):
    if a.size == 1 and b.size != 1:
        return b.shape
    if b.size == 1 and a.size != 1:
        return a.shape
    return a.shape if a.ndim >= b.ndim else b.shape


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _fwd_matmul(xs, at):
    a, b = xs
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def _bwd_matmul(g, xs, y, at):
    a, b = xs
    return [g @ b.T, a.T @ g]


def _fwd_add(xs, at):
    _check_same_or_scalar("add", *xs)
    out = xs[0] + xs[1]
    return out.reshape(_out_shape(*xs))


def _bwd_add(g, xs, y, at):
    return [_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)]


def _fwd_sub(xs, at):
    _check_same_or_scalar("sub", *xs)
    out = xs[0] - xs[1]
    return out.reshape(_out_shape(*xs))


def _bwd_sub(g, xs, y, at):
    return [_unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)]


def _fwd_mul(xs, at):
    _check_same_or_scalar("mul_elementwise", *xs)
    out = xs[0] * xs[1]
    return out.reshape(_out_shape(*xs))


def _bwd_mul(g, xs, y, at):
    a, b = xs
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def _fwd_add_bias(xs, at):
    a, b = xs
    if a.ndim != 2 or b.ndim != 1 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: incompatible shapes {a.shape} and {b.shape}")
    return a + b


def _bwd_add_bias(g, xs, y, at):
    return [g, g.sum(axis=0)]


def _fwd_concat(axis):
    def fwd(xs, at):
        ref = xs[0]
        for x in xs[1:]:
            if x.ndim != ref.ndim:
                raise ShapeError(f"concat: rank mismatch {ref.shape} vs {x.shape}")
            other = [d for i, d in enumerate(x.shape) if i != axis % x.ndim]
            want = [d for i, d in enumerate(ref.shape) if i != axis % ref.ndim]
            if other != want:
                raise ShapeError(f"concat: incompatible shapes {ref.shape} and {x.shape}")
        return np.concatenate(xs, axis=axis)

    return fwd


def _bwd_concat(axis):
    def bwd(g, xs, y, at):
        sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return list(np.split(g, sizes, axis=axis))

    return bwd


def _fwd_reduce_sum(xs, at):
    return np.asarray(xs[0].sum(axis=at.get("axis")))


def _bwd_reduce_sum(g, xs, y, at):
    axis = at.get("axis")
    x = xs[0]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g, x.shape).copy()]


def _fwd_reduce_mean(xs, at):
    return np.asarray(xs[0].mean(axis=at.get("axis")))


def _bwd_reduce_mean(g, xs, y, at):
    axis = at.get("axis")
    x = xs[0]
    count = x.size if axis is None else x.shape[axis]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g, x.shape) / count]


def _fwd_reduce_min(xs, at):
    return np.asarray(xs[0].min(axis=at["axis"]))


def _bwd_reduce_min(g, xs, y, at):
    x = xs[0]
    axis = at["axis"]
    idx = np.expand_dims(np.argmin(x, axis=axis), axis)
    out = np.zeros_like(x)
    np.put_along_axis(out, idx, np.expand_dims(g, axis), axis=axis)
    return [out]


def _fwd_log(xs, at):
    x = xs[0]
    if np.any(x <= 0):
        raise DomainError(f"log: non-positive input (min {x.min()!r})")
    return np.log(x)


def _fwd_sqrt(xs, at):
    x = xs[0]
    if np.any(x < 0):
        raise DomainError(f"sqrt: negative input (min {x.min()!r})")
    return np.sqrt(x)


def _bwd_sqrt(g, xs, y, at):
    # subgradient 0 at x == 0, mirroring the relu convention
    safe = np.where(y > 0, y, 1.0)
    return [np.where(y > 0, g / (2.0 * safe), 0.0)]


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def _fwd_reshape(xs, at):
    shape = tuple(at["shape"])
    if math.prod(shape) != xs[0].size:
        raise ShapeError(f"reshape: cannot view {xs[0].shape} as {shape}")
    return xs[0].reshape(shape)


def _fwd_transpose(xs, at):
    if xs[0].ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got {xs[0].shape}")
    return xs[0].T.copy()


def _fwd_take_rows(xs, at):
    return xs[0][at["idx"]]


def _bwd_take_rows(g, xs, y, at):
    out = np.zeros_like(xs[0])
    np.add.at(out, at["idx"], g)
    return [out]


def _fwd_inv(xs, at):
    a = xs[0]
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"inv: expected a square matrix, got {a.shape}")
    try:
        # LU with partial pivoting
        return np.linalg.solve(a, np.eye(a.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"inv: singular matrix ({exc})") from exc


def _bwd_inv(g, xs, y, at):
    return [-(y.T @ g @ y.T)]


def _fwd_clamp(xs, at):
    return np.clip(xs[0], at["lo"], at["hi"])


def _bwd_clamp(g, xs, y, at):
    x = xs[0]
    return [g * ((x > at["lo"]) & (x < at["hi"]))]


_FORWARD: dict[str, Callable] = {
    "matmul": _fwd_matmul,
    "add": _fwd_add,
    "sub": _fwd_sub,
    "mul_elementwise": _fwd_mul,
    "scalar_mul": lambda xs, at: xs[0] * at["c"],
    "add_bias": _fwd_add_bias,
    "concat_last_axis": _fwd_concat(-1),
    "concat_rows": _fwd_concat(0),
    "reduce_sum": _fwd_reduce_sum,
    "reduce_mean": _fwd_reduce_mean,
    "reduce_min": _fwd_reduce_min,
    "relu": lambda xs, at: np.maximum(xs[0], 0.0),
    "tanh": lambda xs, at: np.tanh(xs[0]),
    "sigmoid": lambda xs, at: _sigmoid(xs[0]),
    "exp": lambda xs, at: np.exp(xs[0]),
    "log": _fwd_log,
    "square": lambda xs, at: xs[0] * xs[0],
    "sqrt": _fwd_sqrt,
    "reshape": _fwd_reshape,
    "transpose": _fwd_transpose,
    "take_rows": _fwd_take_rows,
    "inv": _fwd_inv,
    "clamp": _fwd_clamp,
}

_BACKWARD: dict[str, Callable] = {
    "matmul": _bwd_matmul,
    "add": _bwd_add,
    "sub": _bwd_sub,
    "mul_elementwise": _bwd_mul,
    "scalar_mul": lambda g, xs, y, at: [g * at["c"]],
    "add_bias": _bwd_add_bias,
    "concat_last_axis": _bwd_concat(-1),
    "concat_rows": _bwd_concat(0),
    "reduce_sum": _bwd_reduce_sum,
    "reduce_mean": _bwd_reduce_mean,
    "reduce_min": _bwd_reduce_min,
    "relu": lambda g, xs, y, at: [g * (xs[0] > 0)],
    "tanh": lambda g, xs, y, at: [g * (1.0 - y * y)],
    "sigmoid": lambda g, xs, y, at: [g * y * (1.0 - y)],
    "exp": lambda g, xs, y, at: [g * y],
    "log": lambda g, xs, y, at: [g / xs[0]],
    "square": lambda g, xs, y, at: [2.0 * xs[0] * g],
    "sqrt": _bwd_sqrt,
    "reshape": lambda g, xs, y, at: [g.reshape(xs[0].shape)],
    "transpose": lambda g, xs, y, at: [g.T],
    "take_rows": _bwd_take_rows,
    "inv": _bwd_inv,
    "clamp": _bwd_clamp,
}

OP_KINDS = tuple(_FORWARD)


class Tape:
    """Ordered record of executed primitives.

    Leaves are constants or named parameters; every other entry is produced by
    :meth:`apply` from earlier entries, so the list is topologically ordered
    by construction.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.values: list[np.ndarray] = []
        self._params: dict[str, int] = {}

    def __len__(self):
        return len(self.nodes)

    def _push(self, node: Node, value: np.ndarray) -> Tensor:
        self.nodes.append(node)
        self.values.append(value)
        return Tensor(value, self, len(self.nodes) - 1)

    def constant(self, value) -> Tensor:
        return self._push(Node("const", ()), _as_array(value))

    def param(self, store: "ParamStore", name: str) -> Tensor:
        """Register ``store[name]`` as a differentiable leaf (once per tape)."""
        if name in self._params:
            i = self._params[name]
            return Tensor(self.values[i], self, i)
        t = self._push(Node("param", (), {"name": name}), store[name])
        self._params[name] = t.index
        return t

    @property
    def param_names(self) -> list[str]:
        return list(self._params)

    def _lift(self, x) -> Tensor:
        if isinstance(x, Tensor):
            if x.tape is not self:
                raise ValueError("tensor belongs to a different tape")
            return x
        return self.constant(x)

    def apply(self, kind: str, *inputs, **attrs) -> Tensor:
        if kind not in _FORWARD:
            raise ValueError(f"unknown op kind {kind!r}")
        ts = [self._lift(x) for x in inputs]
        xs = [t.data for t in ts]
        out = _FORWARD[kind](xs, attrs)
        return self._push(Node(kind, tuple(t.index for t in ts), attrs), np.asarray(out, dtype=np.float64))


def apply(kind: str, inputs: Iterable, tape: Tape, **attrs) -> Tensor:
    return tape.apply(kind, *inputs, **attrs)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise ValueError("at least one operand must be a Tensor")


# thin functional wrappers used by the model code


def matmul(a, b):
    return _tape_of(a, b).apply("matmul", a, b)


def add_bias(a, b):
    return _tape_of(a, b).apply("add_bias", a, b)


def concat(xs, axis=-1):
    kind = "concat_last_axis" if axis == -1 else "concat_rows"
    if axis not in (-1, 0):
        raise ValueError("concat supports axis -1 or 0")
    return _tape_of(*xs).apply(kind, *xs)


def reduce_sum(x, axis=None):
    return x.tape.apply("reduce_sum", x, axis=axis)


def reduce_mean(x, axis=None):
    return x.tape.apply("reduce_mean", x, axis=axis)


def reduce_min(x, axis):
    return x.tape.apply("reduce_min", x, axis=axis)


def relu(x):
    return x.tape.apply("relu", x)


def tanh(x):
    return x.tape.apply("tanh", x)


def sigmoid(x):
    return x.tape.apply("sigmoid", x)


def exp(x):
    return x.tape.apply("exp", x)


def log(x):
    return x.tape.apply("log", x)


def square(x):
    return x.tape.apply("square", x)


def sqrt(x):
    return x.tape.apply("sqrt", x)


def reshape(x, shape):
    return x.tape.apply("reshape", x, shape=tuple(shape))


def take_rows(x, idx):
    return x.tape.apply("take_rows", x, idx=np.asarray(idx, dtype=np.intp))


def inv(x):
    return x.tape.apply("inv", x)


def clamp(x, lo, hi):
    return x.tape.apply("clamp", x, lo=lo, hi=hi)


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    """Validity check for values propagated through ops."""
    if not np.all(np.isfinite(x.data)):
        raise NumericalError(f"non-finite values in {what}")
    return x


def backward(tape: Tape, loss: Tensor, params: "ParamStore | None" = None) -> dict[str, np.ndarray]:
    """Reverse sweep; returns gradients keyed by parameter name.

    Parameters registered on the tape but not reachable from ``loss`` get zero
    gradients, as does every name in ``params`` that never reached the tape.
    """
    if loss.tape is not tape:
        raise ValueError("loss was not produced on this tape")
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[loss.index] = np.ones_like(loss.data)
    for i in range(loss.index, -1, -1):
        g = grads[i]
        node = tape.nodes[i]
        if g is None or not node.inputs:
            continue
        xs = [tape.values[j] for j in node.inputs]
        contribs = _BACKWARD[node.kind](g, xs, tape.values[i], node.attrs)
        for j, c in zip(node.inputs, contribs):
            grads[j] = c if grads[j] is None else grads[j] + c
    out: dict[str, np.ndarray] = {}
    for name, i in tape._params.items():
        g = grads[i]
        out[name] = np.zeros_like(tape.values[i]) if g is None else np.array(g, dtype=np.float64)
    if params is not None:
        for name in params.names():
            out.setdefault(name, np.zeros_like(params[name]))
    return out


# ---------------------------------------------------------------------------
# parameters, optimizer, checkpoints
# ---------------------------------------------------------------------------


class ParamStore:
    """Named float64 parameters with per-parameter Adam state."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self._params: dict[str, np.ndarray] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}
        self.meta: dict = {}

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __len__(self) -> int:
        return len(self._params)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def num_scalars(self) -> int:
        return sum(p.size for p in self._params.values())

    def add(self, name: str, shape, init: str = "glorot", scale: float = 1.0) -> np.ndarray:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            value = np.zeros(shape)
        elif init == "glorot":
            fan_in = shape[1] if len(shape) == 2 else shape[0]
            fan_out = shape[0]
            limit = scale * math.sqrt(6.0 / (fan_in + fan_out))
            value = self.rng.uniform(-limit, limit, size=shape)
        elif init == "normal":
            value = scale * self.rng.standard_normal(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        self._params[name] = value
        self._m[name] = np.zeros(shape)
        self._v[name] = np.zeros(shape)
        self._t[name] = 0
        return value

    def set(self, name: str, value) -> None:
        value = _as_array(value)
        if value.shape != self._params[name].shape:
            raise ShapeError(f"parameter {name!r} has shape {self._params[name].shape}, got {value.shape}")
        self._params[name] = value

    def copy(self) -> "ParamStore":
        other = ParamStore(self.seed)
        other.rng = np.random.default_rng(self.seed)
        other.rng.bit_generator.state = self.rng.bit_generator.state
        for n in self._params:
            other._params[n] = self._params[n].copy()
            other._m[n] = self._m[n].copy()
            other._v[n] = self._v[n].copy()
            other._t[n] = self._t[n]
        other.meta = json.loads(json.dumps(self.meta))
        return other

    def save(self, path) -> None:
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "seed": self.seed,
            "meta": self.meta,
            "params": [
                {"name": n, "shape": list(p.shape), "values": p.reshape(-1).tolist()}
                for n, p in self._params.items()
            ],
        }
        for entry in payload["params"]:
            if not all(math.isfinite(v) for v in entry["values"]):
                raise NumericalError(f"refusing to save non-finite parameter {entry['name']!r}")
        Path(path).write_text(json.dumps(payload, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "ParamStore":
        payload = json.loads(Path(path).read_text())
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a parameter checkpoint")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
        store = cls(payload["seed"])
        store.meta = payload.get("meta", {})
        for entry in payload["params"]:
            shape = tuple(entry["shape"])
            value = np.array(entry["values"], dtype=np.float64).reshape(shape)
            store._params[entry["name"]] = value
            store._m[entry["name"]] = np.zeros(shape)
            store._v[entry["name"]] = np.zeros(shape)
            store._t[entry["name"]] = 0
        return store


def adam_step(
    params: ParamStore,
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps_hat: float = 1e-8,
    names: Iterable[str] | None = None,
) -> ParamStore:
    """Bias-corrected Adam update, in place.

    ``names`` restricts the update to a subset (frozen parameters are simply
    left out). A name missing from ``grads`` is updated with a zero gradient.
    """
    for name in params.names() if names is None else names:
        p = params._params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        t = params._t[name] + 1
        m = beta1 * params._m[name] + (1.0 - beta1) * g
        v = beta2 * params._v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        params._params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps_hat)
        params._m[name], params._v[name], params._t[name] = m, v, t
    return params


def finite_diff_gradient(
    f: Callable[[ParamStore], float],
    params: ParamStore,
    epsilon: float = 1e-6,
    names: Iterable[str] | None = None,
) -> dict[str, np.ndarray]:
    """Central differences ``(f(p+e) - f(p-e)) / 2e`` for every scalar parameter."""
    out = {}
    for name in params.names() if names is None else names:
        p = params._params[name]
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            fp = float(f(params))
            flat[k] = orig - epsilon
            fm = float(f(params))
            flat[k] = orig
            gflat[k] = (fp - fm) / (2.0 * epsilon)
        out[name] = g
    return out
