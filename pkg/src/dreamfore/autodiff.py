"""Minimal reverse-mode differentiation over float64 numpy arrays.

Operations are recorded on the active :class:`Tape` when any input requires
gradients; :func:`backward` replays the tape in reverse. There is no implicit
broadcasting between tensors: shapes must match exactly, and combining a
tensor with a plain Python number is the only scalar shortcut.
"""

from __future__ import annotations

import json
import threading
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


_local = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class Node:
    __slots__ = ("op", "out", "inputs", "fn", "index", "tape")

    def __init__(self, op, out, inputs, fn, index, tape):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.fn = fn
        self.index = index
        self.tape = tape


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; tensors produced inside it by ops whose inputs
    require gradients are recorded and can be differentiated with
    :meth:`backward`. A tape belongs to the thread that opened it.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op, out, inputs, fn) -> Node:
        node = Node(op, out, inputs, fn, len(self.nodes), self)
        self.nodes.append(node)
        return node

    def backward(self, loss: "Tensor") -> None:
        backward(loss, self)


class no_record:
    """Suspend recording (ops inside produce constant tensors)."""

    def __enter__(self):
        self._prev = _active_tape()
        _local.tape = None

    def __exit__(self, *exc):
        _local.tape = self._prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "grad_count", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.grad_count = 0
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        return self.data.ravel()

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)
        self.grad_count = 0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, float(other))

    def __radd__(self, other):
        return shift(self, float(other))

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -float(other))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def _raise_item(t):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


def _result(data: np.ndarray, inputs: tuple, fn: Callable, op: str) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._node = tape.record(op, out, inputs, fn)
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _as_tensor(x) -> Tensor:
    if not isinstance(x, Tensor):
        raise TypeError(f"expected Tensor, got {type(x).__name__}")
    return x


# ----------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    return _result(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)), "div")


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def shift(a: Tensor, c: float) -> Tensor:
    return _result(a.data + c, (a,), lambda g: (g,), "shift")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(ad)
    return _result(y, (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return _result(y, (a,), lambda g: (g * 0.5 / np.where(y > 0, y, np.inf),), "sqrt")


def abs_(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def cos(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),), "cos")


def sin(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.sin(ad), (a,), lambda g: (g * np.cos(ad),), "sin")


def wrap_angle_np(x):
    """Wrap radians into (-pi, pi]."""
    x = np.asarray(x, dtype=np.float64)
    r = x - 2.0 * np.pi * np.ceil((x - np.pi) / (2.0 * np.pi))
    r = np.where(r <= -np.pi, r + 2.0 * np.pi, r)
    return np.where(r > np.pi, r - 2.0 * np.pi, r)


def wrap_angle(a: Tensor) -> Tensor:
    # piecewise shift by multiples of 2*pi: unit derivative
    return _result(wrap_angle_np(a.data), (a,), lambda g: (g,), "wrap_angle")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    _check_same(a, b, "maximum")
    take_a = a.data >= b.data
    return _result(
        np.where(take_a, a.data, b.data), (a, b), lambda g: (g * take_a, g * ~take_a), "maximum"
    )


def scalar_max(a: Tensor, b: Tensor) -> Tensor:
    if a.size != 1 or b.size != 1:
        raise ShapeError(f"scalar_max: expected scalars, got {a.shape} and {b.shape}")
    return maximum(a, b)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data > lo) & (a.data < hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "where")
    cond = np.asarray(cond, dtype=bool)
    if cond.shape != a.shape:
        raise ShapeError(f"where: condition shape {cond.shape} vs {a.shape}")
    return _result(
        np.where(cond, a.data, b.data), (a, b), lambda g: (g * cond, g * ~cond), "where"
    )


# ------------------------------------------------------------------ linear alg


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _result(ad @ bd, (a, b), fn, "matmul")


def bmm(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """Batched ``(S, P, K) @ (S, K, Q)``; ``transpose_b`` reads ``b`` as ``(S, Q, K)``."""
    bd = np.swapaxes(b.data, 1, 2) if transpose_b and b.ndim == 3 else b.data
    if a.ndim != 3 or bd.ndim != 3 or a.shape[0] != bd.shape[0] or a.shape[2] != bd.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} @ {b.shape} (transpose_b={transpose_b})")
    ad = a.data

    def fn(g):
        ga = g @ np.swapaxes(bd, 1, 2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = np.swapaxes(ad, 1, 2) @ g
            if transpose_b:
                gb = np.swapaxes(gb, 1, 2)
        return ga, gb

    return _result(ad @ bd, (a, b), fn, "bmm")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` for x (n, i), w (i, o), b (o,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: incompatible shapes {x.shape}, {w.shape}, {b.shape}")
    xd, wd = x.data, w.data

    def fn(g):
        return (
            g @ wd.T if x.requires_grad else None,
            xd.T @ g if w.requires_grad else None,
            g.sum(axis=0) if b.requires_grad else None,
        )

    return _result(xd @ wd + b.data, (x, w, b), fn, "linear")


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: expected equal-length vectors, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _result(np.dot(ad, bd), (a, b), lambda g: (g * bd, g * ad), "dot")


def l2_norm(a: Tensor) -> Tensor:
    """Euclidean norm over all entries; the subgradient at zero is zero."""
    ad = a.data
    n = float(np.sqrt(np.sum(ad * ad)))
    return _result(np.array(n), (a,), lambda g: (g * ad / n if n > 0 else np.zeros_like(ad),), "l2_norm")


# ---------------------------------------------------------------- reductions


def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def fn(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.sum(a.data, axis=axis), (a,), fn, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def max_(a: Tensor, axis: int) -> Tensor:
    """Max-reduce along ``axis``; the gradient goes to the first maximiser."""
    idx = np.argmax(a.data, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    out = np.take_along_axis(a.data, idx_k, axis=axis).squeeze(axis)
    shape = a.shape

    def fn(g):
        full = np.zeros(shape)
        np.put_along_axis(full, idx_k, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _result(out, (a,), fn, "max")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (a,), fn, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def fn(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(y, (a,), fn, "log_softmax")


# ------------------------------------------------------------------ structure


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {a.shape}")
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def index(a: Tensor, idx) -> Tensor:
    """Slice or integer-array index; gradients scatter back (duplicates add)."""
    shape = a.shape
    basic = _is_basic(idx)
    out = a.data[idx]
    if basic:
        out = out.copy()

    def fn(g):
        full = np.zeros(shape)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(out, (a,), fn, "index")


def gather_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor by integer index."""
    if a.ndim != 2:
        raise ShapeError(f"gather_rows: expected 2-D, got {a.shape}")
    return index(a, np.asarray(rows, dtype=np.int64))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = tuple(tensors)
    if not ts:
        raise ShapeError("concat: no inputs")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}")
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=ax))

    return _result(np.concatenate([t.data for t in ts], axis=ax), ts, fn, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(tensors)
    if not ts:
        raise ShapeError("stack: no inputs")
    for t in ts[1:]:
        _check_same(ts[0], t, "stack")

    def fn(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(np.stack([t.data for t in ts], axis=axis), ts, fn, "stack")


def expand(a: Tensor, n: int, axis: int = 0) -> Tensor:
    """Repeat ``a`` ``n`` times along a new axis (explicit broadcast)."""
    tgt = np.expand_dims(a.data, axis)
    shape = list(tgt.shape)
    shape[axis] = n
    out = np.broadcast_to(tgt, shape).copy()
    return _result(out, (a,), lambda g: (g.sum(axis=axis),), "expand")


# ------------------------------------------------------------------- backward


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Grads accumulate across calls; zero them between optimisation steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    node = loss._node
    if node is None:
        raise TapeError("backward: empty tape (loss was not recorded)")
    if tape is not None and node.tape is not tape:
        raise TapeError("backward: loss was recorded on a different tape")
    tape = node.tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for nd in reversed(tape.nodes[: node.index + 1]):
        g = grads.pop(id(nd.out), None)
        if g is None:
            continue
        for t, gi in zip(nd.inputs, nd.fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
                t.grad_count += 1
            else:
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


# ----------------------------------------------------------------- parameters


class Params(dict):
    """Named parameter tensors keyed by dotted path."""

    def tensors(self) -> list[Tensor]:
        return list(self.values())

    def zero_grad(self) -> None:
        for p in self.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.values()))

    def frozen(self) -> "Params":
        out = Params()
        for k, p in self.items():
            arr = p.data.copy()
            arr.flags.writeable = False
            out[k] = Tensor(arr, requires_grad=False, name=k)
        return out

    def copy(self) -> "Params":
        return Params({k: Tensor(p.data.copy(), requires_grad=p.requires_grad, name=k) for k, p in self.items()})


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def add_linear(params: Params, name: str, fan_in: int, fan_out: int, rng, gain: float = 1.0) -> None:
    params[f"{name}.w"] = Tensor(gain * glorot(rng, fan_in, fan_out), requires_grad=True, name=f"{name}.w")
    params[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.b")


def apply_linear(params: Params, name: str, x: Tensor) -> Tensor:
    return linear(x, params[f"{name}.w"], params[f"{name}.b"])


# ------------------------------------------------------------------ optimiser


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale grads in place so their global L2 norm is at most ``max_norm``."""
    ps = [p for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in ps)))
    if total > max_norm > 0:
        f = max_norm / total
        for p in ps:
            p.grad *= f
    return total


class Adam:
    def __init__(self, params: Params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        self.params.zero_grad()

    def step(self) -> None:
        for k, p in self.params.items():
            if p.grad is None:
                raise TapeError(f"Adam.step: parameter {k!r} has no gradient")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * np.sqrt(1.0 - b2**t) / (1.0 - b1**t)
        eps_t = self.eps * np.sqrt(1.0 - b2**t)
        for k, p in self.params.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= lr_t * m / (np.sqrt(v) + eps_t)

    def state_dict(self) -> dict:
        return {"step_count": self.step_count, "m": self.m, "v": self.v}


# ----------------------------------------------------------------- checkpoints


def save_params(path, params: Params, meta: dict | None = None) -> None:
    """Write ``{path: shape + values}`` with a version field.

    ``.json`` paths get a JSON map; anything else is a numpy ``.npz`` archive.
    """
    path = Path(path)
    meta = dict(meta or {})
    if path.suffix == ".json":
        doc = {
            "version": CHECKPOINT_VERSION,
            "meta": meta,
            "params": {k: {"shape": list(p.shape), "values": p.values.tolist()} for k, p in params.items()},
        }
        path.write_text(json.dumps(doc))
        return
    arrays = {f"p/{k}": p.data for k, p in params.items()}
    arrays["__version__"] = np.array(CHECKPOINT_VERSION)
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_params(path) -> tuple[Params, dict]:
    path = Path(path)
    params = Params()
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
        for k, rec in doc["params"].items():
            params[k] = Tensor(np.array(rec["values"], dtype=np.float64).reshape(rec["shape"]), requires_grad=True, name=k)
        return params, doc.get("meta", {})
    with np.load(path, allow_pickle=False) as z:
        if "__version__" not in z or int(z["__version__"]) != CHECKPOINT_VERSION:
            raise ValueError("unsupported or missing checkpoint version")
        meta = json.loads(str(z["__meta__"]))
        for key in z.files:
            if key.startswith("p/"):
                name = key[2:]
                params[name] = Tensor(z[key].astype(np.float64), requires_grad=True, name=name)
    return params, meta
