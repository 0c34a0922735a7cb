"""Tensor arithmetic with tape-based reverse-mode differentiation.

Values are stored as float32 numpy arrays; every op computes in float64 and
rounds the result back to float32, except scalar reductions which keep their
float64 value (the loss is what finite differences look at).  Inside
``storage(np.float64)`` new tensors keep full precision instead.

Recording is opt-in: ops append to the innermost active :class:`Graph` only
when at least one input requires a gradient, so inference code paths run the
same functions without building a tape.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Graph() as g:
    ...     loss = sum_all(mul(x, x))
    >>> backward(g, loss)
    >>> x.grad.tolist()
    [2.0, 4.0]
"""

from __future__ import annotations

import contextlib
import threading
import zlib
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, DomainError, VocabularyError

STORE = np.float32
ACC = np.float64
_precision = threading.local()


def store_dtype():
    return getattr(_precision, "dtype", STORE)


@contextlib.contextmanager
def storage(dtype):
    """Temporarily store new tensors as ``dtype`` (float64 for exact gradient checks)."""
    prev = store_dtype()
    _precision.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _precision.dtype = prev

ELEMENTWISE_KINDS = ("add", "sub", "mul", "sigmoid", "tanh", "relu", "exp", "log")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=store_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, dtype=None) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=dtype or store_dtype())
        t.data = arr.reshape(1) if arr.ndim == 0 else arr
        t.grad = None
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros(self.data.shape, dtype=ACC)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _f64(t: Tensor) -> np.ndarray:
    if t.requires_grad and t.data.dtype == STORE:
        # parameters are reused every timestep; cast once per graph
        g = active_graph()
        if g is not None:
            cached = g._f64.get(id(t))
            if cached is None:
                cached = g._f64[id(t)] = t.data.astype(ACC)
            return cached
    return t.data.astype(ACC, copy=False)


# ---------------------------------------------------------------- tape


class Node(NamedTuple):
    kind: str
    inputs: tuple[int, ...]
    tensor: Tensor
    backward: Callable | None
    needs: tuple[bool, ...]


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "graphs"):
        _local.graphs = []
    return _local.graphs


def active_graph() -> "Graph | None":
    stack = _stack()
    return stack[-1] if stack else None


class Graph:
    """Append-only tape.  Use as a context manager to make it the recording target."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._index: dict[int, int] = {}
        self._f64: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def node_id(self, t: Tensor) -> int:
        try:
            return self._index[id(t)]
        except KeyError:
            raise ContractError("tensor was not recorded on this graph") from None

    def _ensure(self, t: Tensor) -> int:
        nid = self._index.get(id(t))
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(Node("leaf", (), t, None, ()))
            self._index[id(t)] = nid
        return nid

    def _append(self, kind, inputs, out, fn) -> None:
        ids = tuple(self._ensure(t) for t in inputs)
        needs = tuple(t.requires_grad for t in inputs)
        self._index[id(out)] = len(self.nodes)
        self.nodes.append(Node(kind, ids, out, fn, needs))


def _record(kind: str, inputs: Sequence[Tensor], out: Tensor, fn: Callable) -> Tensor:
    g = active_graph()
    if g is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        g._append(kind, inputs, out, fn)
    return out


def backward(graph: Graph, loss: Tensor, params: Sequence[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape.

    Leaves on the tape that the loss does not reach, and any extra ``params``
    that never entered the tape, end up with a zero gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    start = graph.node_id(loss)
    grads: dict[int, np.ndarray] = {start: np.ones(loss.shape, dtype=ACC)}
    owned: set[int] = set()  # grads[j] arrays created here, safe to add into in place
    seen: set[int] = set()
    for i in range(len(graph.nodes) - 1, -1, -1):
        node = graph.nodes[i]
        g = grads.pop(i, None)
        if node.kind == "leaf":
            t = node.tensor
            if not t.requires_grad:
                continue
            seen.add(id(t))
            if t.grad is None:
                t.grad = np.zeros(t.shape, dtype=ACC)
            if g is not None:
                t.grad += g.reshape(t.shape)
            continue
        if g is None:
            continue
        for j, need, gi in zip(node.inputs, node.needs, node.backward(g, node.needs)):
            if not need or gi is None:
                continue
            if j not in grads:
                grads[j] = gi
            elif j in owned:
                grads[j] += gi
            else:
                grads[j] = grads[j] + gi
                owned.add(j)
    for p in params:
        if id(p) not in seen and p.grad is None:
            p.grad = np.zeros(p.shape, dtype=ACC)


# ---------------------------------------------------------------- ops


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _wider(a: Tensor, b: Tensor):
    # float64 scalars (losses) stay float64 through arithmetic
    return np.result_type(a.data.dtype, b.data.dtype)


def _check_binary(a: Tensor, b: Tensor, kind: str) -> None:
    if a.shape == b.shape:
        return
    small, big = (a, b) if a.data.ndim < b.data.ndim else (b, a)
    if small.data.ndim == 1 and big.shape[-1:] == small.shape:
        return
    if small.size == 1:
        return
    raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} are not compatible")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    a64, b64 = _f64(a), _f64(b)
    out = Tensor._wrap(a64 @ b64)

    def fn(g, needs):
        return (g @ b64.T if needs[0] else None, a64.T @ g if needs[1] else None)

    return _record("matmul", (a, b), out, fn)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` laid out as [out × in]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    x64, w64 = _f64(x), _f64(w)
    z = x64 @ w64.T
    if b is not None:
        z += _f64(b)
    out = Tensor._wrap(z)

    def fn(g, needs):
        gx = g @ w64 if needs[0] else None
        gw = g.T @ x64 if needs[1] else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if needs[2] else None)

    inputs = (x, w) if b is None else (x, w, b)
    return _record("linear", inputs, out, fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "add")
    out = Tensor._wrap(_f64(a) + _f64(b), dtype=_wider(a, b))
    return _record("add", (a, b), out, lambda g, n: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "sub")
    out = Tensor._wrap(_f64(a) - _f64(b), dtype=_wider(a, b))
    return _record("sub", (a, b), out, lambda g, n: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "mul")
    a64, b64 = _f64(a), _f64(b)
    out = Tensor._wrap(a64 * b64, dtype=_wider(a, b))

    def fn(g, needs):
        return (
            _unbroadcast(g * b64, a.shape) if needs[0] else None,
            _unbroadcast(g * a64, b.shape) if needs[1] else None,
        )

    return _record("mul", (a, b), out, fn)


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor._wrap(_f64(a) * c, dtype=a.data.dtype)
    return _record("scale", (a,), out, lambda g, n: (g * c,))


def sigmoid(a: Tensor) -> Tensor:
    s = 0.5 * (np.tanh(0.5 * _f64(a)) + 1.0)
    out = Tensor._wrap(s)
    return _record("sigmoid", (a,), out, lambda g, n: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(_f64(a))
    out = Tensor._wrap(t)
    return _record("tanh", (a,), out, lambda g, n: (g * (1.0 - t * t),))


def relu(a: Tensor) -> Tensor:
    a64 = _f64(a)
    pos = a64 > 0
    out = Tensor._wrap(np.where(pos, a64, 0.0))
    return _record("relu", (a,), out, lambda g, n: (g * pos,))


def exp(a: Tensor) -> Tensor:
    e = np.exp(_f64(a))
    out = Tensor._wrap(e)
    return _record("exp", (a,), out, lambda g, n: (g * e,))


def log(a: Tensor) -> Tensor:
    a64 = _f64(a)
    if np.any(a64 <= 0):
        raise DomainError("log of a non-positive value")
    out = Tensor._wrap(np.log(a64))
    return _record("log", (a,), out, lambda g, n: (g / a64,))


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "exp": exp, "log": log}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    if kind in _BINARY:
        if b is None:
            raise ContractError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ContractError(f"unknown elementwise kind {kind!r}; expected one of {ELEMENTWISE_KINDS}")


def softmax(logits: Tensor) -> Tensor:
    if logits.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    z = _f64(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor._wrap(s)

    def fn(g, needs):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (logits,), out, fn)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor._wrap(_f64(a).sum(), dtype=ACC)
    return _record("sum", (a,), out, lambda g, n: (np.broadcast_to(g.reshape(()), a.shape).copy(),))


def nll_pick(probs: Tensor, targets, mask=None, clamp: float = 1e-12) -> tuple[Tensor, int]:
    """Masked ``-sum log probs[i, targets[i]]`` as a scalar.

    Probabilities below ``clamp`` are clamped (their gradient is zero); the
    second return value counts how many targets were clamped.
    """
    p = _f64(probs)
    flat = p.reshape(-1, p.shape[-1])
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    if tgt.shape[0] != flat.shape[0]:
        raise DimensionError(f"nll: {flat.shape[0]} distributions but {tgt.shape[0]} targets")
    if np.any(tgt < 0) or np.any(tgt >= flat.shape[1]):
        raise VocabularyError(f"nll: target id outside [0, {flat.shape[1]})")
    m = np.ones(tgt.shape[0]) if mask is None else np.asarray(mask, dtype=ACC).reshape(-1)
    rows = np.arange(tgt.shape[0])
    picked = flat[rows, tgt]
    clamped = (picked < clamp) & (m > 0)
    safe = np.maximum(picked, clamp)
    out = Tensor._wrap(-(m * np.log(safe)).sum(), dtype=ACC)

    def fn(g, needs):
        gp = np.zeros_like(flat)
        gp[rows, tgt] = np.where(picked < clamp, 0.0, -m / safe)
        return ((g.reshape(()) * gp).reshape(p.shape),)

    return _record("nll", (probs,), out, fn), int(clamped.sum())


def embed_lookup(table: Tensor, ids) -> Tensor:
    """Row selection, i.e. one-hot(ids) @ table without materializing the one-hot."""
    if table.data.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if np.any(idx < 0) or np.any(idx >= vocab):
        bad = idx[(idx < 0) | (idx >= vocab)].reshape(-1)[0]
        raise VocabularyError(f"token id {int(bad)} out of vocabulary of size {vocab}")
    out = Tensor._wrap(table.data[idx])

    def fn(g, needs):
        gt = np.zeros(table.shape, dtype=ACC)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record("embed", (table,), out, fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    arrs = [_f64(t) for t in tensors]
    try:
        out = Tensor._wrap(np.concatenate(arrs, axis=axis))
    except ValueError as e:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}: {e}") from None
    sizes = np.cumsum([a.shape[axis] for a in arrs])[:-1]

    def fn(g, needs):
        return tuple(np.split(g, sizes, axis=axis))

    return _record("concat", tuple(tensors), out, fn)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor._wrap(a.data[..., start:stop].copy())

    def fn(g, needs):
        ga = np.zeros(a.shape, dtype=ACC)
        ga[..., start:stop] = g
        return (ga,)

    return _record("slice", (a,), out, fn)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        arr = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    out = Tensor._wrap(arr.copy(), dtype=a.data.dtype)
    return _record("reshape", (a,), out, lambda g, n: (g.reshape(a.shape),))


def gather_rows(a: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    out = Tensor._wrap(a.data[idx])

    def fn(g, needs):
        ga = np.zeros(a.shape, dtype=ACC)
        np.add.at(ga, idx, g)
        return (ga,)

    return _record("gather", (a,), out, fn)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int | None = None) -> Tensor:
    """2-D convolution of an H×W×C image with a K×K×Cin×Cout kernel."""
    if x.data.ndim != 3 or w.data.ndim != 4 or x.shape[2] != w.shape[2] or w.shape[0] != w.shape[1]:
        raise DimensionError(f"conv2d: image {x.shape} does not fit kernel {w.shape}")
    k, cin, cout = w.shape[0], w.shape[2], w.shape[3]
    pad = k // 2 if pad is None else pad
    h, wd = x.shape[0], x.shape[1]
    xp = np.pad(_f64(x), ((pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(0, 1))[::stride, ::stride]
    ho, wo = win.shape[0], win.shape[1]
    cols = win.transpose(0, 1, 3, 4, 2).reshape(ho * wo, k * k * cin)
    w2 = _f64(w).reshape(k * k * cin, cout)
    z = cols @ w2
    if b is not None:
        z += _f64(b)
    out = Tensor._wrap(z.reshape(ho, wo, cout))

    def fn(g, needs):
        g2 = g.reshape(ho * wo, cout)
        gw = (cols.T @ g2).reshape(w.shape) if needs[1] else None
        gx = None
        if needs[0]:
            gcols = (g2 @ w2.T).reshape(ho, wo, k, k, cin)
            gxp = np.zeros(xp.shape, dtype=ACC)
            for i in range(k):
                for j in range(k):
                    gxp[i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
            gx = gxp[pad : pad + h, pad : pad + wd]
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if needs[2] else None)

    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv2d", inputs, out, fn)


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    h, w, c = x.shape
    if h % size or w % size:
        raise DimensionError(f"maxpool2d: {x.shape} not divisible by {size}")
    blocks = x.data.reshape(h // size, size, w // size, size, c).transpose(0, 2, 4, 1, 3)
    blocks = blocks.reshape(h // size, w // size, c, size * size)
    arg = blocks.argmax(axis=-1)
    out = Tensor._wrap(np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0])

    def fn(g, needs):
        onehot = np.zeros(blocks.shape, dtype=ACC)
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        gx = onehot.reshape(h // size, w // size, c, size, size).transpose(0, 3, 1, 4, 2)
        return (gx.reshape(h, w, c),)

    return _record("maxpool", (x,), out, fn)


def avgpool2d(x: Tensor, out_hw: int) -> Tensor:
    h, w, c = x.shape
    if h % out_hw or w % out_hw:
        raise DimensionError(f"avgpool2d: {x.shape} not divisible into {out_hw}×{out_hw}")
    fh, fw = h // out_hw, w // out_hw
    out = Tensor._wrap(_f64(x).reshape(out_hw, fh, out_hw, fw, c).mean(axis=(1, 3)))

    def fn(g, needs):
        gx = np.broadcast_to(g[:, None, :, None, :] / (fh * fw), (out_hw, fh, out_hw, fw, c))
        return (gx.reshape(h, w, c).copy(),)

    return _record("avgpool", (x,), out, fn)


# ---------------------------------------------------------------- randomness


def make_rng(seed: int, *path: str | int) -> np.random.Generator:
    """Philox generator for the stream named by ``path`` under ``seed``.

    Names are hashed with CRC-32 so the same (seed, path) gives the same
    stream on every platform; distinct paths give independent streams.
    """
    if seed < 0:
        raise ConfigError(f"seed must be non-negative, got {seed}")
    key = tuple(zlib.crc32(p.encode()) if isinstance(p, str) else int(p) for p in path)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def dropout_mask(shape, rate: float = 0.5, rng: np.random.Generator | int = 0) -> Tensor:
    """Inverted-dropout mask: entries are 0 or 1/(1-rate), so E[mask] = 1."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return Tensor._wrap(np.ones(shape))
    if not isinstance(rng, np.random.Generator):
        rng = make_rng(int(rng), "dropout")
    keep = rng.random(shape) >= rate
    return Tensor._wrap(keep / (1.0 - rate))


# ---------------------------------------------------------------- checking


def finite_diff_check(
    f: Callable,
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-3,
    floor: float = 1e-3,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative error between backward gradients and central differences.

    ``f(x)`` must return a scalar tensor and be deterministic.  The divisor is
    the realized step ``fl(x+eps) - fl(x-eps)`` in the storage dtype rather
    than ``2*eps``.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.  With
    ``max_entries`` only that many coordinates per tensor are probed, chosen
    by a seeded draw.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.grad = None
    with Graph() as g:
        y = f(x)
    backward(g, y, params=xs)
    worst = 0.0
    for j, t in enumerate(xs):
        analytic = t.grad.reshape(-1).copy()
        flat = t.data.reshape(-1)
        probe = range(flat.size)
        if max_entries is not None and flat.size > max_entries:
            probe = np.sort(make_rng(seed, "fd", j).choice(flat.size, max_entries, replace=False))
        for i in probe:
            orig = flat[i]
            flat[i] = orig + flat.dtype.type(eps)
            hi = float(flat[i])
            fp = f(x).item()
            flat[i] = orig - flat.dtype.type(eps)
            lo = float(flat[i])
            fm = f(x).item()
            flat[i] = orig
            num = (fp - fm) / (hi - lo)
            a = analytic[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst
