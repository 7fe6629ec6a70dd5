"""
SigTraj - Tensor Core
Dense numpy-backed tensor with a reverse-mode differentiation tape
"""

import logging
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

DTYPES = {"float64": np.float64, "float32": np.float32}

_dtype = np.float64
_local = threading.local()


class TensorError(ValueError):
    """Shape or domain error raised by a primitive"""


class NonFiniteError(TensorError):
    """A primitive produced NaN or Inf"""


class TapeError(RuntimeError):
    """Tape misuse (double sweep, loss off the tape)"""


class PrimitiveKind(str, Enum):
    MATMUL = "matmul"
    ADD = "add"
    MUL = "mul"
    CONCAT = "concat"
    SOFTMAX = "softmax"
    LEAKY_RELU = "leaky_relu"
    SIGMOID = "sigmoid"
    TANH = "tanh"
    SOFTPLUS = "softplus"
    SUM = "sum"
    MEAN = "mean"
    L2NORM = "l2norm"
    SLICE = "slice"
    EMBED = "embed"
    SCALAR_MUL = "scalar_mul"
    TRANSPOSE = "transpose"
    RESHAPE = "reshape"
    EXPAND = "expand"


def set_default_dtype(name):
    """Pilih presisi per run: float64 (default, gradcheck) atau float32"""
    global _dtype
    if name not in DTYPES:
        raise TensorError(f"unknown dtype {name!r}, expected one of {sorted(DTYPES)}")
    _dtype = DTYPES[name]


def get_default_dtype():
    return _dtype


class Tensor:
    """Dense n-dimensional value with an optional gradient slot"""

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._tape = None

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._tape = None
        return t

    @classmethod
    def zeros(cls, shape, requires_grad=False, name=None):
        return cls(np.zeros(shape), requires_grad=requires_grad, name=name)

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return int(self.data.size)

    def item(self):
        if self.size != 1:
            raise TensorError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data.copy()

    def detach(self):
        return Tensor(self.data, name=self.name)

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


# === TAPE ===

@dataclass
class TapeNode:
    kind: PrimitiveKind
    inputs: tuple
    output: Tensor
    backward_fn: object


class Tape:
    """Ordered record of primitive applications; recording order is topological"""

    def __init__(self):
        self.nodes = []
        self._outputs = set()
        self._swept = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, node):
        self.nodes.append(node)
        self._outputs.add(id(node.output))
        self._swept = False

    def clear(self):
        self.nodes = []
        self._outputs = set()
        self._swept = False

    def _sweep(self, loss):
        if loss.size != 1:
            raise TensorError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._outputs:
            raise TapeError("loss is not on this tape")
        if self._swept:
            raise TapeError("tape already swept; clear it or record new operations first")

        grads = {id(loss): np.ones_like(loss.data)}
        holders = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            for tensor, g_in in zip(node.inputs, node.backward_fn(g)):
                if g_in is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + g_in
                else:
                    grads[key] = g_in
                    holders[key] = tensor
        self._swept = True
        return grads, holders

    def backward(self, loss):
        """Assign d(loss)/d(t) to .grad of every requires_grad ancestor"""
        grads, holders = self._sweep(loss)
        for key, tensor in holders.items():
            tensor.grad = np.array(grads[key], dtype=tensor.data.dtype)

    def gradients(self, loss, wrt):
        """Gradients for `wrt` without touching any tensor (worker-safe)"""
        grads, _ = self._sweep(loss)
        return [
            np.array(grads[id(t)], dtype=t.data.dtype) if id(t) in grads else np.zeros_like(t.data)
            for t in wrt
        ]


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape():
    stack = _tape_stack()
    if stack:
        return stack[-1]
    default = getattr(_local, "default_tape", None)
    if default is None:
        default = _local.default_tape = Tape()
    return default


def grad_enabled():
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    previous = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


def backward(loss):
    if loss._tape is None:
        raise TapeError("loss is not on any tape (no input required grad)")
    loss._tape.backward(loss)


# === PRIMITIVE RULES ===
# Each rule takes input arrays (+ attrs) and returns (output, backward_fn).

def _mismatch(op, a, b):
    return TensorError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _check_binary(op, a, b):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise _mismatch(op, a, b)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _rule_matmul(a, b):
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise _mismatch("matmul", a, b)
    a2 = a.reshape(1, -1) if a.ndim == 1 else a
    b2 = b.reshape(-1, 1) if b.ndim == 1 else b
    out2 = a2 @ b2
    out = out2.reshape(a.shape[:-1] + b.shape[1:])

    def backward(g):
        g2 = g.reshape(out2.shape)
        return (g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape)
    return out, backward


def _rule_add(a, b):
    _check_binary("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return a + b, backward


def _rule_mul(a, b):
    _check_binary("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)
    return a * b, backward


def _rule_concat(*arrays):
    if not arrays:
        raise TensorError("concat: no inputs")
    lead = arrays[0].shape[:-1]
    for arr in arrays:
        if arr.ndim < 1 or arr.shape[:-1] != lead:
            raise _mismatch("concat", arrays[0], arr)
    out = np.concatenate(arrays, axis=-1)
    bounds = np.cumsum([arr.shape[-1] for arr in arrays])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=-1))
    return out, backward


def _rule_softmax(x, mask=None):
    if x.ndim < 1 or x.shape[-1] == 0:
        raise TensorError(f"softmax: empty reduction axis in shape {tuple(x.shape)}")
    if mask is None:
        e = np.exp(x - x.max(axis=-1, keepdims=True))
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise _mismatch("softmax mask", x, mask)
        if not mask.any(axis=-1).all():
            raise TensorError("softmax: a row has no unmasked entry")
        peak = np.where(mask, x, -np.inf).max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, x - peak, 0.0)), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    return y, backward


def _rule_leaky_relu(x, slope=0.2):
    positive = x > 0

    def backward(g):
        return (g * np.where(positive, 1.0, slope),)
    return np.where(positive, x, slope * x), backward


def _rule_sigmoid(x):
    y = expit(x)

    def backward(g):
        return (g * y * (1.0 - y),)
    return y, backward


def _rule_tanh(x):
    y = np.tanh(x)

    def backward(g):
        return (g * (1.0 - y * y),)
    return y, backward


def _rule_softplus(x):
    def backward(g):
        return (g * expit(x),)
    return np.logaddexp(0.0, x), backward


def _rule_sum(x, axis=None):
    if axis is None:
        def backward(g):
            return (np.broadcast_to(g, x.shape).copy(),)
        return np.asarray(x.sum()), backward
    if x.ndim < 1:
        raise TensorError("sum: axis reduction on a 0-d tensor")

    def backward(g):
        return (np.repeat(g[..., None], x.shape[-1], axis=-1),)
    return x.sum(axis=-1), backward


def _rule_mean(x, axis=None):
    n = x.size if axis is None else (x.shape[-1] if x.ndim else 0)
    if n == 0:
        raise TensorError(f"mean: empty reduction in shape {tuple(x.shape)}")
    out, sum_backward = _rule_sum(x, axis)

    def backward(g):
        return (sum_backward(g)[0] / n,)
    return out / n, backward


def _rule_l2norm(x):
    if x.ndim < 1:
        raise TensorError("l2norm: needs at least one axis")
    y = np.sqrt((x * x).sum(axis=-1))

    def backward(g):
        safe = np.where(y > 0, y, 1.0)
        scale = np.where(y > 0, g / safe, 0.0)
        return (x * scale[..., None],)
    return y, backward


def _rule_slice(x, start, stop, axis=-1):
    if x.ndim < 1:
        raise TensorError("slice: 0-d tensor")
    dim = x.shape[axis]
    if not (0 <= start < stop <= dim):
        raise TensorError(f"slice: bad range [{start}, {stop}) for axis of length {dim}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        gx = np.zeros_like(x)
        gx[index] = g
        return (gx,)
    return x[index].copy(), backward


def _rule_embed(table, indices):
    indices = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise TensorError(f"embed: table must be 2-D, got {tuple(table.shape)}")
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise TensorError(f"embed: index out of range for table of {table.shape[0]} rows")

    def backward(g):
        gt = np.zeros_like(table)
        np.add.at(gt, indices, g)
        return (gt,)
    return table[indices], backward


def _rule_scalar_mul(x, c):
    c = float(c)
    if not math.isfinite(c):
        raise TensorError(f"scalar_mul: non-finite factor {c}")

    def backward(g):
        return (g * c,)
    return x * c, backward


def _rule_transpose(x):
    if x.ndim != 2:
        raise TensorError(f"transpose: needs a 2-D tensor, got {tuple(x.shape)}")

    def backward(g):
        return (g.T.copy(),)
    return x.T.copy(), backward


def _rule_reshape(x, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise TensorError(f"reshape: cannot view {tuple(x.shape)} as {shape}")

    def backward(g):
        return (g.reshape(x.shape),)
    return x.reshape(shape).copy(), backward


def _rule_expand(x, shape):
    shape = tuple(shape)
    if x.ndim != len(shape) or any(s != 1 and s != t for s, t in zip(x.shape, shape)):
        raise TensorError(f"expand: cannot expand {tuple(x.shape)} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s == 1 and t != 1)

    def backward(g):
        return (g.sum(axis=axes, keepdims=True) if axes else g,)
    return np.broadcast_to(x, shape).copy(), backward


_RULES = {
    PrimitiveKind.MATMUL: _rule_matmul,
    PrimitiveKind.ADD: _rule_add,
    PrimitiveKind.MUL: _rule_mul,
    PrimitiveKind.CONCAT: _rule_concat,
    PrimitiveKind.SOFTMAX: _rule_softmax,
    PrimitiveKind.LEAKY_RELU: _rule_leaky_relu,
    PrimitiveKind.SIGMOID: _rule_sigmoid,
    PrimitiveKind.TANH: _rule_tanh,
    PrimitiveKind.SOFTPLUS: _rule_softplus,
    PrimitiveKind.SUM: _rule_sum,
    PrimitiveKind.MEAN: _rule_mean,
    PrimitiveKind.L2NORM: _rule_l2norm,
    PrimitiveKind.SLICE: _rule_slice,
    PrimitiveKind.EMBED: _rule_embed,
    PrimitiveKind.SCALAR_MUL: _rule_scalar_mul,
    PrimitiveKind.TRANSPOSE: _rule_transpose,
    PrimitiveKind.RESHAPE: _rule_reshape,
    PrimitiveKind.EXPAND: _rule_expand,
}


def apply_primitive(op, inputs, **attrs):
    """Evaluate one primitive; record a tape node when any input requires grad"""
    kind = PrimitiveKind(op)
    tensors = tuple(as_tensor(x) for x in inputs)
    out_data, backward_fn = _RULES[kind](*(t.data for t in tensors), **attrs)
    if not np.isfinite(out_data).all():
        raise NonFiniteError(f"{kind.value} produced non-finite values (output shape {tuple(out_data.shape)})")
    out = Tensor._wrap(out_data)
    if grad_enabled() and any(t.requires_grad for t in tensors):
        tape = current_tape()
        out.requires_grad = True
        out._tape = tape
        tape.record(TapeNode(kind, tensors, out, backward_fn))
    return out


# === FUNCTIONAL API ===

def matmul(a, b):
    return apply_primitive(PrimitiveKind.MATMUL, [a, b])


def add(a, b):
    return apply_primitive(PrimitiveKind.ADD, [a, b])


def sub(a, b):
    return add(a, scalar_mul(b, -1.0))


def mul(a, b):
    return apply_primitive(PrimitiveKind.MUL, [a, b])


def concat(tensors):
    return apply_primitive(PrimitiveKind.CONCAT, list(tensors))


def softmax(x, mask=None):
    return apply_primitive(PrimitiveKind.SOFTMAX, [x], mask=mask)


def leaky_relu(x, slope=0.2):
    return apply_primitive(PrimitiveKind.LEAKY_RELU, [x], slope=slope)


def sigmoid(x):
    return apply_primitive(PrimitiveKind.SIGMOID, [x])


def tanh(x):
    return apply_primitive(PrimitiveKind.TANH, [x])


def softplus(x):
    return apply_primitive(PrimitiveKind.SOFTPLUS, [x])


def reduce_sum(x, axis=None):
    return apply_primitive(PrimitiveKind.SUM, [x], axis=axis)


def reduce_mean(x, axis=None):
    return apply_primitive(PrimitiveKind.MEAN, [x], axis=axis)


def l2norm(x):
    return apply_primitive(PrimitiveKind.L2NORM, [x])


def take_slice(x, start, stop, axis=-1):
    return apply_primitive(PrimitiveKind.SLICE, [x], start=start, stop=stop, axis=axis)


def embed(table, indices):
    return apply_primitive(PrimitiveKind.EMBED, [table], indices=indices)


def scalar_mul(x, c):
    return apply_primitive(PrimitiveKind.SCALAR_MUL, [x], c=c)


def transpose(x):
    return apply_primitive(PrimitiveKind.TRANSPOSE, [x])


def reshape(x, shape):
    return apply_primitive(PrimitiveKind.RESHAPE, [x], shape=shape)


def expand(x, shape):
    return apply_primitive(PrimitiveKind.EXPAND, [x], shape=shape)


def stack_rows(tensors):
    """(D,) tensors -> (N, D)"""
    tensors = [as_tensor(t) for t in tensors]
    cols = [reshape(t, (t.size, 1)) for t in tensors]
    return transpose(concat(cols))


def stack_cols(tensors):
    """(N,) tensors -> (N, M)"""
    tensors = [as_tensor(t) for t in tensors]
    return concat([reshape(t, (t.size, 1)) for t in tensors])


# === GRADIENT CHECK ===

@dataclass
class GradReport:
    max_rel_err: float
    worst_index: tuple
    checked: int
    tolerance: float = 1e-4
    nan_probe: tuple = None
    label: str = ""
    seed: int = None
    shapes: tuple = ()

    @property
    def ok(self):
        return self.nan_probe is None and self.max_rel_err < self.tolerance

    def to_dict(self):
        return {
            "label": self.label,
            "max_rel_err": self.max_rel_err,
            "worst_index": list(self.worst_index) if self.worst_index else None,
            "checked": self.checked,
            "tolerance": self.tolerance,
            "nan_probe": list(self.nan_probe) if self.nan_probe else None,
            "seed": self.seed,
            "shapes": [list(s) for s in self.shapes],
            "ok": self.ok,
        }


def _probe(f):
    try:
        value = float(f().data.reshape(-1)[0])
    except NonFiniteError:
        return math.nan
    return value


def grad_check_tensors(f, tensors, eps=1e-5, tolerance=1e-4, max_probes=None, seed=0, label=""):
    """Compare tape gradients of f() w.r.t. `tensors` with central differences.

    f closes over the tensors; their data is perturbed in place and restored.
    rel_err = |a - n| / max(1, |a|, |n|).
    """
    if eps <= 0:
        raise TensorError(f"grad_check: eps must be > 0, got {eps}")
    shapes = tuple(tuple(t.shape) for t in tensors)
    with Tape() as tape:
        loss = f()
        analytic = tape.gradients(loss, tensors)

    rng = np.random.default_rng(seed)
    worst, worst_index, checked = 0.0, None, 0
    with no_grad():
        for pos, tensor in enumerate(tensors):
            flat = tensor.data.reshape(-1)
            indices = np.arange(flat.size)
            if max_probes is not None and flat.size > max_probes:
                indices = np.sort(rng.choice(flat.size, size=max_probes, replace=False))
            grad_flat = analytic[pos].reshape(-1)
            for i in indices:
                original = flat[i]
                flat[i] = original + eps
                f_plus = _probe(f)
                flat[i] = original - eps
                f_minus = _probe(f)
                flat[i] = original
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    logger.warning(f"⚠️  gradcheck {label}: NaN at probe ({pos}, {int(i)})")
                    return GradReport(math.inf, (pos, int(i)), checked, tolerance, (pos, int(i)), label, seed, shapes)
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = float(grad_flat[i])
                rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                checked += 1
                if rel > worst or worst_index is None:
                    worst, worst_index = rel, (pos, int(i))
    return GradReport(worst, worst_index or (), checked, tolerance, None, label, seed, shapes)


def grad_check(f, x, eps=1e-5, tolerance=1e-4, label=""):
    """Single-input form: f(x) must be scalar-valued and deterministic"""
    probe = Tensor(as_tensor(x).data, requires_grad=True)
    return grad_check_tensors(lambda: f(probe), [probe], eps=eps, tolerance=tolerance, label=label)
