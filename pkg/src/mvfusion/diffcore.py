"""Dense float64 tensors with reverse-mode differentiation, MLPs, Adam and a
finite-difference gradient oracle.

The autodiff engine is deliberately small: a ``Tensor`` records the op that
produced it and a closure that pushes the output gradient to its parents.
Only the primitives needed by the variational bounds are provided.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

VARIANCE_FLOOR = 1e-6
LOG_2PI = math.log(2.0 * math.pi)

# ops that backprop_grads knows how to differentiate
SUPPORTED_OPS = frozenset({
    "leaf", "const", "add", "sub", "mul", "div", "neg", "pow", "matmul",
    "sum", "reshape", "broadcast", "concat", "stack", "getitem", "exp",
    "log", "sqrt", "tanh", "softplus", "logsumexp", "log_softmax",
    "gauss_log_pdf",
})


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array node in a recorded computation."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, op: str = "const",
                 parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward

    @classmethod
    def leaf(cls, data) -> "Tensor":
        return cls(np.array(data, dtype=np.float64), requires_grad=True, op="leaf")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    def item(self) -> float:
        return float(self.data)

    # -- graph construction -------------------------------------------------
    @staticmethod
    def _make(data, op, parents, backward):
        parents = tuple(p for p in parents if isinstance(p, Tensor))
        rg = any(p.requires_grad for p in parents)
        return Tensor(data, requires_grad=rg, op=op, parents=parents,
                      backward=backward if rg else None)

    # -- arithmetic ----------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        out_data = self.data + other.data

        def backward(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape))
        return Tensor._make(out_data, "add", (self, other), backward)

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)

        def backward(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape))
        return Tensor._make(self.data - other.data, "sub", (self, other), backward)

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return (_unbroadcast(g * b, self.shape), _unbroadcast(g * a, other.shape))
        return Tensor._make(a * b, "mul", (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return (_unbroadcast(g / b, self.shape),
                    _unbroadcast(-g * a / (b * b), other.shape))
        return Tensor._make(a / b, "div", (self, other), backward)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, "neg", (self,), lambda g: (-g,))

    def __pow__(self, exponent: float):
        a = self.data

        def backward(g):
            return (g * exponent * a ** (exponent - 1),)
        return Tensor._make(a ** exponent, "pow", (self,), backward)

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.shape[-1] != b.shape[0] or b.ndim != 2:
            raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")

        def backward(g):
            ga = g @ b.T
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return (ga, gb)
        return Tensor._make(a @ b, "matmul", (self, other), backward)

    # -- reductions / shape --------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)
        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), "sum",
                            (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), "reshape", (self,),
                            lambda g: (g.reshape(old),))

    def broadcast_to(self, shape):
        old = self.shape
        return Tensor._make(np.broadcast_to(self.data, shape), "broadcast", (self,),
                            lambda g: (_unbroadcast(g, old),))

    def __getitem__(self, idx):
        old = self.shape

        def backward(g):
            out = np.zeros(old)
            np.add.at(out, idx, g)
            return (out,)
        return Tensor._make(self.data[idx], "getitem", (self,), backward)

    # -- elementwise ---------------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, "exp", (self,), lambda g: (g * out,))

    def log(self):
        a = self.data
        return Tensor._make(np.log(a), "log", (self,), lambda g: (g / a,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._make(out, "sqrt", (self,), lambda g: (g * 0.5 / out,))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._make(out, "tanh", (self,), lambda g: (g * (1.0 - out * out),))

    def softplus(self):
        a = self.data
        out = np.logaddexp(0.0, a)
        # d/da log(1+e^a) = sigmoid(a)
        sig = np.exp(a - out)
        return Tensor._make(out, "softplus", (self,), lambda g: (g * sig,))

    def logsumexp(self, axis: int = -1, keepdims: bool = False):
        a = self.data
        m = np.max(a, axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        s = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
        w = np.exp(a - s)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (g * w,)
        out = s if keepdims else np.squeeze(s, axis=axis)
        return Tensor._make(out, "logsumexp", (self,), backward)

    def log_softmax(self, axis: int = -1):
        a = self.data
        m = np.max(a, axis=axis, keepdims=True)
        out = a - m - np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
        p = np.exp(out)

        def backward(g):
            return (g - p * g.sum(axis=axis, keepdims=True),)
        return Tensor._make(out, "log_softmax", (self,), backward)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))
    return Tensor._make(np.concatenate([t.data for t in ts], axis=axis), "concat",
                        tuple(ts), backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))
    return Tensor._make(np.stack([t.data for t in ts], axis=axis), "stack",
                        tuple(ts), backward)


def gauss_log_density(x, mean, var) -> Tensor:
    """Sum over the last axis of log N(x | mean, diag(var)), broadcasting."""
    x, mean, var = as_tensor(x), as_tensor(mean), as_tensor(var)
    if not (x.shape[-1] == mean.shape[-1] == var.shape[-1]):
        raise DimensionError(
            f"gaussian dims differ: x {x.shape}, mean {mean.shape}, var {var.shape}")
    diff = x.data - mean.data
    inv = 1.0 / var.data
    quad = diff * diff * inv
    out = -0.5 * np.sum(LOG_2PI + np.log(var.data) + quad, axis=-1)

    def backward(g):
        g = g[..., None]
        gx = -g * diff * inv
        gv = -0.5 * g * (inv - quad * inv)
        return (_unbroadcast(gx, x.shape), _unbroadcast(-gx, mean.shape),
                _unbroadcast(gv, var.shape))
    return Tensor._make(out, "gauss_log_pdf", (x, mean, var), backward)


# ---------------------------------------------------------------------------
# reverse accumulation


def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d loss / d node into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError("backward needs a scalar loss")
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite")
    order = _toposort(loss)
    for node in order:
        if node.op not in SUPPORTED_OPS:
            raise ContractError(f"unsupported primitive in graph: {node.op!r}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.op == "leaf":
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Ordered named float64 blocks. The set of names and shapes is fixed."""

    def __init__(self, blocks: Mapping[str, np.ndarray] | Iterable = ()):
        items = blocks.items() if isinstance(blocks, Mapping) else blocks
        self._blocks: dict[str, np.ndarray] = {}
        for name, arr in items:
            if name in self._blocks:
                raise ContractError(f"duplicate parameter block {name!r}")
            arr = np.array(arr, dtype=np.float64)
            if not np.isfinite(arr).all():
                raise NumericError(f"non-finite values in block {name!r}")
            self._blocks[name] = arr

    def __getitem__(self, name):
        return self._blocks[name]

    def __setitem__(self, name, value):
        if name not in self._blocks:
            raise ContractError(f"unknown parameter block {name!r}")
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._blocks[name].shape:
            raise DimensionError(f"block {name!r}: shape {value.shape} != "
                                 f"{self._blocks[name].shape}")
        self._blocks[name] = value.copy()

    def __contains__(self, name):
        return name in self._blocks

    def __iter__(self):
        return iter(self._blocks)

    def __len__(self):
        return len(self._blocks)

    def keys(self):
        return self._blocks.keys()

    def items(self):
        return self._blocks.items()

    def values(self):
        return self._blocks.values()

    @property
    def size(self) -> int:
        return sum(a.size for a in self._blocks.values())

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._blocks.items()})

    def zeros_like(self) -> "ParamStore":
        return ParamStore({k: np.zeros_like(v) for k, v in self._blocks.items()})

    def leaves(self) -> dict[str, Tensor]:
        return {k: Tensor.leaf(v) for k, v in self._blocks.items()}

    def equals(self, other: "ParamStore") -> bool:
        return (list(self.keys()) == list(other.keys())
                and all(np.array_equal(self[k], other[k]) for k in self))


def backprop_grads(loss: Tensor, leaves: Mapping[str, Tensor]) -> ParamStore:
    """Gradients of a scalar loss w.r.t. each named leaf; untouched leaves get zeros."""
    for t in leaves.values():
        t.grad = None
    backward(loss)
    return ParamStore({k: (np.zeros_like(t.data) if t.grad is None else t.grad)
                       for k, t in leaves.items()})


def finite_diff_gradient(loss_fn: Callable[[ParamStore], float], params: ParamStore,
                         h: float = 1e-5, blocks: Iterable[str] | None = None) -> ParamStore:
    """Central-difference gradient of a deterministic scalar function."""
    if h <= 0:
        raise ContractError("step h must be positive")
    work = params.copy()
    grads = params.zeros_like()
    names = list(params.keys()) if blocks is None else list(blocks)
    for name in names:
        arr = work[name]
        flat = arr.reshape(-1)
        g = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss_fn(work))
            flat[i] = orig - h
            fm = float(loss_fn(work))
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"non-finite loss perturbing {name}[{i}]")
            g[i] = (fp - fm) / (2.0 * h)
    return grads


# ---------------------------------------------------------------------------
# multilayer perceptrons


@dataclass(frozen=True)
class MLPSpec:
    """Feed-forward net with shared hidden trunk and named output heads.

    Head activations: ``linear``, ``variance`` (softplus plus floor),
    ``log_softmax``.
    """
    input_dim: int
    hidden_widths: tuple[int, ...]
    heads: tuple[tuple[str, int, str], ...]
    hidden_activation: str = "tanh"

    def __post_init__(self):
        if self.input_dim < 1 or any(w < 1 for w in self.hidden_widths):
            raise ContractError("MLP widths must be >= 1")
        for name, dim, act in self.heads:
            if dim < 1:
                raise ContractError(f"head {name!r} needs dim >= 1")
            if act not in ("linear", "variance", "log_softmax"):
                raise ContractError(f"unknown head activation {act!r}")
        if self.hidden_activation not in ("tanh", "softplus"):
            raise ContractError(f"unknown hidden activation {self.hidden_activation!r}")

    def block_shapes(self, prefix: str) -> list[tuple[str, tuple[int, ...]]]:
        shapes, fan_in = [], self.input_dim
        for i, w in enumerate(self.hidden_widths):
            shapes += [(f"{prefix}.h{i}.W", (fan_in, w)), (f"{prefix}.h{i}.b", (w,))]
            fan_in = w
        for name, dim, _ in self.heads:
            shapes += [(f"{prefix}.{name}.W", (fan_in, dim)), (f"{prefix}.{name}.b", (dim,))]
        return shapes


def init_mlp(spec: MLPSpec, prefix: str, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases."""
    out = {}
    for name, shape in spec.block_shapes(prefix):
        if len(shape) == 2:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            out[name] = rng.uniform(-limit, limit, size=shape)
        else:
            out[name] = np.zeros(shape)
    return out


def _check_finite(t: Tensor, where: str):
    if not np.isfinite(t.data).all():
        raise NumericError(f"non-finite activation in {where}")


def mlp_forward(spec: MLPSpec, params: Mapping, x, prefix: str,
                variance_floor: float = VARIANCE_FLOOR) -> dict[str, Tensor]:
    """Evaluate every head of the network on a batch ``x`` of shape (..., input_dim)."""
    x = as_tensor(x)
    if x.shape[-1] != spec.input_dim:
        raise DimensionError(f"{prefix}: input dim {x.shape[-1]} != {spec.input_dim}")
    try:
        p = {name: as_tensor(params[name]) for name, _ in spec.block_shapes(prefix)}
    except KeyError as exc:
        raise ContractError(f"{prefix}: missing parameter block {exc}") from None
    h = x
    for i in range(len(spec.hidden_widths)):
        h = h @ p[f"{prefix}.h{i}.W"] + p[f"{prefix}.h{i}.b"]
        h = h.tanh() if spec.hidden_activation == "tanh" else h.softplus()
        _check_finite(h, f"{prefix}.h{i}")
    out = {}
    for name, _, act in spec.heads:
        a = h @ p[f"{prefix}.{name}.W"] + p[f"{prefix}.{name}.b"]
        if act == "variance":
            a = a.softplus() + variance_floor
        elif act == "log_softmax":
            a = a.log_softmax(axis=-1)
        _check_finite(a, f"{prefix}.{name}")
        out[name] = a
    return out


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamStore, **kw) -> "AdamState":
        st = cls(**kw)
        st.m = {k: np.zeros_like(a) for k, a in params.items()}
        st.v = {k: np.zeros_like(a) for k, a in params.items()}
        return st


def adam_step(state: AdamState, params: ParamStore, grads: ParamStore) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if state.lr <= 0:
        raise ContractError("learning rate must be positive")
    for k in params:
        if grads[k].shape != params[k].shape:
            raise DimensionError(f"gradient shape mismatch for block {k!r}")
        if not np.isfinite(grads[k]).all():
            raise NumericError(f"non-finite gradient in block {k!r}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for k, p in params.items():
        g = grads[k]
        m = state.m.setdefault(k, np.zeros_like(p))
        v = state.v.setdefault(k, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)


# ---------------------------------------------------------------------------
# checkpoint file: b"MVF1\n" then records  name\n  ndims d0 d1 ...\n  <f8 payload


MAGIC = b"MVF1\n"


def save_checkpoint(path: str | os.PathLike, params: Mapping[str, np.ndarray]) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".mvf")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            for name, arr in params.items():
                if "\n" in name:
                    raise ContractError("block names may not contain newlines")
                arr = np.asarray(arr, dtype="<f8")
                fh.write(name.encode() + b"\n")
                fh.write(" ".join(str(n) for n in (arr.ndim, *arr.shape)).encode() + b"\n")
                fh.write(np.ascontiguousarray(arr).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | os.PathLike) -> ParamStore:
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(MAGIC):
        raise ContractError(f"{path}: missing MVF1 header")
    pos, blocks = len(MAGIC), []
    while pos < len(buf):
        nl = buf.index(b"\n", pos)
        name = buf[pos:nl].decode()
        nl2 = buf.index(b"\n", nl + 1)
        dims = [int(t) for t in buf[nl + 1:nl2].split()]
        ndims, shape = dims[0], tuple(dims[1:])
        if len(shape) != ndims:
            raise ContractError(f"{path}: bad shape record for {name!r}")
        count = int(np.prod(shape)) if shape else 1
        start = nl2 + 1
        end = start + 8 * count
        if end > len(buf):
            raise ContractError(f"{path}: truncated payload for {name!r}")
        arr = np.frombuffer(buf[start:end], dtype="<f8").reshape(shape).astype(np.float64)
        blocks.append((name, arr))
        pos = end
    return ParamStore(blocks)
