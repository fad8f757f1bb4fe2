"""Dense tensor ops with reverse-mode autodiff, a named parameter store,
decoupled-weight-decay Adam, and a warmup-cosine learning-rate schedule.

Tensors carry float32 data by default; reductions and matrix products
accumulate in float64 before rounding back. Every op records a backward
closure so `backward(loss, store)` can fill per-parameter gradients.
float64 tensors are supported for verification (finite-difference checks
need more precision than float32 can deliver).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from editprobe.errors import ConfigError, ContractError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)


def _coerce(data, dtype):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in _FLOAT_DTYPES:
        return arr
    return arr.astype(np.float32)


class Tensor:
    """N-d float array participating in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=()):
        self.data = _coerce(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> np.ndarray:
        return np.array(self.data, copy=True)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; all graph building lives in the module-level functions.
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _accum(target: Tensor, grad: np.ndarray) -> None:
    grad = grad.astype(target.data.dtype, copy=False)
    if target.grad is None:
        target.grad = np.zeros_like(target.data)
    target.grad += grad


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make(data, parents) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, _parents=tuple(parents))
    return out


def _mm64(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation, rounded back to the operand dtype."""
    out_dtype = np.result_type(a.dtype, b.dtype)
    prod = np.matmul(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False))
    return prod.astype(out_dtype, copy=False)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.ndim != b.data.ndim:
        raise ShapeError(f"matmul needs stacked matrices of equal rank, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2] or a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = _make(_mm64(a.data, b.data), (a, b))

    def _bw(grad):
        if a.requires_grad:
            _accum(a, _mm64(grad, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            _accum(b, _mm64(np.swapaxes(a.data, -1, -2), grad))

    out._backward = _bw
    return out


def _binary(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    if isinstance(b, Tensor):
        return as_tensor(a, like=b), b
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    out = _make(a.data + b.data, (a, b))

    def _bw(grad):
        if a.requires_grad:
            _accum(a, _unbroadcast(grad, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(grad, b.data.shape))

    out._backward = _bw
    return out


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    out = _make(a.data - b.data, (a, b))

    def _bw(grad):
        if a.requires_grad:
            _accum(a, _unbroadcast(grad, a.data.shape))
        if b.requires_grad:
            _accum(b, -_unbroadcast(grad, b.data.shape))

    out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    out = _make(a.data * b.data, (a, b))

    def _bw(grad):
        if a.requires_grad:
            _accum(a, _unbroadcast(grad * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(grad * a.data, b.data.shape))

    out._backward = _bw
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = _make(np.maximum(x.data, 0), (x,))

    def _bw(grad):
        if x.requires_grad:
            _accum(x, grad * (x.data > 0))

    out._backward = _bw
    return out


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / exps.sum(axis=axis, keepdims=True)
    out = _make(probs, (x,))

    def _bw(grad):
        if x.requires_grad:
            inner = (grad * probs).sum(axis=axis, keepdims=True)
            _accum(x, probs * (grad - inner))

    out._backward = _bw
    return out


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis with learned gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = _make(xhat * gain.data + bias.data, (x, gain, bias))

    def _bw(grad):
        if gain.requires_grad:
            _accum(gain, _unbroadcast(grad * xhat, gain.data.shape))
        if bias.requires_grad:
            _accum(bias, _unbroadcast(grad, bias.data.shape))
        if x.requires_grad:
            gxhat = grad * gain.data
            m1 = gxhat.mean(axis=-1, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (gxhat - m1 - xhat * m2))

    out._backward = _bw
    return out


def tsum(x) -> Tensor:
    """Scalar sum with float64 accumulation."""
    x = as_tensor(x)
    total = np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype)
    out = _make(total, (x,))

    def _bw(grad):
        if x.requires_grad:
            _accum(x, np.broadcast_to(grad, x.data.shape))

    out._backward = _bw
    return out


def tmean(x) -> Tensor:
    """Scalar mean with float64 accumulation."""
    x = as_tensor(x)
    n = x.data.size
    total = np.asarray(x.data.sum(dtype=np.float64) / n, dtype=x.data.dtype)
    out = _make(total, (x,))

    def _bw(grad):
        if x.requires_grad:
            _accum(x, np.broadcast_to(grad / n, x.data.shape))

    out._backward = _bw
    return out


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = _make(x.data.reshape(shape), (x,))

    def _bw(grad):
        if x.requires_grad:
            _accum(x, grad.reshape(x.data.shape))

    out._backward = _bw
    return out


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = _make(x.data.transpose(axes), (x,))

    def _bw(grad):
        if x.requires_grad:
            _accum(x, grad.transpose(inverse))

    out._backward = _bw
    return out


def concat_rows(tensors) -> Tensor:
    """Concatenate along axis 0."""
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[0] for t in tensors]
    out = _make(np.concatenate([t.data for t in tensors], axis=0), tuple(tensors))

    def _bw(grad):
        offset = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                _accum(t, grad[offset : offset + size])
            offset += size

    out._backward = _bw
    return out


def take_rows(x, indices) -> Tensor:
    """Gather rows by integer index (embedding lookup, position slices)."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    out = _make(x.data[idx], (x,))

    def _bw(grad):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, idx, grad.astype(x.data.dtype, copy=False))

    out._backward = _bw
    return out


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: active only in training mode, identity otherwise."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an RNG")
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep, dtype=x.data.dtype))


def backward(loss: Tensor, store: "ParamStore | None" = None) -> None:
    """Reverse-mode sweep from a scalar loss; fills `store.grads` when given.

    Trainable parameters receive d(loss)/d(param); frozen parameters receive
    zeros of matching shape.
    """
    if not isinstance(loss, Tensor) or loss.data.shape != ():
        got = getattr(loss, "shape", type(loss))
        raise ContractError(f"backward needs a scalar loss tensor, got shape {got}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    for node in topo:
        node.grad = None
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    if store is not None:
        store.grads = {}
        for name, param in store.params.items():
            if store.trainable[name] and param.grad is not None:
                store.grads[name] = param.grad.copy()
            else:
                store.grads[name] = np.zeros_like(param.data)


class ParamStore:
    """Named parameters with a trainable mask and a gradient slot per name."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.trainable: dict[str, bool] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value, trainable: bool = True, dtype=np.float32) -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=dtype), requires_grad=trainable)
        self.params[name] = t
        self.trainable[name] = bool(trainable)
        return t

    def adopt(self, name: str, tensor: Tensor, trainable: bool = True) -> Tensor:
        """Register an existing tensor (shared reference) under this store."""
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = bool(trainable)
        self.params[name] = tensor
        self.trainable[name] = bool(trainable)
        return tensor

    def set_trainable(self, name: str, flag: bool) -> None:
        self.trainable[name] = bool(flag)
        self.params[name].requires_grad = bool(flag)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def trainable_names(self) -> list[str]:
        return [n for n, flag in self.trainable.items() if flag]

    def snapshot(self, names=None) -> dict[str, np.ndarray]:
        picked = names if names is not None else self.params
        return {n: self.params[n].data.copy() for n in picked}

    def restore(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, value in snapshot.items():
            self.params[name].data = value.copy()


@dataclass
class OptimizerState:
    """Adam moments plus step counter; decoupled weight decay."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(store: ParamStore, state: OptimizerState, lr: float) -> None:
    """One AdamW update over the store's trainable parameters.

    Frozen parameters are never touched; missing gradients are a contract error.
    """
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for name in store.trainable_names():
        grad = store.grads.get(name)
        if grad is None:
            raise ContractError(f"adamw_step: no gradient for trainable parameter {name!r}")
        param = store.params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(param.data)
            state.v[name] = np.zeros_like(param.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        update = lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay:
            update = update + lr * state.weight_decay * param.data
        param.data = param.data - update.astype(param.data.dtype, copy=False)


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup from 0 to base over [0, W], then cosine decay to floor at T."""

    base: float
    warmup: int
    total: int
    floor: float = 0.0

    def __post_init__(self):
        if self.warmup < 0 or self.total <= self.warmup:
            raise ConfigError(f"need 0 <= warmup < total, got warmup={self.warmup} total={self.total}")
        if self.floor < 0 or self.floor > self.base:
            raise ConfigError(f"need 0 <= floor <= base, got floor={self.floor} base={self.base}")


def lr_at(schedule: LrSchedule, step: int) -> float:
    if step < 0:
        raise ContractError(f"step must be nonnegative, got {step}")
    if step >= schedule.total:
        return schedule.floor
    if schedule.warmup > 0 and step < schedule.warmup:
        return max(schedule.floor, schedule.base * step / schedule.warmup)
    span = schedule.total - schedule.warmup
    phase = (step - schedule.warmup) / span
    return schedule.floor + 0.5 * (schedule.base - schedule.floor) * (1.0 + np.cos(np.pi * phase))
