"""Dense tensors with reverse-mode differentiation, a finite-difference
gradient checker and the Adadelta update.

The op set is deliberately small: everything the combination model needs and
nothing else.  Each op computes its value eagerly with numpy and, when any
input requires a gradient, records a closure that maps the output gradient to
input gradients.  ``backward`` walks the recorded graph in reverse
topological order.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, InputError, TrainingError

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)

# Names of backward rules that are deliberately broken (fault injection for
# the gradient checker).
_faults: set[str] = set()


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@contextlib.contextmanager
def inject_fault(rule: str = "tanh"):
    """Corrupt the backward rule of ``rule`` while the context is active."""
    _faults.add(rule)
    try:
        yield
    finally:
        _faults.discard(rule)


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # python scalars adopt the dtype of the tensor operand (no silent upcasts)
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor) and isinstance(a, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return as_tensor(a), as_tensor(b)


def _node(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        return Tensor(data, True, None, parents, backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(ufunc, a: Tensor, b: Tensor, op: str) -> np.ndarray:
    try:
        return ufunc(a.data, b.data)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = _binary(np.add, a, b, "add")
    sa, sb = a.shape, b.shape
    return _node(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = _binary(np.subtract, a, b, "sub")
    sa, sb = a.shape, b.shape
    return _node(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = _binary(np.multiply, a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _node(out, (a, b), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)

    def backward(g):
        if "tanh" in _faults:
            return (g * (1.0 - y),)
        return (g * (1.0 - y * y),)

    return _node(y, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # tanh form never overflows
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward(g):
        if "sigmoid" in _faults:
            return (g * y,)
        return (g * y * (1.0 - y),)

    return _node(y, (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: shapes {[t.shape for t in ts]} along axis {axis}: {exc}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _node(out, tuple(ts), backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack: shapes {[t.shape for t in ts]}: {exc}") from None
    ax = axis % out.ndim

    def backward(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))

    return _node(out, tuple(ts), backward)


def elementwise(kind: str, *args, axis: int = 0) -> Tensor:
    """Dispatch by name: tanh, sigmoid, add, mul, concat."""
    if kind == "tanh":
        return tanh(*args)
    if kind == "sigmoid":
        return sigmoid(*args)
    if kind == "add":
        return add(*args)
    if kind == "mul":
        return mul(*args)
    if kind == "concat":
        return concat(args, axis=axis)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ------------------------------------------------------------------ structure

def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _node(out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _node(a.data.T, (a,), lambda g: (g.T,))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(out), (a,), backward)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradient is scattered back with accumulation."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        from .errors import VocabularyError
        raise VocabularyError(f"token id out of range [0, {vocab}): min={ids.min()} max={ids.max()}")
    out = table.data[ids]

    def backward(g):
        full = np.zeros(table.shape, dtype=table.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _node(out, (table,), backward)


# ------------------------------------------------------------------- products

def matmul(a, b) -> Tensor:
    """numpy ``@`` semantics for 2-D weights, matrix-vector and batched operands."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise DimensionError(f"matmul: scalar operand (shapes {ad.shape} and {bd.shape})")
    inner_b = bd.shape[0] if bd.ndim <= 2 else bd.shape[-2]
    if ad.shape[-1] != inner_b:
        raise DimensionError(f"matmul: inner dimensions disagree for shapes {ad.shape} and {bd.shape}")
    try:
        out = ad @ bd
    except ValueError as exc:
        raise DimensionError(f"matmul: shapes {ad.shape} and {bd.shape}: {exc}") from None

    if bd.ndim == 1:
        def backward(g):
            ga = g[..., None] * bd if a.requires_grad else None
            gb = (ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1)) if b.requires_grad else None
            return ga, gb
    elif bd.ndim == 2:
        def backward(g):
            ga = gb = None
            if a.requires_grad:
                ga = g @ bd.T if ad.ndim > 1 else (g @ bd.T)
            if b.requires_grad:
                if ad.ndim == 1:
                    gb = np.outer(ad, g)
                else:
                    gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        def backward(g):
            ga = gb = None
            if a.requires_grad:
                ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
            return ga, gb

    return _node(out, (a, b), backward)


# -------------------------------------------------------------- normalizers

def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; positions where ``mask`` is 0 get probability 0.

    Computed with max-subtraction so large logits never overflow.
    """
    x = as_tensor(x)
    xd = x.data
    if xd.ndim == 0 or xd.shape[axis] == 0:
        raise DimensionError(f"softmax: empty input of shape {xd.shape}")
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        if not m.any(axis=axis).all():
            raise InputError("softmax: every position is masked in at least one row")
        shifted = np.where(m, xd, -np.inf)
        shifted = shifted - shifted.max(axis=axis, keepdims=True)
        e = np.where(m, np.exp(shifted), 0.0).astype(xd.dtype, copy=False)
    else:
        e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _node(y, (x,), backward)


def cross_entropy(logits, targets, mask=None) -> Tensor:
    """Summed negative log-likelihood of ``targets`` under softmax(logits).

    ``logits`` has shape [..., V]; ``targets`` and ``mask`` have shape [...].
    Positions with mask 0 contribute nothing.
    """
    logits = as_tensor(logits)
    ld = logits.data
    targets = np.asarray(targets)
    if ld.shape[:-1] != targets.shape:
        raise DimensionError(f"cross_entropy: logits {ld.shape} vs targets {targets.shape}")
    w = np.ones(targets.shape, dtype=ld.dtype) if mask is None else np.asarray(mask, dtype=ld.dtype)
    shifted = ld - ld.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * w).sum()

    def backward(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (p * (w[..., None] * g),)

    return _node(np.asarray(loss, dtype=ld.dtype), (logits,), backward)


# ------------------------------------------------------------------ backward

def _topological(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, leaves: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each of ``leaves``.

    Leaves that do not influence the loss get exact zeros.
    """
    leaves = list(leaves)
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topological(loss)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            del grads[id(node)]
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
    out = []
    for leaf in leaves:
        g = grads.get(id(leaf))
        out.append(np.zeros_like(leaf.data) if g is None else g.reshape(leaf.shape))
    return out


# ---------------------------------------------------------- gradient checking

@dataclass
class GradCheckResult:
    max_relative_error: float
    worst_param: str
    worst_index: tuple
    analytic: float
    numeric: float
    checked: int

    def __float__(self) -> float:
        return self.max_relative_error


def grad_check(loss_fn: Callable[[dict[str, Tensor]], Tensor], params: dict[str, np.ndarray],
               eps: float = 1e-6, max_entries: int | None = 400, seed: int = 0,
               fd_dtype=np.longdouble) -> GradCheckResult:
    """Compare backward() in 64-bit against central finite differences.

    ``loss_fn`` receives a dict of leaf tensors and returns a scalar tensor.
    When the parameters hold more than ``max_entries`` values a seeded
    subsample is checked; every tensor contributes at least one entry.
    The difference quotients are evaluated in ``fd_dtype``; extended
    precision keeps cancellation noise below the 1e-8 floor of the
    relative error for losses of order 10.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ContractError(f"grad_check: eps={eps} outside [1e-6, 1e-4]")
    arrays = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    names = list(arrays)
    analytic = dict(zip(names, backward(loss_fn(leaves), [leaves[k] for k in names])))
    arrays = {k: v.astype(fd_dtype) for k, v in arrays.items()}

    def evaluate() -> float:
        with no_grad():
            return loss_fn({k: Tensor(v) for k, v in arrays.items()}).data[()]

    if evaluate() != evaluate():
        raise ContractError("grad_check: loss_fn is nondeterministic")

    entries = [(k, i) for k in names for i in range(arrays[k].size)]
    if max_entries is not None and len(entries) > max_entries:
        rng = np.random.default_rng(seed)
        chosen = [(k, int(rng.integers(arrays[k].size))) for k in names if arrays[k].size]
        rest = max(0, max_entries - len(chosen))
        picks = rng.choice(len(entries), size=rest, replace=False)
        chosen += [entries[i] for i in sorted(picks)]
        entries = chosen

    worst = GradCheckResult(0.0, "", (), 0.0, 0.0, len(entries))
    for name, flat in entries:
        arr = arrays[name]
        view = arr.reshape(-1)
        orig = view[flat]
        step = fd_dtype(eps)
        view[flat] = orig + step
        lp = evaluate()
        view[flat] = orig - step
        lm = evaluate()
        view[flat] = orig
        num = float((lp - lm) / (2 * fd_dtype(eps)))
        ana = float(analytic[name].reshape(-1)[flat])
        rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        if rel > worst.max_relative_error or not worst.worst_param:
            worst = GradCheckResult(rel, name, np.unravel_index(flat, arr.shape), ana, num, len(entries))
    return worst


# ------------------------------------------------------------------ Adadelta

@dataclass
class AdadeltaState:
    """Running averages E[g^2] and E[dx^2], one pair per named parameter."""
    rho: float = 0.95
    eps: float = 1e-6
    sq_grad: dict[str, np.ndarray] = field(default_factory=dict)
    sq_update: dict[str, np.ndarray] = field(default_factory=dict)


def adadelta_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                    state: AdadeltaState) -> tuple[dict[str, np.ndarray], AdadeltaState]:
    """One Adadelta step (Zeiler 2012), applied in place."""
    rho, eps = state.rho, state.eps
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise DimensionError(f"adadelta: gradient {g.shape} vs parameter {p.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
        eg = state.sq_grad.get(name)
        if eg is None:
            eg = state.sq_grad[name] = np.zeros_like(p)
            state.sq_update[name] = np.zeros_like(p)
        ex = state.sq_update[name]
        eg *= rho
        eg += (1.0 - rho) * g * g
        dx = -(np.sqrt(ex + eps) / np.sqrt(eg + eps)) * g
        ex *= rho
        ex += (1.0 - rho) * dx * dx
        p += dx.astype(p.dtype, copy=False)
    return params, state
