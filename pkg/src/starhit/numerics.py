"""Small dense-tensor engine with reverse-mode differentiation.

Every op takes and returns :class:`Tensor` objects wrapping numpy arrays.  When
gradient recording is enabled and at least one input requires a gradient, the
op stores a closure mapping the output gradient to input gradients.  A call to
:func:`backward` on a scalar walks the recorded graph once, accumulates
gradients into leaf tensors and then releases the graph.

Only the operations the model needs are provided; broadcasting is limited to
what numpy does for elementwise ops, with gradients summed back to the input
shape.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

MASK_VALUE = -1e9
LAYERNORM_EPS = 1e-5

_grad_enabled = True


class NumericsError(RuntimeError):
    """Raised on shape mismatches and non-finite results."""


class GradientError(RuntimeError):
    """Raised when backward is misused."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op: str | None = None
        self._consumed = False

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return Tensor(arr)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericsError(f"{op}: non-finite value in result of shape {data.shape}")


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str = "custom") -> Tensor:
    """Wrap a user-defined primitive.

    ``backward`` receives the output gradient and returns one gradient (or
    None) per parent.
    """
    return _result(np.asarray(data), parents, backward, op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise NumericsError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * a.dtype.type(c), (a,), lambda g: (g * a.dtype.type(c),), "scale")


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _result(np.where(keep, a.data, 0).astype(a.dtype), (a,), lambda g: (g * keep,), "relu")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1 - y * y),), "tanh")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a.data)
    return _result(y, (a,), lambda g: (g / a.data,), "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; the gradient is zero where clamping was active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_shape("maximum", a, b)
    pick_a = a.data >= b.data

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _result(np.where(pick_a, a.data, b.data), (a, b), bw, "maximum")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_shape("minimum", a, b)
    pick_a = a.data <= b.data

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _result(np.where(pick_a, a.data, b.data), (a, b), bw, "minimum")


def masked_logits(logits: Tensor, keep: np.ndarray) -> Tensor:
    """Add MASK_VALUE to logits where ``keep`` is False (broadcastable)."""
    bias = np.where(keep, 0.0, MASK_VALUE).astype(logits.dtype)
    _broadcast_shape("masked_logits", logits, Tensor(bias))
    return _result(logits.data + bias, (logits,), lambda g: (_unbroadcast(g, logits.shape),), "masked_logits")


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; the identity outside training or when p == 0."""
    if not train or p <= 0:
        return a
    if rng is None:
        raise NumericsError("dropout: training mode needs a seeded generator")
    keep = rng.random(a.shape) >= p
    factor = (keep / (1.0 - p)).astype(a.dtype)
    return _result(a.data * factor, (a,), lambda g: (g * factor,), "dropout")


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise NumericsError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 2:
        # fold leading dims into one GEMM
        flat_a = a.data.reshape(-1, a.shape[-1])
        out = (flat_a @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def bw(g):
            g2 = g.reshape(-1, b.shape[1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = flat_a.T @ g2 if b.requires_grad else None
            return ga, gb

        return _result(out, (a, b), bw, "matmul")

    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise NumericsError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _result(out, (a, b), bw, "matmul")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise NumericsError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    dtype = tensors[0].dtype
    tensors = [t if t.dtype == dtype else Tensor(t.data.astype(dtype)) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise NumericsError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, bw, "concat")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, copy=True), (a,), bw, "getitem")


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table by integer ids of any shape."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise NumericsError(f"take_rows: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise NumericsError(f"take_rows: index out of range for table with {table.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), bw, "take_rows")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# neural-net primitives


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (a,), bw, "softmax")


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply the learnable gain and bias."""
    if gain.shape != (a.shape[-1],) or bias.shape != (a.shape[-1],):
        raise NumericsError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match input {a.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = a.shape[-1]

    def bw(g):
        gx_hat = g * gain.data
        ga = inv / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(a.ndim - 1))
        return ga, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out.astype(a.dtype, copy=False), (a, gain, bias), bw, "layer_norm")


def conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Convolution along the sequence axis (-2), stride 1, zero padding k//2.

    ``x`` is (..., T, d_in), ``weight`` is (kernel, d_in, d_out) and ``bias`` is (d_out,).
    """
    ksize, d_in, d_out = weight.shape
    if x.shape[-1] != d_in or bias.shape != (d_out,) or ksize % 2 != 1:
        raise NumericsError(f"conv1d: input {x.shape}, weight {weight.shape}, bias {bias.shape} mismatch")
    pad = ksize // 2
    T = x.shape[-2]
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x.data, widths)
    out = np.broadcast_to(bias.data, x.shape[:-1] + (d_out,)).copy()
    for k in range(ksize):
        out += xp[..., k : k + T, :] @ weight.data[k]

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(weight.data)
        g2 = g.reshape(-1, d_out)
        for k in range(ksize):
            gxp[..., k : k + T, :] += g @ weight.data[k].T
            gw[k] = xp[..., k : k + T, :].reshape(-1, d_in).T @ g2
        return gxp[..., pad : pad + T, :], gw, g2.sum(axis=0)

    return _result(out, (x, weight, bias), bw, "conv1d")


def sample_coords(values: Tensor, coords, mode: str = "linear") -> Tensor:
    """Read rows of ``values`` at fractional positions.

    ``values`` is (..., T, d) and ``coords`` is (..., m) with matching leading
    dims; the result is (..., m, d).  ``nearest`` rounds half up and passes no
    gradient to the coordinates; ``linear`` interpolates between the two
    neighbouring rows and differentiates in both arguments.
    """
    coords = _as_tensor(coords, values.dtype)
    T = values.shape[-2]
    x = coords.data
    if values.shape[:-2] != x.shape[:-1]:
        raise NumericsError(f"sample_coords: values {values.shape} and coords {x.shape} have different batch dims")
    if x.size and (x.min() < 0 or x.max() > T - 1):
        raise NumericsError(f"sample_coords: coordinate outside [0, {T - 1}]")
    if mode == "nearest":
        lo = np.floor(x + 0.5).astype(np.intp)
        hi = lo
        w = np.zeros_like(x)
    elif mode == "linear":
        lo = np.minimum(np.floor(x).astype(np.intp), max(T - 2, 0))
        hi = np.minimum(lo + 1, T - 1)
        w = x - lo
    else:
        raise ValueError(f"sample_coords: unknown mode {mode!r}")

    # interpolation matrix (..., m, T); assigning hi first keeps T == 1 correct
    interp = np.zeros(x.shape + (T,), dtype=values.dtype)
    np.put_along_axis(interp, hi[..., None], w[..., None].astype(values.dtype), axis=-1)
    np.put_along_axis(interp, lo[..., None], (1 - w)[..., None].astype(values.dtype), axis=-1)
    out = interp @ values.data

    def bw(g):
        gv = np.swapaxes(interp, -1, -2) @ g
        if mode == "nearest" or not coords.requires_grad:
            return gv, None
        rows_hi = np.take_along_axis(values.data, hi[..., None], axis=-2)
        rows_lo = np.take_along_axis(values.data, lo[..., None], axis=-2)
        return gv, (g * (rows_hi - rows_lo)).sum(axis=-1)

    return _result(out, (values, coords), bw, "sample_coords")


# ---------------------------------------------------------------------------
# graph traversal


def backward(loss: Tensor, store: "ParamStore | None" = None) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf tensor that requires a gradient."""
    if loss._consumed:
        raise GradientError("backward called twice on the same graph; run the forward pass again")
    if loss.data.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward is None:
        raise GradientError("backward called before a recorded forward pass")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise GradientError(f"{node._op}: gradient shape {pg.shape} != input shape {parent.shape}")
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg

    for node in order:
        node._parents = ()
        node._backward = None
    loss._consumed = True
    if store is not None:
        store._grads_ready = True


# ---------------------------------------------------------------------------
# parameters


@dataclass
class Param:
    value: Tensor
    trainable: bool = True


class ParamStore:
    """Ordered name -> parameter map; each parameter owns its gradient accumulator."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Param] = {}
        self._grads_ready = False

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=self.dtype)
        t = Tensor(arr, requires_grad=trainable, name=name)
        self._params[name] = Param(t, trainable)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name].value

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def is_trainable(self, name: str) -> bool:
        return self._params[name].trainable

    def trainable_names(self) -> list[str]:
        return [n for n, p in self._params.items() if p.trainable]

    def grad(self, name: str) -> np.ndarray:
        t = self._params[name].value
        return np.zeros_like(t.data) if t.grad is None else t.grad

    @property
    def grads_ready(self) -> bool:
        return self._grads_ready

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.value.grad = None
        self._grads_ready = False

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: p.value.data for n, p in self._params.items()}

    def copy(self, dtype=None) -> "ParamStore":
        out = ParamStore(self.dtype if dtype is None else dtype)
        for n, p in self._params.items():
            out.add(n, p.value.data, p.trainable)
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for n, arr in arrays.items():
            t = self[n]
            if arr.shape != t.shape:
                raise NumericsError(f"parameter {n!r}: shape {arr.shape} does not match {t.shape}")
            t.data = np.array(arr, dtype=self.dtype)


# ---------------------------------------------------------------------------
# finite-difference check


@dataclass
class FDReport:
    max_rel_err: float
    offending_param: str | None
    tolerance: float
    per_param: dict[str, float] = field(default_factory=dict)
    n_checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def fd_check(
    loss_fn: Callable[[ParamStore], Tensor],
    store: ParamStore,
    epsilon: float = 1e-5,
    tolerance: float = 1e-6,
    n_coords: int = 20,
    seed: int = 0,
    names: Iterable[str] | None = None,
    oracle_dtype=None,
) -> FDReport:
    """Compare analytic gradients against central differences.

    ``loss_fn(store)`` must rebuild the loss deterministically (no dropout).
    Up to ``n_coords`` coordinates are drawn per tensor; smaller tensors are
    checked exhaustively.  The perturbed evaluations run on a copy of the
    store in ``oracle_dtype`` (default: the store's own dtype); extended
    precision lowers the difference quotient's roundoff floor, which
    otherwise dominates coordinates whose gradient is near 1e-6.
    """
    store.zero_grad()
    loss = loss_fn(store)
    backward(loss, store)
    names = list(store.trainable_names() if names is None else names)
    analytic = {n: store.grad(n).copy() for n in names}
    store.zero_grad()

    probe = store if oracle_dtype is None else store.copy(oracle_dtype)
    eps = probe.dtype.type(epsilon)
    rng = np.random.default_rng(seed)
    report = FDReport(0.0, None, tolerance)
    for name in names:
        flat = probe[name].data.reshape(-1)
        size = flat.size
        picks = np.arange(size) if size <= n_coords else rng.choice(size, n_coords, replace=False)
        worst = 0.0
        for i in picks:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                f_plus = loss_fn(probe).data.reshape(-1)[0]
                flat[i] = orig - eps
                f_minus = loss_fn(probe).data.reshape(-1)[0]
            flat[i] = orig
            num = float((f_plus - f_minus) / ((orig + eps) - (orig - eps)))
            ana = float(analytic[name].reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
            report.n_checked += 1
        report.per_param[name] = worst
        if worst > report.max_rel_err:
            report.max_rel_err = worst
            report.offending_param = name
    return report
