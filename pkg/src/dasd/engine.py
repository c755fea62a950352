"""Minimal reverse-mode autodiff over float64 numpy arrays.

Only the primitives needed by the adapter model are provided. Every primitive
checks its output for NaN/Inf. Operations record onto the innermost active
:class:`GradTape` when at least one input requires a gradient; outside a tape
nothing is recorded (evaluation mode).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LN_EPS = 1e-5


class EngineError(Exception):
    pass


class ShapeMismatch(EngineError, ValueError):
    pass


class NonFinite(EngineError, FloatingPointError):
    pass


class UnknownPrimitive(EngineError, LookupError):
    pass


class NotScalar(EngineError, ValueError):
    pass


class ZeroVector(EngineError, ValueError):
    pass


class FrozenWrite(EngineError, RuntimeError):
    pass


class DisconnectedGraphWarning(UserWarning):
    pass


class Tensor:
    """Immutable float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFinite(f"non-finite values in tensor {name or ''}".strip())
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar for model code
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __neg__(self):
        return negate(self)

    def __sub__(self, other):
        return add(self, negate(as_tensor(other)))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    ctx: dict
    attrs: dict


class GradTape:
    """Ordered record of primitive applications for one step."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self.nodes)


_TAPES: list[GradTape] = []


def active_tape() -> GradTape | None:
    return _TAPES[-1] if _TAPES else None


# --------------------------------------------------------------------------
# primitive registry

_PRIMITIVES: dict[str, tuple[Callable, Callable]] = {}


def _register(name):
    def deco(fwd):
        _PRIMITIVES[name] = (fwd, None)
        return fwd

    return deco


def _backward_for(name):
    def deco(bwd):
        fwd, _ = _PRIMITIVES[name]
        _PRIMITIVES[name] = (fwd, bwd)
        return bwd

    return deco


def primitive_names() -> list[str]:
    return sorted(_PRIMITIVES)


def forward_primitive(kind: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    try:
        fwd, _ = _PRIMITIVES[kind]
    except KeyError:
        raise UnknownPrimitive(kind) from None
    attrs = attrs or {}
    ins = tuple(as_tensor(x) for x in inputs)
    with np.errstate(all="ignore"):
        try:
            out, ctx = fwd(*(t.data for t in ins), **attrs)
        except ValueError as exc:
            if isinstance(exc, EngineError):
                raise
            raise ShapeMismatch(f"{kind}: {exc}") from None
    out = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NonFinite(f"{kind} produced NaN/Inf")
    tape = active_tape()
    rg = tape is not None and any(t.requires_grad for t in ins)
    result = Tensor._wrap(out, rg)
    if rg:
        tape.nodes.append(Node(kind, ins, result, ctx, attrs))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    out = np.broadcast_shapes(a.shape, b.shape)
    if out != a.shape and out != b.shape:
        raise ShapeMismatch(f"cannot combine shapes {a.shape} and {b.shape}")


@_register("matmul")
def _matmul(a, b):
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeMismatch("matmul needs at least 1-d operands")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim == 2:
        # one GEMM over the flattened leading dims
        out = a.reshape(-1, a.shape[-1]) @ b
        return out.reshape(a.shape[:-1] + (b.shape[1],)), {}
    return np.matmul(a, b), {}


@_backward_for("matmul")
def _matmul_bwd(g, ctx, a, b):
    if a.ndim >= 2 and b.ndim == 2:
        ga = (g.reshape(-1, g.shape[-1]) @ b.T).reshape(a.shape)
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    g2 = g
    if a.ndim == 1:
        g2 = np.expand_dims(g2, -2)
    if b.ndim == 1:
        g2 = np.expand_dims(g2, -1)
    ga = _unbroadcast(np.matmul(g2, np.swapaxes(b2, -1, -2)), a2.shape).reshape(a.shape)
    gb = _unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g2), b2.shape).reshape(b.shape)
    return ga, gb


@_register("add")
def _add(a, b):
    _check_broadcast(a, b)
    return a + b, {}


@_backward_for("add")
def _add_bwd(g, ctx, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


@_register("mul")
def _mul(a, b):
    _check_broadcast(a, b)
    return a * b, {}


@_backward_for("mul")
def _mul_bwd(g, ctx, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@_register("concat")
def _concat(*xs, axis=-1):
    return np.concatenate(xs, axis=axis), {}


@_backward_for("concat")
def _concat_bwd(g, ctx, *xs, axis=-1):
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, sizes, axis=axis))


@_register("relu")
def _relu(x):
    return np.maximum(x, 0.0), {}


@_backward_for("relu")
def _relu_bwd(g, ctx, x):
    return (g * (x > 0),)


@_register("sigmoid")
def _sigmoid(x):
    out = np.exp(-np.logaddexp(0.0, -x))
    return out, {"out": out}


@_backward_for("sigmoid")
def _sigmoid_bwd(g, ctx, x):
    s = ctx["out"]
    return (g * s * (1.0 - s),)


@_register("log")
def _log(x):
    return np.log(x), {}


@_backward_for("log")
def _log_bwd(g, ctx, x):
    return (g / x,)


@_register("exp")
def _exp(x):
    out = np.exp(x)
    return out, {"out": out}


@_backward_for("exp")
def _exp_bwd(g, ctx, x):
    return (g * ctx["out"],)


@_register("layer_norm")
def _layer_norm(x, gamma=None, beta=None, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        if gamma.shape != x.shape[-1:] or beta is None or beta.shape != x.shape[-1:]:
            raise ShapeMismatch("layer_norm affine parameters must match last dim")
        out = xhat * gamma + beta
    return out, {"xhat": xhat, "inv": inv}


@_backward_for("layer_norm")
def _layer_norm_bwd(g, ctx, x, gamma=None, beta=None, eps=LN_EPS):
    xhat, inv = ctx["xhat"], ctx["inv"]
    dxhat = g if gamma is None else g * gamma
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    if gamma is None:
        return (dx,)
    lead = tuple(range(x.ndim - 1))
    return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)


def _mask_for(x, mask):
    if mask is None:
        return None
    m = np.asarray(mask, dtype=bool)
    try:
        return np.broadcast_to(m, x.shape)
    except ValueError:
        raise ShapeMismatch(f"mask {m.shape} does not broadcast to {x.shape}") from None


@_register("softmax")
def _softmax(x, axis=-1, mask=None):
    m = _mask_for(x, mask)
    if m is None:
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
    else:
        if not m.any(axis=axis).all():
            raise ShapeMismatch("softmax row with every position masked")
        xm = np.where(m, x, -np.inf)
        shifted = xm - xm.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return out, {"out": out}


@_backward_for("softmax")
def _softmax_bwd(g, ctx, x, axis=-1, mask=None):
    s = ctx["out"]
    return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)


@_register("log_softmax")
def _log_softmax(x, axis=-1):
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    return out, {"out": out}


@_backward_for("log_softmax")
def _log_softmax_bwd(g, ctx, x, axis=-1):
    s = np.exp(ctx["out"])
    return (g - s * g.sum(axis=axis, keepdims=True),)


@_register("mean_pool_masked")
def _mean_pool(x, mask=None):
    """Mean over axis -2 of ``x`` restricted to positions where ``mask`` is set."""
    if mask is None:
        raise ShapeMismatch("mean_pool_masked requires a mask")
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.shape[:-1]:
        raise ShapeMismatch(f"mask {m.shape} vs input {x.shape}")
    count = m.sum(axis=-1, keepdims=True)
    if np.any(count == 0):
        raise ShapeMismatch("mean_pool_masked over an empty row")
    total = np.where(m[..., None], x, 0.0).sum(axis=-2)
    return total / count, {"count": count}


@_backward_for("mean_pool_masked")
def _mean_pool_bwd(g, ctx, x, mask=None):
    m = np.asarray(mask, dtype=bool)
    gx = (g / ctx["count"])[..., None, :] * m[..., None]
    return (np.broadcast_to(gx, x.shape).copy(),)


@_register("reshape")
def _reshape(x, shape=None):
    return x.reshape(shape), {}


@_backward_for("reshape")
def _reshape_bwd(g, ctx, x, shape=None):
    return (g.reshape(x.shape),)


@_register("transpose")
def _transpose(x, axes=None):
    if axes is None:
        if x.ndim < 2:
            raise ShapeMismatch("transpose needs ndim >= 2")
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return np.transpose(x, axes), {"axes": tuple(axes)}


@_backward_for("transpose")
def _transpose_bwd(g, ctx, x, axes=None):
    return (np.transpose(g, np.argsort(ctx["axes"])),)


@_register("scalar_mul")
def _scalar_mul(x, c=1.0):
    return x * c, {}


@_backward_for("scalar_mul")
def _scalar_mul_bwd(g, ctx, x, c=1.0):
    return (g * c,)


@_register("negate")
def _negate(x):
    return -x, {}


@_backward_for("negate")
def _negate_bwd(g, ctx, x):
    return (-g,)


def _pair_check(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")


@_register("l1_distance")
def _l1(a, b):
    _pair_check(a, b)
    return np.abs(a - b).sum(axis=-1), {}


@_backward_for("l1_distance")
def _l1_bwd(g, ctx, a, b):
    s = np.sign(a - b) * np.expand_dims(g, -1)  # sign(0) = 0 subgradient
    return s, -s


@_register("squared_l2")
def _sq_l2(a, b):
    _pair_check(a, b)
    d = a - b
    return (d * d).sum(axis=-1), {}


@_backward_for("squared_l2")
def _sq_l2_bwd(g, ctx, a, b):
    d = 2.0 * (a - b) * np.expand_dims(g, -1)
    return d, -d


@_register("row_select")
def _row_select(x, index=None):
    idx = np.asarray(index, dtype=np.int64)
    if x.ndim == 2:
        return x[idx], {}
    if x.ndim == 3 and idx.shape == (x.shape[0],):
        return x[np.arange(x.shape[0]), idx], {}
    raise ShapeMismatch(f"row_select on {x.shape} with index {idx.shape}")


@_backward_for("row_select")
def _row_select_bwd(g, ctx, x, index=None):
    idx = np.asarray(index, dtype=np.int64)
    gx = np.zeros_like(x)
    if x.ndim == 2:
        np.add.at(gx, idx, g)
    else:
        gx[np.arange(x.shape[0]), idx] += g
    return (gx,)


@_register("sum")
def _sum(x, axis=None):
    return np.asarray(x.sum(axis=axis)), {}


@_backward_for("sum")
def _sum_bwd(g, ctx, x, axis=None):
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


@_register("mean")
def _mean(x, axis=None):
    return np.asarray(x.mean(axis=axis)), {}


@_backward_for("mean")
def _mean_bwd(g, ctx, x, axis=None):
    n = x.size if axis is None else x.shape[axis]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / n, x.shape).copy(),)


@_register("l2_normalize")
def _l2_normalize(x):
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(norm == 0.0):
        raise ZeroVector("cannot normalise a zero vector")
    out = x / norm
    return out, {"out": out, "norm": norm}


@_backward_for("l2_normalize")
def _l2_normalize_bwd(g, ctx, x):
    y, norm = ctx["out"], ctx["norm"]
    return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)


@_register("clip")
def _clip(x, lo=-np.inf, hi=np.inf):
    return np.clip(x, lo, hi), {}


@_backward_for("clip")
def _clip_bwd(g, ctx, x, lo=-np.inf, hi=np.inf):
    return (g * ((x > lo) & (x < hi)),)


# --------------------------------------------------------------------------
# functional wrappers


def matmul(a, b):
    return forward_primitive("matmul", (a, b))


def add(a, b):
    return forward_primitive("add", (a, b))


def mul(a, b):
    return forward_primitive("mul", (a, b))


def concat(xs: Sequence, axis: int = -1):
    return forward_primitive("concat", tuple(xs), {"axis": axis})


def relu(x):
    return forward_primitive("relu", (x,))


def sigmoid(x):
    return forward_primitive("sigmoid", (x,))


def log(x):
    return forward_primitive("log", (x,))


def exp(x):
    return forward_primitive("exp", (x,))


def layer_norm(x, gamma=None, beta=None):
    ins = (x,) if gamma is None else (x, gamma, beta)
    return forward_primitive("layer_norm", ins)


def softmax(x, axis: int = -1, mask=None):
    return forward_primitive("softmax", (x,), {"axis": axis, "mask": mask})


def log_softmax(x, axis: int = -1):
    return forward_primitive("log_softmax", (x,), {"axis": axis})


def mean_pool_masked(x, mask):
    return forward_primitive("mean_pool_masked", (x,), {"mask": mask})


def reshape(x, shape):
    return forward_primitive("reshape", (x,), {"shape": tuple(shape)})


def transpose(x, axes=None):
    return forward_primitive("transpose", (x,), {"axes": axes})


def scalar_mul(x, c: float):
    return forward_primitive("scalar_mul", (x,), {"c": float(c)})


def negate(x):
    return forward_primitive("negate", (x,))


def l1_distance(a, b):
    return forward_primitive("l1_distance", (a, b))


def squared_l2(a, b):
    return forward_primitive("squared_l2", (a, b))


def row_select(x, index):
    return forward_primitive("row_select", (x,), {"index": np.asarray(index)})


def tsum(x, axis=None):
    return forward_primitive("sum", (x,), {"axis": axis})


def tmean(x, axis=None):
    return forward_primitive("mean", (x,), {"axis": axis})


def l2_normalize(x):
    return forward_primitive("l2_normalize", (x,))


def clip(x, lo: float, hi: float):
    return forward_primitive("clip", (x,), {"lo": lo, "hi": hi})


def linear(x, weight, bias=None):
    """``x @ weight.T (+ bias)`` with weight stored as (out, in)."""
    y = matmul(x, transpose(weight))
    return y if bias is None else add(y, bias)


# --------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor, tape: GradTape) -> dict[str, np.ndarray]:
    """Propagate d(loss)/d(.) through ``tape``.

    Sets ``.grad`` on every leaf tensor that requires a gradient and returns
    the gradients of named leaves keyed by name.
    """
    if loss.data.size != 1:
        raise NotScalar(f"loss has shape {loss.shape}")
    if not tape.nodes:
        raise EngineError("empty tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(n.output) for n in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        _, bwd = _PRIMITIVES[node.kind]
        in_grads = bwd(g, node.ctx, *(t.data for t in node.inputs), **node.attrs)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi
            if key not in produced:
                leaves[key] = t
    named: dict[str, np.ndarray] = {}
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        t.grad = g
        if t.name is not None:
            named[t.name] = named[t.name] + g if t.name in named else g
    if not leaves:
        warnings.warn("loss does not depend on any trainable tensor", DisconnectedGraphWarning)
    return named


# --------------------------------------------------------------------------
# parameters and optimisation


class ParamStore:
    """Named float64 parameters with a frozen/trainable flag per entry."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._frozen: dict[str, bool] = {}

    def add(self, name: str, data, frozen: bool = False) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter {name}")
        self._frozen[name] = bool(frozen)
        t = Tensor(data, requires_grad=not frozen, name=name)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._tensors if n.startswith(prefix)]

    def constant(self, name: str) -> Tensor:
        """The parameter's value with gradient flow cut."""
        return self._tensors[name].detach()

    def is_frozen(self, name: str) -> bool:
        return self._frozen[name]

    def set_data(self, name: str, data) -> None:
        frozen = self._frozen[name]
        self._tensors[name] = Tensor(data, requires_grad=not frozen, name=name)

    def bind(self, name: str, tensor: Tensor) -> None:
        """Install an existing Tensor object under ``name`` (gradient checks use this)."""
        if name not in self._tensors:
            raise KeyError(name)
        tensor.name = name
        self._tensors[name] = tensor

    def freeze(self, names: Iterable[str] | None = None) -> None:
        for n in list(self._tensors) if names is None else names:
            self._frozen[n] = True
            self._tensors[n] = Tensor._wrap(self._tensors[n].data, False)
            self._tensors[n].name = n

    def trainable(self) -> list[str]:
        return [n for n, f in self._frozen.items() if not f]

    def frozen(self) -> list[str]:
        return [n for n, f in self._frozen.items() if f]

    def numel(self, names: Iterable[str] | None = None) -> int:
        names = self._tensors if names is None else names
        return int(sum(self._tensors[n].data.size for n in names))

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n, t in self._tensors.items():
            out.add(n, t.data, frozen=self._frozen[n])
        return out

    def merge(self, other: "ParamStore") -> None:
        for n, t in other.items():
            self.add(n, t.data, frozen=other.is_frozen(n))

    def snapshot(self, names: Iterable[str] | None = None) -> dict[str, bytes]:
        names = self._tensors if names is None else names
        return {n: self._tensors[n].data.tobytes() for n in names}


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(params: ParamStore, grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam step, in place on ``params`` and ``state``."""
    for name in grads:
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name}")
        if params.is_frozen(name):
            raise FrozenWrite(name)
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        params.set_data(name, params[name].data - step)


def warmup_lr(step: int, total_steps: int, base_lr: float, warmup_frac: float = 0.1) -> float:
    """Linear warm-up from 0 to ``base_lr`` over the first ``warmup_frac`` of steps."""
    n_warm = int(round(total_steps * warmup_frac))
    if n_warm > 0 and step < n_warm:
        return base_lr * (step + 1) / n_warm
    return base_lr


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_skipped: int


def finite_difference_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng=None,
    kink_tol: float = 1e-3,
) -> GradCheckResult:
    """Compare analytic gradients of scalar ``fn(*inputs)`` with central differences.

    Error per coordinate is ``|analytic - fd| / max(1, |analytic|)``. Coordinates
    where the one-sided differences disagree by more than ``kink_tol`` sit on a
    non-differentiable point (relu at 0, L1 ties) and are skipped.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    leaves = [Tensor(t.data, requires_grad=True) for t in inputs]
    with GradTape() as tape:
        out = fn(*leaves)
    if out.data.size != 1:
        raise NotScalar(f"function output has shape {out.shape}")
    backward(out, tape)
    f0 = out.item()

    def evaluate(i, flat_idx, delta):
        arr = leaves[i].data.copy()
        arr.reshape(-1)[flat_idx] += delta
        args = [Tensor._wrap(t.data, False) for t in leaves]
        args[i] = Tensor._wrap(arr, False)
        return fn(*args).item()

    coords = [(i, j) for i, t in enumerate(leaves) for j in range(t.data.size)]
    if max_coords is not None and len(coords) > max_coords:
        pick = rng.permutation(len(coords))[:max_coords] if rng is not None else range(max_coords)
        coords = [coords[k] for k in sorted(pick)]
    worst, checked, skipped = 0.0, 0, 0
    for i, j in coords:
        g = leaves[i].grad
        analytic = 0.0 if g is None else float(g.reshape(-1)[j])
        fp = evaluate(i, j, eps)
        fm = evaluate(i, j, -eps)
        central = (fp - fm) / (2 * eps)
        if abs((fp - f0) - (f0 - fm)) / eps > kink_tol * max(1.0, abs(central)):
            skipped += 1
            continue
        checked += 1
        worst = max(worst, abs(analytic - central) / max(1.0, abs(analytic)))
    return GradCheckResult(worst, checked, skipped)
