"""Reverse-mode automatic differentiation on numpy arrays.

Operations are recorded on the active :class:`Tape` (define-by-run) and
:func:`backward` replays them in exact reverse recording order. When no tape
is active, operations simply compute values, which is what inference uses.

All values are float64. Backward rules are module-level ``_*_grad``
functions so they can be inspected (and, in tests, sabotaged).
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715

_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class ContractError(RuntimeError):
    """An operation was used outside its documented preconditions."""


class Tensor:
    """N-dimensional float64 array that can take part in differentiation.

    ``grad`` stays ``None`` until :func:`backward` reaches the tensor; after
    that it holds an array of the same shape which later passes add into.
    """

    __slots__ = ("values", "grad", "requires_grad", "name", "tape_id", "_node")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.ascontiguousarray(values, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.tape_id: int | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    # operator sugar
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations plus a parameter registry.

    Use as a context manager; operations executed inside the ``with`` block
    are appended in execution order, so inputs always precede their users.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: dict[str, Tensor] = {}

    def watch(self, params: dict[str, Tensor]) -> None:
        self.params.update(params)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        node = _Node(out, inputs, backward)
        out._node = node
        out.tape_id = len(self.nodes)
        self.nodes.append(node)

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=needs)
    if needs:
        tape.record(out, tuple(inputs), backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _make(a.values + b.values, (a, b), _add_grad)


def _add_grad(g, a, b, out):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _make(a.values - b.values, (a, b), _sub_grad)


def _sub_grad(g, a, b, out):
    return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)


def mul(a, b) -> Tensor:
    """Hadamard product (with numpy broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _make(a.values * b.values, (a, b), _mul_grad)


def _mul_grad(g, a, b, out):
    ga = _unbroadcast(g * b.values, a.shape) if a.requires_grad else None
    gb = _unbroadcast(g * a.values, b.shape) if b.requires_grad else None
    return ga, gb


hadamard = mul


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.values * c, (a,), lambda g, a, out: (g * c,))


def log(a: Tensor) -> Tensor:
    """Natural log; inputs must be positive."""
    if np.any(a.values <= 0):
        raise ContractError("log: input must be strictly positive")
    return _make(np.log(a.values), (a,), _log_grad)


def _log_grad(g, a, out):
    return (g / a.values,)


def xlogx(a: Tensor) -> Tensor:
    """Elementwise ``p * ln p`` with ``0 * ln 0 = 0``; inputs must be >= 0."""
    p = a.values
    if np.any(p < 0):
        raise ContractError("xlogx: input must be nonnegative")
    safe = np.where(p > 0, p, 1.0)
    return _make(np.where(p > 0, p * np.log(safe), 0.0), (a,), _xlogx_grad)


def _xlogx_grad(g, a, out):
    p = a.values
    # derivative diverges at 0; treat it as 0 there
    return (g * np.where(p > 0, np.log(np.where(p > 0, p, 1.0)) + 1.0, 0.0),)


def sigmoid(a: Tensor) -> Tensor:
    x = a.values
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), _sigmoid_grad)


def _sigmoid_grad(g, a, out):
    s = out.values
    return (g * s * (1.0 - s),)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.values
    th = np.tanh(_SQRT_2_OVER_PI * (x + _GELU_C * x * x * x))
    return _make(0.5 * x * (1.0 + th), (a,), lambda g, a, out: _gelu_grad(g, a, out, th))


def _gelu_grad(g, a, out, th=None):
    x = a.values
    x2 = x * x
    if th is None:
        th = np.tanh(_SQRT_2_OVER_PI * (x + _GELU_C * x2 * x))
    d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x2)
    return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner),)


def grl(a: Tensor, lam: float) -> Tensor:
    """Gradient reversal: identity forward, upstream gradient times ``-lam`` backward."""
    lam = float(lam)
    if lam < 0:
        raise ContractError(f"grl: lambda must be >= 0, got {lam}")
    neg = -lam
    return _make(a.values, (a,), lambda g, a, out: (g * neg,))


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    return _make(np.matmul(a.values, b.values), (a, b), _matmul_grad)


def _matmul_grad(g, a, b, out):
    ga = _unbroadcast(np.matmul(g, np.swapaxes(b.values, -1, -2)), a.shape) if a.requires_grad else None
    gb = None
    if b.requires_grad:
        if b.ndim == 2:
            gb = a.values.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.values, -1, -2), g), b.shape)
    return ga, gb


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape (..., in), ``w`` (in, out), ``b`` (out,)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    y = x.values @ w.values
    if b is None:
        return _make(y, (x, w), lambda g, x, w, out: _linear_grad(g, x, w, None, out)[:2])
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    return _make(y + b.values, (x, w, b), _linear_grad)


def _linear_grad(g, x, w, b, out):
    g2 = g.reshape(-1, g.shape[-1])
    gx = g @ w.values.T if x.requires_grad else None
    gw = x.values.reshape(-1, x.shape[-1]).T @ g2 if w.requires_grad else None
    gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
    return gx, gw, gb


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    return _make(a.values.reshape(shape), (a,), lambda g, a, out: (g.reshape(src),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.values, axes), (a,), lambda g, a, out: (np.transpose(g, inverse),))


def getitem(a: Tensor, index) -> Tensor:
    def grad(g, a, out):
        full = np.zeros(a.shape, dtype=DTYPE)
        if _needs_add_at(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(a.values[index], (a,), grad)


def _needs_add_at(index) -> bool:
    # fancy indexing can repeat positions; basic slicing cannot
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            i != ax and p != q for i, (p, q) in enumerate(zip(t.shape, ref))
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad(g, *args):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.values for t in tensors], axis=ax), tensors, grad)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def grad(g, a, out):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.sum(a.values, axis=axis, keepdims=keepdims), (a,), grad)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# normalisation and losses


def _softmax_values(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction for stability."""

    def grad(g, a, out):
        s = out.values
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(_softmax_values(a.values, axis), (a,), grad)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.values
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def grad(g, a, out):
        return (g - np.exp(out.values) * g.sum(axis=axis, keepdims=True),)

    return _make(shifted - lse, (a,), grad)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then apply gain and bias."""
    v = x.values
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def grad(g, x, gain, bias, out):
        gx = None
        if x.requires_grad:
            gh = g * gain.values
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        return gx, ggain, gbias

    return _make(xhat * gain.values + bias.values, (x, gain, bias), grad)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]`` (natural log)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if n == 0:
        raise ContractError("cross_entropy: empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError(f"cross_entropy: labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    x = logits.values
    shifted = x - x.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def grad(g, logits, out):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _make(np.asarray(loss), (logits,), grad)


BCE_CLAMP = 1e-7


def binary_cross_entropy(probs: Tensor, targets) -> Tensor:
    """Mean BCE of probabilities against 0/1 targets, probabilities clamped to [1e-7, 1-1e-7]."""
    y = np.broadcast_to(np.asarray(targets, dtype=DTYPE), probs.shape)
    if probs.size == 0:
        raise ContractError("binary_cross_entropy: empty batch")
    p = probs.values
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).mean()
    inside = (p > BCE_CLAMP) & (p < 1.0 - BCE_CLAMP)

    def grad(g, probs, out):
        d = (-(y / pc) + (1.0 - y) / (1.0 - pc)) / p.size
        return (np.where(inside, d * g, 0.0),)

    return _make(np.asarray(loss), (probs,), grad)


# ---------------------------------------------------------------------------
# entropy (plain numpy; used for validation-heavy scalar helpers)


def entropy(p, base: float = math.e, tol: float = 1e-9) -> float:
    """Shannon entropy ``-sum p log_base p`` of one probability vector (0 log 0 = 0)."""
    p = np.asarray(p, dtype=DTYPE)
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"entropy: expected a nonempty vector, got shape {p.shape}")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("entropy: probabilities must be finite and nonnegative")
    if abs(p.sum() - 1.0) > tol:
        raise ValueError(f"entropy: probabilities sum to {p.sum()!r}, not 1")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum() / math.log(base))


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that requires grad."""
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = tape or active_tape()
    if tape is None or loss._node is None or loss.tape_id is None or tape.nodes[loss.tape_id] is not loss._node:
        raise ContractError("backward: loss was not recorded on the active tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(tape.nodes[: loss.tape_id + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g, *node.inputs, node.out)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
    oracle: Callable[[str], Callable[[], float]] | None = None,
) -> "GradCheckReport":
    """Compare tape gradients with central finite differences.

    ``f`` builds the scalar loss (it is called once under a fresh tape and
    then repeatedly without one). ``oracle(name)``, if given, returns the
    scalar function finite-differenced for parameters called ``name``;
    by default that is ``f`` itself. ``samples`` coordinates are drawn
    uniformly across all parameters (all coordinates when ``None``).
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        tape.watch(params)
        loss = f()
        backward(loss, tape)

    coords = _sample_coords(params, samples, rng)
    worst = GradCheckReport(0.0, "", (), 0.0, 0.0, len(coords))
    for name, idx in coords:
        p = params[name]
        fd_fn = oracle(name) if oracle else (lambda: f().item())
        orig = p.values[idx]
        p.values[idx] = orig + h
        up = fd_fn()
        p.values[idx] = orig - h
        down = fd_fn()
        p.values[idx] = orig
        numeric = (up - down) / (2.0 * h)
        analytic = 0.0 if p.grad is None else float(p.grad[idx])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        if err >= worst.max_rel_error:
            worst = GradCheckReport(err, name, idx, analytic, numeric, len(coords))
    return worst


def _sample_coords(params: dict[str, Tensor], samples: int | None, rng) -> list[tuple[str, tuple]]:
    names = list(params)
    sizes = np.array([params[n].size for n in names])
    if samples is None or samples >= sizes.sum():
        return [(n, np.unravel_index(i, params[n].shape)) for n in names for i in range(params[n].size)]
    # one coordinate from every tensor first, so nothing is skipped
    picks = [(n, int(rng.integers(params[n].size))) for n in names]
    flat = rng.choice(sizes.sum(), size=max(samples - len(picks), 0), replace=False)
    bounds = np.cumsum(sizes)
    for k in flat:
        j = int(np.searchsorted(bounds, k, side="right"))
        picks.append((names[j], int(k - (bounds[j - 1] if j else 0))))
    return [(n, tuple(int(v) for v in np.unravel_index(i, params[n].shape))) for n, i in picks]


class GradCheckReport:
    """Worst coordinate found by :func:`grad_check`."""

    __slots__ = ("max_rel_error", "name", "index", "analytic", "numeric", "checked")

    def __init__(self, max_rel_error, name, index, analytic, numeric, checked):
        self.max_rel_error = max_rel_error
        self.name = name
        self.index = index
        self.analytic = analytic
        self.numeric = numeric
        self.checked = checked

    def __repr__(self) -> str:
        return (
            f"GradCheckReport(max_rel_error={self.max_rel_error:.3e}, worst={self.name}{list(self.index)}, "
            f"analytic={self.analytic:.6e}, numeric={self.numeric:.6e}, checked={self.checked})"
        )


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.values)) for p in params)
