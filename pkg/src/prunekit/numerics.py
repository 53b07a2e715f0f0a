"""Dense-tensor reverse-mode autodiff core.

Small by design: float64 numpy arrays, a taped backward pass, the handful of
ops a desk-scale transformer needs, an AdamW optimizer, and a finite-difference
gradient checker. Tensors are treated as immutable after construction except
inside an optimizer step; concurrent reads are safe, updates need external
exclusivity.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

Array = np.ndarray


class Rng:
    """Seeded random source (PCG64). Identical seed, identical draw sequence.

    `split(tag)` derives an independent child stream whose seed is a hash of
    (seed, tag), so subsystems can consume randomness without perturbing each
    other's sequences.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def split(self, tag: str) -> "Rng":
        digest = hashlib.blake2b(
            f"{self.seed}:{tag}".encode(), digest_size=8
        ).digest()
        return Rng(int.from_bytes(digest, "little"))

    def normal(self, shape: Sequence[int] | int, std: float = 1.0) -> Array:
        return self._gen.normal(0.0, std, size=shape)

    def uniform(self, shape: Sequence[int] | int) -> Array:
        return self._gen.uniform(size=shape)

    def integers(self, low: int, high: int, size: int | Sequence[int] | None = None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> Array:
        return self._gen.permutation(n)

    def choice(self, seq: Sequence, size: int, replace: bool = False) -> Array:
        return self._gen.choice(len(seq), size=size, replace=replace)


class Tensor:
    """A float64 array plus an optional gradient and a backward tape node."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # Operator sugar for the handful of places where it reads better.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: Array, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = parents
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: Array) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward():
        g = out.grad
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward():
        g = out.grad
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def matmul(a, b) -> Tensor:
    """Matrix product, batched over leading dims like numpy's matmul."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward():
        g = out.grad
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accumulate(a, _unbroadcast(ga, a.shape))
        _accumulate(b, _unbroadcast(gb, b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out_data = a.data ** exponent

    def backward():
        _accumulate(a, out.grad * exponent * a.data ** (exponent - 1))

    out = _make(out_data, (a,), backward)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward():
        _accumulate(a, out.grad * (a.data > 0))

    out = _make(out_data, (a,), backward)
    return out


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def backward():
        _accumulate(a, out.grad.reshape(a.shape))

    out = _make(out_data, (a,), backward)
    return out


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.data.ndim)))
    inverse = tuple(np.argsort(axes))
    out_data = a.data.transpose(axes)

    def backward():
        _accumulate(a, out.grad.transpose(inverse))

    out = _make(out_data, (a,), backward)
    return out


def take_rows(a, indices) -> Tensor:
    """Row lookup (embedding gather) along axis 0."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)

    def backward():
        g = np.zeros_like(a.data)
        np.add.at(g, idx, out.grad)
        _accumulate(a, g)

    out = _make(a.data[idx], (a,), backward)
    return out


def tsum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis)

    def backward():
        g = out.grad
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    out = _make(out_data, (a,), backward)
    return out


def tmean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax: non-finite input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=axis, keepdims=True)

    def backward():
        g = out.grad
        dot = (g * probs).sum(axis=axis, keepdims=True)
        _accumulate(a, probs * (g - dot))

    out = _make(probs, (a,), backward)
    return out


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("layer_norm: non-finite input")
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def backward():
        g = out.grad
        reduce_axes = tuple(range(g.ndim - 1))
        _accumulate(gain, (g * xhat).sum(axis=reduce_axes))
        _accumulate(bias, g.sum(axis=reduce_axes))
        dxhat = g * gain.data
        gx = inv / n * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        _accumulate(x, gx)

    out = _make(out_data, (x, gain, bias), backward)
    return out


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-d, got {logits.shape}")
    t, v = logits.shape
    if targets.shape != (t,):
        raise ShapeError(
            f"cross_entropy: {t} logit rows but targets shape {targets.shape}"
        )
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= v:
        raise ValueError("cross_entropy: target id outside vocabulary")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("cross_entropy: non-finite logits")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.data.max(axis=1)
    nll = lse - logits.data[np.arange(t), targets]
    out_data = np.asarray(nll.mean())

    def backward():
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        probs[np.arange(t), targets] -= 1.0
        _accumulate(logits, out.grad * probs / t)

    out = _make(out_data, (logits,), backward)
    return out


def dropout(x, p: float, rng: Rng) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    x = as_tensor(x)
    if p <= 0.0:
        return x
    keep = (rng.uniform(x.shape) >= p).astype(np.float64) / (1.0 - p)
    return mul(x, Tensor(keep))


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam over named parameters.

    Weight decay multiplies parameters by (1 - lr*wd) before the moment-based
    update, independent of the gradient moments. `step` counts completed
    updates and drives bias correction.
    """

    params: list[tuple[str, Tensor]]
    learning_rate: float = 3e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: list[Array] = field(default_factory=list)
    second_moment: list[Array] = field(default_factory=list)

    def __post_init__(self):
        self.params = list(self.params)
        if not self.first_moment:
            self.first_moment = [np.zeros_like(t.data) for _, t in self.params]
            self.second_moment = [np.zeros_like(t.data) for _, t in self.params]

    def update(self) -> None:
        adamw_step(self.params, [t.grad for _, t in self.params], self)


def adamw_step(
    params: list[tuple[str, Tensor]],
    grads: list[Array | None],
    state: AdamW,
) -> AdamW:
    """One AdamW update in place; returns the advanced state."""
    state.step += 1
    t = state.step
    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t
    for i, ((name, param), grad) in enumerate(zip(params, grads)):
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.data.shape:
            raise ShapeError(
                f"adamw_step: gradient shape {grad.shape} != parameter "
                f"shape {param.data.shape} for {name}"
            )
        if np.isnan(grad).any():
            raise NumericError(f"adamw_step: NaN gradient in parameter '{name}'")
        if state.weight_decay:
            param.data *= 1.0 - state.learning_rate * state.weight_decay
        m = state.first_moment[i]
        v = state.second_moment[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        param.data -= state.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + state.epsilon)
    return state


@dataclass
class GradCheckFailure:
    param: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    failures: list[GradCheckFailure]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: list[tuple[str, Tensor]],
    h: float = 1e-4,
    tol: float = 1e-3,
    max_checks_per_param: int | None = None,
    rng: Rng | None = None,
) -> GradCheckReport:
    """Central-difference check of analytic gradients.

    `loss_fn` must be deterministic and close over `params`. When
    `max_checks_per_param` is set, that many elements per tensor are sampled
    (seeded via `rng`) instead of sweeping every element.
    """
    if h <= 0:
        raise ValueError("grad_check: h must be positive")
    zero_grads(t for _, t in params)
    loss = loss_fn()
    loss.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in params}

    sampler = rng or Rng(0)
    per_param: dict[str, float] = {}
    failures: list[GradCheckFailure] = []
    for name, tensor in params:
        flat = tensor.data.reshape(-1)
        n = flat.size
        if max_checks_per_param is not None and n > max_checks_per_param:
            positions = sorted(sampler.choice(range(n), size=max_checks_per_param))
        else:
            positions = range(n)
        worst = 0.0
        for pos in positions:
            original = flat[pos]
            flat[pos] = original + h
            up = loss_fn().item()
            flat[pos] = original - h
            down = loss_fn().item()
            flat[pos] = original
            numeric = (up - down) / (2.0 * h)
            exact = analytic[name].reshape(-1)[pos]
            rel = abs(numeric - exact) / max(abs(numeric), abs(exact), 1e-6)
            if rel > worst:
                worst = rel
            if rel > tol:
                failures.append(GradCheckFailure(
                    param=name,
                    index=np.unravel_index(pos, tensor.shape),
                    analytic=float(exact),
                    numeric=float(numeric),
                    rel_error=float(rel),
                ))
        per_param[name] = worst
    max_rel = max(per_param.values(), default=0.0)
    return GradCheckReport(max_rel_error=max_rel, per_param=per_param,
                           failures=failures, tol=tol)
