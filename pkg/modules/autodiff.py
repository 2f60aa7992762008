"""Minimal reverse-mode differentiation on numpy arrays.

Each primitive computes its forward value and registers a backward rule that
maps the output gradient to operand gradients. ``ComputationTape`` orders the
graph topologically from a root, visits every node once and accumulates
gradients additively where a tensor fans out.
"""

from __future__ import annotations

import logging
import math
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from utils.error_handling import NonFiniteError, ShapeMismatchError

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    """Array value with an optional gradient and the rule that produced it."""

    def __init__(
        self,
        values: np.ndarray | float | Sequence[float],
        requires_grad: bool = False,
        *,
        name: str | None = None,
        dtype: np.dtype | type | None = None,
    ) -> None:
        array = np.asarray(values, dtype=dtype)
        if requires_grad and not np.issubdtype(array.dtype, np.floating):
            raise TypeError(f"only floating tensors can require grad, got {array.dtype}")
        self.values = array
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.nonfinite = not bool(np.isfinite(array).all()) if array.size else False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    @property
    def size(self) -> int:
        return int(self.values.size)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False)

    def astype(self, dtype: np.dtype | type) -> "Tensor":
        """Fresh leaf with converted values (used to switch precision)."""
        return Tensor(self.values.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def backward(self, grad: np.ndarray | None = None) -> None:
        ComputationTape.from_root(self).backward(self, grad)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __mul__(self, factor: float) -> "Tensor":
        return scale(self, factor)

    __rmul__ = __mul__

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{label})"


def _result(
    values: np.ndarray,
    parents: Sequence[Tensor],
    backward: BackwardFn,
    op: str,
) -> Tensor:
    out = Tensor(values)
    out.op = op
    out.nonfinite = out.nonfinite or any(p.nonfinite for p in parents)
    if out.nonfinite:
        logger.debug("non-finite values after %s", op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


class ComputationTape:
    """Topologically ordered record of the operations reachable from a root."""

    def __init__(self, nodes: List[Tensor]) -> None:
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputationTape":
        order: List[Tensor] = []
        seen: set[int] = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, root: Tensor, grad: np.ndarray | None = None) -> None:
        if not root.requires_grad:
            raise ValueError("root does not depend on any tensor that requires grad")
        if grad is None:
            if root.size != 1:
                raise ShapeMismatchError(
                    f"backward() without a seed needs a scalar root, got shape {root.shape}"
                )
            grad = np.ones_like(root.values)
        pending: Dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=root.dtype)}
        for node in reversed(self.nodes):
            upstream = pending.pop(id(node), None)
            if upstream is None:
                continue
            if node.is_leaf:
                node.grad = upstream.copy() if node.grad is None else node.grad + upstream
                continue
            for parent, parent_grad in zip(node._parents, node._backward(upstream)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + parent_grad
                else:
                    pending[key] = parent_grad


def _shape_error(op: str, *shapes: Tuple[int, ...]) -> ShapeMismatchError:
    return ShapeMismatchError(
        f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}",
        suggestion="Check d_model, heads and the batch layout",
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (k, n) or batched (..., m, k) @ (..., k, n) with equal batch dims."""

    if a.values.ndim < 2 or b.values.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", a.shape, b.shape)
    shared_b = b.values.ndim == 2
    if not shared_b and a.shape[:-2] != b.shape[:-2]:
        raise _shape_error("matmul", a.shape, b.shape)
    av, bv = a.values, b.values

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        if shared_b:
            k, n = bv.shape
            gb = av.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return ga, gb

    return _result(np.matmul(av, bv), (a, b), backward, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector over the last axis."""

    bias = b.values.ndim == 1 and a.values.ndim >= 1 and b.shape[0] == a.shape[-1]
    if a.shape != b.shape and not bias:
        raise _shape_error("add", a.shape, b.shape)
    if bias and a.shape != b.shape:

        def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
            return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    else:

        def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
            return g, g

    return _result(a.values + b.values, (a, b), backward, "add")


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * factor,)

    return _result(a.values * a.dtype.type(factor), (a,), backward, "scale")


def tensor_sum(a: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""

    shape = a.shape

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.values.sum()), (a,), backward, "sum")


def embedding_lookup(table: Tensor, indices: np.ndarray) -> Tensor:
    """Rows of ``table`` gathered by integer ``indices``: (V, D), (...) -> (..., D)."""

    indices = np.asarray(indices)
    if table.values.ndim != 2:
        raise _shape_error("embedding_lookup", table.shape)
    if not np.issubdtype(indices.dtype, np.integer):
        raise TypeError("embedding indices must be integers")
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ShapeMismatchError(
            f"embedding index out of range [0, {table.shape[0] - 1}]"
        )
    rows = table.shape[0]

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros((rows, g.shape[-1]), dtype=g.dtype)
        np.add.at(grad, indices.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (grad,)

    return _result(table.values[indices], (table,), backward, "embedding_lookup")


def layer_norm(
    x: Tensor,
    gamma: Tensor | None = None,
    beta: Tensor | None = None,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize over the last axis, then the optional affine gain and shift."""

    width = x.shape[-1]
    for param in (gamma, beta):
        if param is not None and param.shape != (width,):
            raise _shape_error("layer_norm", x.shape, param.shape)
    xv = x.values
    mean = xv.mean(axis=-1, keepdims=True)
    centered = xv - mean
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std
    out = normed
    if gamma is not None:
        out = out * gamma.values
    if beta is not None:
        out = out + beta.values
    out = out.astype(xv.dtype, copy=False)

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        g_normed = g * gamma.values if gamma is not None else g
        gx = inv_std * (
            g_normed
            - g_normed.mean(axis=-1, keepdims=True)
            - normed * (g_normed * normed).mean(axis=-1, keepdims=True)
        )
        grads: List[Optional[np.ndarray]] = [gx.astype(xv.dtype, copy=False)]
        flat = g.reshape(-1, width)
        if gamma is not None:
            grads.append((flat * normed.reshape(-1, width)).sum(axis=0))
        if beta is not None:
            grads.append(flat.sum(axis=0))
        return tuple(grads)

    parents = [x] + [p for p in (gamma, beta) if p is not None]
    return _result(out, parents, backward, "layer_norm")


def _softmax(values: np.ndarray) -> np.ndarray:
    shifted = values - values.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    probs = _softmax(x.values)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),)

    return _result(probs, (x,), backward, "softmax")


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """
    Multi-head scaled dot-product attention on projected (B, T, D) inputs.

    Heads split D into ``heads`` contiguous slices; each computes
    softmax(Q K^T / sqrt(D / heads)) V and the slices are concatenated back.
    """

    if q.values.ndim != 3 or q.shape != k.shape or q.shape != v.shape:
        raise _shape_error("attention", q.shape, k.shape, v.shape)
    batch, length, width = q.shape
    if heads < 1 or width % heads:
        raise _shape_error("attention", q.shape, (heads,))
    head_dim = width // heads
    inv_scale = 1.0 / math.sqrt(head_dim)

    def split(a: np.ndarray) -> np.ndarray:
        return a.reshape(batch, length, heads, head_dim).transpose(0, 2, 1, 3)

    def merge(a: np.ndarray) -> np.ndarray:
        return a.transpose(0, 2, 1, 3).reshape(batch, length, width)

    qh, kh, vh = split(q.values), split(k.values), split(v.values)
    probs = _softmax(np.matmul(qh, kh.transpose(0, 1, 3, 2)) * inv_scale)
    out = merge(np.matmul(probs, vh))

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        gh = split(g)
        gv = np.matmul(probs.transpose(0, 1, 3, 2), gh)
        gp = np.matmul(gh, vh.transpose(0, 1, 3, 2))
        gs = probs * (gp - (gp * probs).sum(axis=-1, keepdims=True)) * inv_scale
        gq = np.matmul(gs, kh)
        gk = np.matmul(gs.transpose(0, 1, 3, 2), qh)
        return merge(gq), merge(gk), merge(gv)

    return _result(out.astype(q.dtype, copy=False), (q, k, v), backward, "attention")


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""

    xv = x.values
    inner = _GELU_C * (xv + 0.044715 * xv**3)
    t = np.tanh(inner)
    out = 0.5 * xv * (1.0 + t)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * xv**2)
        local = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * d_inner
        return ((g * local).astype(xv.dtype, copy=False),)

    return _result(out.astype(xv.dtype, copy=False), (x,), backward, "gelu")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ W (+ b) with W stored as (in_features, out_features)."""

    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def mean_pool(x: Tensor) -> Tensor:
    """Average over the sequence axis: (B, T, D) -> (B, D)."""

    if x.values.ndim != 3:
        raise _shape_error("mean_pool", x.shape)
    length = x.shape[1]

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (np.repeat(g[:, None, :] / length, length, axis=1),)

    return _result(x.values.mean(axis=1), (x,), backward, "mean_pool")


def last_token(x: Tensor) -> Tensor:
    """Hidden state of the final position: (B, T, D) -> (B, D)."""

    if x.values.ndim != 3:
        raise _shape_error("last_token", x.shape)
    shape = x.shape

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros(shape, dtype=g.dtype)
        grad[:, -1, :] = g
        return (grad,)

    return _result(x.values[:, -1, :].copy(), (x,), backward, "last_token")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or no generator is given (eval)."""

    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * keep,)

    return _result(x.values * keep, (x,), backward, "dropout")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer class ``targets`` under (B, C) logits."""

    targets = np.asarray(targets)
    if logits.values.ndim != 2 or targets.shape != (logits.shape[0],):
        raise _shape_error("cross_entropy", logits.shape, targets.shape)
    classes = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= classes):
        raise ShapeMismatchError(f"target class outside [0, {classes - 1}]")
    lv = logits.values
    shifted = lv - lv.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(lv.shape[0])
    loss = -log_probs[rows, targets].mean()

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.exp(log_probs)
        grad[rows, targets] -= 1.0
        return ((grad * (g / lv.shape[0])).astype(lv.dtype, copy=False),)

    return _result(np.asarray(loss, dtype=lv.dtype), (logits,), backward, "cross_entropy")


def mse(pred: Tensor, target: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """
    Mean squared error over the supervised entries.

    ``mask`` (same shape, 0/1) selects which entries count; masked-out
    entries get exactly zero gradient.
    """

    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise _shape_error("mse", pred.shape, target.shape)
    weights = np.ones_like(target) if mask is None else np.asarray(mask, dtype=pred.dtype)
    if weights.shape != pred.shape:
        raise _shape_error("mse", pred.shape, weights.shape)
    count = max(float(weights.sum()), 1.0)
    diff = (pred.values - target) * weights
    loss = (diff * diff).sum() / count

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return ((2.0 * diff * (g / count)).astype(pred.dtype, copy=False),)

    return _result(np.asarray(loss, dtype=pred.dtype), (pred,), backward, "mse")


class GradCheckReport(BaseModel):
    max_rel_error: float
    tol: float
    passed: bool
    checked: int
    worst_parameter: Optional[str] = None


def grad_check(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Iterable[Tensor],
    tol: float = 1e-4,
    *,
    step: float = 1e-5,
    floor: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """
    Compare reverse-mode gradients of scalar ``fn`` with central differences.

    ``fn`` closes over ``params``; their values are perturbed in place. The
    step is ``step * max(1, |theta|)`` and the per-entry error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    """

    named = (
        dict(params)
        if isinstance(params, Mapping)
        else {f"param{i}": p for i, p in enumerate(params)}
    )
    for name, param in named.items():
        if param.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters; {name} is {param.dtype}")
        param.zero_grad()

    out = fn()
    if out.size != 1:
        raise ShapeMismatchError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()

    worst = 0.0
    worst_name: str | None = None
    checked = 0
    for name, param in named.items():
        analytic = param.grad if param.grad is not None else np.zeros_like(param.values)
        flat = param.values.reshape(-1)
        positions = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            chooser = rng or np.random.default_rng(0)
            positions = np.sort(chooser.choice(flat.size, size=max_entries, replace=False))
        for pos in positions:
            original = flat[pos]
            h = step * max(1.0, abs(original))
            flat[pos] = original + h
            plus = fn().item()
            flat[pos] = original - h
            minus = fn().item()
            flat[pos] = original
            numeric = (plus - minus) / (2.0 * h)
            exact = analytic.reshape(-1)[pos]
            if not (math.isfinite(numeric) and math.isfinite(exact)):
                error = math.inf
            else:
                error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            checked += 1
            if error > worst:
                worst, worst_name = error, name
    return GradCheckReport(
        max_rel_error=worst,
        tol=tol,
        passed=bool(worst <= tol),
        checked=checked,
        worst_parameter=worst_name,
    )


def assert_finite(tensor: Tensor, context: str) -> None:
    """Raise when the diagnostics flag says NaN/inf reached ``tensor``."""

    if tensor.nonfinite or not np.isfinite(tensor.values).all():
        raise NonFiniteError(
            f"non-finite values in {context}",
            suggestion="Lower the learning rate or switch to float64",
        )


__all__ = [
    "ComputationTape",
    "GradCheckReport",
    "Tensor",
    "add",
    "assert_finite",
    "attention",
    "cross_entropy",
    "dropout",
    "embedding_lookup",
    "gelu",
    "grad_check",
    "last_token",
    "layer_norm",
    "linear",
    "matmul",
    "mean_pool",
    "mse",
    "scale",
    "softmax",
    "tensor_sum",
]
