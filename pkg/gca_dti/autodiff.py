#!/usr/bin/env python3
"""
Reverse-mode differentiation engine
float64 numpy arrays; each op records its inputs and a backward rule,
backward() walks the recorded graph in reverse topological order.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from gca_dti.exceptions import ConfigError, DataError, DimensionError, NumericError, SequenceIndexError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence, float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

LAYER_NORM_EPS = 1e-5


class Tensor:
    """Dense float64 array taking part in a differentiable computation"""

    __slots__ = ('values', 'requires_grad', 'grad', 'parents', 'backward_fn', 'op')

    def __init__(self, values: ArrayLike, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise DimensionError(f'tensor shape {arr.shape} has an empty dimension')
        self.values = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.parents: Tuple['Tensor', ...] = ()
        self.backward_fn: Optional[BackwardFn] = None
        self.op = 'leaf'

    @classmethod
    def _result(cls, values: np.ndarray, parents: Sequence['Tensor'], backward_fn: BackwardFn, op: str) -> 'Tensor':
        out = cls.__new__(cls)
        out.values = np.asarray(values, dtype=np.float64)
        out.grad = None
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        # constants-only results need no graph record
        out.parents = tuple(parents) if out.requires_grad else ()
        out.backward_fn = backward_fn if out.requires_grad else None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise DimensionError(f'item() needs a single value, shape is {self.shape}')
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f'Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})'


def as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Graph:
    """Executed ops reachable from a root, inputs before the ops that use them"""
    nodes: List[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> 'Graph':
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    @property
    def ops(self) -> List[str]:
        return [node.op for node in self.nodes if node.backward_fn is not None]

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> Graph:
    """Accumulate d(loss)/d(t) into t.grad for every requires_grad tensor reachable from loss"""
    if grad is None:
        if loss.values.size != 1:
            raise DimensionError(f'backward() without a seed gradient needs a scalar, shape is {loss.shape}')
        grad = np.ones_like(loss.values)
    graph = Graph.trace(loss)
    pending: Dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=np.float64)}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg
    return graph


def zero_grad(params: Sequence[Tensor]):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- helpers

def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum grad down to shape, undoing numpy broadcasting"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f'{op}: shapes {a.shape} and {b.shape} do not broadcast')


def _require_2d(x: Tensor, op: str):
    if x.values.ndim != 2:
        raise DimensionError(f'{op}: expected a 2-d tensor, got shape {x.shape}')


def _check_finite(x: Tensor, op: str):
    if not np.all(np.isfinite(x.values)):
        raise NumericError(f'{op}: input contains NaN or infinite values')


def _row_mask(mask: Optional[np.ndarray], shape: Tuple[int, int], op: str) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    try:
        valid = np.broadcast_to(np.asarray(mask, dtype=bool), shape)
    except ValueError:
        raise DimensionError(f'{op}: mask shape {np.shape(mask)} does not fit {shape}')
    if not valid.any(axis=1).all():
        raise DataError(f'{op}: a row has no valid positions')
    return valid


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Union[Tensor, ArrayLike]) -> Tensor:
    b = as_tensor(b)
    _broadcast_shape(a, b, 'add')
    return Tensor._result(
        a.values + b.values, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), 'add',
    )


def sub(a: Tensor, b: Union[Tensor, ArrayLike]) -> Tensor:
    b = as_tensor(b)
    _broadcast_shape(a, b, 'sub')
    return Tensor._result(
        a.values - b.values, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), 'sub',
    )


def mul(a: Tensor, b: Union[Tensor, ArrayLike]) -> Tensor:
    b = as_tensor(b)
    _broadcast_shape(a, b, 'mul')
    av, bv = a.values, b.values
    return Tensor._result(
        av * bv, (a, b),
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)), 'mul',
    )


def scale(x: Tensor, factor: float) -> Tensor:
    return Tensor._result(x.values * factor, (x,), lambda g: (g * factor,), 'scale')


def relu(x: Tensor) -> Tensor:
    active = x.values > 0
    return Tensor._result(np.where(active, x.values, 0.0), (x,), lambda g: (g * active,), 'relu')


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.values)
    return Tensor._result(y, (x,), lambda g: (g * (1.0 - y * y),), 'tanh')


# ---------------------------------------------------------------- shape ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d(a, 'matmul')
    _require_2d(b, 'matmul')
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f'matmul: inner dimensions differ, {a.shape} x {b.shape}')
    av, bv = a.values, b.values
    return Tensor._result(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), 'matmul')


def transpose(x: Tensor) -> Tensor:
    _require_2d(x, 'transpose')
    return Tensor._result(x.values.T, (x,), lambda g: (g.T,), 'transpose')


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        y = x.values.reshape(shape)
    except ValueError:
        raise DimensionError(f'reshape: cannot view {x.shape} as {shape}')
    return Tensor._result(y, (x,), lambda g: (g.reshape(x.shape),), 'reshape')


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[0]:
        raise DimensionError(f'slice_rows: [{start}:{stop}] outside {x.shape[0]} rows')

    def _backward(g):
        gx = np.zeros_like(x.values)
        gx[start:stop] = g
        return (gx,)

    return Tensor._result(x.values[start:stop], (x,), _backward, 'slice_rows')


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    _require_2d(x, 'slice_cols')
    if not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f'slice_cols: [{start}:{stop}] outside {x.shape[1]} columns')

    def _backward(g):
        gx = np.zeros_like(x.values)
        gx[:, start:stop] = g
        return (gx,)

    return Tensor._result(x.values[:, start:stop], (x,), _backward, 'slice_cols')


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError('concat: nothing to concatenate')
    try:
        y = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f'concat: shapes {[t.shape for t in tensors]} differ off axis {axis}')
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor._result(y, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)), 'concat')


def sum_all(x: Tensor) -> Tensor:
    return Tensor._result(np.array([x.values.sum()]), (x,), lambda g: (np.full_like(x.values, g[0]),), 'sum_all')


# ---------------------------------------------------------------- normalizers

def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row-wise softmax; masked entries get exactly 0"""
    _require_2d(x, 'softmax_rows')
    _check_finite(x, 'softmax_rows')
    valid = _row_mask(mask, x.shape, 'softmax_rows')
    z = np.where(valid, x.values, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def _backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return Tensor._result(y, (x,), _backward, 'softmax_rows')


def sparsemax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row-wise Euclidean projection onto the probability simplex (sort-threshold)"""
    _require_2d(x, 'sparsemax_rows')
    _check_finite(x, 'sparsemax_rows')
    valid = _row_mask(mask, x.shape, 'sparsemax_rows')
    rows, n = x.shape
    row_max = np.where(valid, x.values, -np.inf).max(axis=1, keepdims=True)
    # anything at or below row_max - 1 can never enter the support
    z = np.where(valid, x.values, row_max - 2.0)
    z_sorted = -np.sort(-z, axis=1)
    cumulative = np.cumsum(z_sorted, axis=1) - 1.0
    k = np.arange(1, n + 1)
    support_size = (z_sorted - cumulative / k > 0).sum(axis=1)
    tau = cumulative[np.arange(rows), support_size - 1] / support_size
    y = np.maximum(z - tau[:, None], 0.0)
    y[~valid] = 0.0
    support = y > 0

    def _backward(g):
        # support fixed by the forward pass (right-limit Jacobian at boundaries)
        g_support = np.where(support, g, 0.0)
        v_hat = g_support.sum(axis=1, keepdims=True) / support.sum(axis=1, keepdims=True)
        return (np.where(support, g - v_hat, 0.0),)

    return Tensor._result(y, (x,), _backward, 'sparsemax_rows')


def normalize_rows(x: Tensor, kind: str, mask: Optional[np.ndarray] = None) -> Tensor:
    if kind == 'softmax':
        return softmax_rows(x, mask)
    if kind == 'sparsemax':
        return sparsemax_rows(x, mask)
    raise ConfigError(f'unknown normalizer: {kind}')


# ---------------------------------------------------------------- layers

def conv1d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Sequence-wise convolution, zero 'same' padding: [len x c_in] -> [len x c_out]"""
    _require_2d(x, 'conv1d')
    if kernels.values.ndim != 3:
        raise DimensionError(f'conv1d: kernels must be [w x c_in x c_out], got {kernels.shape}')
    width, c_in, c_out = kernels.shape
    if width % 2 == 0:
        raise ConfigError(f'conv1d: kernel width must be odd, got {width}')
    if x.shape[1] != c_in:
        raise DimensionError(f'conv1d: input has {x.shape[1]} channels, kernels expect {c_in}')
    if bias.shape != (c_out,):
        raise DimensionError(f'conv1d: bias shape {bias.shape} does not match {c_out} output channels')
    length = x.shape[0]
    pad = width // 2
    padded = np.pad(x.values, ((pad, pad), (0, 0)))
    # windows[i, c, t] = padded[i + t, c]  ->  cols[i, t * c_in + c]
    cols = sliding_window_view(padded, width, axis=0).transpose(0, 2, 1).reshape(length, width * c_in)
    flat_kernels = kernels.values.reshape(width * c_in, c_out)
    y = cols @ flat_kernels + bias.values

    def _backward(g):
        g_kernels = (cols.T @ g).reshape(width, c_in, c_out)
        g_cols = (g @ flat_kernels.T).reshape(length, width, c_in)
        g_padded = np.zeros_like(padded)
        for t in range(width):
            g_padded[t:t + length] += g_cols[:, t, :]
        return g_padded[pad:pad + length], g_kernels, g.sum(axis=0)

    return Tensor._result(y, (x, kernels, bias), _backward, 'conv1d')


def pool(x: Tensor, mode: str = 'max', valid_len: Optional[int] = None) -> Tensor:
    """Per-feature max or mean over the first valid_len rows"""
    _require_2d(x, 'pool')
    n = x.shape[0] if valid_len is None else valid_len
    if n < 1 or n > x.shape[0]:
        raise DimensionError(f'pool: need 1..{x.shape[0]} rows, got {n}')
    view = x.values[:n]
    features = np.arange(x.shape[1])
    if mode == 'max':
        winners = np.argmax(view, axis=0)

        def _backward(g):
            gx = np.zeros_like(x.values)
            gx[winners, features] = g
            return (gx,)

        return Tensor._result(view[winners, features], (x,), _backward, 'pool_max')
    if mode == 'mean':
        def _backward(g):
            gx = np.zeros_like(x.values)
            gx[:n] = g / n
            return (gx,)

        return Tensor._result(view.mean(axis=0), (x,), _backward, 'pool_mean')
    raise ConfigError(f'unknown pooling mode: {mode}')


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    _require_2d(x, 'layer_norm')
    f = x.shape[1]
    if f < 2:
        raise ConfigError(f'layer_norm: needs at least 2 features, got {f}')
    if gain.shape != (f,) or bias.shape != (f,):
        raise DimensionError(f'layer_norm: gain {gain.shape} / bias {bias.shape} do not match {f} features')
    mean = x.values.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.values.var(axis=1, keepdims=True) + eps)
    x_hat = (x.values - mean) * inv_std
    gv = gain.values

    def _backward(g):
        g_hat = g * gv
        gx = inv_std * (
            g_hat - g_hat.mean(axis=1, keepdims=True) - x_hat * (g_hat * x_hat).mean(axis=1, keepdims=True)
        )
        return gx, (g * x_hat).sum(axis=0), g.sum(axis=0)

    return Tensor._result(x_hat * gv + bias.values, (x, gain, bias), _backward, 'layer_norm')


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of table for each id; accepts a TokenSequence or an integer array"""
    _require_2d(table, 'embedding_lookup')
    idx = np.asarray(getattr(ids, 'ids', ids), dtype=np.int64)
    vocab = table.shape[0]
    if idx.ndim != 1 or idx.size == 0:
        raise DimensionError(f'embedding_lookup: ids must be a non-empty 1-d array, got shape {idx.shape}')
    if idx.min() < 0 or idx.max() >= vocab:
        raise SequenceIndexError(f'embedding_lookup: id {int(idx.max())} outside vocabulary of {vocab}')

    def _backward(g):
        g_table = np.zeros_like(table.values)
        np.add.at(g_table, idx, g)
        return (g_table,)

    return Tensor._result(table.values[idx], (table,), _backward, 'embedding_lookup')


def mse_loss(pred: Tensor, target: Union[Tensor, ArrayLike]) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f'mse_loss: prediction {pred.shape} and target {target.shape} differ')
    diff = pred.values - target.values
    n = diff.size

    def _backward(g):
        g_pred = 2.0 * diff / n * g[0]
        return g_pred, -g_pred

    return Tensor._result(np.array([np.mean(diff * diff)]), (pred, target), _backward, 'mse_loss')


# ---------------------------------------------------------------- optimizer

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    step: int = 0
    first_moment: Dict[int, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Sequence[Tensor],
    state: AdamState,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
):
    """One bias-corrected Adam update, in place; params without grad are skipped"""
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for i, p in enumerate(params):
        if p.grad is None:
            continue
        m = state.first_moment.get(i)
        v = state.second_moment.get(i)
        if m is None:
            m = np.zeros_like(p.values)
            v = np.zeros_like(p.values)
        m = beta1 * m + (1.0 - beta1) * p.grad
        v = beta2 * v + (1.0 - beta2) * p.grad * p.grad
        state.first_moment[i] = m
        state.second_moment[i] = v
        p.values -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    n_coords: int
    tol: float
    passed: bool


def finite_diff_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    name: str = 'f',
) -> GradCheckReport:
    """Central differences on every coordinate of every input vs backward().
    Error per coordinate is |a - n| / max(1, |a|, |n|): relative once either
    gradient exceeds 1 in magnitude, absolute below that."""
    for t in inputs:
        t.grad = None
    out = f(*inputs)
    if out.values.size != 1:
        raise DimensionError(f'finite_diff_check: {name} must be scalar-valued, got shape {out.shape}')
    backward(out)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.values) for t in inputs]

    worst = 0.0
    n_coords = 0
    for t, grad in zip(inputs, analytic):
        for idx in np.ndindex(t.values.shape):
            original = t.values[idx]
            t.values[idx] = original + h
            f_plus = f(*inputs).item()
            t.values[idx] = original - h
            f_minus = f(*inputs).item()
            t.values[idx] = original
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = grad[idx]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if not np.isfinite(err):
                err = np.inf
            worst = max(worst, err)
            n_coords += 1
    passed = worst < tol
    if not passed:
        logger.warning(f'gradient check {name}: max relative error {worst:.3e} >= {tol:.0e}')
    return GradCheckReport(name=name, max_rel_error=float(worst), n_coords=n_coords, tol=tol, passed=passed)


__all__ = [
    'Tensor', 'Graph', 'backward', 'zero_grad', 'as_tensor',
    'add', 'sub', 'mul', 'scale', 'relu', 'tanh',
    'matmul', 'transpose', 'reshape', 'slice_rows', 'slice_cols', 'concat', 'sum_all',
    'softmax_rows', 'sparsemax_rows', 'normalize_rows',
    'conv1d', 'pool', 'layer_norm', 'embedding_lookup', 'mse_loss',
    'AdamState', 'adam_step', 'GradCheckReport', 'finite_diff_check',
]
