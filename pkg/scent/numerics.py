"""
Minimal reverse-mode differentiation over numpy arrays.

A ``Tape`` records every op applied to nodes that depend on a parameter or on
a designated input. ``Tape.backward`` replays the record in reverse creation
order (which is a topological order) and accumulates parameter gradients into
the ``ParamStore``.

Ops are looked up by name in ``OPS``; a graph can only use the vocabulary
registered there. Dropout and zoneout take their masks from the caller so a
training step is reproducible from its seed.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from .exceptions import NonFiniteError, NumericError, ShapeError, UnknownOpError


logger = logging.getLogger('scent.numerics')

ArrayLike = Union[np.ndarray, float, int]


class ParamStore:
    """
    Named parameter tensors with a gradient accumulator of identical shape.

    Iteration is always lexicographic by name so that serialization, gradient
    norms and optimizer updates are independent of insertion order.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._values: Dict[str, np.ndarray] = {}
        self._grads: Dict[str, np.ndarray] = {}

    def add(self, name: str, value: ArrayLike) -> np.ndarray:
        if name in self._values:
            raise ValueError(f"Parameter '{name}' already exists")
        array = np.array(value, dtype=self.dtype)
        if array.size == 0:
            raise ShapeError(f"Parameter '{name}' has an empty shape {array.shape}")
        self._values[name] = array
        self._grads[name] = np.zeros_like(array)
        return array

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> List[str]:
        return sorted(self._values)

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        for name in self.names():
            yield name, self._values[name]

    def set(self, name: str, value: ArrayLike) -> None:
        array = np.array(value, dtype=self.dtype)
        if array.shape != self._values[name].shape:
            raise ShapeError(
                f"Parameter '{name}' expects shape {self._values[name].shape}, got {array.shape}"
            )
        self._values[name] = array

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def gradients(self) -> Dict[str, np.ndarray]:
        return {name: self._grads[name] for name in self.names()}

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        if grad.shape != self._grads[name].shape:
            raise ShapeError(
                f"Gradient for '{name}' has shape {grad.shape}, expected {self._grads[name].shape}"
            )
        self._grads[name] += grad

    def zero_grad(self) -> None:
        for grad in self._grads.values():
            grad.fill(0.0)

    def global_norm(self) -> float:
        total = 0.0
        for name in self.names():
            grad = self._grads[name]
            total += float(np.sum(grad * grad))
        return float(np.sqrt(total))

    def num_values(self) -> int:
        return int(sum(value.size for value in self._values.values()))

    def copy(self, dtype=None) -> 'ParamStore':
        clone = ParamStore(self.dtype if dtype is None else dtype)
        for name, value in self.items():
            clone.add(name, value)
        return clone

    def astype(self, dtype) -> 'ParamStore':
        return self.copy(dtype)


class Node:
    """A value on the tape, with the gradient accumulated during backward."""

    __slots__ = ('tape', 'value', 'grad', 'parents', 'op', 'attrs', 'requires_grad', 'param_name')
    # numpy arrays on the left of an operator defer to the reflected Node method.
    __array_ufunc__ = None

    def __init__(self, tape, value, parents=(), op=None, attrs=None, requires_grad=False, param_name=None):
        self.tape = tape
        self.value = value
        self.grad = None
        self.parents = parents
        self.op = op
        self.attrs = attrs or {}
        self.requires_grad = requires_grad
        self.param_name = param_name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return self.tape.apply('add', self, other)

    def __radd__(self, other):
        return self.tape.apply('add', other, self)

    def __sub__(self, other):
        return self.tape.apply('sub', self, other)

    def __rsub__(self, other):
        return self.tape.apply('sub', other, self)

    def __mul__(self, other):
        return self.tape.apply('mul', self, other)

    def __rmul__(self, other):
        return self.tape.apply('mul', other, self)

    def __truediv__(self, other):
        return self.tape.apply('div', self, other)

    def __rtruediv__(self, other):
        return self.tape.apply('div', other, self)

    def __neg__(self):
        return self.tape.apply('neg', self)

    def __getitem__(self, index):
        return self.tape.apply('slice', self, index=index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return self.tape.apply('reshape', self, shape=tuple(shape))

    def __repr__(self):
        label = self.param_name or self.op or 'const'
        return f"Node({label}, shape={self.value.shape})"


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class BaseOp(ABC):
    name = ''

    @abstractmethod
    def forward(self, *values: np.ndarray, **attrs) -> np.ndarray:
        """Compute the op output from input values."""

    @abstractmethod
    def backward(self, grad: np.ndarray, out: np.ndarray, *values: np.ndarray, **attrs) -> Sequence[Optional[np.ndarray]]:
        """
        Map the output gradient to one gradient per input.

        Args:
            grad: gradient of the loss with respect to the op output
            out: the forward output
            values: the forward inputs, in order

        Returns:
            One array (or None) per input
        """


class AddOp(BaseOp):
    name = 'add'

    def forward(self, a, b):
        return a + b

    def backward(self, grad, out, a, b):
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)


class SubOp(BaseOp):
    name = 'sub'

    def forward(self, a, b):
        return a - b

    def backward(self, grad, out, a, b):
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)


class MulOp(BaseOp):
    name = 'mul'

    def forward(self, a, b):
        return a * b

    def backward(self, grad, out, a, b):
        return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


class DivOp(BaseOp):
    name = 'div'

    def forward(self, a, b):
        with np.errstate(divide='ignore', invalid='ignore'):
            return a / b

    def backward(self, grad, out, a, b):
        return _unbroadcast(grad / b, a.shape), _unbroadcast(-grad * out / b, b.shape)


class NegOp(BaseOp):
    name = 'neg'

    def forward(self, a):
        return -a

    def backward(self, grad, out, a):
        return (-grad,)


class ExpOp(BaseOp):
    name = 'exp'

    def forward(self, a):
        with np.errstate(over='ignore'):
            return np.exp(a)

    def backward(self, grad, out, a):
        return (grad * out,)


class LogOp(BaseOp):
    name = 'log'

    def forward(self, a):
        with np.errstate(divide='ignore', invalid='ignore'):
            return np.log(a)

    def backward(self, grad, out, a):
        return (grad / a,)


class SoftplusOp(BaseOp):
    name = 'softplus'

    def forward(self, a):
        return np.logaddexp(0.0, a)

    def backward(self, grad, out, a):
        return (grad * special.expit(a),)


class SigmoidOp(BaseOp):
    name = 'sigmoid'

    def forward(self, a):
        return special.expit(a)

    def backward(self, grad, out, a):
        return (grad * out * (1.0 - out),)


class TanhOp(BaseOp):
    name = 'tanh'

    def forward(self, a):
        return np.tanh(a)

    def backward(self, grad, out, a):
        return (grad * (1.0 - out * out),)


class ReluOp(BaseOp):
    name = 'relu'

    def forward(self, a):
        return np.maximum(a, 0.0)

    def backward(self, grad, out, a):
        return (grad * (a > 0.0),)


class PReluOp(BaseOp):
    name = 'prelu'

    def forward(self, a, slope):
        return np.where(a > 0.0, a, slope * a)

    def backward(self, grad, out, a, slope):
        positive = a > 0.0
        grad_a = grad * np.where(positive, 1.0, slope)
        grad_slope = _unbroadcast(np.where(positive, 0.0, grad * a), slope.shape)
        return grad_a, grad_slope


class SoftmaxOp(BaseOp):
    name = 'softmax'

    def forward(self, a, axis=-1):
        shifted = a - np.max(a, axis=axis, keepdims=True)
        exps = np.exp(shifted)
        return exps / np.sum(exps, axis=axis, keepdims=True)

    def backward(self, grad, out, a, axis=-1):
        inner = np.sum(grad * out, axis=axis, keepdims=True)
        return (out * (grad - inner),)


class LogSumExpOp(BaseOp):
    name = 'logsumexp'

    def forward(self, a, axis=-1, keepdims=False):
        return special.logsumexp(a, axis=axis, keepdims=keepdims)

    def backward(self, grad, out, a, axis=-1, keepdims=False):
        if not keepdims:
            grad = np.expand_dims(grad, axis)
            out = np.expand_dims(out, axis)
        return (grad * np.exp(a - out),)


class SumOp(BaseOp):
    name = 'sum'

    def forward(self, a, axis=None, keepdims=False):
        return np.asarray(np.sum(a, axis=axis, keepdims=keepdims))

    def backward(self, grad, out, a, axis=None, keepdims=False):
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, a.shape).copy(),)


class MeanOp(BaseOp):
    name = 'mean'

    def forward(self, a, axis=None, keepdims=False):
        return np.asarray(np.mean(a, axis=axis, keepdims=keepdims))

    def backward(self, grad, out, a, axis=None, keepdims=False):
        count = a.size // max(out.size, 1) if not keepdims else a.size // out.size
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, a.shape) / count,)


class MatmulOp(BaseOp):
    name = 'matmul'

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
        return np.matmul(a, b)

    def backward(self, grad, out, a, b):
        grad_a = np.matmul(grad, np.swapaxes(b, -1, -2))
        grad_b = np.matmul(np.swapaxes(a, -1, -2), grad)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)


class AffineOp(BaseOp):
    """``x @ W + b`` over the last axis of ``x``."""

    name = 'affine'

    def forward(self, x, weight, bias):
        if weight.ndim != 2 or x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
            raise ShapeError(
                f"affine shapes do not match: x {x.shape}, W {weight.shape}, b {bias.shape}"
            )
        return x @ weight + bias

    def backward(self, grad, out, x, weight, bias):
        flat_grad = grad.reshape(-1, weight.shape[1])
        flat_x = x.reshape(-1, weight.shape[0])
        return grad @ weight.T, flat_x.T @ flat_grad, flat_grad.sum(axis=0)


class Conv1dOp(BaseOp):
    """
    Same-length 1-D convolution along time with zero padding.

    ``x`` is (batch, time, in) or (time, in); ``weight`` is (kernel, in, out).
    For even kernels the extra padding frame goes to the right.
    """

    name = 'conv1d'

    @staticmethod
    def _as_batch(x):
        return x[None] if x.ndim == 2 else x

    def forward(self, x, weight, bias):
        batched = self._as_batch(x)
        if weight.ndim != 3 or batched.ndim != 3 or batched.shape[-1] != weight.shape[1] \
                or bias.shape != (weight.shape[2],):
            raise ShapeError(
                f"conv1d shapes do not match: x {x.shape}, W {weight.shape}, b {bias.shape}"
            )
        kernel = weight.shape[0]
        length = batched.shape[1]
        left = (kernel - 1) // 2
        padded = np.pad(batched, ((0, 0), (left, kernel - 1 - left), (0, 0)))
        out = np.zeros(batched.shape[:2] + (weight.shape[2],), dtype=np.result_type(x, weight))
        for tap in range(kernel):
            out += padded[:, tap:tap + length, :] @ weight[tap]
        out += bias
        return out if x.ndim == 3 else out[0]

    def backward(self, grad, out, x, weight, bias):
        batched = self._as_batch(x)
        grad = self._as_batch(grad)
        kernel = weight.shape[0]
        length = batched.shape[1]
        left = (kernel - 1) // 2
        padded = np.pad(batched, ((0, 0), (left, kernel - 1 - left), (0, 0)))
        grad_padded = np.zeros_like(padded)
        grad_weight = np.zeros_like(weight)
        for tap in range(kernel):
            window = padded[:, tap:tap + length, :]
            grad_weight[tap] = np.tensordot(window, grad, axes=([0, 1], [0, 1]))
            grad_padded[:, tap:tap + length, :] += grad @ weight[tap].T
        grad_x = grad_padded[:, left:left + length, :]
        if x.ndim == 2:
            grad_x = grad_x[0]
        return grad_x, grad_weight, grad.sum(axis=(0, 1))


class ConcatOp(BaseOp):
    name = 'concat'

    def forward(self, *values, axis=-1):
        return np.concatenate(values, axis=axis)

    def backward(self, grad, out, *values, axis=-1):
        bounds = np.cumsum([value.shape[axis] for value in values])[:-1]
        return np.split(grad, bounds, axis=axis)


class SliceOp(BaseOp):
    """Basic (view) indexing: integers, slices and Ellipsis."""

    name = 'slice'

    def forward(self, a, index=()):
        return np.array(a[index])

    def backward(self, grad, out, a, index=()):
        full = np.zeros_like(a)
        full[index] += grad
        return (full,)


class ReshapeOp(BaseOp):
    name = 'reshape'

    def forward(self, a, shape=()):
        return a.reshape(shape)

    def backward(self, grad, out, a, shape=()):
        return (grad.reshape(a.shape),)


class LayerNormOp(BaseOp):
    """Normalize the last axis to zero mean and unit variance, then scale and shift."""

    name = 'layer_norm'

    def forward(self, x, gain, bias, eps=1e-6):
        mean = x.mean(axis=-1, keepdims=True)
        centered = x - mean
        inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
        return centered * inv_std * gain + bias

    def backward(self, grad, out, x, gain, bias, eps=1e-6):
        mean = x.mean(axis=-1, keepdims=True)
        centered = x - mean
        inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
        normalized = centered * inv_std
        grad_norm = grad * gain
        grad_x = inv_std * (
            grad_norm
            - grad_norm.mean(axis=-1, keepdims=True)
            - normalized * (grad_norm * normalized).mean(axis=-1, keepdims=True)
        )
        return grad_x, _unbroadcast(grad * normalized, gain.shape), _unbroadcast(grad, bias.shape)


class DropoutOp(BaseOp):
    """Inverted dropout with a caller-supplied binary keep mask."""

    name = 'dropout'

    def forward(self, a, mask=None, keep_prob=1.0):
        return a * mask / keep_prob

    def backward(self, grad, out, a, mask=None, keep_prob=1.0):
        return (_unbroadcast(grad * mask / keep_prob, a.shape),)


class ZoneoutOp(BaseOp):
    """Where ``mask`` is 1 the previous state is kept, elsewhere the new one is taken."""

    name = 'zoneout'

    def forward(self, new, prev, mask=None):
        return mask * prev + (1.0 - mask) * new

    def backward(self, grad, out, new, prev, mask=None):
        return _unbroadcast(grad * (1.0 - mask), new.shape), _unbroadcast(grad * mask, prev.shape)


OPS: Dict[str, BaseOp] = {
    op.name: op for op in (
        AddOp(), SubOp(), MulOp(), DivOp(), NegOp(), ExpOp(), LogOp(), SoftplusOp(),
        SigmoidOp(), TanhOp(), ReluOp(), PReluOp(), SoftmaxOp(), LogSumExpOp(),
        SumOp(), MeanOp(), MatmulOp(), AffineOp(), Conv1dOp(), ConcatOp(), SliceOp(),
        ReshapeOp(), LayerNormOp(), DropoutOp(), ZoneoutOp(),
    )
}


class Tape:
    """
    Records ops for one graph evaluation.

    With ``record=False`` nothing is kept for backward, which is what
    inference and finite-difference checks use.
    """

    def __init__(self, params: Optional[ParamStore] = None, record: bool = True, dtype=None):
        self.params = params
        self.record = record
        if dtype is None:
            dtype = params.dtype if params is not None else np.float64
        self.dtype = np.dtype(dtype)
        self._nodes: List[Node] = []
        self._param_nodes: Dict[str, Node] = {}

    def param(self, name: str) -> Node:
        node = self._param_nodes.get(name)
        if node is None:
            if self.params is None or name not in self.params:
                raise KeyError(f"Unknown parameter '{name}'")
            node = Node(self, self.params[name], requires_grad=self.record, param_name=name)
            self._param_nodes[name] = node
        return node

    def constant(self, value: ArrayLike) -> Node:
        return Node(self, np.asarray(value, dtype=self.dtype))

    def input(self, value: ArrayLike) -> Node:
        """A designated input: its gradient is kept on ``node.grad`` after backward."""
        return Node(self, np.array(value, dtype=self.dtype), requires_grad=self.record)

    def lift(self, value: Union[Node, ArrayLike]) -> Node:
        if isinstance(value, Node):
            return value
        return self.constant(value)

    def apply(self, op_name: str, *inputs, **attrs) -> Node:
        op = OPS.get(op_name)
        if op is None:
            raise UnknownOpError(f"Unknown op '{op_name}'")
        parents = tuple(self.lift(value) for value in inputs)
        try:
            out = op.forward(*(parent.value for parent in parents), **attrs)
        except ValueError as exc:
            raise ShapeError(f"{op_name}: {exc}") from exc
        out = np.asarray(out)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"Non-finite output from op '{op_name}'")
        requires_grad = self.record and any(parent.requires_grad for parent in parents)
        node = Node(self, out, parents if requires_grad else (), op_name, attrs, requires_grad)
        if requires_grad:
            self._nodes.append(node)
        return node

    def backward(self, loss: Node) -> float:
        """Backpropagate from a scalar ``loss`` and accumulate into the store."""
        if loss.value.size != 1:
            raise ShapeError(f"Loss must be a scalar, got shape {loss.value.shape}")
        if not loss.requires_grad:
            return float(loss.value)
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self._nodes):
            if node.grad is None:
                continue
            values = [parent.value for parent in node.parents]
            grads = OPS[node.op].backward(node.grad, node.value, *values, **node.attrs)
            for parent, grad in zip(node.parents, grads):
                if grad is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(grad, dtype=self.dtype)
                else:
                    parent.grad = parent.grad + grad
        if self.params is not None:
            for name, node in self._param_nodes.items():
                if node.grad is not None:
                    self.params.accumulate(name, node.grad)
        return float(loss.value)

    # Op shorthands used by the model code.

    def exp(self, a):
        return self.apply('exp', a)

    def log(self, a):
        return self.apply('log', a)

    def softplus(self, a):
        return self.apply('softplus', a)

    def sigmoid(self, a):
        return self.apply('sigmoid', a)

    def tanh(self, a):
        return self.apply('tanh', a)

    def relu(self, a):
        return self.apply('relu', a)

    def prelu(self, a, slope):
        return self.apply('prelu', a, slope)

    def softmax(self, a, axis=-1):
        return self.apply('softmax', a, axis=axis)

    def logsumexp(self, a, axis=-1, keepdims=False):
        return self.apply('logsumexp', a, axis=axis, keepdims=keepdims)

    def sum(self, a, axis=None, keepdims=False):
        return self.apply('sum', a, axis=axis, keepdims=keepdims)

    def mean(self, a, axis=None, keepdims=False):
        return self.apply('mean', a, axis=axis, keepdims=keepdims)

    def matmul(self, a, b):
        return self.apply('matmul', a, b)

    def affine(self, x, weight, bias):
        return self.apply('affine', x, weight, bias)

    def conv1d(self, x, weight, bias):
        return self.apply('conv1d', x, weight, bias)

    def concat(self, values, axis=-1):
        return self.apply('concat', *values, axis=axis)

    def reshape(self, a, shape):
        return self.apply('reshape', a, shape=tuple(shape))

    def layer_norm(self, x, gain, bias, eps=1e-6):
        return self.apply('layer_norm', x, gain, bias, eps=eps)

    def dropout(self, a, mask, keep_prob):
        if mask is None:
            return self.lift(a)
        return self.apply('dropout', a, mask=np.asarray(mask, dtype=self.dtype), keep_prob=keep_prob)

    def zoneout(self, new, prev, mask):
        if mask is None:
            return self.lift(new)
        return self.apply('zoneout', new, prev, mask=np.asarray(mask, dtype=self.dtype))


GraphFn = Callable[..., Any]


def _loss_of(result: Any, loss_key: str) -> Node:
    if isinstance(result, Node):
        return result
    return result[loss_key]


def forward_backward(
    graph: GraphFn,
    inputs: Optional[Dict[str, ArrayLike]],
    params: ParamStore,
    loss_key: str = 'loss',
) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """
    Evaluate ``graph`` and backpropagate its scalar loss.

    Args:
        graph: callable ``graph(tape, **input_nodes)`` returning the loss node
            or a dict of nodes that contains ``loss_key``
        inputs: designated inputs; their gradients are returned
        params: parameter store; gradients are accumulated into it

    Returns:
        (output values by name, input gradients by name)
    """
    tape = Tape(params)
    input_nodes = {name: tape.input(value) for name, value in (inputs or {}).items()}
    result = graph(tape, **input_nodes)
    loss = _loss_of(result, loss_key)
    tape.backward(loss)
    if isinstance(result, Node):
        outputs = {loss_key: result.value}
    else:
        outputs = {name: node.value for name, node in result.items()}
    input_grads = {
        name: node.grad if node.grad is not None else np.zeros_like(node.value)
        for name, node in input_nodes.items()
    }
    return outputs, input_grads


def evaluate_loss(graph: GraphFn, inputs: Optional[Dict[str, ArrayLike]], params: ParamStore,
                  loss_key: str = 'loss') -> float:
    tape = Tape(params, record=False)
    input_nodes = {name: tape.constant(value) for name, value in (inputs or {}).items()}
    return float(_loss_of(graph(tape, **input_nodes), loss_key).value)


@dataclass
class GradientCheck:
    name: str
    max_rel_error: float
    max_abs_error: float
    entries_checked: int


@dataclass
class FiniteDifferenceReport:
    tolerance: float
    checks: Dict[str, GradientCheck] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max((check.max_rel_error for check in self.checks.values()), default=0.0)

    @property
    def max_abs_error(self) -> float:
        return max((check.max_abs_error for check in self.checks.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance and self.max_abs_error < self.tolerance

    def failures(self) -> List[str]:
        return [
            name for name, check in self.checks.items()
            if check.max_rel_error >= self.tolerance or check.max_abs_error >= self.tolerance
        ]


def finite_difference_check(
    graph: GraphFn,
    params: ParamStore,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    inputs: Optional[Dict[str, ArrayLike]] = None,
    check_inputs: bool = False,
    max_entries: Optional[int] = None,
    seed: int = 0,
    noise_floor: float = 1e-7,
    loss_key: str = 'loss',
) -> FiniteDifferenceReport:
    """
    Compare analytic gradients with central differences.

    The relative error of an entry is
    ``|analytic - central| / (|central| + 1e-12)``. Entries whose central
    difference is below ``noise_floor`` are rounding-dominated and are judged
    on absolute error instead.
    """
    if params.dtype != np.float64:
        raise NumericError("Finite-difference checks require a float64 ParamStore")
    if step <= 0:
        raise ValueError("step must be positive")

    inputs = {name: np.array(value, dtype=np.float64) for name, value in (inputs or {}).items()}
    params.zero_grad()
    _, input_grads = forward_backward(graph, inputs, params, loss_key)
    analytic = {name: grad.copy() for name, grad in params.gradients().items()}
    params.zero_grad()

    rng = np.random.default_rng(seed)
    report = FiniteDifferenceReport(tolerance=tolerance)

    def compare(target: np.ndarray, name: str, grad: np.ndarray) -> GradientCheck:
        flat = target.reshape(-1)
        flat_grad = grad.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        max_rel = 0.0
        max_abs = 0.0
        for index in indices:
            original = flat[index]
            flat[index] = original + step
            plus = evaluate_loss(graph, inputs, params, loss_key)
            flat[index] = original - step
            minus = evaluate_loss(graph, inputs, params, loss_key)
            flat[index] = original
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NonFiniteError(f"Non-finite loss while perturbing '{name}'[{index}]")
            central = (plus - minus) / (2.0 * step)
            diff = abs(flat_grad[index] - central)
            if abs(central) < noise_floor:
                max_abs = max(max_abs, diff)
            else:
                max_rel = max(max_rel, diff / (abs(central) + 1e-12))
        return GradientCheck(name, max_rel, max_abs, int(indices.size))

    for name in params.names():
        report.checks[name] = compare(params[name], name, analytic[name])
    if check_inputs:
        for name, value in inputs.items():
            key = f"input:{name}"
            report.checks[key] = compare(value, key, input_grads[name])

    logger.debug(
        "Finite-difference check finished",
        extra={
            'event_type': 'finite_difference_check',
            'max_rel_error': report.max_rel_error,
            'max_abs_error': report.max_abs_error,
            'parameters': len(report.checks),
        }
    )
    return report
