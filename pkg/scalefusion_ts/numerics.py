"""
Holds the dense float64 matrix core with a reverse-mode tape, the differentiable ops every
learnable block is built from, and a finite-difference gradient checker

Matrices follow the model's layout: rows are channels, columns are patches.
"""
import itertools
import logging
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from scalefusion_ts.errors import NumericError, ShapeError

LOGGER = logging.getLogger('scalefusion_ts')

NORM_EPS = 1e-5
GRAD_CHECK_STEP = 1e-5
GRAD_CHECK_EPS = 1e-8

_NODE_IDS = itertools.count(1)
_LOCAL = threading.local()

Operand = Union['Tensor', float, int]


def _as_matrix(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)

    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)

    elif arr.ndim != 2:
        raise ShapeError(f'a matrix must be at most 2-D but received {arr.ndim}-D data')

    return arr


class Tensor:
    """
    This class is an immutable float64 matrix that can take part in a tape

    :type data: array-like
    :param data: Scalar, vector (made a column) or 2-D values, always copied
    :type tracked: Boolean
    :param tracked: Whether gradients flow into this value Default: False

    :rtype: None
    :returns: NA init

    :raises ShapeError: if data has more than 2 dimensions

    """

    __slots__ = ('data', 'node_id', 'tracked')

    def __init__(self, data, tracked: bool = False) -> None:
        self._set(_as_matrix(data))
        self.node_id = next(_NODE_IDS)
        self.tracked = tracked

    def _set(self, arr: np.ndarray) -> None:
        arr.flags.writeable = False
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray, tracked: bool) -> 'Tensor':
        obj = cls.__new__(cls)
        obj._set(np.ascontiguousarray(arr, dtype=np.float64))
        obj.node_id = next(_NODE_IDS)
        obj.tracked = tracked
        return obj

    def __repr__(self):  # pragma: no cover
        return f'<Tensor {self.rows}x{self.cols}>'

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        """
        Method to read a 1x1 matrix as a float

        :rtype: Float
        :returns: The single entry

        :raises ShapeError: if the matrix is not 1x1

        """
        if self.data.shape != (1, 1):
            raise ShapeError(f'item() needs a 1x1 matrix but the shape is {self.data.shape}')

        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        """
        Method to get a writable copy of the values

        :rtype: numpy.ndarray
        :returns: A copy of the data

        """
        return self.data.copy()

    def __matmul__(self, other: 'Tensor') -> 'Tensor':
        return matmul(self, other)

    def __add__(self, other: Operand) -> 'Tensor':
        return add(self, other)

    def __radd__(self, other: Operand) -> 'Tensor':
        return add(other, self)

    def __sub__(self, other: Operand) -> 'Tensor':
        return sub(self, other)

    def __rsub__(self, other: Operand) -> 'Tensor':
        return sub(other, self)

    def __mul__(self, other: Operand) -> 'Tensor':
        return mul(self, other)

    def __rmul__(self, other: Operand) -> 'Tensor':
        return mul(other, self)

    def __neg__(self) -> 'Tensor':
        return scale(self, -1.0)

    @property
    def T(self) -> 'Tensor':  # pylint: disable=invalid-name
        return transpose(self)


Matrix = Tensor


class Parameter(Tensor):
    """
    This class is a named learnable matrix, the optimizer swaps its value with assign

    :type name: String
    :param name: Unique dotted name, used as the key for gradients and checkpoints
    :type data: array-like
    :param data: Initial values

    :rtype: None
    :returns: NA init

    :raises TypeError: if name is not a string

    """

    __slots__ = ('name',)

    def __init__(self, name: str, data) -> None:
        if not isinstance(name, str):
            raise TypeError(f'param name must be of type string but received {type(name)}')

        super().__init__(data, tracked=True)
        self.name = name

    def __repr__(self):  # pragma: no cover
        return f'<Parameter {self.name} {self.rows}x{self.cols}>'

    def assign(self, values: np.ndarray) -> None:
        """
        Method to replace the value, the shape must not change

        :type values: numpy.ndarray
        :param values: The new values

        :rtype: None
        :returns: None

        :raises ShapeError: if the shape differs
        :raises NumericError: if any value is not finite

        """
        arr = np.array(values, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ShapeError(f'cannot assign {arr.shape} to parameter {self.name} of shape {self.data.shape}')

        if not np.all(np.isfinite(arr)):
            raise NumericError(f'non-finite value assigned to parameter {self.name}')

        self._set(arr)


@dataclass
class TapeNode:
    """
    One recorded op: its kind, inputs, output and the closure mapping the output gradient to
    input gradients
    """
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

    @property
    def input_ids(self) -> Tuple[int, ...]:
        return tuple(tensor.node_id for tensor in self.inputs)


class Gradients(dict):
    """
    This class maps parameter names to gradient arrays
    """

    def merge(self, other: 'Gradients') -> 'Gradients':
        """
        Method to add another set of gradients, names missing on one side count as zero

        :type other: Gradients
        :param other: Gradients from another tape

        :rtype: Gradients
        :returns: A new Gradients holding the sum

        """
        merged = Gradients((name, grad.copy()) for name, grad in self.items())
        for name, grad in other.items():
            if name in merged:
                merged[name] = merged[name] + grad

            else:
                merged[name] = grad.copy()

        return merged

    def scaled(self, factor: float) -> 'Gradients':
        """
        Method to multiply every gradient by a constant

        :type factor: Float
        :param factor: The multiplier

        :rtype: Gradients
        :returns: A new Gradients

        """
        return Gradients((name, grad * factor) for name, grad in self.items())

    def nonzero_names(self) -> List[str]:
        """
        Method to list the parameters that received a nonzero gradient

        :rtype: List
        :returns: Sorted names

        """
        return sorted(name for name, grad in self.items() if np.any(grad != 0.0))


def _tape_stack() -> List[Optional['Tape']]:
    stack = getattr(_LOCAL, 'stack', None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack

    return stack


def current_tape() -> Optional['Tape']:
    """
    Function to get the tape recording on this thread

    :rtype: Tape
    :returns: The innermost active tape or None

    """
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_tape() -> Iterator[None]:
    """
    Context manager that suspends recording on this thread
    """
    stack = _tape_stack()
    stack.append(None)
    try:
        yield

    finally:
        stack.pop()


class Tape:
    """
    This class records ops in execution order, which is already a topological order, and
    replays them backwards

    Use it as a context manager; a tape belongs to the thread that entered it.

    :rtype: None
    :returns: NA init

    """

    def __init__(self) -> None:
        self.nodes: List[TapeNode] = []
        self._parameters: Dict[int, Parameter] = {}

    def __str__(self):  # pragma: no cover
        return f'<Tape {len(self.nodes)} nodes>'

    def __enter__(self) -> 'Tape':
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc_info) -> None:
        _tape_stack().pop()

    def record(self, node: TapeNode) -> None:
        """
        Method to append an op

        :type node: TapeNode
        :param node: The op

        :rtype: None
        :returns: None

        """
        for tensor in node.inputs:
            if isinstance(tensor, Parameter):
                self._parameters[tensor.node_id] = tensor

        self.nodes.append(node)

    def gradients(self, loss: Tensor) -> Gradients:
        """
        Method to run reverse mode from a scalar loss

        :type loss: Tensor
        :param loss: A 1x1 output recorded on this tape

        :rtype: Gradients
        :returns: Gradients of every parameter the loss depends on

        :raises ShapeError: if loss is not 1x1 or an accumulator changes shape

        """
        if loss.shape != (1, 1):
            raise ShapeError(f'gradients need a 1x1 loss but the shape is {loss.shape}')

        accumulators: Dict[int, np.ndarray] = {loss.node_id: np.ones((1, 1))}
        for node in reversed(self.nodes):
            grad_out = accumulators.pop(node.output.node_id, None)
            if grad_out is None:
                continue

            for tensor, grad in zip(node.inputs, node.backward(grad_out)):
                if grad is None or not tensor.tracked:
                    continue

                if grad.shape != tensor.shape:
                    raise ShapeError(f'{node.op} produced a {grad.shape} gradient for a {tensor.shape} input')

                previous = accumulators.get(tensor.node_id)
                accumulators[tensor.node_id] = grad if previous is None else previous + grad

        result = Gradients()
        for node_id, parameter in self._parameters.items():
            if node_id in accumulators:
                result[parameter.name] = accumulators[node_id]

        return result


def _lift(value: Operand) -> Tensor:
    if isinstance(value, Tensor):
        return value

    if isinstance(value, (int, float, np.floating, np.integer)) and not isinstance(value, bool):
        return Tensor(float(value))

    raise TypeError(f'operand must be a Tensor or a number but received {type(value)}')


def _emit(op: str, inputs: Tuple[Tensor, ...], out: np.ndarray,
          backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericError(f'{op} produced a non-finite value')

    result = Tensor._wrap(out, tracked=any(tensor.tracked for tensor in inputs))  # pylint: disable=protected-access
    tape = current_tape()
    if tape is not None and result.tracked:
        tape.record(TapeNode(op, inputs, result, backward))

    return result


def _broadcast_shape(op: str, left: Tuple[int, int], right: Tuple[int, int]) -> Tuple[int, int]:
    shape = []
    for lhs, rhs in zip(left, right):
        if lhs != rhs and 1 not in (lhs, rhs):
            raise ShapeError(f'{op} cannot broadcast {left} with {right}')

        shape.append(max(lhs, rhs))

    return shape[0], shape[1]


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad

    axes = tuple(axis for axis in (0, 1) if shape[axis] == 1 and grad.shape[axis] != 1)
    return grad.sum(axis=axes, keepdims=True)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Function for the matrix product a @ b

    :type a: Tensor
    :param a: Left operand (m x k)
    :type b: Tensor
    :param b: Right operand (k x n)

    :rtype: Tensor
    :returns: The (m x n) product

    :raises ShapeError: if a.cols != b.rows

    """
    if a.cols != b.rows:
        raise ShapeError(f'matmul needs a.cols == b.rows but received {a.shape} and {b.shape}')

    a_data, b_data = a.data, b.data
    return _emit('matmul', (a, b), a_data @ b_data,
                 lambda g: (g @ b_data.T if a.tracked else None, a_data.T @ g if b.tracked else None))


def add(a: Operand, b: Operand) -> Tensor:
    """
    Function for elementwise addition, a size-1 axis broadcasts
    """
    a, b = _lift(a), _lift(b)
    _broadcast_shape('add', a.shape, b.shape)
    a_shape, b_shape = a.shape, b.shape
    return _emit('add', (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)))


def sub(a: Operand, b: Operand) -> Tensor:
    """
    Function for elementwise subtraction, a size-1 axis broadcasts
    """
    a, b = _lift(a), _lift(b)
    _broadcast_shape('sub', a.shape, b.shape)
    a_shape, b_shape = a.shape, b.shape
    return _emit('sub', (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)))


def mul(a: Operand, b: Operand) -> Tensor:
    """
    Function for the elementwise product, a size-1 axis broadcasts
    """
    a, b = _lift(a), _lift(b)
    _broadcast_shape('mul', a.shape, b.shape)
    a_data, b_data = a.data, b.data
    return _emit('mul', (a, b), a_data * b_data,
                 lambda g: (_unbroadcast(g * b_data, a_data.shape), _unbroadcast(g * a_data, b_data.shape)))


def scale(a: Tensor, factor: float) -> Tensor:
    """
    Function to multiply by a constant
    """
    factor = float(factor)
    return _emit('scale', (a,), a.data * factor, lambda g: (g * factor,))


def transpose(a: Tensor) -> Tensor:
    """
    Function for the transpose
    """
    return _emit('transpose', (a,), a.data.T, lambda g: (g.T,))


def absolute(a: Tensor) -> Tensor:
    """
    Function for the elementwise absolute value, the subgradient at 0 is 0
    """
    a_data = a.data
    return _emit('absolute', (a,), np.abs(a_data), lambda g: (g * np.sign(a_data),))


def sum_all(a: Tensor) -> Tensor:
    """
    Function to sum every entry into a 1x1 matrix
    """
    shape = a.shape
    return _emit('sum_all', (a,), np.array([[a.data.sum()]]), lambda g: (np.full(shape, g[0, 0]),))


def mean_all(a: Tensor) -> Tensor:
    """
    Function to average every entry into a 1x1 matrix
    """
    shape, count = a.shape, a.data.size
    return _emit('mean_all', (a,), np.array([[a.data.mean()]]), lambda g: (np.full(shape, g[0, 0] / count),))


def sum_squares(a: Tensor) -> Tensor:
    """
    Function for the squared Frobenius norm as a 1x1 matrix
    """
    a_data = a.data
    return _emit('sum_squares', (a,), np.array([[np.sum(a_data * a_data)]]), lambda g: (2.0 * g[0, 0] * a_data,))


def gelu(a: Tensor) -> Tensor:
    """
    Function for the exact GELU, x * Phi(x)
    """
    a_data = a.data
    cdf = special.ndtr(a_data)
    pdf = np.exp(-0.5 * a_data * a_data) / math.sqrt(2.0 * math.pi)
    return _emit('gelu', (a,), a_data * cdf, lambda g: (g * (cdf + a_data * pdf),))


def row_slice(a: Tensor, start: int, stop: int) -> Tensor:
    """
    Function to take rows [start, stop)

    :raises ShapeError: if the range is empty or out of bounds

    """
    if not 0 <= start < stop <= a.rows:
        raise ShapeError(f'row range [{start}, {stop}) is outside a matrix with {a.rows} rows')

    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[start:stop, :] = g
        return (full,)

    return _emit('row_slice', (a,), a.data[start:stop, :], backward)


def column_slice(a: Tensor, start: int, stop: int) -> Tensor:
    """
    Function to take columns [start, stop)

    :raises ShapeError: if the range is empty or out of bounds

    """
    if not 0 <= start < stop <= a.cols:
        raise ShapeError(f'column range [{start}, {stop}) is outside a matrix with {a.cols} columns')

    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _emit('column_slice', (a,), a.data[:, start:stop], backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """
    Function to stack matrices with equal column counts on top of each other

    :raises ShapeError: if the parts are empty or the column counts differ

    """
    parts = tuple(parts)
    if not parts:
        raise ShapeError('concat_rows needs at least one matrix')

    if len({part.cols for part in parts}) != 1:
        raise ShapeError(f'concat_rows needs equal column counts but received {[p.shape for p in parts]}')

    bounds = np.cumsum([0] + [part.rows for part in parts])
    return _emit('concat_rows', parts, np.vstack([part.data for part in parts]),
                 lambda g: tuple(g[bounds[i]:bounds[i + 1], :] for i in range(len(parts))))


def pad_columns(a: Tensor, count: int) -> Tensor:
    """
    Function to append count zero columns at the end
    """
    if count < 0:
        raise ShapeError(f'cannot pad a negative number of columns ({count})')

    cols = a.cols
    out = np.hstack([a.data, np.zeros((a.rows, count))])
    return _emit('pad_columns', (a,), out, lambda g: (g[:, :cols],))


def fold_columns(a: Tensor, group: int) -> Tensor:
    """
    Function to merge each run of `group` consecutive columns into one column by stacking them

    A (d x P) input becomes (group*d x P/group); column j is [col j*group; ...; col j*group+group-1].

    :raises ShapeError: if the column count is not a multiple of group

    """
    if group < 1 or a.cols % group:
        raise ShapeError(f'cannot fold {a.cols} columns into groups of {group}')

    rows, cols = a.shape
    out = a.data.T.reshape(cols // group, group * rows).T
    return _emit('fold_columns', (a,), out, lambda g: (g.T.reshape(cols, rows).T,))


def softmax_columns(m: Tensor, temperature: float = 1.0, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Function for a column-wise softmax of scores multiplied by temperature

    :type m: Tensor
    :param m: Scores, one column per query and one row per key
    :type temperature: Float
    :param temperature: Positive multiplier on the scores, 1/sqrt(d) gives scaled dot-product attention
    :type mask: numpy.ndarray
    :param mask: Optional boolean per row, True rows get exactly zero weight

    :rtype: Tensor
    :returns: Columns that sum to 1

    :raises ValueError: if temperature is not positive or every row is masked
    :raises ShapeError: if the mask length is not the row count

    """
    if not temperature > 0:
        raise ValueError(f'param temperature must be positive but received {temperature}')

    scores = m.data * temperature
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (m.rows,):
            raise ShapeError(f'mask of length {mask.size} does not match {m.rows} rows')

        if mask.all():
            raise ValueError('softmax_columns needs at least one unmasked row')

        scores = np.where(mask[:, None], -np.inf, scores)

    shifted = scores - scores.max(axis=0, keepdims=True)
    weights = np.exp(shifted)
    probs = weights / weights.sum(axis=0, keepdims=True)

    def backward(g):
        return (temperature * probs * (g - np.sum(g * probs, axis=0, keepdims=True)),)

    return _emit('softmax_columns', (m,), probs, backward)


def _normalize(op: str, a: Tensor, axis: int) -> Tensor:
    x = a.data
    centered = x - x.mean(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(np.mean(centered * centered, axis=axis, keepdims=True) + NORM_EPS)
    normed = centered * inv_std

    def backward(g):
        grad = g - g.mean(axis=axis, keepdims=True) - normed * np.mean(g * normed, axis=axis, keepdims=True)
        return (inv_std * grad,)

    return _emit(op, (a,), normed, backward)


def layer_norm(m: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """
    Function to normalize each column (patch vector) over its channels, then apply gain and bias

    :type m: Tensor
    :param m: Features (d x P)
    :type gain: Tensor
    :param gain: Per-channel gain (d x 1)
    :type bias: Tensor
    :param bias: Per-channel bias (d x 1)

    :rtype: Tensor
    :returns: The normalized features (d x P)

    :raises ShapeError: if gain or bias do not have d entries

    """
    if gain.shape != (m.rows, 1) or bias.shape != (m.rows, 1):
        raise ShapeError(f'layer_norm gain/bias must be ({m.rows}, 1) but received {gain.shape} and {bias.shape}')

    return add(mul(_normalize('layer_norm', m, axis=0), gain), bias)


def instance_norm(m: Tensor) -> Tensor:
    """
    Function to normalize each channel (row) across the patch axis, a single patch maps to zeros

    :type m: Tensor
    :param m: Features (d x P), P >= 1

    :rtype: Tensor
    :returns: The normalized features

    """
    if m.cols < 1:
        raise ShapeError('instance_norm needs at least one patch')

    return _normalize('instance_norm', m, axis=1)


def softmax_cross_entropy(logits: Tensor, label: int) -> Tensor:
    """
    Function for the cross entropy of softmax(logits) against one class

    :type logits: Tensor
    :param logits: Class scores (C x 1)
    :type label: Integer
    :param label: The true class

    :rtype: Tensor
    :returns: 1x1 loss

    :raises ValueError: if label is not a valid class index

    """
    if logits.cols != 1:
        raise ShapeError(f'logits must be a single column but the shape is {logits.shape}')

    if not 0 <= int(label) < logits.rows:
        raise ValueError(f'label {label} is outside [0, {logits.rows})')

    shifted = logits.data - logits.data.max()
    log_probs = shifted - np.log(np.exp(shifted).sum())
    probs = np.exp(log_probs)
    label = int(label)

    def backward(g):
        grad = probs.copy()
        grad[label, 0] -= 1.0
        return (g[0, 0] * grad,)

    return _emit('softmax_cross_entropy', (logits,), np.array([[-log_probs[label, 0]]]), backward)


@dataclass
class GradCheckReport:
    """
    Result of comparing tape gradients with central finite differences
    """
    max_relative_error: float
    worst_parameter: Optional[str]
    per_parameter: Dict[str, float] = field(default_factory=dict)
    checked_entries: int = 0

    def passed(self, tolerance: float) -> bool:
        return self.max_relative_error < tolerance


def _evaluate(f: Callable[[], Tensor]) -> float:
    with no_tape():
        value = f()

    value = _lift(value).item()
    if not math.isfinite(value):
        raise NumericError(f'function evaluated to a non-finite value {value}')

    return value


def grad_check(f: Callable[[], Tensor], params: Iterable[Parameter], h: float = GRAD_CHECK_STEP,
               eps: float = GRAD_CHECK_EPS, samples_per_param: Optional[int] = None,
               seed: int = 0) -> GradCheckReport:
    """
    Function to compare tape gradients of a scalar function with central differences

    The relative error of one entry is |g_ad - g_fd| / max(|g_ad|, |g_fd|, eps).

    :type f: Callable
    :param f: Zero-argument function returning a 1x1 Tensor built from params
    :type params: Iterable
    :param params: The parameters to check, their values are restored afterwards
    :type h: Float
    :param h: Finite-difference step Default: 1e-5
    :type eps: Float
    :param eps: Floor of the relative-error denominator Default: 1e-8
    :type samples_per_param: Integer
    :param samples_per_param: Check this many seeded random entries per parameter, None checks all
    :type seed: Integer
    :param seed: Seed for the entry sampling Default: 0

    :rtype: GradCheckReport
    :returns: The worst error overall and per parameter

    :raises NumericError: if f is not finite at the point or a perturbed point

    """
    params = list(params)
    with Tape() as tape:
        out = _lift(f())

    if not math.isfinite(out.item()):
        raise NumericError(f'function evaluated to a non-finite value {out.item()}')

    grads = tape.gradients(out)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_relative_error=0.0, worst_parameter=None)
    for param in params:
        analytic = grads.get(param.name, np.zeros(param.shape)).ravel()
        base = param.numpy()
        entries = np.arange(base.size)
        if samples_per_param is not None and samples_per_param < base.size:
            entries = np.sort(rng.choice(base.size, size=samples_per_param, replace=False))

        worst = 0.0
        try:
            for index in entries:
                bumped = base.copy()
                bumped.flat[index] += h
                param.assign(bumped)
                upper = _evaluate(f)
                bumped.flat[index] = base.flat[index] - h
                param.assign(bumped)
                lower = _evaluate(f)
                numeric = (upper - lower) / (2.0 * h)
                error = abs(analytic[index] - numeric) / max(abs(analytic[index]), abs(numeric), eps)
                worst = max(worst, error)

        finally:
            param.assign(base)

        report.per_parameter[param.name] = worst
        report.checked_entries += len(entries)
        if worst >= report.max_relative_error:
            report.max_relative_error = worst
            report.worst_parameter = param.name

    LOGGER.debug('grad_check max relative error %.3e at %s over %d entries',
                 report.max_relative_error, report.worst_parameter, report.checked_entries)
    return report
