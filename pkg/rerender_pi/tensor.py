"""Dense 4-d tensors that record a differentiation graph.

Every image and feature map in the package is a ``Tensor`` of shape
(batch, channels, height, width). Operations build a graph of parent links and
backward closures; ``backward`` walks that graph in reverse topological order
(networkx does the ordering) and accumulates gradients on the leaves.
"""

import contextlib

import networkx as nx
import numpy as np

_state = {'dtype': np.float32, 'grad_enabled': True}


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


@contextlib.contextmanager
def float64_mode():
    """Create new leaf tensors in 64-bit precision. Only meant for gradient
    checking; training and inference run in 32 bits."""
    previous = _state['dtype']
    _state['dtype'] = np.float64
    try:
        yield
    finally:
        _state['dtype'] = previous


@contextlib.contextmanager
def no_grad():
    """Disable graph recording, e.g. for inference and benchmarking."""
    previous = _state['grad_enabled']
    _state['grad_enabled'] = False
    try:
        yield
    finally:
        _state['grad_enabled'] = previous


def default_dtype():
    return _state['dtype']


def is_grad_enabled():
    return _state['grad_enabled']


def unbroadcast(grad, shape):
    """Sum ``grad`` over the axes along which an operand of ``shape`` was
    broadcast."""
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A (batch, channels, height, width) array in the differentiation graph.

    Parameters
    ----------
    data : array_like
        Values; must be 4-d.
    requires_grad : bool, optional
        Whether gradients should be accumulated on this tensor, by default False
    dtype : numpy dtype, optional
        Storage type. Defaults to float32 (float64 inside ``float64_mode``).
    """

    def __init__(self, data, requires_grad=False, dtype=None):
        array = np.asarray(data, dtype=dtype or default_dtype())
        if array.ndim != 4:
            raise ValueError('Tensor must be 4-d (batch, channels, height, width), got shape {}'.format(array.shape))
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = 'leaf'
        self._parents = ()
        self._backward = None

    @classmethod
    def from_op(cls, data, parents, backward, op):
        """Wraps the result of an operation and links it into the graph.

        Parameters
        ----------
        data : numpy.ndarray
            result values; cast to the dtype of the first parent.
        parents : tuple of Tensor
        backward : callable
            maps the output gradient to a tuple of parent gradients (None for
            parents that receive no gradient).
        op : str
            operation name, used in error messages.

        Raises
        ------
        NonFiniteError
            if any result entry is NaN or Inf.
        """
        dtype = parents[0].data.dtype
        out = Tensor(np.asarray(data, dtype=dtype), dtype=dtype)
        if not np.all(np.isfinite(out.data)):
            raise NonFiniteError('{} produced non-finite values'.format(op))
        out.op = op
        if is_grad_enabled() and any(parent.requires_grad for parent in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def item(self):
        if self.data.size != 1:
            raise ValueError('item() needs a single-element tensor, got shape {}'.format(self.shape))
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data.copy()

    def detach(self):
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return 'Tensor(shape={}, dtype={}, op={}, requires_grad={})'.format(self.shape, self.dtype, self.op,
                                                                            self.requires_grad)

    def _lift(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.full((1, 1, 1, 1), other), dtype=self.dtype)

    def __add__(self, other):
        other = self._lift(other)
        a_shape, b_shape = self.shape, other.shape

        def _backward(grad):
            return unbroadcast(grad, a_shape), unbroadcast(grad, b_shape)

        return Tensor.from_op(_broadcast_apply(np.add, self, other), (self, other), _backward, 'add')

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        a_shape, b_shape = self.shape, other.shape

        def _backward(grad):
            return unbroadcast(grad, a_shape), -unbroadcast(grad, b_shape)

        return Tensor.from_op(_broadcast_apply(np.subtract, self, other), (self, other), _backward, 'sub')

    def __rsub__(self, other):
        return self._lift(other) - self

    def __neg__(self):
        return Tensor.from_op(-self.data, (self, ), lambda grad: (-grad, ), 'neg')

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self, other

        def _backward(grad):
            return unbroadcast(grad * b.data, a.shape), unbroadcast(grad * a.data, b.shape)

        return Tensor.from_op(_broadcast_apply(np.multiply, a, b), (a, b), _backward, 'mul')

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        a, b = self, other

        def _backward(grad):
            return (unbroadcast(grad / b.data, a.shape), unbroadcast(-grad * a.data / (b.data * b.data), b.shape))

        return Tensor.from_op(_broadcast_apply(np.divide, a, b), (a, b), _backward, 'div')

    def square(self):
        x = self.data
        return Tensor.from_op(x * x, (self, ), lambda grad: (2 * grad * x, ), 'square')

    def abs(self):
        x = self.data
        return Tensor.from_op(np.abs(x), (self, ), lambda grad: (grad * np.sign(x), ), 'abs')

    __abs__ = abs

    def clamp(self, low, high):
        x = self.data
        inside = ((x >= low) & (x <= high)).astype(x.dtype)
        return Tensor.from_op(np.clip(x, low, high), (self, ), lambda grad: (grad * inside, ), 'clamp')

    def sum(self):
        """Sum of all entries as a 1x1x1x1 tensor."""
        shape = self.shape
        total = self.data.sum(dtype=self.dtype).reshape(1, 1, 1, 1)
        return Tensor.from_op(total, (self, ), lambda grad: (np.broadcast_to(grad, shape).copy(), ), 'sum')

    def mean(self):
        """Mean of all entries as a 1x1x1x1 tensor."""
        return self.sum() * (1.0 / self.data.size)

    def channels(self, start, stop):
        """Channel slice ``[start, stop)``."""
        shape = self.shape

        def _backward(grad):
            full = np.zeros(shape, dtype=grad.dtype)
            full[:, start:stop] = grad
            return (full, )

        return Tensor.from_op(self.data[:, start:stop], (self, ), _backward, 'channels')


class Parameter(Tensor):
    """A trainable leaf tensor with a stable dotted name, e.g.
    ``coarse.enc.0.conv.weight``."""

    def __init__(self, data, name=None, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return 'Parameter(name={}, shape={})'.format(self.name, self.shape)


def _broadcast_apply(fn, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError('Shapes {} and {} do not broadcast'.format(a.shape, b.shape))
    return fn(a.data, b.data)


def backward(loss):
    """Accumulates d(loss)/d(leaf) on every reachable leaf that requires a
    gradient. Calling it twice doubles the accumulated gradients.

    Parameters
    ----------
    loss : Tensor
        scalar tensor of shape 1x1x1x1

    Raises
    ------
    ValueError
        if the loss is not a scalar.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ValueError('backward needs a scalar loss of shape (1, 1, 1, 1), got {}'.format(loss.shape))
    if not loss.requires_grad:
        return

    graph = nx.DiGraph()
    graph.add_node(loss)
    stack = [loss]
    while stack:
        node = stack.pop()
        for parent in node._parents:
            if not parent.requires_grad:
                continue
            if parent not in graph:
                stack.append(parent)
            graph.add_edge(parent, node)

    grads = {loss: np.ones_like(loss.data)}
    for node in reversed(list(nx.topological_sort(graph))):
        grad = grads.pop(node, None)
        if grad is None:
            continue
        if node._backward is None:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            parent_grad = np.asarray(parent_grad, dtype=parent.dtype)
            grads[parent] = grads[parent] + parent_grad if parent in grads else parent_grad
