"""Dense-tensor reverse-mode autodiff engine.

Define-by-run: every op records its parents and a gradient closure on the
output tensor, and backward() replays the closures in exact reverse order
of forward execution (a global creation counter gives the topological
order). float32 is the training dtype; every op preserves the input dtype,
so building the graph from float64 leaves gives the 64-bit mode the
finite-difference tests need.

Quantizers get three custom gradient rules: stop_gradient (zero upstream),
straight_through (forward b bit-exactly, backward identity to a), and the
surrogate rules registered by the quantizer modules via Tensor.from_op.
"""

import itertools
import math

import numpy as np

from . import _kernels as K


class DimensionError(ValueError):
    """Operand shapes are incompatible with the op."""


class ValidationError(ValueError):
    """An input value is outside its documented range."""


class NumericsError(ArithmeticError):
    """A NaN or Inf was produced; the step must be aborted."""


class StateError(RuntimeError):
    """Op called in an invalid state (missing grad, reused graph, ...)."""


_node_counter = itertools.count()


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values produced by op '{op}'")


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` (the adjoint of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn",
                 "_nid", "_op", "_backward_ran")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is not None:
            self.data = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._grad_fn = None
        self._op = "leaf"
        self._nid = next(_node_counter)
        self._backward_ran = False

    @classmethod
    def from_op(cls, data, parents, grad_fn, op):
        """Record an op node. grad_fn(grad_out) -> one grad per parent (or None)."""
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._op = op
        out._nid = next(_node_counter)
        out._backward_ran = False
        if out.requires_grad:
            out._parents = tuple(parents)
            out._grad_fn = grad_fn
        else:
            out._parents = ()
            out._grad_fn = None
        return out

    # ---- graph bookkeeping -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def backward(self):
        """Populate .grad on every requires_grad tensor reachable from self."""
        if self.data.size != 1:
            raise StateError("backward is only defined for scalar losses")
        if self._backward_ran:
            raise StateError("backward called twice on the same graph; rerun forward first")
        self._backward_ran = True

        nodes = []
        seen = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        # reverse order of forward execution
        nodes.sort(key=lambda n: n._nid, reverse=True)

        self.grad = np.ones_like(self.data)
        for node in nodes:
            if node._grad_fn is None or node.grad is None:
                continue
            grads = node._grad_fn(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                _check_finite(g, node._op + ".backward")
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g

    def zero_grad(self):
        self.grad = None

    # ---- arithmetic ops ----------------------------------------------------

    def _wrap(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._wrap(other)
        data = self.data + other.data

        def grad_fn(g):
            return (_unbroadcast(g, self.data.shape), _unbroadcast(g, other.data.shape))

        return Tensor.from_op(data, (self, other), grad_fn, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = self._wrap(other)
        data = self.data - other.data

        def grad_fn(g):
            return (_unbroadcast(g, self.data.shape), _unbroadcast(-g, other.data.shape))

        return Tensor.from_op(data, (self, other), grad_fn, "sub")

    def __rsub__(self, other):
        return self._wrap(other) - self

    def __mul__(self, other):
        other = self._wrap(other)
        data = self.data * other.data

        def grad_fn(g):
            return (_unbroadcast(g * other.data, self.data.shape),
                    _unbroadcast(g * self.data, other.data.shape))

        return Tensor.from_op(data, (self, other), grad_fn, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._wrap(other)
        data = self.data / other.data

        def grad_fn(g):
            return (_unbroadcast(g / other.data, self.data.shape),
                    _unbroadcast(-g * self.data / (other.data * other.data), other.data.shape))

        return Tensor.from_op(data, (self, other), grad_fn, "div")

    def __neg__(self):
        def grad_fn(g):
            return (-g,)

        return Tensor.from_op(-self.data, (self,), grad_fn, "neg")

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        data = self.data.reshape(shape)

        def grad_fn(g):
            return (g.reshape(old),)

        return Tensor.from_op(data, (self,), grad_fn, "reshape")

    def sum(self):
        data = np.asarray(self.data.sum())

        def grad_fn(g):
            return (np.broadcast_to(g, self.data.shape).astype(self.data.dtype, copy=False),)

        return Tensor.from_op(data, (self,), grad_fn, "sum")

    def mean(self):
        n = self.data.size
        data = np.asarray(self.data.mean())

        def grad_fn(g):
            return ((np.broadcast_to(g, self.data.shape) / n).astype(self.data.dtype, copy=False),)

        return Tensor.from_op(data, (self,), grad_fn, "mean")

    def item(self):
        return float(self.data)


# ---- functional ops ---------------------------------------------------------


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def grad_fn(g):
        return (g @ b.data.T, a.data.T @ g)

    return Tensor.from_op(data, (a, b), grad_fn, "matmul")


def relu(x):
    data = np.maximum(x.data, 0)

    def grad_fn(g):
        return (g * (x.data > 0),)

    return Tensor.from_op(data, (x,), grad_fn, "relu")


def conv2d(x, w, stride=1, pad=0):
    """Cross-correlation of NCHW input with [C_out, C_in, k, k] weights."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and weights")
    n, c_in, h, wd = x.data.shape
    c_out, c_in_w, kh, kw = w.data.shape
    if kh != kw:
        raise DimensionError("conv2d expects a square kernel")
    k = kh
    if c_in != c_in_w:
        raise DimensionError(f"conv2d channel mismatch: input {c_in}, weights {c_in_w}")
    if k > h + 2 * pad or k > wd + 2 * pad:
        raise DimensionError(f"kernel {k} exceeds padded input {h + 2 * pad}x{wd + 2 * pad}")
    if (h + 2 * pad - k) % stride or (wd + 2 * pad - k) % stride:
        raise DimensionError(
            f"non-integer output extent for input {h}x{wd}, kernel {k}, stride {stride}, pad {pad}")
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1

    if pad:
        x_pad = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        x_pad = np.ascontiguousarray(x.data)
    cols = K.im2col(x_pad, k, stride)                      # [N*OH*OW, C_in*k*k]
    w_mat = w.data.reshape(c_out, c_in * k * k)
    out = (cols @ w_mat.T).reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def grad_fn(g):
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, c_out)
        grad_w = (g_mat.T @ cols).reshape(c_out, c_in, k, k)
        grad_cols = np.ascontiguousarray(g_mat @ w_mat)
        grad_x_pad = K.col2im(grad_cols, n, c_in, h + 2 * pad, wd + 2 * pad, k, stride)
        grad_x = grad_x_pad[:, :, pad:pad + h, pad:pad + wd] if pad else grad_x_pad
        return (np.ascontiguousarray(grad_x), grad_w)

    return Tensor.from_op(out, (x, w), grad_fn, "conv2d")


def softmax_cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    if logits.data.ndim != 2:
        raise DimensionError("softmax_cross_entropy expects [N, C] logits")
    labels = np.asarray(labels)
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValidationError(f"label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    expz = np.exp(z)
    probs = expz / expz.sum(axis=1, keepdims=True)
    nll = -(z[np.arange(n), labels] - np.log(expz.sum(axis=1)))
    data = np.asarray(nll.mean(), dtype=logits.data.dtype)

    def grad_fn(g):
        grad = probs.copy()
        grad[np.arange(n), labels] -= 1
        return ((grad * (g / n)).astype(logits.data.dtype, copy=False),)

    return Tensor.from_op(data, (logits,), grad_fn, "softmax_cross_entropy")


def stop_gradient(x):
    """Forward identity, zero gradient to x."""
    return Tensor.from_op(x.data, (x,), lambda g: (None,), "stop_gradient")


def straight_through(a, b):
    """Forward takes b's value bit-exactly; backward is the identity onto a.

    This is the detach composition a + sg(b - a) without its float rounding,
    which is what the weight quantizer needs (forward must equal the snapped
    value exactly).
    """
    b_data = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=a.data.dtype)
    if b_data.shape != a.data.shape:
        raise DimensionError(f"straight_through shapes differ: {a.data.shape} vs {b_data.shape}")

    def grad_fn(g):
        return (g,)

    return Tensor.from_op(b_data.copy(), (a,), grad_fn, "straight_through")


# ---- optimizer --------------------------------------------------------------


class SGD:
    """Classical momentum SGD: v <- mu*v + (g + wd*p); p <- p - lr*v."""

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr=None):
        """One update using each param's .grad; grads are cleared afterwards."""
        lr = self.lr if lr is None else lr
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                raise StateError("sgd_step: parameter has no gradient; run backward first")
            g = p.grad
            if self.weight_decay:
                g = g + p.data.dtype.type(self.weight_decay) * p.data
            v *= p.data.dtype.type(self.momentum)
            v += g
            p.data -= p.data.dtype.type(lr) * v
        self.zero_grad()

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def cosine_lr(step, total_steps, lr0):
    """Cosine anneal from lr0 at step 0 to 0 at total_steps (clamped beyond)."""
    if step >= total_steps:
        return 0.0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
