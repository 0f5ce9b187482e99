"""Reverse-mode automatic differentiation over float64 numpy arrays.

The op set is deliberately small: exactly what the forecasting model's
forward and backward passes need.  Ops record closure-style nodes while a
graph is being built; `backward` discovers the graph from the loss by
topological sort and pushes gradients back through each node exactly once,
accumulating additively where a tensor feeds several consumers.

Calling `backward` twice on the same graph is allowed and yields identical
gradients: every pass starts from a fresh accumulation map and overwrites
`.grad` on the tensors it reaches.

A model instance and its graphs are single-writer: forward, backward, and
parameter updates must be serialized.  Detached tensors are plain values
and safe to share across threads.
"""

from contextlib import contextmanager

import numpy as np

from simts import backend
from simts.errors import ShapeError

_RECORDING = True


@contextmanager
def no_record():
    """Disable graph recording inside the block (inference / constants)."""
    global _RECORDING
    prev = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = prev


class Node:
    """One recorded operation: its input tensors and a backward rule."""

    __slots__ = ("inputs", "backward_fn")

    def __init__(self, inputs, backward_fn):
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """Shaped float64 array, optionally part of a computation graph.

    `requires_grad` marks leaves that should receive gradients; tensors
    produced by ops on tracked inputs carry a `node` back-reference into
    the graph.  A tensor with `node is None` and `requires_grad=False` is
    detached: backward never propagates through it.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # convenience operators used by tests and the losses
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, p):
        return power(self, p)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(*tensors):
    return _RECORDING and any(t.requires_grad for t in tensors)


def _attach(out, inputs, backward_fn):
    out.requires_grad = True
    out.node = Node(tuple(inputs), backward_fn)
    return out


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data + b.data)
    if _tracked(a, b):
        _attach(out, (a, b), lambda gy: (gy, gy))
    return out


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data - b.data)
    if _tracked(a, b):
        _attach(out, (a, b), lambda gy: (gy, -gy))
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data * b.data)
    if _tracked(a, b):
        ad, bd = a.data, b.data
        _attach(out, (a, b), lambda gy: (gy * bd, gy * ad))
    return out


def scale(x, c):
    x = as_tensor(x)
    c = float(c)
    out = Tensor(x.data * c)
    if _tracked(x):
        _attach(out, (x,), lambda gy: (gy * c,))
    return out


def power(x, p):
    x = as_tensor(x)
    p = float(p)
    out = Tensor(x.data**p)
    if _tracked(x):
        xd = x.data
        _attach(out, (x,), lambda gy: (gy * p * xd ** (p - 1.0),))
    return out


def exp(x):
    x = as_tensor(x)
    out = Tensor(np.exp(x.data))
    if _tracked(x):
        od = out.data
        _attach(out, (x,), lambda gy: (gy * od,))
    return out


def log(x):
    """Natural log; caller guarantees strictly positive input."""
    x = as_tensor(x)
    out = Tensor(np.log(x.data))
    if _tracked(x):
        xd = x.data
        _attach(out, (x,), lambda gy: (gy / xd,))
    return out


def relu(x):
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0))
    if _tracked(x):
        mask = x.data > 0  # subgradient at 0 is 0
        _attach(out, (x,), lambda gy: (gy * mask,))
    return out


def sum_all(x):
    x = as_tensor(x)
    out = Tensor(x.data.sum())
    if _tracked(x):
        shape = x.data.shape
        _attach(out, (x,), lambda gy: (np.full(shape, float(gy)),))
    return out


def mean_all(x):
    x = as_tensor(x)
    n = x.data.size
    out = Tensor(x.data.mean())
    if _tracked(x):
        shape = x.data.shape
        _attach(out, (x,), lambda gy: (np.full(shape, float(gy) / n),))
    return out


def sum_columns(x):
    """Sum a d x n matrix over rows, returning the n column totals."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"sum_columns expects a matrix, got shape {x.shape}")
    out = Tensor(x.data.sum(axis=0))
    if _tracked(x):
        d = x.data.shape[0]
        _attach(out, (x,), lambda gy: (np.broadcast_to(gy, (d, gy.shape[0])),))
    return out


def mean_over(tensors):
    """Elementwise arithmetic mean of same-shape tensors."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("mean_over: empty input list")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"mean_over: shapes {shape} and {t.shape} differ")
    n = len(tensors)
    acc = tensors[0].data.copy()
    for t in tensors[1:]:
        acc += t.data
    out = Tensor(acc / n)
    if _tracked(*tensors):
        _attach(out, tensors, lambda gy: tuple(gy / n for _ in range(n)))
    return out


# ---------------------------------------------------------------------------
# structural ops


def reshape(x, shape):
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))
    if _tracked(x):
        orig = x.data.shape
        _attach(out, (x,), lambda gy: (gy.reshape(orig),))
    return out


def last_column(x):
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"last_column expects a matrix, got shape {x.shape}")
    out = Tensor(x.data[:, -1].copy())

    if _tracked(x):
        shape = x.data.shape

        def bwd(gy):
            gx = np.zeros(shape)
            gx[:, -1] = gy
            return (gx,)

        _attach(out, (x,), bwd)
    return out


def stack_columns(vectors):
    """Stack 1-D tensors of equal length as the columns of a matrix."""
    vectors = [as_tensor(v) for v in vectors]
    if not vectors:
        raise ShapeError("stack_columns: empty input list")
    for v in vectors:
        if v.data.ndim != 1 or v.shape != vectors[0].shape:
            raise ShapeError("stack_columns: inputs must be 1-D and equal length")
    out = Tensor(np.stack([v.data for v in vectors], axis=1))
    if _tracked(*vectors):
        n = len(vectors)
        _attach(out, vectors, lambda gy: tuple(gy[:, j].copy() for j in range(n)))
    return out


def concat_columns(mats):
    """Concatenate matrices with equal row count along the column axis."""
    mats = [as_tensor(m) for m in mats]
    if not mats:
        raise ShapeError("concat_columns: empty input list")
    rows = mats[0].data.shape[0]
    for m in mats:
        if m.data.ndim != 2 or m.data.shape[0] != rows:
            raise ShapeError("concat_columns: inputs must be matrices with equal rows")
    widths = [m.data.shape[1] for m in mats]
    out = Tensor(np.concatenate([m.data for m in mats], axis=1))
    if _tracked(*mats):
        offsets = np.cumsum([0] + widths)

        def bwd(gy):
            return tuple(
                gy[:, offsets[i] : offsets[i + 1]].copy() for i in range(len(widths))
            )

        _attach(out, mats, bwd)
    return out


def blocks_from_columns(x, rows, cols):
    """Reinterpret each column of x as a row-major (rows, cols) block and
    lay the blocks side by side: (rows*cols, B) -> (rows, B*cols)."""
    x = as_tensor(x)
    if x.data.ndim != 2 or x.data.shape[0] != rows * cols:
        raise ShapeError(
            f"blocks_from_columns: shape {x.shape} incompatible with ({rows},{cols})"
        )
    nb = x.data.shape[1]
    # (rows*cols, B) -> (B, rows, cols) -> (rows, B, cols) -> (rows, B*cols)
    out_data = x.data.T.reshape(nb, rows, cols).transpose(1, 0, 2).reshape(rows, nb * cols)
    out = Tensor(out_data)
    if _tracked(x):

        def bwd(gy):
            g = gy.reshape(rows, nb, cols).transpose(1, 0, 2).reshape(nb, rows * cols)
            return (np.ascontiguousarray(g.T),)

        _attach(out, (x,), bwd)
    return out


# ---------------------------------------------------------------------------
# network ops


def linear(x, weight, bias):
    """weight @ x + bias for a vector x (n,) or a column batch (n, B)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    m, n = weight.data.shape
    if x.data.shape[0] != n or bias.data.shape != (m,):
        raise ShapeError(
            f"linear: weight {weight.shape}, input {x.shape}, bias {bias.shape}"
        )
    if x.data.ndim == 1:
        out = Tensor(weight.data @ x.data + bias.data)
    else:
        out = Tensor(weight.data @ x.data + bias.data[:, None])
    if _tracked(x, weight, bias):
        xd, wd = x.data, weight.data

        def bwd(gy):
            if xd.ndim == 1:
                return (wd.T @ gy, np.outer(gy, xd), gy.copy())
            return (wd.T @ gy, gy @ xd.T, gy.sum(axis=1))

        _attach(out, (x, weight, bias), bwd)
    return out


def conv1d(x, weight, bias):
    """Causal 1-D convolution: left-pad with k-1 zeros, keep input length.

    x is (C_in, L), weight (C_out, C_in, k), bias (C_out,); output[t]
    depends only on x[.., max(0, t-k+1)..t].
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 3:
        raise ShapeError(f"conv1d: input {x.shape}, weight {weight.shape}")
    if weight.data.shape[1] != x.data.shape[0]:
        raise ShapeError(
            f"conv1d: weight expects {weight.data.shape[1]} input channels, "
            f"input has {x.data.shape[0]} (input {x.shape}, weight {weight.shape})"
        )
    if bias.data.shape != (weight.data.shape[0],):
        raise ShapeError(f"conv1d: bias {bias.shape} vs weight {weight.shape}")
    out = Tensor(backend.conv1d_fwd(x.data, weight.data, bias.data))
    if _tracked(x, weight, bias):
        xd, wd = x.data, weight.data

        def bwd(gy):
            gx, gw, gb = backend.conv1d_bwd(xd, wd, gy)
            return (gx, gw, gb)

        _attach(out, (x, weight, bias), bwd)
    return out


def conv1d_last(x, weight, bias):
    """Final output column of `conv1d`, computed without the full sweep."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.data.shape[1] != x.data.shape[0]:
        raise ShapeError(
            f"conv1d_last: weight expects {weight.data.shape[1]} input channels, "
            f"input has {x.data.shape[0]}"
        )
    out = Tensor(backend.conv1d_last_fwd(x.data, weight.data, bias.data))
    if _tracked(x, weight, bias):
        xd, wd = x.data, weight.data

        def bwd(gy):
            return backend.conv1d_last_bwd(xd, wd, gy)

        _attach(out, (x, weight, bias), bwd)
    return out


def fuse_kernels(kernels):
    """Average causal kernels of mixed width into one kernel of the widest
    width.  A width-k kernel acts on lags 0..k-1, so it occupies the last k
    tap positions of the fused kernel; older taps are zero.  Convolving with
    the fused kernel equals averaging the individual convolution outputs.
    """
    kernels = [as_tensor(k) for k in kernels]
    if not kernels:
        raise ShapeError("fuse_kernels: empty input list")
    cout, cin, _ = kernels[0].data.shape
    widths = []
    for k in kernels:
        if k.data.ndim != 3 or k.data.shape[:2] != (cout, cin):
            raise ShapeError("fuse_kernels: kernels must share output/input channels")
        widths.append(k.data.shape[2])
    kmax = max(widths)
    n = len(kernels)
    fused = np.zeros((cout, cin, kmax))
    for k, w in zip(kernels, widths):
        fused[:, :, kmax - w :] += k.data
    out = Tensor(fused / n)
    if _tracked(*kernels):

        def bwd(gy):
            return tuple(gy[:, :, kmax - w :] / n for w in widths)

        _attach(out, kernels, bwd)
    return out


def l2_normalize_columns(x, eps=1e-8):
    """Divide each column by max(euclidean norm, eps).

    Columns with norm >= eps come out unit length; smaller columns are
    scaled by 1/eps, so a zero column stays zero instead of becoming NaN.
    """
    if eps <= 0:
        raise ValueError("l2_normalize_columns: eps must be positive")
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize_columns expects a matrix, got {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=0))
    denom = np.maximum(norms, eps)
    out = Tensor(x.data / denom)
    if _tracked(x):
        yd = out.data
        unit = norms >= eps  # these columns sit on the sphere; others are linear

        def bwd(gy):
            gx = gy / denom
            proj = (yd * gy).sum(axis=0) / denom
            gx -= yd * (proj * unit)
            return (gx,)

        _attach(out, (x,), bwd)
    return out


def detach(x):
    """Same values, no graph: consumers contribute zero gradient upstream."""
    x = as_tensor(x)
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# backward pass and the finite-difference checker


def _toposort(loss):
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if id(inp) not in visited and (inp.node is not None or inp.requires_grad):
                    stack.append((inp, False))
    return order


def backward(loss, params=None):
    """Run reverse-mode differentiation from a scalar loss.

    Populates `.grad` on every tensor with requires_grad reachable from the
    loss (overwriting any previous value, so repeated calls on the same
    graph give identical results).  When `params` (a name -> Tensor map) is
    given, returns {name: gradient array}; parameters the loss does not
    depend on get zeros.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise ValueError("backward: loss is not connected to a recorded graph")

    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.get(id(t))
        if g is None or t.node is None:
            continue
        input_grads = t.node.backward_fn(g)
        for inp, gi in zip(t.node.inputs, input_grads):
            if gi is None or not (inp.requires_grad or inp.node is not None):
                continue
            prev = grads.get(id(inp))
            grads[id(inp)] = gi if prev is None else prev + gi

    for t in order:
        if t.requires_grad:
            g = grads.get(id(t))
            if g is not None:
                t.grad = np.ascontiguousarray(np.reshape(g, t.data.shape))

    if params is not None:
        return {
            name: (
                np.ascontiguousarray(np.reshape(grads[id(p)], p.data.shape))
                if id(p) in grads
                else np.zeros_like(p.data)
            )
            for name, p in params.items()
        }
    return None


def grad_check(f, inputs, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    `f` maps the given tensors to a scalar Tensor.  Error per entry is
    |analytic - numeric| / max(1, |analytic|, |numeric|); the max over all
    entries of all inputs is returned.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"grad_check: eps {eps} outside [1e-7, 1e-3]")
    inputs = [as_tensor(t) for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None

    loss = f(*inputs)
    backward(loss)
    analytic = [
        t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]

    worst = 0.0
    with no_record():
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            gaf = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = f(*inputs).item()
                flat[i] = orig - eps
                lo = f(*inputs).item()
                flat[i] = orig
                num = (hi - lo) / (2.0 * eps)
                err = abs(gaf[i] - num) / max(1.0, abs(gaf[i]), abs(num))
                worst = max(worst, err)
    return worst
