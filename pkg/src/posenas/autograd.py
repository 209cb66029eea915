"""Reverse-mode automatic differentiation over dense numpy tensors.

A global tape records every differentiable primitive as it executes.
``backward(loss)`` replays the tape in reverse, accumulating adjoints in
a fixed order so gradients are bit-reproducible for a given program.
Float32 is the working precision; float64 is available for verification
runs (see :func:`grad_check`).

Broadcasting is deliberately restricted: shapes must match exactly, or
one operand must be a scalar. All richer shape adaptation happens in the
convolution layer code, where the adjoints are written out explicitly.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "no_grad",
    "is_recording",
    "backward",
    "zero_grads",
    "forward_primitive",
    "add",
    "mul",
    "scalar_mul",
    "relu6",
    "softmax",
    "weighted_sum",
    "mse",
    "channel_norm",
    "tsum",
    "tlog",
    "grad_check",
]

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes violate a primitive's contract."""


class TapeError(RuntimeError):
    """Raised for invalid tape use (double backward, stale graph, ...)."""


class Tensor:
    """Dense n-dimensional array, optionally participating in the tape.

    ``requires_grad=True`` marks a leaf whose gradient buffer is
    allocated eagerly (and zeroed), so untouched leaves read exactly 0
    after a backward pass. Tensors produced by primitives get their
    gradient buffer lazily during replay.
    """

    __slots__ = ("data", "grad", "requires_grad", "_gen")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in FLOAT_DTYPES:
                dtype = data.dtype
            else:
                dtype = np.float32
        if np.dtype(dtype) not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise TypeError(f"unsupported dtype {dtype}; use float32 or float64")
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._gen = None  # tape generation this tensor was recorded under

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"


class Tape:
    """Ordered record of executed primitives.

    Each entry holds the output tensor and a pull function that maps the
    output adjoint into the input adjoints. ``replay`` visits entries in
    reverse insertion order exactly once, then clears the tape; replaying
    again without re-recording raises :class:`TapeError`.
    """

    def __init__(self):
        self._nodes = []
        self._gen = 0

    def __len__(self):
        return len(self._nodes)

    def record(self, out: Tensor, pull) -> None:
        out._gen = self._gen
        self._nodes.append((out, pull))

    def clear(self) -> None:
        self._nodes.clear()
        self._gen += 1

    def replay(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        if loss._gen is None:
            # Constant loss: nothing reachable, gradients stay absent.
            return
        if loss._gen != self._gen:
            raise TapeError("tape already consumed; re-run the forward pass before backward")
        _accumulate(loss, np.ones_like(loss.data))
        for out, pull in reversed(self._nodes):
            if out.grad is not None:
                pull(out.grad)
        self.clear()


_tape = Tape()
_recording = True


def is_recording() -> bool:
    return _recording


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation mode)."""
    global _recording
    prev = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = prev


def backward(loss: Tensor) -> None:
    """Replay the tape from ``loss``; leaves end up holding dLoss/dLeaf."""
    _tape.replay(loss)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad += g


def _result(data: np.ndarray, inputs, pull) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._gen = None
    out.requires_grad = any(t.requires_grad for t in inputs) and _recording
    if out.requires_grad:
        _tape.record(out, pull)
    return out


def _check_dtypes(name, *tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise TypeError(f"{name}: mixed dtypes {dt} and {t.dtype}")
    return dt


def _binary_mode(name, a, b):
    """Exact-shape match or scalar broadcast; anything else is an error."""
    if a.shape == b.shape:
        return "exact"
    if a.data.size == 1:
        return "a_scalar"
    if b.data.size == 1:
        return "b_scalar"
    raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add (exact shapes, or one scalar operand)."""
    _binary_mode("add", a, b)
    _check_dtypes("add", a, b)

    def pull(g):
        _accumulate(a, _reduce_to(g, a.shape))
        _accumulate(b, _reduce_to(g, b.shape))

    return _result(a.data + b.data, (a, b), pull)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise multiply (exact shapes, or one scalar operand)."""
    _binary_mode("mul", a, b)
    _check_dtypes("mul", a, b)

    def pull(g):
        _accumulate(a, _reduce_to(g * b.data, a.shape))
        _accumulate(b, _reduce_to(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), pull)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    c = float(c)

    def pull(g):
        _accumulate(a, np.asarray(g * c, dtype=a.dtype))

    return _result(np.asarray(a.data * c, dtype=a.dtype), (a,), pull)


def relu6(a: Tensor) -> Tensor:
    """min(max(x, 0), 6) elementwise."""
    out = np.minimum(np.maximum(a.data, 0), 6)

    def pull(g):
        mask = (a.data > 0) & (a.data < 6)
        _accumulate(a, g * mask)

    return _result(out, (a,), pull)


def softmax(a: Tensor) -> Tensor:
    """Vector softmax, stabilized by max subtraction. 1-D input only."""
    if a.data.ndim != 1 or a.data.size < 1:
        raise ShapeError(f"softmax expects a non-empty 1-D vector, got shape {a.shape}")
    z = a.data - a.data.max()
    e = np.exp(z)
    p = e / e.sum()

    def pull(g):
        _accumulate(a, p * (g - np.dot(p, g)))

    return _result(p, (a,), pull)


def weighted_sum(p: Tensor, tensors) -> Tensor:
    """sum_i p[i] * tensors[i] over same-shaped tensors.

    With a single tensor and p == (1,), the result is bit-identical to
    that tensor (the accumulation starts from p[0] * t[0], not zeros).
    """
    tensors = list(tensors)
    if p.data.ndim != 1 or len(tensors) != p.data.size:
        raise ShapeError(
            f"weighted_sum: {p.data.size} weights for {len(tensors)} tensors"
        )
    if not tensors:
        raise ShapeError("weighted_sum: empty tensor list")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"weighted_sum: mixed shapes {shape} and {t.shape}")
    _check_dtypes("weighted_sum", p, *tensors)

    out = p.data[0] * tensors[0].data
    for i in range(1, len(tensors)):
        out += p.data[i] * tensors[i].data

    def pull(g):
        dp = np.empty_like(p.data)
        for i, t in enumerate(tensors):
            dp[i] = np.sum(g * t.data, dtype=p.dtype)
            _accumulate(t, g * p.data[i])
        _accumulate(p, dp)

    return _result(out, [p, *tensors], pull)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of (a - b)**2; scalar output."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ, {a.shape} vs {b.shape}")
    _check_dtypes("mse", a, b)
    diff = a.data - b.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=a.dtype)

    def pull(g):
        d = (2.0 / n) * diff * g
        _accumulate(a, d)
        _accumulate(b, -d)

    return _result(out, (a, b), pull)


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements; scalar output."""
    out = np.asarray(a.data.sum(), dtype=a.dtype)

    def pull(g):
        _accumulate(a, np.full_like(a.data, g))

    return _result(out, (a,), pull)


def tlog(a: Tensor) -> Tensor:
    """Natural log, elementwise. Strictly positive inputs required."""
    if np.any(a.data <= 0):
        raise ValueError("log: inputs must be strictly positive")
    out = np.log(a.data)

    def pull(g):
        _accumulate(a, g / a.data)

    return _result(out, (a,), pull)


def channel_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Channelwise affine normalization of an NCHW tensor.

    Training mode normalizes by batch statistics (biased variance) and
    updates the running buffers in place with EMA momentum. Eval mode
    uses the frozen running statistics as constants.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"channel_norm expects NCHW input, got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"channel_norm: affine shapes {gamma.shape}/{beta.shape} do not match {c} channels"
        )
    _check_dtypes("channel_norm", x, gamma, beta)
    axes = (0, 2, 3)

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)

    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * ivar[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def pull(g):
        _accumulate(beta, g.sum(axis=axes))
        _accumulate(gamma, (g * xhat).sum(axis=axes))
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            mean_d = dxhat.mean(axis=axes)[None, :, None, None]
            mean_dx = (dxhat * xhat).mean(axis=axes)[None, :, None, None]
            dx = ivar[None, :, None, None] * (dxhat - mean_d - xhat * mean_dx)
        else:
            dx = dxhat * ivar[None, :, None, None]
        _accumulate(x, dx)

    return _result(out, (x, gamma, beta), pull)


_PRIMITIVES = {
    "add": add,
    "mul": mul,
    "scalar_mul": scalar_mul,
    "relu6": relu6,
    "softmax": softmax,
    "weighted_sum": weighted_sum,
    "mse": mse,
    "channel_norm": channel_norm,
    "sum": tsum,
    "log": tlog,
}


def forward_primitive(name: str, *inputs, **kwargs):
    """Dispatch a primitive by name (mostly useful for generic tests)."""
    try:
        fn = _PRIMITIVES[name]
    except KeyError:
        raise KeyError(f"unknown primitive {name!r}; known: {sorted(_PRIMITIVES)}") from None
    return fn(*inputs, **kwargs)


def grad_check(f, x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be scalar-valued and re-runnable; ``x`` must be float64.
    Error metric per coordinate: |analytic - fd| / max(1, |fd|).
    """
    if x.dtype != np.float64:
        raise TypeError("grad_check requires a float64 tensor")
    if not x.requires_grad:
        raise ValueError("grad_check requires x with requires_grad=True")

    x.zero_grad()
    y = f(x)
    if not isinstance(y, Tensor) or y.data.size != 1:
        raise ShapeError("grad_check: f must return a scalar Tensor")
    backward(y)
    analytic = x.grad.copy()

    fd = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    fd_flat = fd.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(x).item()
            flat[i] = orig - step
            lo = f(x).item()
            flat[i] = orig
            fd_flat[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(1.0, np.abs(fd))
    return float(np.max(np.abs(analytic - fd) / denom)) if fd.size else 0.0
