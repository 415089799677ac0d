"""Reverse-mode autodiff over flat numpy buffers.

A ``Tensor`` wraps one row-major float array (float32 for training and
inference, float64 for gradient checking) plus an optional gradient buffer.
Every op records its parents and a backward closure; ``Tensor.backward()``
topologically orders the recorded ops and runs the closures in reverse,
accumulating into ``.grad``.

Conventions, fixed once here so the rest of the package never restates them:

- image layout is NHWC; kernels are (kh, kw, cin, cout)
- convolution is cross-correlation (no kernel flip)
- "same" padding pads asymmetrically (extra sample goes after), output
  extent ceil(L/s); "valid" gives floor((L - k)/s) + 1
- maxpool backward routes the gradient to the first argmax in row-major
  window order
- no general broadcasting: ops take same-shape operands, python scalars,
  or the few explicit mixed-shape ops defined below (add_rowvec,
  outer_scale, per-channel batchnorm affine)
"""

from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True
_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Check every op output for NaN/Inf (slow; meant for tests and CLI checks)."""
    global _debug_checks
    _debug_checks = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / scoring paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float array plus optional grad buffer and a backward-closure record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Reverse-sweep the recorded graph, accumulating leaf gradients."""
        if grad is None:
            grad = np.ones_like(self.data)
        # Iterative topo sort: graphs for long utterances exceed the
        # recursion limit.
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        _accum(self, np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # Interior grads are never read again; drop them to keep the
                # peak at roughly one activation set.
                node.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self.op})"

    # Operator sugar used by tests and small compositions.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, requires_grad=False, dtype=np.float32) -> Tensor:
    """Make a Tensor, converting to the given float dtype."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def parameter(data) -> Tensor:
    """A leaf tensor that wants gradients (keeps the incoming dtype)."""
    return Tensor(np.asarray(data), requires_grad=True)


def _accum(t: Tensor, g) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _make(data, parents, backward, op) -> Tensor:
    if _debug_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values in output of op '{op}'")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def bw(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def bw(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, -g)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(g):
        _accum(a, g * s)

    return _make(a.data * s, (a,), bw, "scale")


def add_scalar(a: Tensor, s: float) -> Tensor:
    def bw(g):
        _accum(a, g)

    return _make(a.data + float(s), (a,), bw, "add_scalar")


def relu(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, g * (a.data > 0))

    return _make(np.maximum(a.data, 0), (a,), bw, "relu")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bw(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), bw, "log")


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bw(g):
        _accum(a, g / (2.0 * out_data))

    return _make(out_data, (a,), bw, "sqrt")


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)

    def bw(g):
        _accum(a, np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), bw, "transpose")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _make(a.data[idx], (a,), bw, "narrow")


def sum_all(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, np.full_like(a.data, g))

    return _make(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), bw, "sum_all")


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def sum_axis(a: Tensor, axis: int) -> Tensor:
    def bw(g):
        _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape))

    return _make(a.data.sum(axis=axis), (a,), bw, "sum_axis")


def gather_rows(a: Tensor, idx) -> Tensor:
    """Pick a[i, idx[i]] for each row i; the label-indexing op of the losses."""
    idx = np.asarray(idx, dtype=np.int64)
    n, c = a.data.shape
    if idx.shape != (n,):
        raise ValueError(f"gather_rows: index shape {idx.shape}, expected ({n},)")
    if idx.min() < 0 or idx.max() >= c:
        raise ValueError(f"gather_rows: label out of range [0, {c})")
    rows = np.arange(n)

    def bw(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        _accum(a, full)

    return _make(a.data[rows, idx], (a,), bw, "gather_rows")


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """(n, d) + (d,) bias add."""
    if a.data.ndim != 2 or v.data.shape != (a.data.shape[1],):
        raise ValueError(f"add_rowvec: {a.data.shape} + {v.data.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g)
        if v.requires_grad:
            _accum(v, g.sum(axis=0))

    return _make(a.data + v.data, (a, v), bw, "add_rowvec")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: {a.data.shape} @ {b.data.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul: (n, i, j) @ (n, j, k) -> (n, i, k)."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.data.shape[0] != b.data.shape[0] \
            or a.data.shape[2] != b.data.shape[1]:
        raise ValueError(f"bmm: {a.data.shape} @ {b.data.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.transpose(0, 2, 1))
        if b.requires_grad:
            _accum(b, a.data.transpose(0, 2, 1) @ g)

    return _make(a.data @ b.data, (a, b), bw, "bmm")


def outer_scale(s: Tensor, c: Tensor) -> Tensor:
    """out[n, k, :] = s[n, k] * c[k, :] — the per-cluster centre term of VLAD."""
    if s.data.ndim != 2 or c.data.ndim != 2 or s.data.shape[1] != c.data.shape[0]:
        raise ValueError(f"outer_scale: {s.data.shape} x {c.data.shape}")

    def bw(g):
        if s.requires_grad:
            _accum(s, (g * c.data[None, :, :]).sum(axis=2))
        if c.requires_grad:
            _accum(c, (g * s.data[:, :, None]).sum(axis=0))

    return _make(s.data[:, :, None] * c.data[None, :, :], (s, c), bw, "outer_scale")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (n, din) @ w (din, dout) + optional bias (dout,)."""
    y = matmul(x, w)
    return add_rowvec(y, b) if b is not None else y


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction; (n, k) -> (n, k)."""
    if a.data.ndim != 2:
        raise ValueError("softmax_rows: expected 2-D input")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        _accum(a, y * (g - dot))

    return _make(y, (a,), bw, "softmax_rows")


def row_logsumexp(a: Tensor) -> Tensor:
    """log(sum(exp(row))) per row, stabilised; (n, k) -> (n,)."""
    if a.data.ndim != 2:
        raise ValueError("row_logsumexp: expected 2-D input")
    m = a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(a.data - m).sum(axis=1, keepdims=True)) + m
    soft = np.exp(a.data - lse)

    def bw(g):
        _accum(a, g[:, None] * soft)

    return _make(lse[:, 0], (a,), bw, "row_logsumexp")


def l2_normalize(a: Tensor, axis: int, eps: float = 1e-12) -> Tensor:
    """Unit-norm slices along ``axis``; zero slices map to zero (eps floor)."""
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = a.data / denom

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        # Where the norm hit the floor, y = a/eps is plain scaling.
        live = norm > eps
        _accum(a, np.where(live, (g - y * dot) / denom, g / denom))

    return _make(y, (a,), bw, "l2_normalize")


# ---------------------------------------------------------------------------
# convolution / pooling / batchnorm
# ---------------------------------------------------------------------------

def _out_extent(length: int, k: int, s: int, padding: str) -> tuple[int, int]:
    """Return (output extent, total pad) for one spatial dim."""
    if padding == "same":
        out = -(-length // s)
        return out, max((out - 1) * s + k - length, 0)
    if padding == "valid":
        if length < k:
            raise ValueError(f"valid padding: extent {length} < kernel {k}")
        return (length - k) // s + 1, 0
    raise ValueError(f"unknown padding '{padding}'")


def _im2col(xp, kh, kw, sh, sw, oh, ow):
    n, _, _, c = xp.shape
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        hi = i + (oh - 1) * sh + 1
        for j in range(kw):
            wj = j + (ow - 1) * sw + 1
            cols[:, :, :, i, j, :] = xp[:, i:hi:sh, j:wj:sw, :]
    return cols


def _col2im_add(dxp, dcols, kh, kw, sh, sw, oh, ow):
    for i in range(kh):
        hi = i + (oh - 1) * sh + 1
        for j in range(kw):
            wj = j + (ow - 1) * sw + 1
            dxp[:, i:hi:sh, j:wj:sw, :] += dcols[:, :, :, i, j, :]


def conv2d(x: Tensor, k: Tensor, stride=(1, 1), padding="same") -> Tensor:
    """NHWC cross-correlation. Kernel (kh, kw, cin, cout)."""
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ValueError("conv2d: input must be NHWC and kernel (kh, kw, cin, cout)")
    n, h, w, cin = x.data.shape
    kh, kw, kcin, cout = k.data.shape
    if cin != kcin:
        raise ValueError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    sh, sw = stride
    oh, ph = _out_extent(h, kh, sh, padding)
    ow, pw = _out_extent(w, kw, sw, padding)
    if ph or pw:
        xp = np.pad(x.data, ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, sh, sw, oh, ow)
    out = cols.reshape(n * oh * ow, kh * kw * cin) @ k.data.reshape(kh * kw * cin, cout)
    out = out.reshape(n, oh, ow, cout)

    def bw(g):
        gmat = g.reshape(n * oh * ow, cout)
        # cols is recomputed rather than kept alive: the stem-resolution
        # buffer dominates training memory otherwise.
        cols_b = _im2col(xp, kh, kw, sh, sw, oh, ow)
        if k.requires_grad:
            dk = cols_b.reshape(n * oh * ow, kh * kw * cin).T @ gmat
            _accum(k, dk.reshape(k.data.shape))
        if x.requires_grad:
            dcols = (gmat @ k.data.reshape(kh * kw * cin, cout).T)
            dcols = dcols.reshape(n, oh, ow, kh, kw, cin)
            dxp = np.zeros_like(xp)
            _col2im_add(dxp, dcols, kh, kw, sh, sw, oh, ow)
            if ph or pw:
                dxp = dxp[:, ph // 2:ph // 2 + h, pw // 2:pw // 2 + w, :]
            _accum(x, dxp)

    return _make(out, (x, k), bw, "conv2d")


def maxpool2d(x: Tensor, kernel=(2, 2), stride=(2, 2)) -> Tensor:
    """Valid max pooling; gradient goes to the first max in each window."""
    if x.data.ndim != 4:
        raise ValueError("maxpool2d: input must be NHWC")
    n, h, w, c = x.data.shape
    kh, kw = kernel
    sh, sw = stride
    oh, _ = _out_extent(h, kh, sh, "valid")
    ow, _ = _out_extent(w, kw, sw, "valid")
    windows = _im2col(x.data, kh, kw, sh, sw, oh, ow).reshape(n, oh, ow, kh * kw, c)
    arg = windows.argmax(axis=3).astype(np.uint8)
    out = np.take_along_axis(windows, arg[:, :, :, None, :].astype(np.int64), axis=3)[:, :, :, 0, :]

    def bw(g):
        dx = np.zeros_like(x.data)
        for p in range(kh * kw):
            i, j = divmod(p, kw)
            hi = i + (oh - 1) * sh + 1
            wj = j + (ow - 1) * sw + 1
            dx[:, i:hi:sh, j:wj:sw, :] += g * (arg == p)
        _accum(x, dx)

    return _make(out, (x,), bw, "maxpool2d")


class BatchNormState:
    """Mutable running statistics of one batch-norm layer (plain numpy buffers)."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                training: bool, momentum: float = 0.9, eps: float = 1e-5,
                update_stats: bool | None = None) -> Tensor:
    """Per-channel batch norm over (N, H, W). Population variance throughout.

    Train mode normalises with batch statistics and (unless disabled) folds
    them into the running buffers as ``r = momentum * r + (1 - momentum) * batch``.
    Eval mode normalises with the running buffers.
    """
    if x.data.ndim != 4:
        raise ValueError("batchnorm2d: input must be NHWC")
    channels = x.data.shape[3]
    if gamma.data.shape != (channels,) or beta.data.shape != (channels,):
        raise ValueError(
            f"batchnorm2d: affine shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match {channels} channels")
    if update_stats is None:
        update_stats = training

    if training:
        mu = x.data.mean(axis=(0, 1, 2))
        var = x.data.var(axis=(0, 1, 2))
        if update_stats:
            state.mean *= momentum
            state.mean += (1.0 - momentum) * mu
            state.var *= momentum
            state.var += (1.0 - momentum) * var
    else:
        mu = state.mean
        var = state.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def bw(g):
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 1, 2)))
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 1, 2)))
        if x.requires_grad:
            if training:
                m = x.data.shape[0] * x.data.shape[1] * x.data.shape[2]
                dxhat = g * gamma.data
                term = dxhat.sum(axis=(0, 1, 2)) + xhat * (dxhat * xhat).sum(axis=(0, 1, 2))
                _accum(x, (dxhat - term / m) * inv)
            else:
                _accum(x, g * (gamma.data * inv))

    return _make(out, (x, gamma, beta), bw, "batchnorm2d")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(fn, params, eps: float = 1e-5) -> float:
    """Max relative error between backward grads and central differences.

    ``fn`` must be a deterministic closure over ``params`` returning a scalar
    Tensor; params must be float64 (float32 differences cannot resolve 1e-4).
    Error per coordinate is |analytic - fd| / max(|analytic|, |fd|, 1e-8).
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 parameters")
        p.grad = None
    out = fn()
    if out.data.size != 1:
        raise ValueError("grad_check: fn must return a scalar")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(fn().data)
            flat[i] = orig - eps
            f_minus = float(fn().data)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError("grad_check: non-finite function value")
            fd = (f_plus - f_minus) / (2.0 * eps)
            err = abs(aflat[i] - fd) / max(abs(aflat[i]), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
