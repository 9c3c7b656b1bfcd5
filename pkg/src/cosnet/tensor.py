"""Dense 4-D tensors and the two primitive kernels everything else is built on.

Storage is 32-bit float in n-major (then channel, row, col) order.  A tensor
is immutable from the caller's perspective: every operation allocates its
output.  ``matmul`` has a documented accumulation order: the fast path is a
single BLAS call; deterministic mode (``COSNET_DETERMINISTIC=1`` or
:func:`set_deterministic`) forces a strictly sequential reduction over the
inner dimension.  The two paths agree within 1e-6 relative on the sizes used
here.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import GeometryError, ShapeError

_DETERMINISTIC = os.environ.get("COSNET_DETERMINISTIC", "0") == "1"


def set_deterministic(flag: bool) -> None:
    """Force sequential reductions (slower, bitwise reproducible by order)."""
    global _DETERMINISTIC
    _DETERMINISTIC = bool(flag)


def deterministic_enabled() -> bool:
    return _DETERMINISTIC


def _check_shape(shape):
    if len(shape) != 4:
        raise ShapeError(f"expected 4-D shape, got {shape}")
    if any(int(d) < 1 for d in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {shape}")
    return tuple(int(d) for d in shape)


class Tensor:
    """A dense n×c×h×w array of 32-bit floats (64-bit allowed for checking)."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        data = np.asarray(data)
        _check_shape(data.shape)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        self.data = np.ascontiguousarray(data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def n(self):
        return self.data.shape[0]

    @property
    def c(self):
        return self.data.shape[1]

    @property
    def h(self):
        return self.data.shape[2]

    @property
    def w(self):
        return self.data.shape[3]

    @property
    def dtype(self):
        return self.data.dtype

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


class Matrix:
    """Row-major 2-D float matrix (im2col target / gemm operand)."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        data = np.asarray(data)
        if data.ndim != 2:
            raise ShapeError(f"expected 2-D matrix, got shape {data.shape}")
        if any(d < 1 for d in data.shape):
            raise ShapeError(f"matrix dimensions must be >= 1, got {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        self.data = np.ascontiguousarray(data)

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    def __repr__(self):
        return f"Matrix({self.rows}x{self.cols})"


def tensor_create(shape, fill: str = "zeros", *, value: float = 0.0,
                  seed: int = 0, lo: float = 0.0, hi: float = 1.0,
                  mean: float = 0.0, std: float = 1.0,
                  dtype=np.float32) -> Tensor:
    """Create a tensor; random fills are fully determined by ``seed``."""
    shape = _check_shape(shape)
    if fill == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif fill == "ones":
        data = np.ones(shape, dtype=dtype)
    elif fill == "constant":
        data = np.full(shape, value, dtype=dtype)
    elif fill == "uniform":
        rng = np.random.Generator(np.random.PCG64(seed))
        data = rng.uniform(lo, hi, size=shape).astype(dtype)
    elif fill == "normal":
        rng = np.random.Generator(np.random.PCG64(seed))
        data = rng.normal(mean, std, size=shape).astype(dtype)
    else:
        raise ShapeError(f"unknown fill kind {fill!r}")
    return Tensor(data)


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _out_hw(h, w, kernel, stride, pad):
    kh, kw = kernel
    sh, sw = stride
    ph, pw = pad
    ho = conv_output_size(h, kh, sh, ph)
    wo = conv_output_size(w, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise GeometryError(
            f"non-positive output size for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {sh}x{sw}, pad {ph}x{pw}")
    return ho, wo


def im2col_nd(x: np.ndarray, kernel, stride, pad) -> np.ndarray:
    """Lower a batch (n,c,h,w) to patch columns (n, c*kh*kw, Ho*Wo).

    Patch rows are ordered channel-major, then kernel row, then kernel col.
    Out-of-bounds elements are zero.
    """
    n, c, h, w = x.shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = pad
    ho, wo = _out_hw(h, w, kernel, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + sh * ho:sh, kj:kj + sw * wo:sw]
    return cols.reshape(n, c * kh * kw, ho * wo)


def col2im_nd(cols: np.ndarray, in_shape, kernel, stride, pad) -> np.ndarray:
    """Adjoint of :func:`im2col_nd`: scatter-add patch columns back."""
    n, c, h, w = in_shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = pad
    ho, wo = _out_hw(h, w, kernel, stride, pad)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for ki in range(kh):
        for kj in range(kw):
            xp[:, :, ki:ki + sh * ho:sh, kj:kj + sw * wo:sw] += cols[:, :, ki, kj]
    if ph or pw:
        return xp[:, :, ph:ph + h, pw:pw + w]
    return xp


def im2col(x: Tensor, kernel, stride, pad) -> Matrix:
    """Single-sample im2col: (1,c,h,w) -> (c*kh*kw, Ho*Wo)."""
    if x.n != 1:
        raise ShapeError(f"im2col expects a single sample, got batch {x.n}")
    cols = im2col_nd(x.data, kernel, stride, pad)
    return Matrix(cols[0])


def mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with the package's fixed accumulation contract."""
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul mismatch: {a.shape} x {b.shape}")
    if not _DETERMINISTIC:
        return a @ b
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    for k in range(a.shape[1]):
        out += a[:, k][:, None] * b[k][None, :]
    return out


def matmul(a: Matrix, b: Matrix) -> Matrix:
    return Matrix(mm(a.data, b.data))


def elementwise(op: str, a: Tensor, b: Tensor | None = None, *,
                value: float = 1.0) -> Tensor:
    """Pointwise add/sub/mul of same-shape tensors, or scale by a scalar."""
    if op == "scale":
        return Tensor(a.data * np.asarray(value, dtype=a.dtype))
    if b is None:
        raise ShapeError(f"binary op {op!r} requires two tensors")
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if op == "add":
        return Tensor(a.data + b.data)
    if op == "sub":
        return Tensor(a.data - b.data)
    if op == "mul":
        return Tensor(a.data * b.data)
    raise ShapeError(f"unknown elementwise op {op!r}")
