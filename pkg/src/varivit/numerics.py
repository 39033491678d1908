"""Array kernels, seeded random streams and the VVT1 tensor file format.

Tensors are plain :class:`numpy.ndarray` objects. Forward kernels keep the
dtype of their inputs, so float32 training and float64 gradient checks run
through the same code. Every ``*_backward`` function takes the upstream
gradient plus whatever the forward pass returned or cached.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy.special import erf

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64
LN_EPS = 1e-5

MAGIC = b"VVT1"
FORMAT_VERSION = 1


class Rng:
    """Seeded random stream.

    ``child(i)`` derives a stream from the seed and the key ``i`` only, so the
    stream for sample ``i`` does not depend on the order in which samples are
    visited.
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, *key: int) -> "Rng":
        return Rng(self.seed, self.key + tuple(key))

    def trunc_normal(self, shape, std=0.02, dtype=TRAIN_DTYPE) -> np.ndarray:
        """Normal(0, std) truncated to +-2 std by resampling."""
        out = self.gen.standard_normal(shape)
        bad = np.abs(out) > 2.0
        while bad.any():
            out[bad] = self.gen.standard_normal(int(bad.sum()))
            bad = np.abs(out) > 2.0
        return (out * std).astype(dtype)

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self.key})"


# ---------------------------------------------------------------------------
# forward kernels


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched matrix product over the last two axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims disagree, {a.shape} x {b.shape}")
    return np.matmul(a, b)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax along the last axis with max subtraction."""
    if np.isnan(x).any():
        raise FloatingPointError("softmax_rows: NaN in input")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def layernorm(x, gamma, beta, eps=LN_EPS):
    """Normalize the last axis; returns ``(y, cache)``."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd, gamma)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)``."""
    return x * (0.5 * (1.0 + erf(x * _INV_SQRT2))).astype(x.dtype, copy=False)


# ---------------------------------------------------------------------------
# backward kernels


def matmul_backward(dout, a, b):
    """Gradients of ``a @ b`` with respect to ``a`` and ``b``.

    Leading batch axes of ``a`` that ``b`` lacks are summed out of ``db``.
    """
    if dout.shape[-1] != b.shape[-1] or dout.shape[-2] != a.shape[-2]:
        raise ValueError("matmul_backward: upstream shape does not match forward")
    da = np.matmul(dout, np.swapaxes(b, -1, -2))
    if b.ndim == 2 and a.ndim > 2:
        k, n = b.shape
        db = a.reshape(-1, k).T @ dout.reshape(-1, n)
    else:
        db = np.matmul(np.swapaxes(a, -1, -2), dout)
    return da, db


def softmax_backward(dout, y):
    """Backward of ``y = softmax_rows(x)`` given the forward output ``y``."""
    if dout.shape != y.shape:
        raise ValueError("softmax_backward: shape mismatch")
    return y * (dout - (dout * y).sum(axis=-1, keepdims=True))


def layernorm_backward(dout, cache):
    """Returns ``(dx, dgamma, dbeta)``; parameter grads summed over rows."""
    xhat, rstd, gamma = cache
    if dout.shape != xhat.shape:
        raise ValueError("layernorm_backward: shape mismatch")
    d = xhat.shape[-1]
    lead = tuple(range(dout.ndim - 1))
    dgamma = (dout * xhat).sum(axis=lead)
    dbeta = dout.sum(axis=lead)
    dxhat = dout * gamma
    dx = rstd / d * (
        d * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def gelu_backward(dout, x):
    if dout.shape != x.shape:
        raise ValueError("gelu_backward: shape mismatch")
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return (dout * (cdf + x * pdf)).astype(x.dtype, copy=False)


# ---------------------------------------------------------------------------
# VVT1 files


def write_tensor(path, arr) -> None:
    """Write ``arr`` as a VVT1 file (float32, little-endian, row-major)."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    header = MAGIC + struct.pack("<BI", FORMAT_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 9:
        raise ValueError(f"{path}: truncated header")
    version, rank = struct.unpack_from("<BI", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 9 + 4 * rank
    if len(raw) < off:
        raise ValueError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", raw, 9)
    if any(s < 1 for s in shape):
        raise ValueError(f"{path}: zero extent in shape {shape}")
    count = int(np.prod(shape))
    if len(raw) != off + 4 * count:
        raise ValueError(f"{path}: expected {count} values, got {(len(raw) - off) // 4}")
    return np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
