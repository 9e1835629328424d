"""Deterministic dense kernels shared by every other module.

Matrices are plain 2-D ``float32`` numpy arrays.  ``matmul`` accumulates each
output element sequentially over the inner dimension in float64, so a row of
the result never depends on which other rows (or batched matrices) were
computed alongside it.  Batched per-head attention therefore matches a
head-by-head loop bit for bit, and the result is the same on every platform.
"""

from __future__ import annotations

import contextlib
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

ROPE_THETA = 10000.0
F32 = np.float32

# Above this many output elements the k-loop of in-place multiply-adds wins;
# below it the python overhead of K iterations dominates and a single
# reduction over a materialised (k, ...) product block is cheaper.
_LOOP_MIN_ELEMS = 4096
_REDUCE_CHUNK_ELEMS = 1 << 20

_fast_matmul = False

# Kernel backend for the sequential product: "numba" when importable (same
# operation order, compiled), else "numpy".  PLM_LAB_KERNEL=numpy forces the
# reference path.
_kernel_cache: dict = {}


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def fast_matmul(enabled: bool = True):
    """Route matmul through BLAS. Results stop being bit-reproducible."""
    global _fast_matmul
    prev = _fast_matmul
    _fast_matmul = enabled
    try:
        yield
    finally:
        _fast_matmul = prev


@dataclass
class OpCounter:
    """Tally of multiply-accumulates actually executed, split by layer and component.

    Layer ``-1`` holds work outside the decoder stack (the logit head).
    """

    by_layer: dict = field(default_factory=lambda: defaultdict(lambda: defaultdict(int)))

    def add(self, layer: int, component: str, macs: int) -> None:
        self.by_layer[layer][component] += int(macs)

    @property
    def macs(self) -> int:
        return sum(sum(c.values()) for c in self.by_layer.values())

    @property
    def flops(self) -> int:
        return 2 * self.macs

    def component(self, name: str) -> int:
        return sum(c.get(name, 0) for c in self.by_layer.values())

    def layer_macs(self, layer: int) -> int:
        return sum(self.by_layer.get(layer, {}).values())

    def merge(self, other: "OpCounter") -> None:
        for layer, comps in other.by_layer.items():
            for name, v in comps.items():
                self.by_layer[layer][name] += v


def _tally(counter, where, macs):
    if counter is not None:
        layer, component = where
        counter.add(layer, component, macs)


def _sequential_bmm(a64: np.ndarray, b64: np.ndarray) -> np.ndarray:
    """(B, m, k) x (B, k, n) in float64, each output summed as p0 + p1 + ... + p_{k-1}."""
    bsz, m, k = a64.shape
    n = b64.shape[2]
    width = bsz * m * n
    if width >= _LOOP_MIN_ELEMS:
        acc = a64[:, :, 0, None] * b64[:, None, 0, :]
        tmp = np.empty_like(acc)
        for kk in range(1, k):
            np.multiply(a64[:, :, kk, None], b64[:, None, kk, :], out=tmp)
            acc += tmp
        return acc
    # k leads so every slab is a contiguous (B, m, n) block added in order
    at = np.ascontiguousarray(a64.transpose(2, 0, 1))
    bt = np.ascontiguousarray(b64.transpose(1, 0, 2))
    out = np.empty((bsz, m, n), dtype=np.float64)
    rows = max(1, _REDUCE_CHUNK_ELEMS // (k * bsz * n))
    for r0 in range(0, m, rows):
        prod = at[:, :, r0:r0 + rows, None] * bt[:, :, None, :]
        flat = prod.reshape(k, -1)
        if flat.shape[1] < 8:
            # too narrow for a strided reduce; accumulate is sequential by definition
            res = np.add.accumulate(flat, axis=0)[-1]
        else:
            res = np.add.reduce(flat, axis=0)
        out[:, r0:r0 + rows, :] = res.reshape(bsz, -1, n)
    return out


def _numba_bmm():
    if "numba" not in _kernel_cache:
        try:
            from numba import njit
        except ImportError:
            _kernel_cache["numba"] = None
        else:
            @njit(cache=True)
            def bmm(a, b):  # pragma: no cover - compiled
                bsz, m, k = a.shape
                n = b.shape[2]
                out = np.empty((bsz, m, n))
                for z in range(bsz):
                    for i in range(m):
                        for j in range(n):
                            out[z, i, j] = a[z, i, 0] * b[z, 0, j]
                        for kk in range(1, k):
                            s = a[z, i, kk]
                            for j in range(n):
                                out[z, i, j] += s * b[z, kk, j]
                return out

            _kernel_cache["numba"] = bmm
    return _kernel_cache["numba"]


def kernel_backend() -> str:
    """Backend ``matmul`` uses right now: "numba" or "numpy"."""
    choice = os.environ.get("PLM_LAB_KERNEL", "auto")
    if choice == "numpy":
        return "numpy"
    if _numba_bmm() is None:
        if choice == "numba":
            raise RuntimeError("PLM_LAB_KERNEL=numba but numba is not installed")
        return "numpy"
    return "numba"


def batched_matmul(a: np.ndarray, b: np.ndarray, counter: OpCounter | None = None,
                   where: tuple[int, str] = (-1, "other")) -> np.ndarray:
    """Stack of products ``a[i] @ b[i]``; every element matches ``matmul`` bit for bit."""
    if a.ndim != 3 or b.ndim != 3:
        raise ShapeError(f"batched_matmul needs 3-D operands, got {a.shape} and {b.shape}")
    bsz, m, k = a.shape
    bsz2, k2, n = b.shape
    if bsz != bsz2 or k != k2:
        raise ShapeError(f"incompatible operands: {a.shape} x {b.shape}")
    _tally(counter, where, bsz * m * k * n)
    if bsz * m * n == 0 or k == 0:
        return np.zeros((bsz, m, n), dtype=F32)
    a64 = np.asarray(a, dtype=np.float64)
    b64 = np.asarray(b, dtype=np.float64)
    if _fast_matmul:
        return np.matmul(a64, b64).astype(F32)
    if kernel_backend() == "numba":
        acc = _numba_bmm()(np.ascontiguousarray(a64), np.ascontiguousarray(b64))
    else:
        acc = _sequential_bmm(a64, b64)
    return acc.astype(F32)


def matmul(a: np.ndarray, b: np.ndarray, counter: OpCounter | None = None,
           where: tuple[int, str] = (-1, "other")) -> np.ndarray:
    """Product of two 2-D arrays, accumulated in float64 and rounded to float32."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return batched_matmul(a[None], b[None], counter, where)[0]


def softmax_rows(m: np.ndarray, scale: float = 1.0, causal_mask: bool = False) -> np.ndarray:
    """Row softmax of ``scale * m``; leading axes, if any, index independent matrices.

    With ``causal_mask`` the last row lines up with the last column, so a
    square input gets the usual lower-triangular mask and a single decode row
    sees every column.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    x = np.asarray(m, dtype=np.float64)
    if x.ndim < 2:
        raise ShapeError(f"softmax_rows needs a 2-D (or stacked) input, got {x.shape}")
    rows, cols = x.shape[-2:]
    if cols == 0:
        raise ValueError("fully masked row")
    if causal_mask:
        offset = cols - rows
        allowed = np.arange(cols)[None, :] <= (np.arange(rows)[:, None] + offset)
        if not allowed.any(axis=1).all():
            raise ValueError("fully masked row")
        x = np.where(allowed, x, -np.inf)
    mx = x.max(axis=-1, keepdims=True)
    e = np.exp((x - mx) * scale)
    return (e / e.sum(axis=-1, keepdims=True)).astype(F32)


def rope_angles(positions, dim: int, theta_base: float = ROPE_THETA) -> np.ndarray:
    inv_freq = theta_base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    return np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]


def apply_rope(x: np.ndarray, positions, theta_base: float = ROPE_THETA,
               counter: OpCounter | None = None, where=(-1, "rope")) -> np.ndarray:
    """Rotate consecutive pairs ``(x[2i], x[2i+1])`` of each row by position * freq_i.

    ``x`` is (N, d) with one row per position; d must be even.  Costs 2 MACs
    per element.
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError(f"apply_rope needs (N, d), got {x.shape}")
    n, d = x.shape
    if d % 2:
        raise ShapeError(f"rotary dimension must be even, got {d}")
    if len(positions) != n:
        raise ShapeError(f"{len(positions)} positions for {n} rows")
    _tally(counter, where, 2 * n * d)
    ang = rope_angles(positions, d, theta_base)
    cos, sin = np.cos(ang), np.sin(ang)
    x64 = x.astype(np.float64)
    even, odd = x64[:, 0::2], x64[:, 1::2]
    out = np.empty_like(x64)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos
    return out.astype(F32)


def rms_norm(x: np.ndarray, weight: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    x64 = x.astype(np.float64)
    inv = 1.0 / np.sqrt(np.mean(x64 * x64, axis=-1, keepdims=True) + eps)
    return (x64 * inv * weight.astype(np.float64)).astype(F32)


# -- quantization -----------------------------------------------------------

BIT_WIDTHS = (4, 8, 16)


@dataclass(frozen=True)
class QuantizedMatrix:
    """Symmetric per-row absmax quantization.

    Scales are kept as float16, rounded up so no entry clips.  4-bit payloads
    pack two values per byte, low nibble first.
    """

    rows: int
    cols: int
    bit_width: int
    scales: np.ndarray  # (rows,) float16
    payload: np.ndarray  # packed integer storage

    @property
    def nbytes(self) -> int:
        return int(self.scales.nbytes + self.payload.nbytes)

    @property
    def shape(self):
        return (self.rows, self.cols)


def _qmax(bit_width: int) -> int:
    return 2 ** (bit_width - 1) - 1


def quantize(w: np.ndarray, bit_width: int) -> QuantizedMatrix:
    if bit_width not in BIT_WIDTHS:
        raise ValueError(f"bit_width must be one of {BIT_WIDTHS}")
    w = np.asarray(w, dtype=F32)
    if w.ndim == 1:
        w = w[None, :]
    if not np.isfinite(w).all():
        raise ValueError("cannot quantize non-finite weights")
    rows, cols = w.shape
    qmax = _qmax(bit_width)
    absmax = np.abs(w.astype(np.float64)).max(axis=1) if cols else np.zeros(rows)
    scales = (absmax / qmax).astype(np.float16)
    low = scales.astype(np.float64) * qmax < absmax
    scales[low] = np.nextafter(scales[low], np.float16(np.inf))
    if np.isinf(scales).any():
        raise OverflowError("row scale exceeds float16 range")
    s = scales.astype(np.float64)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(s > 0, np.rint(w / s), 0.0)
    q = np.clip(q, -qmax, qmax).astype(np.int16)
    if bit_width == 16:
        payload = q
    elif bit_width == 8:
        payload = q.astype(np.int8)
    else:
        u = (q + 8).astype(np.uint8)  # offset to 1..15
        if cols % 2:
            u = np.concatenate([u, np.full((rows, 1), 8, np.uint8)], axis=1)
        payload = (u[:, 0::2] | (u[:, 1::2] << 4)).astype(np.uint8)
    return QuantizedMatrix(rows, cols, bit_width, scales, payload)


def dequantize(q: QuantizedMatrix) -> np.ndarray:
    if q.bit_width == 4:
        lo = (q.payload & 0x0F).astype(np.int16) - 8
        hi = (q.payload >> 4).astype(np.int16) - 8
        vals = np.empty((q.rows, 2 * q.payload.shape[1]), dtype=np.int16)
        vals[:, 0::2] = lo
        vals[:, 1::2] = hi
        vals = vals[:, :q.cols]
    else:
        vals = q.payload.astype(np.int16)
    return (vals.astype(np.float64) * q.scales.astype(np.float64)[:, None]).astype(F32)


# -- random numbers ---------------------------------------------------------

def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; the stream depends only on ``seed``."""
    return np.random.Generator(np.random.Philox(int(seed) & (2 ** 64 - 1)))


def normal_matrix(rng: np.random.Generator, rows: int, cols: int, std: float = 1.0) -> np.ndarray:
    return (rng.standard_normal((rows, cols)) * std).astype(F32)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    mx = x.max(axis=-1, keepdims=True)
    return x - mx - np.log(np.exp(x - mx).sum(axis=-1, keepdims=True))


def ceil_fraction(rate: float, n: int) -> int:
    """ceil(rate * n), robust to rates like 0.7 whose product lands a hair above an integer."""
    return int(math.ceil(round(rate * n, 9)))
