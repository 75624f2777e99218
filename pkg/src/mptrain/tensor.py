"""Dense tensors with F16/F32 storage and ordered accumulation.

F16 tensors hold raw binary16 patterns (uint16); F32 tensors hold
native single-precision values.  All math that reads F16 widens the
patterns exactly to f32, computes there, and rounds once on store, so
the only places binary16 rounding happens are explicit stores.

Reproducibility contract: every reduction and matmul accumulates in a
fixed order.  Matmul accumulates sequentially over the inner index k.
Reductions fold their axis sequentially from index 0; full reductions
fold the leading axis first, then recurse on the remaining shape.  This
makes results bit-identical run to run, at the cost of never delegating
accumulation to a BLAS.
"""

from __future__ import annotations

import enum
import struct
from typing import Iterable, Sequence

import numpy as np

from . import binary16 as b16


class DType(enum.Enum):
    F16 = "f16"
    F32 = "f32"


class AccumMode(enum.Enum):
    """Dot-product accumulation: f32 accumulator vs f16 after every step."""

    ACC16 = "acc16"
    ACC32 = "acc32"


_STORAGE = {DType.F16: np.uint16, DType.F32: np.float32}


class Tensor:
    """Immutable dense n-d array. Construct via the module functions."""

    __slots__ = ("shape", "dtype", "data")

    def __init__(self, shape: tuple[int, ...], dtype: DType, data: np.ndarray):
        shape = tuple(int(d) for d in shape)
        if any(d < 1 for d in shape):
            raise ValueError(f"dimensions must be >= 1, got {shape}")
        if data.dtype != _STORAGE[dtype]:
            raise ValueError(f"storage dtype {data.dtype} does not match {dtype}")
        if data.shape != shape:
            raise ValueError(f"buffer shape {data.shape} != {shape}")
        if not data.flags.c_contiguous:
            data = np.ascontiguousarray(data)
        data.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "dtype", dtype)
        object.__setattr__(self, "data", data)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1

    def widen(self) -> np.ndarray:
        """Exact f32 view of the values (a fresh array for F16)."""
        if self.dtype is DType.F16:
            return b16.to_f32_array(self.data)
        return self.data.astype(np.float32)

    def item(self) -> float:
        if self.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.widen().reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.value})"


def _freeze(data: np.ndarray, dtype: DType) -> Tensor:
    return Tensor(tuple(data.shape), dtype, data)


def store(values: np.ndarray, dtype: DType) -> Tensor:
    """Round an f32 (or wider) value array into a tensor, once.

    This is the single choke point where binary16 rounding happens for
    F16 targets.
    """
    arr = np.asarray(values, dtype=np.float32)
    if dtype is DType.F16:
        return _freeze(b16.from_f32_array(arr), DType.F16)
    return _freeze(arr.copy(), DType.F32)


def wrap_f16_bits(bits: np.ndarray) -> Tensor:
    """Adopt an existing uint16 pattern array without any rounding."""
    return _freeze(np.ascontiguousarray(bits, dtype=np.uint16), DType.F16)


def zeros(shape: Sequence[int], dtype: DType) -> Tensor:
    shape = tuple(int(d) for d in shape)
    return _freeze(np.zeros(shape, dtype=_STORAGE[dtype]), dtype)


def full(shape: Sequence[int], dtype: DType, value: float) -> Tensor:
    shape = tuple(int(d) for d in shape)
    return store(np.full(shape, value, dtype=np.float32), dtype)


def from_values(shape: Sequence[int], dtype: DType, values: Iterable[float]) -> Tensor:
    shape = tuple(int(d) for d in shape)
    flat = np.asarray(list(values), dtype=np.float32)
    expected = int(np.prod(shape, dtype=np.int64))
    if flat.size != expected:
        raise ValueError(f"got {flat.size} values for shape {shape} ({expected})")
    return store(flat.reshape(shape), dtype)


def cast(t: Tensor, dtype: DType) -> Tensor:
    """F32->F16 rounds once; F16->F32 is exact; same-dtype is identity."""
    if t.dtype is dtype:
        return t
    if dtype is DType.F16:
        return store(t.data, DType.F16)
    return _freeze(b16.to_f32_array(t.data), DType.F32)


def matmul(a: Tensor, b: Tensor, mode: AccumMode = AccumMode.ACC32,
           out_dtype: DType | None = None) -> Tensor:
    """[M,K] @ [K,N] with the accumulator semantics picked by `mode`.

    ACC32: each product is formed in f32 and added to an f32 accumulator
    in order k = 0..K-1; the result is rounded once on store.  ACC16:
    the product is still exact in f32 (11-bit significands), but the
    running accumulator is rounded back to binary16 after every
    multiply-add, modeling hardware whose accumulator is f16.
    """
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ValueError("matmul expects 2-d tensors")
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ValueError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    if a.dtype is not b.dtype:
        raise ValueError("matmul operands must share a dtype")
    if mode is AccumMode.ACC16 and a.dtype is not DType.F16:
        raise ValueError("ACC16 accumulation is defined for F16 operands only")
    if out_dtype is None:
        out_dtype = a.dtype

    aw = a.widen()
    bw = b.widen()
    prod = np.empty((m, n), dtype=np.float32)

    with np.errstate(over="ignore", invalid="ignore"):
        if mode is AccumMode.ACC32:
            acc = np.zeros((m, n), dtype=np.float32)
            for i in range(k):
                np.multiply(aw[:, i, None], bw[None, i, :], out=prod)
                np.add(acc, prod, out=acc)
            return store(acc, out_dtype)

        acc_bits = np.zeros((m, n), dtype=np.uint16)
        for i in range(k):
            np.multiply(aw[:, i, None], bw[None, i, :], out=prod)
            acc_bits = b16.from_f32_array(b16.to_f32_array(acc_bits) + prod)
        if out_dtype is DType.F16:
            return wrap_f16_bits(acc_bits)
        return _freeze(b16.to_f32_array(acc_bits), DType.F32)


def seq_sum(values: np.ndarray, axis: int | None = None) -> np.ndarray:
    """Fixed-order f32 summation of an f32 array.

    A single axis folds sequentially from index 0.  axis=None folds the
    leading axis first and recurses, ending in a scalar; the order is
    part of the reproducibility contract.
    """
    arr = np.asarray(values, dtype=np.float32)
    with np.errstate(over="ignore", invalid="ignore"):
        if axis is None:
            while arr.ndim > 0:
                arr = _fold_axis(arr, 0)
            return arr
        return _fold_axis(arr, axis)


def _fold_axis(arr: np.ndarray, axis: int) -> np.ndarray:
    if not -arr.ndim <= axis < arr.ndim:
        raise ValueError(f"axis {axis} out of range for {arr.ndim}-d input")
    moved = np.moveaxis(arr, axis, 0)
    acc = np.zeros(moved.shape[1:], dtype=np.float32)
    for i in range(moved.shape[0]):
        np.add(acc, moved[i], out=acc)
    return acc


def reduce_sum(t: Tensor, axis: int | None = None,
               out_dtype: DType | None = None) -> Tensor:
    """Sum with f32 accumulation regardless of the storage dtype."""
    if out_dtype is None:
        out_dtype = t.dtype
    acc = seq_sum(t.widen(), axis)
    if acc.ndim == 0:
        acc = acc.reshape((1,))
    return store(acc, out_dtype)


def _binary_op(a: Tensor, b: Tensor, op) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.dtype is not b.dtype:
        raise ValueError("operands must share a dtype")
    with np.errstate(over="ignore", invalid="ignore"):
        out = op(a.widen(), b.widen())
    return store(out, a.dtype)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary_op(a, b, np.add)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary_op(a, b, np.subtract)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary_op(a, b, np.multiply)


def scale(t: Tensor, c: float) -> Tensor:
    with np.errstate(over="ignore", invalid="ignore"):
        out = t.widen() * np.float32(c)
    return store(out, t.dtype)


def map_unary(t: Tensor, fn) -> Tensor:
    """Apply fn to the exact f32 values, round once on store."""
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.asarray(fn(t.widen()), dtype=np.float32)
    return store(out, t.dtype)


def transpose(t: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    moved = np.transpose(t.data, axes)
    return _freeze(np.ascontiguousarray(moved), t.dtype)


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(d) for d in shape)
    return _freeze(t.data.reshape(shape).copy(), t.dtype)


def slice_(t: Tensor, key) -> Tensor:
    """Basic slicing (tuples of slices/ints); always copies."""
    out = np.ascontiguousarray(t.data[key])
    if out.ndim == 0:
        out = out.reshape((1,))
    return _freeze(out.copy(), t.dtype)


def take(t: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    out = np.take(t.data, np.asarray(indices, dtype=np.int64), axis=axis)
    return _freeze(np.ascontiguousarray(out), t.dtype)


def bits_equal(a: Tensor, b: Tensor) -> bool:
    """Bit-pattern equality (distinguishes -0/+0, compares NaNs equal)."""
    if a.shape != b.shape or a.dtype is not b.dtype:
        return False
    if a.dtype is DType.F16:
        return bool(np.array_equal(a.data, b.data))
    return bool(np.array_equal(a.data.view(np.uint32), b.data.view(np.uint32)))


# ---------------------------------------------------------------------------
# Deterministic random generation.
#
# Counter-based SplitMix64: output i of stream (seed, stream) is
# mix64(base + (i+1) * GOLDEN) where base = mix64(mix64(seed) ^ stream).
# Normals come from the Box-Muller transform on 53-bit uniforms in
# (0, 1].  The integer pipeline is bit-exact everywhere; the transform
# runs in float64.
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def random_u64(n: int, seed: int, stream: int = 0) -> np.ndarray:
    base = _mix64(np.uint64([seed]))[0] ^ np.uint64(stream & 0xFFFFFFFFFFFFFFFF)
    base = _mix64(np.uint64([base]))[0]
    idx = np.arange(1, n + 1, dtype=np.uint64)
    return _mix64(base + idx * _GOLDEN)


def random_uniform01(n: int, seed: int, stream: int = 0) -> np.ndarray:
    """Uniform doubles in (0, 1], 53-bit resolution."""
    bits = random_u64(n, seed, stream)
    return ((bits >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53


def random_normal(shape: Sequence[int], dtype: DType, mean: float = 0.0,
                  stddev: float = 1.0, seed: int = 0, stream: int = 0) -> Tensor:
    if stddev < 0:
        raise ValueError("stddev must be >= 0")
    shape = tuple(int(d) for d in shape)
    n = int(np.prod(shape, dtype=np.int64))
    pairs = (n + 1) // 2
    u = random_uniform01(2 * pairs, seed, stream)
    u1, u2 = u[0::2], u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.empty(2 * pairs, dtype=np.float64)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    out = (mean + stddev * z[:n]).astype(np.float32).reshape(shape)
    return store(out, dtype)


def permutation(n: int, seed: int, stream: int = 0) -> np.ndarray:
    """Deterministic permutation of range(n) (argsort of random keys)."""
    return np.argsort(random_u64(n, seed, stream), kind="stable").astype(np.int64)


# ---------------------------------------------------------------------------
# Flat binary container: magic, dtype code, rank, dims (u64 LE), buffer.
# F16 buffers are little-endian uint16 patterns, F32 little-endian IEEE
# singles.
# ---------------------------------------------------------------------------

_MAGIC = b"MPTENS01"
_DTYPE_CODE = {DType.F16: 0, DType.F32: 1}
_CODE_DTYPE = {v: k for k, v in _DTYPE_CODE.items()}


def write_tensor(fh, t: Tensor) -> None:
    fh.write(_MAGIC)
    fh.write(struct.pack("<BB", _DTYPE_CODE[t.dtype], len(t.shape)))
    fh.write(struct.pack(f"<{len(t.shape)}Q", *t.shape))
    if t.dtype is DType.F16:
        fh.write(t.data.astype("<u2").tobytes())
    else:
        fh.write(t.data.astype("<f4").tobytes())


def read_tensor(fh) -> Tensor:
    magic = fh.read(8)
    if magic != _MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    code, rank = struct.unpack("<BB", fh.read(2))
    if code not in _CODE_DTYPE:
        raise ValueError(f"unknown dtype code {code}")
    dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    dtype = _CODE_DTYPE[code]
    count = int(np.prod(dims, dtype=np.int64))
    itemsize = 2 if dtype is DType.F16 else 4
    raw = fh.read(count * itemsize)
    if len(raw) != count * itemsize:
        raise ValueError("truncated tensor buffer")
    if dtype is DType.F16:
        data = np.frombuffer(raw, dtype="<u2").astype(np.uint16).reshape(dims)
    else:
        data = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    return _freeze(data, dtype)


def save_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh)
