import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np
import scipy.sparse as sp

from config import settings
from core.errors import DimensionMismatchError, MissingSparseEncodingError

logger = logging.getLogger(__name__)

STRATEGIES = ("dense_dense", "sparse_left_then_right", "sparse_both_sides")


class OpCounter(Counter):
    """Named multiply-add / flop tallies; never decreases during a run."""

    def add(self, name: str, amount: int) -> None:
        self[name] += int(amount)

    def snapshot(self) -> dict:
        return dict(self)


@dataclass
class SparseBlock:
    """A dense block together with its row- and column-compressed encodings."""

    dense: np.ndarray
    csr: Optional[sp.csr_matrix] = None
    csc: Optional[sp.csc_matrix] = None

    @classmethod
    def from_dense(cls, block: np.ndarray, row: bool = True, col: bool = True) -> "SparseBlock":
        block = np.asarray(block)
        csr = sp.csr_matrix(block) if row else None
        csc = sp.csc_matrix(block) if col else None
        return cls(dense=block, csr=csr, csc=csc)

    @property
    def shape(self):
        return self.dense.shape

    @property
    def nnz(self) -> int:
        if self.csr is not None:
            return int(self.csr.nnz)
        if self.csc is not None:
            return int(self.csc.nnz)
        return int(np.count_nonzero(self.dense))


@dataclass
class BlockTriMatrix:
    """Block-tridiagonal operator with equal-sized diagonal blocks.

    upper[i] couples block i to block i+1, lower[i] couples block i+1 to block i.
    """

    diag: List[np.ndarray]
    upper: List[np.ndarray]
    lower: List[np.ndarray]
    upper_sparse: List[SparseBlock] = field(default_factory=list)
    lower_sparse: List[SparseBlock] = field(default_factory=list)

    def __post_init__(self):
        if len(self.upper) != len(self.diag) - 1 or len(self.lower) != len(self.diag) - 1:
            raise DimensionMismatchError(
                f"{len(self.diag)} diagonal blocks need {len(self.diag) - 1} off-diagonal blocks"
            )
        dims = {blk.shape for blk in self.diag + self.upper + self.lower}
        if len(dims) > 1:
            raise DimensionMismatchError(f"blocks have mixed shapes {sorted(dims)}")

    @property
    def bnum(self) -> int:
        return len(self.diag)

    @property
    def blockdim(self) -> int:
        return self.diag[0].shape[0]

    @property
    def size(self) -> int:
        return self.bnum * self.blockdim

    @classmethod
    def from_dense(cls, matrix: np.ndarray, bnum: int) -> "BlockTriMatrix":
        n = matrix.shape[0]
        if n % bnum:
            raise DimensionMismatchError(f"matrix of size {n} cannot be cut into {bnum} blocks")
        m = n // bnum
        blk = lambda i, j: np.array(matrix[i * m:(i + 1) * m, j * m:(j + 1) * m])
        return cls(
            diag=[blk(i, i) for i in range(bnum)],
            upper=[blk(i, i + 1) for i in range(bnum - 1)],
            lower=[blk(i + 1, i) for i in range(bnum - 1)],
        )

    def to_dense(self) -> np.ndarray:
        m = self.blockdim
        out = np.zeros((self.size, self.size), dtype=np.result_type(*self.diag))
        for i, blk in enumerate(self.diag):
            out[i * m:(i + 1) * m, i * m:(i + 1) * m] = blk
        for i, (up, lo) in enumerate(zip(self.upper, self.lower)):
            out[i * m:(i + 1) * m, (i + 1) * m:(i + 2) * m] = up
            out[(i + 1) * m:(i + 2) * m, i * m:(i + 1) * m] = lo
        return out

    def hermiticity_deviation(self) -> tuple:
        """Largest |X - X^H| entry and the block (i, j) where it occurs."""
        worst, where = 0.0, (0, 0)
        for i, blk in enumerate(self.diag):
            dev = float(np.max(np.abs(blk - blk.conj().T), initial=0.0))
            if dev > worst:
                worst, where = dev, (i, i)
        for i, (up, lo) in enumerate(zip(self.upper, self.lower)):
            dev = float(np.max(np.abs(lo - up.conj().T), initial=0.0))
            if dev > worst:
                worst, where = dev, (i + 1, i)
        return worst, where

    def is_hermitian(self, tol: float = 0.0) -> bool:
        return self.hermiticity_deviation()[0] <= tol

    def attach_sparse(self) -> "BlockTriMatrix":
        """Store CSR and CSC encodings of every off-diagonal block."""
        self.upper_sparse = [SparseBlock.from_dense(b) for b in self.upper]
        self.lower_sparse = [SparseBlock.from_dense(b) for b in self.lower]
        return self

    def combine(self, other: "BlockTriMatrix", coeff: complex = 1.0) -> "BlockTriMatrix":
        """self + coeff * other, block by block."""
        return BlockTriMatrix(
            diag=[a + coeff * b for a, b in zip(self.diag, other.diag)],
            upper=[a + coeff * b for a, b in zip(self.upper, other.upper)],
            lower=[a + coeff * b for a, b in zip(self.lower, other.lower)],
        )

    def scaled(self, coeff: complex) -> "BlockTriMatrix":
        return BlockTriMatrix(
            diag=[coeff * b for b in self.diag],
            upper=[coeff * b for b in self.upper],
            lower=[coeff * b for b in self.lower],
        )

    def adjoint(self) -> "BlockTriMatrix":
        return BlockTriMatrix(
            diag=[b.conj().T for b in self.diag],
            upper=[b.conj().T for b in self.lower],
            lower=[b.conj().T for b in self.upper],
        )

    @classmethod
    def zeros_like(cls, other: "BlockTriMatrix") -> "BlockTriMatrix":
        z = lambda blocks: [np.zeros_like(b, dtype=complex) for b in blocks]
        return cls(diag=z(other.diag), upper=z(other.upper), lower=z(other.lower))


def _as_sparse(block: Union[np.ndarray, SparseBlock], name: str, need: str) -> SparseBlock:
    if not isinstance(block, SparseBlock) or getattr(block, need) is None:
        raise MissingSparseEncodingError(f"{name} carries no {need.upper()} encoding")
    return block


def _dense(block: Union[np.ndarray, SparseBlock]) -> np.ndarray:
    return block.dense if isinstance(block, SparseBlock) else np.asarray(block)


def triple_product(F, gR, E, strategy: str = "dense_dense",
                   counter: Optional[OpCounter] = None) -> np.ndarray:
    """F @ gR @ E with the requested sparse/dense strategy.

    Args:
        F: left block, dense array or SparseBlock (CSR needed for sparse strategies)
        gR: dense middle block
        E: right block, dense array or SparseBlock
        strategy: one of STRATEGIES
        counter: optional OpCounter receiving multiply-adds under the strategy name
    Returns:
        np.ndarray: the dense product
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown triple-product strategy {strategy!r}")
    f_shape, e_shape = _dense(F).shape, _dense(E).shape
    gR = np.asarray(gR)
    if f_shape[1] != gR.shape[0] or gR.shape[1] != e_shape[0]:
        raise DimensionMismatchError(
            f"cannot multiply {f_shape} @ {gR.shape} @ {e_shape}"
        )

    if strategy == "dense_dense":
        left = _dense(F) @ gR
        result = left @ _dense(E)
        macs = f_shape[0] * f_shape[1] * gR.shape[1] + f_shape[0] * e_shape[0] * e_shape[1]
    elif strategy == "sparse_left_then_right":
        f_sp = _as_sparse(F, "F", "csr")
        e_sp = _as_sparse(E, "E", "csr")
        left = np.asarray(f_sp.csr @ gR)
        # right operand only has row compression: transpose it explicitly first
        e_t = e_sp.csr.transpose().tocsr()
        result = np.asarray(e_t @ left.T).T
        macs = f_sp.nnz * gR.shape[1] + e_sp.nnz * f_shape[0]
        if counter is not None:
            counter.add("transposed_entries", e_sp.nnz)
    else:
        f_sp = _as_sparse(F, "F", "csr")
        e_sp = _as_sparse(E, "E", "csc")
        left = np.asarray(f_sp.csr @ gR)
        # the transpose of a CSC block is a CSR block without any data movement
        result = np.asarray(e_sp.csc.transpose() @ left.T).T
        macs = f_sp.nnz * gR.shape[1] + e_sp.nnz * f_shape[0]

    if counter is not None:
        counter.add(strategy, macs)
    return result


@dataclass
class SmallMatBatch:
    """count matrices of size n x n laid out with a constant stride in one buffer."""

    count: int
    n: int
    stride: int
    storage: np.ndarray

    def __post_init__(self):
        if self.stride < self.n * self.n:
            raise DimensionMismatchError(f"stride {self.stride} < n^2 = {self.n * self.n}")
        if self.storage.size < self.count * self.stride:
            raise DimensionMismatchError(
                f"storage holds {self.storage.size} elements, need {self.count * self.stride}"
            )

    @classmethod
    def zeros(cls, count: int, n: int, stride: Optional[int] = None) -> "SmallMatBatch":
        stride = n * n if stride is None else stride
        return cls(count, n, stride, np.zeros(count * stride, dtype=complex))

    @classmethod
    def from_stack(cls, stack: np.ndarray, stride: Optional[int] = None) -> "SmallMatBatch":
        stack = np.asarray(stack, dtype=complex)
        count, n = stack.shape[0], stack.shape[1]
        batch = cls.zeros(count, n, stride)
        batch.views()[...] = stack
        return batch

    def views(self) -> np.ndarray:
        """(count, n, n) view sharing memory with storage."""
        rows = self.storage[:self.count * self.stride].reshape(self.count, self.stride)
        return rows[:, :self.n * self.n].reshape(self.count, self.n, self.n)

    def to_stack(self) -> np.ndarray:
        return np.array(self.views())


@dataclass
class KernelCounter:
    """Multiply-add accounting for the batched small-matrix kernels."""

    macs: int = 0
    padded_macs: int = 0
    batches: int = 0
    tile: int = settings.HALF_TILE

    def record(self, count: int, n: int, products: int = 1) -> None:
        npad = self.tile * math.ceil(n / self.tile)
        self.macs += products * count * n ** 3
        self.padded_macs += products * count * npad ** 3
        self.batches += 1

    @property
    def useful_ratio(self) -> float:
        """Useful work relative to an execution padded to the tile size."""
        return self.macs / self.padded_macs if self.padded_macs else 1.0


def _check_pair(A, B, C) -> None:
    if A.count != B.count or (C is not None and C.count != A.count):
        raise DimensionMismatchError(
            f"batch counts differ: {A.count}, {B.count}" + (f", {C.count}" if C is not None else "")
        )
    if A.n != B.n or (C is not None and C.n != A.n):
        raise DimensionMismatchError(f"matrix sizes differ: {A.n}, {B.n}")


def sbsmm(A: SmallMatBatch, B: SmallMatBatch, C: SmallMatBatch, accumulate: bool = False,
          counter: Optional[KernelCounter] = None) -> SmallMatBatch:
    """C[k] = A[k] @ B[k] (or +=) for every k in one strided-batched call."""
    _check_pair(A, B, C)
    product = np.matmul(A.views(), B.views())
    target = C.views()
    if accumulate:
        target += product
    else:
        target[...] = product
    if counter is not None:
        counter.record(A.count, A.n)
    return C


def to_half(values: np.ndarray) -> np.ndarray:
    """Round to IEEE binary16 (nearest-even), clamping out-of-range values."""
    values = np.asarray(values, dtype=np.float64)
    return np.clip(values, -settings.HALF_MAX, settings.HALF_MAX).astype(np.float16)


def compute_scale(values) -> float:
    """Largest power of two s with s * max|z| <= HALF_HEADROOM (1.0 for all zeros)."""
    if isinstance(values, SmallMatBatch):
        values = values.views()
    values = np.asarray(values)
    peak = float(np.max(np.abs(values), initial=0.0))
    if peak == 0.0 or not np.isfinite(peak):
        return 1.0
    _, exponent = math.frexp(settings.HALF_HEADROOM / peak)
    scale = math.ldexp(1.0, exponent - 1)
    while scale * peak > settings.HALF_HEADROOM:
        scale /= 2.0
    return scale


@dataclass
class HalfComplexBatch:
    """Split-complex binary16 batch: all real parts, then all imaginary parts."""

    count: int
    n: int
    npad: int
    scale: float
    storage: np.ndarray

    @classmethod
    def from_batch(cls, batch, scale: Optional[float] = None,
                   tile: int = settings.HALF_TILE) -> "HalfComplexBatch":
        stack = batch.views() if isinstance(batch, SmallMatBatch) else np.asarray(batch)
        count, n = stack.shape[0], stack.shape[1]
        if scale is None:
            scale = compute_scale(stack)
        npad = tile * math.ceil(n / tile)
        storage = np.zeros(2 * count * npad * npad, dtype=np.float16)
        out = cls(count, n, npad, float(scale), storage)
        out.real[:, :n, :n] = to_half(stack.real * scale)
        out.imag[:, :n, :n] = to_half(stack.imag * scale)
        return out

    @property
    def real(self) -> np.ndarray:
        half = self.count * self.npad * self.npad
        return self.storage[:half].reshape(self.count, self.npad, self.npad)

    @property
    def imag(self) -> np.ndarray:
        half = self.count * self.npad * self.npad
        return self.storage[half:].reshape(self.count, self.npad, self.npad)

    def take(self, indices) -> "HalfComplexBatch":
        """New batch holding the listed matrices, same scale and padding."""
        indices = np.asarray(indices, dtype=np.int64)
        storage = np.concatenate([self.real[indices].ravel(), self.imag[indices].ravel()])
        return HalfComplexBatch(len(indices), self.n, self.npad, self.scale, storage)

    def to_complex(self) -> np.ndarray:
        """Decoded (count, n, n) values with the scale removed."""
        n = self.n
        re = self.real[:, :n, :n].astype(np.float64)
        im = self.imag[:, :n, :n].astype(np.float64)
        return (re + 1j * im) / self.scale


def _round_mantissa(values: np.ndarray, bits: int = 11) -> np.ndarray:
    """Round to `bits` significant bits (nearest-even) keeping the exponent range of values."""
    mantissa, exponent = np.frexp(values)
    return np.ldexp(np.round(mantissa * (1 << bits)) / (1 << bits), exponent)


def _half_products(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sum over l of a[k,i,l]*b[k,l,j] with binary16 precision per product, accumulated in float64.

    Products are promoted before accumulation, so they are not clamped to the binary16 range.
    """
    prod = a.astype(np.float32)[:, :, :, None] * b.astype(np.float32)[:, None, :, :]
    return _round_mantissa(prod.astype(np.float64)).sum(axis=2)


def sbsmm_half(A: HalfComplexBatch, B: HalfComplexBatch, Cacc: SmallMatBatch,
               counter: Optional[KernelCounter] = None) -> SmallMatBatch:
    """Cacc[k] += A[k] @ B[k] from binary16 operands with float64 accumulation.

    A count of 1 on either operand is broadcast over the other batch.
    """
    count = max(A.count, B.count)
    if A.n != B.n or Cacc.n != A.n or Cacc.count != count or min(A.count, B.count) not in (1, count):
        raise DimensionMismatchError(
            f"cannot combine half batches ({A.count}, {A.n}) x ({B.count}, {B.n}) into ({Cacc.count}, {Cacc.n})"
        )
    n = A.n
    ar, ai = A.real[:, :n, :n], A.imag[:, :n, :n]
    br, bi = B.real[:, :n, :n], B.imag[:, :n, :n]
    re = _half_products(ar, br) - _half_products(ai, bi)
    im = _half_products(ar, bi) + _half_products(ai, br)
    Cacc.views()[...] += (re + 1j * im) / (A.scale * B.scale)
    if counter is not None:
        counter.record(count, n, products=4)
    return Cacc
