import numpy as np
import pytest
from hypothesis import given, strategies as st

from config import settings
from core.errors import DimensionMismatchError, MissingSparseEncodingError
from core.linalg import (STRATEGIES, BlockTriMatrix, HalfComplexBatch, KernelCounter, OpCounter, SmallMatBatch,
                         SparseBlock, compute_scale, sbsmm, sbsmm_half, to_half, triple_product)


def _random_complex(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def _tridiagonal(rng, bnum, m):
    dense = _random_complex(rng, (bnum * m, bnum * m))
    band = np.abs(np.subtract.outer(np.arange(bnum * m) // m, np.arange(bnum * m) // m)) <= 1
    return dense * band


def test_block_tridiagonal_round_trip():
    rng = np.random.default_rng(0)
    dense = _tridiagonal(rng, 4, 3)
    tri = BlockTriMatrix.from_dense(dense, 4)
    assert tri.bnum == 4 and tri.blockdim == 3
    assert np.array_equal(tri.to_dense(), dense)


def test_block_counts_must_match():
    blk = np.zeros((2, 2))
    with pytest.raises(DimensionMismatchError):
        BlockTriMatrix(diag=[blk, blk], upper=[], lower=[blk])
    with pytest.raises(DimensionMismatchError):
        BlockTriMatrix(diag=[blk, np.zeros((3, 3))], upper=[blk], lower=[blk])


def test_hermiticity_deviation_locates_the_block():
    rng = np.random.default_rng(1)
    dense = _tridiagonal(rng, 3, 2)
    herm = BlockTriMatrix.from_dense(dense + dense.conj().T, 3)
    assert herm.is_hermitian(1e-14)
    herm.lower[1] = herm.lower[1] + 0.25
    deviation, block = herm.hermiticity_deviation()
    assert deviation == pytest.approx(0.25)
    assert block == (2, 1)


def test_adjoint_matches_dense_conjugate_transpose():
    rng = np.random.default_rng(2)
    tri = BlockTriMatrix.from_dense(_tridiagonal(rng, 3, 2), 3)
    assert np.array_equal(tri.adjoint().to_dense(), tri.to_dense().conj().T)


def _sparse_block(rng, n, density=0.2):
    block = _random_complex(rng, (n, n)) * (rng.random((n, n)) < density)
    return SparseBlock.from_dense(block)


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_triple_product_strategies_agree_with_dense(strategy):
    rng = np.random.default_rng(3)
    F, E = _sparse_block(rng, 24), _sparse_block(rng, 24)
    gR = _random_complex(rng, (24, 24))
    expected = F.dense @ gR @ E.dense
    counter = OpCounter()
    assert np.allclose(triple_product(F, gR, E, strategy, counter), expected)
    assert counter[strategy] > 0


def test_sparse_strategies_do_less_work_than_dense():
    rng = np.random.default_rng(4)
    F, E = _sparse_block(rng, 32, 0.05), _sparse_block(rng, 32, 0.05)
    gR = _random_complex(rng, (32, 32))
    counter = OpCounter()
    for strategy in STRATEGIES:
        triple_product(F, gR, E, strategy, counter)
    assert counter["sparse_both_sides"] < counter["dense_dense"]
    assert counter["sparse_left_then_right"] == counter["sparse_both_sides"]
    assert counter["transposed_entries"] == E.nnz


def test_sparse_strategy_needs_the_column_encoding():
    rng = np.random.default_rng(5)
    F = _sparse_block(rng, 8)
    E = SparseBlock.from_dense(F.dense, row=True, col=False)
    gR = _random_complex(rng, (8, 8))
    with pytest.raises(MissingSparseEncodingError):
        triple_product(F, gR, E, "sparse_both_sides")
    with pytest.raises(MissingSparseEncodingError):
        triple_product(F.dense, gR, E, "sparse_left_then_right")


def test_triple_product_rejects_mismatched_shapes():
    with pytest.raises(DimensionMismatchError):
        triple_product(np.ones((2, 3)), np.ones((2, 2)), np.ones((2, 2)))


@given(count=st.integers(1, 12), n=st.integers(1, 6), pad=st.integers(0, 5))
def test_sbsmm_matches_per_matrix_products(count, n, pad):
    rng = np.random.default_rng(count * 31 + n)
    a, b = _random_complex(rng, (count, n, n)), _random_complex(rng, (count, n, n))
    A = SmallMatBatch.from_stack(a, stride=n * n + pad)
    B = SmallMatBatch.from_stack(b)
    C = SmallMatBatch.zeros(count, n, stride=n * n + pad)
    sbsmm(A, B, C)
    for k in range(count):
        assert np.allclose(C.views()[k], a[k] @ b[k])
    sbsmm(A, B, C, accumulate=True)
    assert np.allclose(C.to_stack(), 2 * np.matmul(a, b))


def test_sbsmm_rejects_mismatched_batches():
    with pytest.raises(DimensionMismatchError):
        sbsmm(SmallMatBatch.zeros(3, 2), SmallMatBatch.zeros(2, 2), SmallMatBatch.zeros(3, 2))
    with pytest.raises(DimensionMismatchError):
        SmallMatBatch(count=2, n=3, stride=4, storage=np.zeros(8, dtype=complex))


def test_kernel_counter_reports_tile_padding():
    counter = KernelCounter()
    counter.record(count=10, n=12)
    assert counter.macs == 10 * 12 ** 3
    assert counter.useful_ratio == pytest.approx(12 ** 3 / 16 ** 3)


def test_scale_is_a_power_of_two_within_headroom():
    values = np.array([3.0e-4 + 2.0e-5j, -7.5e-3j])
    scale = compute_scale(values)
    mantissa, _ = np.frexp(scale)
    assert mantissa == 0.5
    peak = 7.5e-3
    assert scale * peak <= settings.HALF_HEADROOM < 2 * scale * peak
    assert compute_scale(np.zeros(4)) == 1.0


@pytest.mark.parametrize("value,expected", [(1 + 1j, 512.0), (1.0, 1024.0), (-3j, 256.0), (600 + 800j, 1.0)])
def test_scale_uses_the_complex_modulus(value, expected):
    assert compute_scale(np.array([value])) == expected
    assert expected * abs(value) <= settings.HALF_HEADROOM


def test_to_half_clamps_out_of_range_values():
    assert float(to_half(np.array([1.0e6]))[0]) == settings.HALF_MAX


def test_half_batch_keeps_split_complex_layout():
    rng = np.random.default_rng(6)
    stack = _random_complex(rng, (3, 5, 5)) * 1e-4
    half = HalfComplexBatch.from_batch(stack)
    assert half.npad == settings.HALF_TILE
    assert half.storage.dtype == np.float16
    assert np.all(half.real[:, 5:, :] == 0) and np.all(half.imag[:, :, 5:] == 0)
    assert np.allclose(half.to_complex(), stack, rtol=0, atol=1e-3 * np.max(np.abs(stack)))
    picked = half.take([2, 0])
    assert np.array_equal(picked.to_complex(), half.to_complex()[[2, 0]])


def test_half_products_track_double_precision():
    rng = np.random.default_rng(7)
    a, b = _random_complex(rng, (6, 4, 4)) * 1e-3, _random_complex(rng, (1, 4, 4)) * 50.0
    acc = SmallMatBatch.zeros(6, 4)
    sbsmm_half(HalfComplexBatch.from_batch(a), HalfComplexBatch.from_batch(b), acc)
    exact = np.matmul(a, b)
    assert np.max(np.abs(acc.to_stack() - exact)) <= 1e-2 * np.max(np.abs(exact))


def test_unscaled_half_products_lose_small_values():
    rng = np.random.default_rng(8)
    a, b = _random_complex(rng, (4, 3, 3)) * 1e-8, _random_complex(rng, (4, 3, 3)) * 1e-8
    exact = np.matmul(a, b)
    scaled = SmallMatBatch.zeros(4, 3)
    sbsmm_half(HalfComplexBatch.from_batch(a), HalfComplexBatch.from_batch(b), scaled)
    raw = SmallMatBatch.zeros(4, 3)
    sbsmm_half(HalfComplexBatch.from_batch(a, scale=1.0), HalfComplexBatch.from_batch(b, scale=1.0), raw)
    err = lambda got: np.max(np.abs(got.to_stack() - exact)) / np.max(np.abs(exact))
    assert err(scaled) < 1e-2
    assert err(raw) > 0.5


def test_identity_half_product_is_exact():
    eye = np.broadcast_to(np.eye(5, dtype=complex), (3, 5, 5))
    acc = SmallMatBatch.zeros(3, 5)
    counter = KernelCounter()
    sbsmm_half(HalfComplexBatch.from_batch(eye), HalfComplexBatch.from_batch(eye), acc, counter)
    assert np.array_equal(acc.to_stack(), eye)
    assert counter.macs == 4 * 3 * 5 ** 3
