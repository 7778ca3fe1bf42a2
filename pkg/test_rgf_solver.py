import numpy as np
import pytest

from core.device_model import SpectralGrid, generate_device
from core.errors import DimensionMismatchError, MissingBondBlocksError, PointFailures, SingularBlockError
from core.linalg import BlockTriMatrix, OpCounter
from core.rgf_solver import CACHE_MODES, gf_phase, observables, rgf_point
from core.scf_driver import ScfConfig, run_scf


def _band(bnum, m):
    idx = np.arange(bnum * m) // m
    return np.abs(np.subtract.outer(idx, idx)) <= 1


def _random_system(rng, bnum, m, offdiag_sigma):
    n = bnum * m
    mask = _band(bnum, m)
    noise = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) * mask
    A = noise + 4.0 * n ** 0.5 * np.eye(n)
    sigmas = []
    for _ in range(2):
        M = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n)))
        M = M * (mask if offdiag_sigma else np.kron(np.eye(bnum), np.ones((m, m))))
        sigmas.append(1j * (M + M.conj().T))
    return A, sigmas


def _retarded_system(rng, bnum, m, eta, offdiag_sigma):
    """(E + i eta) I - H for a random banded Hermitian H; every Schur complement stays invertible."""
    n = bnum * m
    mask = _band(bnum, m)
    noise = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) * mask
    H = 0.5 * (noise + noise.conj().T)
    A = (rng.uniform(-1.0, 1.0) + 1j * eta) * np.eye(n) - H
    sigmas = []
    for _ in range(2):
        M = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n)))
        M = M * (mask if offdiag_sigma else np.kron(np.eye(bnum), np.ones((m, m))))
        sigmas.append(1j * (M + M.conj().T))
    return A, sigmas


def _lower_bonds(dense, bnum, m):
    return [dense[(i + 1) * m:(i + 2) * m, i * m:(i + 1) * m] for i in range(bnum - 1)]


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("m", [4, 8, 16])
@pytest.mark.parametrize("bnum", [1, 2, 4, 8])
def test_rgf_matches_dense_inverse(bnum, m, seed):
    rng = np.random.default_rng(1000 * bnum + 10 * m + seed)
    # odd seeds carry off-diagonal lesser/greater blocks
    A, (sl, sg) = _retarded_system(rng, bnum, m, eta=0.5, offdiag_sigma=bool(seed % 2))
    res = rgf_point(BlockTriMatrix.from_dense(A, bnum), BlockTriMatrix.from_dense(sl, bnum),
                    BlockTriMatrix.from_dense(sg, bnum))
    gr = np.linalg.inv(A)
    gl, gg = gr @ sl @ gr.conj().T, gr @ sg @ gr.conj().T
    for full, diag, bonds in ((gr, res.retarded, res.retarded_bond), (gl, res.lesser, res.lesser_bond),
                              (gg, res.greater, res.greater_bond)):
        tol = 1e-11 * np.max(np.abs(full))
        want = BlockTriMatrix.from_dense(full * _band(bnum, m), bnum)
        assert len(diag) == bnum and len(bonds) == bnum - 1
        for got, exp in zip(diag, want.diag):
            assert np.max(np.abs(got - exp)) <= tol
        for got, exp in zip(bonds, _lower_bonds(full, bnum, m)):
            assert np.max(np.abs(got - exp)) <= tol


def test_identity_system():
    eye = np.eye(6, dtype=complex)
    A = BlockTriMatrix.from_dense(eye, 3)
    sigma = BlockTriMatrix.from_dense(1j * eye, 3)
    res = rgf_point(A, sigma, sigma)
    for blk in res.lesser:
        assert np.allclose(blk, 1j * np.eye(2))
    for blk in res.retarded_bond:
        assert np.allclose(blk, 0.0)


@pytest.mark.parametrize("bnum", [1, 2, 4, 9])
def test_block_op_count(bnum):
    rng = np.random.default_rng(bnum)
    A, (sl, sg) = _random_system(rng, bnum, 2, offdiag_sigma=False)
    counter = OpCounter()
    res = rgf_point(BlockTriMatrix.from_dense(A, bnum), BlockTriMatrix.from_dense(sl, bnum),
                    BlockTriMatrix.from_dense(sg, bnum), counter=counter)
    assert res.block_ops == 5 + 25 * (bnum - 1)
    assert counter["rgf_block_ops"] == res.block_ops
    assert counter["rgf_flops"] == 8 * res.block_ops * 2 ** 3
    if bnum > 1:
        assert res.block_ops == pytest.approx(26 * bnum - 25, rel=0.15)


def test_offdiagonal_sigma_costs_extra_ops():
    rng = np.random.default_rng(11)
    A, (sl, sg) = _random_system(rng, 4, 2, offdiag_sigma=True)
    res = rgf_point(BlockTriMatrix.from_dense(A, 4), BlockTriMatrix.from_dense(sl, 4),
                    BlockTriMatrix.from_dense(sg, 4))
    assert res.block_ops == 5 + 25 * 3 + 8 * 3


def test_mismatched_sigma_is_rejected():
    A = BlockTriMatrix.from_dense(np.eye(6, dtype=complex), 3)
    sigma = BlockTriMatrix.from_dense(np.zeros((6, 6), dtype=complex), 2)
    with pytest.raises(DimensionMismatchError):
        rgf_point(A, sigma, sigma)


def test_singular_pivot_reports_the_block():
    dense = np.eye(6, dtype=complex)
    dense[0:2, 0:2] = 0.0
    A = BlockTriMatrix.from_dense(dense, 3)
    zero = BlockTriMatrix.zeros_like(A)
    with pytest.raises(SingularBlockError) as err:
        rgf_point(A, zero, zero, point=("electron", 0, 4))
    assert err.value.block_index == 0


def test_ballistic_current_is_conserved(chain_device, small_grid):
    gf = gf_phase(chain_device, small_grid)
    obs = observables(gf.electron, gf.phonon, chain_device, small_grid)
    assert abs(obs.drain_current) > 0.0
    assert obs.current_residual < 1e-8
    assert obs.spectral_current.shape == (chain_device.structure.bnum - 1, small_grid.ne)


def test_ballistic_contacts_balance(chain_device):
    grid = SpectralGrid(nkz=3, nqz=3, ne=32, nomega=4).validate()
    gf = gf_phase(chain_device, grid)
    obs = observables(gf.electron, gf.phonon, chain_device, grid)
    assert gf.electron.contact_inflow.shape == (3, 32, 2)
    assert gf.phonon.contact_inflow.shape == (3, 4, 2)
    assert obs.contact_current_residual < 1e-8
    assert np.abs(obs.contact_current) == pytest.approx(np.full(2, abs(obs.drain_current)), rel=1e-6)
    assert obs.energy_conservation_residual < 1e-8
    # both leads share one temperature, so no net heat enters the lattice
    assert obs.dissipated_power == pytest.approx(0.0, abs=1e-10 * abs(obs.contact_electron_energy_current[0]))


def test_spectral_identity_without_device_broadening(chain_device, small_grid):
    el = gf_phase(chain_device, small_grid).electron
    spectral = el.retarded - np.conj(np.swapaxes(el.retarded, -1, -2))
    scale = np.max(np.abs(spectral))
    assert np.max(np.abs((el.greater - el.lesser) - spectral)) < 1e-8 * scale


def test_phonon_tensor_layout(ribbon_device, small_grid):
    ph = gf_phase(ribbon_device, small_grid).phonon
    st_ = ribbon_device.structure
    assert ph.lesser.shape == (small_grid.nqz, small_grid.nomega, st_.Na, st_.Nb + 1, 3, 3)
    # D^< is anti-Hermitian, so the on-site blocks are too
    onsite = ph.lesser[..., 0, :, :]
    scale = np.max(np.abs(onsite))
    assert scale > 0.0
    assert np.max(np.abs(onsite + np.conj(np.swapaxes(onsite, -1, -2)))) < 1e-8 * scale


def test_cache_modes_agree_and_save_work(chain_device, small_grid):
    results, work = {}, {}
    for mode in CACHE_MODES:
        counter = OpCounter()
        config = ScfConfig(max_iter=3, tol=1e-12, cache_mode=mode)
        results[mode] = run_scf(chain_device, small_grid, config, counter=counter)
        work[mode] = counter["boundary_solves"] + counter["specializations"]
    ref = results["no_cache"]
    for mode in CACHE_MODES[1:]:
        assert np.array_equal(results[mode].electron.lesser, ref.electron.lesser)
        assert np.array_equal(results[mode].trace.currents, ref.trace.currents)
    assert work["no_cache"] > work["cache_bc"] > work["cache_bc_spec"]


def test_single_block_device_has_no_bond_current(small_grid):
    device = generate_device("chain", Na=4, Nb=2, Norb=1, bnum=1, seed=0, Vds=0.1)
    gf = gf_phase(device, small_grid)
    assert gf.electron.lesser_bond is None
    with pytest.raises(MissingBondBlocksError):
        observables(gf.electron, gf.phonon, device, small_grid)


def test_point_failures_are_collected(chain_device, small_grid, monkeypatch):
    import core.rgf_solver as rgf

    def broken(block, index, point):
        raise SingularBlockError(index, point)

    monkeypatch.setattr(rgf, "_invert", broken)
    with pytest.raises(PointFailures):
        gf_phase(chain_device, small_grid, cache_mode="no_cache", threads=2)
