import numpy as np
import pytest

from core.errors import BoundaryConvergenceError, ConfigError
from core.linalg import OpCounter
from core.open_boundary import bose, boundary_selfenergies, fermi, surface_gf

ONE = np.ones((1, 1))
ZERO = np.zeros((1, 1))


def test_chain_surface_outside_the_band():
    z = -100.0 + 1e-6j
    surf = surface_gf(ZERO, ONE, z=z)
    expected = (z.real + np.sqrt(z.real ** 2 - 4.0)) / 2.0
    assert surf.g[0, 0].real == pytest.approx(expected, rel=1e-6)
    assert abs(surf.g[0, 0]) < 1.0
    assert surf.iterations < 10
    assert surf.residual < 1e-10


def test_chain_surface_inside_the_band_is_retarded():
    surf = surface_gf(ZERO, ONE, z=0.5 + 1e-4j)
    expected = (0.5 - 1j * np.sqrt(3.75)) / 2.0
    assert surf.g[0, 0].imag < 0.0
    assert surf.g[0, 0] == pytest.approx(expected, abs=1e-3)


def test_surface_block_ops_follow_the_step_count():
    surf = surface_gf(ZERO, ONE, z=-3.0 + 1e-6j)
    assert surf.block_ops == 7 * surf.iterations + 1


def test_non_positive_broadening_is_rejected():
    with pytest.raises(ConfigError):
        surface_gf(ZERO, ONE, z=0.5)
    with pytest.raises(ConfigError):
        surface_gf(ZERO, ONE, z=0.5 - 1e-3j)


def test_decimation_cap_raises_convergence_error():
    with pytest.raises(BoundaryConvergenceError):
        surface_gf(ZERO, ONE, z=0.5 + 1e-6j, max_iter=1)


def test_occupations():
    assert fermi(0.3, 0.3) == pytest.approx(0.5)
    assert fermi(-1.0, 0.0) == pytest.approx(1.0)
    assert np.all(bose(np.array([0.01, 0.05])) > 0.0)


def _min_eig(blocks):
    flat = blocks.reshape(-1, blocks.shape[-2], blocks.shape[-1])
    return min(float(np.min(np.linalg.eigvalsh(b))) for b in flat)


def test_electron_boundary_table(chain_device, small_grid):
    counter = OpCounter()
    table = boundary_selfenergies(chain_device, small_grid, "electron", counter=counter)
    dim = chain_device.operators.h0.blockdim
    assert table.retarded.shape == (2, small_grid.nkz, small_grid.ne, dim, dim)
    assert counter["boundary_solves"] == 2 * small_grid.nkz * small_grid.ne
    assert _min_eig(table.broadening) > -1e-10
    # lesser = i * PSD, greater = -i * PSD
    assert _min_eig(-1j * table.lesser) > -1e-10
    assert _min_eig(1j * table.greater) > -1e-10
    assert np.allclose(table.greater - table.lesser, table.retarded - np.conj(np.swapaxes(table.retarded, -1, -2)))


def test_phonon_boundary_table(chain_device, small_grid):
    table = boundary_selfenergies(chain_device, small_grid, "phonon")
    assert table.retarded.shape[:3] == (2, small_grid.nqz, small_grid.nomega)
    assert _min_eig(1j * table.lesser) > -1e-10
    assert np.allclose(table.occupancy[0], bose(small_grid.frequencies))


def test_threaded_table_matches_serial(chain_device, small_grid):
    serial = boundary_selfenergies(chain_device, small_grid, "electron", threads=1)
    threaded = boundary_selfenergies(chain_device, small_grid, "electron", threads=3)
    assert np.array_equal(serial.retarded, threaded.retarded)


def test_unknown_carrier(chain_device, small_grid):
    with pytest.raises(ConfigError):
        boundary_selfenergies(chain_device, small_grid, "photon")
