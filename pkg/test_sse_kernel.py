import numpy as np
import pytest

from core.device_model import SpectralGrid, generate_device
from core.errors import ConfigError, GridMisalignmentError
from core.rgf_solver import ElectronGFTensor, PhononGFTensor, gf_phase
from core.sse_kernel import (Coupling, FlopLedger, SelfEnergyTensors, compute_self_energies, naive_flop_count,
                             sse_mixed, sse_naive, sse_regrouped)

OTHER = {"lesser": "greater", "greater": "lesser"}


def _random_tensors(device, grid, seed=0):
    rng = np.random.default_rng(seed)
    st_ = device.structure
    cplx = lambda shape: rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    el_shape = (grid.nkz, grid.ne, st_.Na, st_.Norb, st_.Norb)
    ph_shape = (grid.nqz, grid.nomega, st_.Na, st_.Nb + 1, 3, 3)
    return (ElectronGFTensor(cplx(el_shape), cplx(el_shape)), PhononGFTensor(cplx(ph_shape), cplx(ph_shape)))


def _sigma_by_loops(G, D, coupling, grid):
    """Every (atom, bond, kz, qz, omega, E) term summed one at a time."""
    nkz, ne, na, norb, _ = G["lesser"].shape
    weight = -1j * grid.domega / (2.0 * np.pi * grid.nqz)
    out = {kind: np.zeros_like(G[kind]) for kind in G}
    dh = coupling.dh
    for a in range(na):
        for s, b in enumerate(coupling.neighbors[a]):
            rs = coupling.reverse[a, s]
            for kind in G:
                for q in range(grid.nqz):
                    for w, off in enumerate(grid.omega_offsets.astype(int)):
                        c_abs = D[kind][q, w, b, rs + 1] - D[kind][q, w, b, 0] - D[kind][q, w, a, 0] + D[kind][q, w, a, s + 1]
                        o = OTHER[kind]
                        c_emi = D[o][q, w, b, rs + 1] - D[o][q, w, b, 0] - D[o][q, w, a, 0] + D[o][q, w, a, s + 1]
                        for k in range(nkz):
                            for e in range(off, ne):
                                g = G[kind][grid.shifted_k(k, q, -1), e - off, b]
                                out[kind][k, e, a] += weight * np.einsum("ij,ixy,yz,jzw->xw", c_abs, dh[a, s], g, dh[b, rs])
                            for e in range(0, ne - off):
                                g = G[kind][grid.shifted_k(k, q, +1), e + off, b]
                                out[kind][k, e, a] += weight * np.einsum("ji,ixy,yz,jzw->xw", c_emi, dh[a, s], g, dh[b, rs])
    return out


def _pi_by_loops(G, coupling, grid):
    nkz, ne, na, _, _ = G["lesser"].shape
    weight = -1j * grid.dE / (2.0 * np.pi * grid.nkz)
    dh = coupling.dh
    partial = {}
    for a in range(na):
        for s, b in enumerate(coupling.neighbors[a]):
            rs = coupling.reverse[a, s]
            for kind in G:
                p = np.zeros((grid.nqz, grid.nomega, 3, 3), dtype=complex)
                for q in range(grid.nqz):
                    for w, off in enumerate(grid.omega_offsets.astype(int)):
                        for k in range(nkz):
                            for e in range(0, ne - off):
                                g_a = G[kind][grid.shifted_k(k, q, +1), e + off, a]
                                g_b = G[OTHER[kind]][k, e, b]
                                p[q, w] += np.einsum("ixy,yz,jzw,wx->ij", dh[b, rs], g_a, dh[a, s], g_b)
                partial[a, s, kind] = p
    out = {}
    for kind in G:
        pi = np.zeros((grid.nqz, grid.nomega, na, coupling.neighbors.shape[1] + 1, 3, 3), dtype=complex)
        for a in range(na):
            for s, b in enumerate(coupling.neighbors[a]):
                bond = weight * (partial[a, s, kind] + partial[b, coupling.reverse[a, s], kind])
                pi[:, :, a, s + 1] = -bond
                pi[:, :, a, 0] += bond
        out[kind] = pi
    return out


@pytest.fixture(scope="module", params=[0, 1, 2])
def loop_case(request):
    device = generate_device("chain", Na=4, Nb=2, Norb=2, bnum=2, seed=5)
    grid = SpectralGrid(nkz=2, nqz=2, ne=6, nomega=2).validate()
    electron, phonon = _random_tensors(device, grid, seed=request.param)
    coupling = Coupling.from_device(device)
    G = {"lesser": electron.lesser, "greater": electron.greater}
    D = {"lesser": phonon.lesser, "greater": phonon.greater}
    return dict(device=device, grid=grid, electron=electron, phonon=phonon, coupling=coupling,
                sigma=_sigma_by_loops(G, D, coupling, grid), pi=_pi_by_loops(G, coupling, grid))


def _close(got, want, rel):
    return np.max(np.abs(got - want)) <= rel * np.max(np.abs(want))


@pytest.mark.parametrize("kernel", [sse_naive, sse_regrouped])
def test_kernels_match_the_term_by_term_sum(loop_case, kernel):
    c = loop_case
    result = kernel(c["electron"], c["phonon"], c["coupling"], c["grid"])
    for kind in ("lesser", "greater"):
        assert _close(getattr(result, f"sigma_{kind}"), c["sigma"][kind], 1e-12)
        assert _close(getattr(result, f"pi_{kind}"), c["pi"][kind], 1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_naive_and_regrouped_agree(seed):
    # odd seeds use the four-neighbor ribbon
    kind, na, nb = ("ribbon", 12, 4) if seed % 2 else ("chain", 8, 2)
    device = generate_device(kind, Na=na, Nb=nb, Norb=2, bnum=2, seed=seed)
    grid = SpectralGrid(nkz=3, nqz=3, ne=12, nomega=3).validate()
    electron, phonon = _random_tensors(device, grid, seed=100 + seed)
    coupling = Coupling.from_device(device)
    naive = sse_naive(electron, phonon, coupling, grid)
    regrouped = sse_regrouped(electron, phonon, coupling, grid)
    for name in ("sigma_lesser", "sigma_greater", "pi_lesser", "pi_greater"):
        assert _close(getattr(regrouped, name), getattr(naive, name), 1e-12)


def test_threads_do_not_change_the_result(loop_case):
    c = loop_case
    one = sse_regrouped(c["electron"], c["phonon"], c["coupling"], c["grid"], threads=1)
    many = sse_regrouped(c["electron"], c["phonon"], c["coupling"], c["grid"], threads=3)
    assert np.array_equal(one.sigma_lesser, many.sigma_lesser)
    assert np.array_equal(one.pi_greater, many.pi_greater)


def test_pi_on_site_block_balances_the_bonds(loop_case):
    c = loop_case
    pi = sse_regrouped(c["electron"], c["phonon"], c["coupling"], c["grid"]).pi_lesser
    assert np.allclose(pi[..., 0, :, :], -pi[..., 1:, :, :].sum(axis=-3), atol=1e-12)


def test_naive_ledger_matches_the_closed_form(loop_case):
    c = loop_case
    ledger = FlopLedger()
    sse_naive(c["electron"], c["phonon"], c["coupling"], c["grid"], ledger=ledger)
    st_ = c["device"].structure
    expected = naive_flop_count(c["grid"], st_.Na, st_.Nb, st_.Norb, 3)
    assert ledger.sigma_flops == expected["sigma"]
    assert ledger.pi_flops == expected["pi"]
    assert ledger.variant == "naive"


@pytest.mark.parametrize("nkz,ne,nomega,expected,limit", [
    (1, 16, 1, 1.0, 1.0),
    (3, 64, 4, 1476 / 801, 24 / 13),
    (3, 140, 70, 43890 / 22084, 420 / 211),
])
def test_regrouping_saves_sigma_flops(nkz, ne, nomega, expected, limit):
    device = generate_device("chain", Na=4, Nb=2, Norb=1, bnum=2, seed=1)
    grid = SpectralGrid(nkz=nkz, nqz=nkz, ne=ne, nomega=nomega).validate()
    electron, phonon = _random_tensors(device, grid)
    coupling = Coupling.from_device(device)
    naive, regrouped = FlopLedger(), FlopLedger()
    sse_naive(electron, phonon, coupling, grid, ledger=naive)
    sse_regrouped(electron, phonon, coupling, grid, ledger=regrouped)
    ratio = naive.sigma_flops / regrouped.sigma_flops
    assert ratio == pytest.approx(expected, rel=1e-12)
    # 2 Nqz Nw / (Nqz Nw + 1) when the transient is reused over every (qz, omega)
    assert ratio == pytest.approx(limit, rel=0.01)


@pytest.fixture(scope="module")
def physical(chain_device):
    grid = SpectralGrid(nkz=1, nqz=1, ne=10, nomega=2).validate()
    gf = gf_phase(chain_device, grid)
    coupling = Coupling.from_device(chain_device)
    reference = sse_regrouped(gf.electron, gf.phonon, coupling, grid)
    return dict(grid=grid, gf=gf, coupling=coupling, reference=reference)


def test_mixed_precision_stays_close(physical):
    p = physical
    mixed = sse_mixed(p["gf"].electron, p["gf"].phonon, p["coupling"], p["grid"])
    assert mixed.sigma_relative_error(p["reference"]) <= 1e-2
    # Pi is never computed in half precision
    assert np.array_equal(mixed.pi_lesser, p["reference"].pi_lesser)


def test_scaling_matters_for_small_magnitudes(physical):
    p = physical
    tiny = ElectronGFTensor(p["gf"].electron.lesser * 1e-5, p["gf"].electron.greater * 1e-5)
    args = (tiny, p["gf"].phonon, p["coupling"], p["grid"])
    reference = sse_regrouped(*args)
    scaled = sse_mixed(*args).sigma_relative_error(reference)
    unscaled = sse_mixed(*args, scaling=False).sigma_relative_error(reference)
    assert scaled <= 1e-2
    assert unscaled > scaled


def test_lesser_sigma_is_anti_hermitian(physical):
    sigma = physical["reference"].sigma_lesser
    scale = np.max(np.abs(sigma))
    assert scale > 0.0
    assert np.max(np.abs(sigma + np.conj(np.swapaxes(sigma, -1, -2)))) < 1e-8 * scale


def test_misaligned_grid_is_rejected(physical):
    p = physical
    wrong = SpectralGrid(nkz=1, nqz=1, ne=12, nomega=2)
    with pytest.raises(GridMisalignmentError):
        sse_regrouped(p["gf"].electron, p["gf"].phonon, p["coupling"], wrong)


def test_unknown_variant(physical):
    p = physical
    with pytest.raises(ConfigError):
        compute_self_energies("fast", p["gf"].electron, p["gf"].phonon, p["coupling"], p["grid"])


def test_mixing_with_previous_self_energies():
    ones = SelfEnergyTensors(*(np.ones((2, 2)) for _ in range(4)))
    threes = SelfEnergyTensors(*(3.0 * np.ones((2, 2)) for _ in range(4)))
    first = threes.mixed_with(None, 0.5)
    assert np.allclose(first.sigma_lesser, 1.5)
    later = threes.mixed_with(ones, 0.25)
    assert np.allclose(later.pi_greater, 1.5)
