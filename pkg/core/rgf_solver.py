import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import scipy.linalg

from config import settings
from core.device_model import Device, SpectralGrid
from core.errors import (ConfigError, DimensionMismatchError, MissingBondBlocksError, PointFailures,
                         SingularBlockError)
from core.linalg import BlockTriMatrix, OpCounter
from core.open_boundary import BoundaryTable, boundary_selfenergies
from core.workers import map_points

logger = logging.getLogger(__name__)

CACHE_MODES = ("no_cache", "cache_bc", "cache_bc_spec")


@dataclass
class RGFResult:
    """Diagonal blocks and lower bond blocks (n+1, n) of G^R, G^< and G^>."""

    retarded: list
    lesser: list
    greater: list
    retarded_bond: list
    lesser_bond: list
    greater_bond: list
    block_ops: int


def _h(x: np.ndarray) -> np.ndarray:
    return x.conj().T


def _has_offdiag(m: BlockTriMatrix) -> bool:
    return any(np.any(b) for b in m.upper) or any(np.any(b) for b in m.lower)


def _invert(block: np.ndarray, index: int, point) -> np.ndarray:
    try:
        inv = scipy.linalg.inv(block, check_finite=False)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise SingularBlockError(index, point) from e
    if not np.all(np.isfinite(inv)):
        raise SingularBlockError(index, point)
    return inv


def rgf_point(A: BlockTriMatrix, sigma_lesser: BlockTriMatrix, sigma_greater: BlockTriMatrix,
              counter: Optional[OpCounter] = None, point=None) -> RGFResult:
    """
    Solve A G^R = I and G^<> = G^R Sigma^<> G^A for the blocks transport needs.
    Sigma^<> must be anti-Hermitian; off-diagonal blocks are allowed.
    Args:
        A (BlockTriMatrix): z*S - H - Sigma^R with the boundary blocks folded in
        sigma_lesser, sigma_greater (BlockTriMatrix): total lesser/greater self-energy
        counter (OpCounter): receives 'rgf_block_ops' and 'rgf_flops' (8 n^3 per block op)
        point: coordinates reported with a singular pivot
    Returns:
        RGFResult: diagonal and lower bond blocks
    """
    for name, s in (("sigma_lesser", sigma_lesser), ("sigma_greater", sigma_greater)):
        if s.bnum != A.bnum or s.blockdim != A.blockdim:
            raise DimensionMismatchError(
                f"{name} has {s.bnum} blocks of {s.blockdim}, A has {A.bnum} of {A.blockdim}"
            )
    b, n = A.bnum, A.blockdim
    offdiag = _has_offdiag(sigma_lesser) or _has_offdiag(sigma_greater)
    sigmas = (sigma_lesser, sigma_greater)

    # forward pass: left-connected blocks
    xr = [None] * b
    xk = ([None] * b, [None] * b)
    ar = [None] * (b - 1)
    xr[0] = _invert(A.diag[0], 0, point)
    ops = 1
    for x, s in zip(xk, sigmas):
        x[0] = xr[0] @ s.diag[0] @ _h(xr[0])
        ops += 2
    for j in range(1, b):
        i = j - 1
        a_ji, a_ij = A.lower[i], A.upper[i]
        ar[i] = a_ji @ xr[i]
        xr[j] = _invert(A.diag[j] - ar[i] @ a_ij, j, point)
        ops += 3
        for x, s in zip(xk, sigmas):
            inner = s.diag[j] + a_ji @ x[i] @ _h(a_ji)
            ops += 2
            if offdiag:
                z = ar[i] @ s.upper[i]
                inner = inner - z + _h(z)
                ops += 1
            x[j] = xr[j] @ inner @ _h(xr[j])
            ops += 2

    # backward pass
    gr = list(xr)
    gk = (list(xk[0]), list(xk[1]))
    gr_bond = [None] * (b - 1)
    gk_bond = ([None] * (b - 1), [None] * (b - 1))
    for i in range(b - 2, -1, -1):
        j = i + 1
        a_ji = A.lower[i]
        p = xr[i] @ A.upper[i]
        w = p @ gr[j]
        gr_bond[i] = -gr[j] @ ar[i]
        gr_i = xr[i] + w @ ar[i]
        ops += 4
        for x, g, bond, s in zip(xk, gk, gk_bond, sigmas):
            ax = a_ji @ x[i]
            t1 = w @ ax
            xp = g[j] @ _h(p)
            g_i = x[i] + p @ xp + t1 - _h(t1)
            bond_i = -xp - gr[j] @ ax
            ops += 5
            if offdiag:
                sx = s.lower[i] @ _h(xr[i])
                y = w @ sx
                g_i = g_i - y + _h(y)
                bond_i = bond_i + gr[j] @ sx
                ops += 3
            g[i] = g_i
            bond[i] = bond_i
        gr[i] = gr_i

    if counter is not None:
        counter.add("rgf_block_ops", ops)
        counter.add("rgf_flops", 8 * ops * n ** 3)
    return RGFResult(
        retarded=gr, lesser=gk[0], greater=gk[1],
        retarded_bond=gr_bond, lesser_bond=gk_bond[0], greater_bond=gk_bond[1],
        block_ops=ops,
    )


@dataclass
class ElectronGFTensor:
    """G^<, G^> (and G^R) per atom, indexed [kz, E, atom, orb, orb]; bonds [kz, E, n, row, col].

    contact_inflow[kz, E, side] is the flow in from the left (0) and right (1) lead.
    """

    lesser: np.ndarray
    greater: np.ndarray
    retarded: Optional[np.ndarray] = None
    lesser_bond: Optional[np.ndarray] = None
    greater_bond: Optional[np.ndarray] = None
    contact_inflow: Optional[np.ndarray] = None

    @classmethod
    def zeros(cls, nkz: int, ne: int, na: int, norb: int) -> "ElectronGFTensor":
        shape = (nkz, ne, na, norb, norb)
        return cls(np.zeros(shape, dtype=complex), np.zeros(shape, dtype=complex))


@dataclass
class PhononGFTensor:
    """D^<, D^> per atom pair, indexed [qz, omega, atom, slot, dir, dir]; slot 0 is the atom itself."""

    lesser: np.ndarray
    greater: np.ndarray
    lesser_bond: Optional[np.ndarray] = None
    contact_inflow: Optional[np.ndarray] = None

    @classmethod
    def zeros(cls, nqz: int, nomega: int, na: int, nb: int, n3d: int = settings.N3D) -> "PhononGFTensor":
        shape = (nqz, nomega, na, nb + 1, n3d, n3d)
        return cls(np.zeros(shape, dtype=complex), np.zeros(shape, dtype=complex))


@dataclass
class GFCache:
    """Boundary tables and specialized system matrices kept between GF phases."""

    boundary: Dict[str, BoundaryTable] = field(default_factory=dict)
    systems: Dict[Tuple[str, int, int], BlockTriMatrix] = field(default_factory=dict)


@dataclass
class GFPhaseResult:
    electron: ElectronGFTensor
    phonon: PhononGFTensor
    counters: dict


# --- atom <-> block bookkeeping ---

def _atom_diagonal(block: np.ndarray, per_block: int, dim: int) -> np.ndarray:
    """(per_block, dim, dim) diagonal atom blocks of one device block."""
    blk = block.reshape(per_block, dim, per_block, dim).transpose(0, 2, 1, 3)
    idx = np.arange(per_block)
    return blk[idx, idx]


def _pair_dense(pairs: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    """Scatter per-pair blocks [atom, slot, d, d] into one dense matrix."""
    na, _, d, _ = pairs.shape
    dense = np.zeros((na, d, na, d), dtype=complex)
    atoms = np.arange(na)
    dense[atoms, :, atoms, :] += pairs[:, 0]
    for s in range(neighbors.shape[1]):
        dense[atoms, :, neighbors[:, s], :] += pairs[:, s + 1]
    return dense.reshape(na * d, na * d)


def _pair_blocks(diag: list, lower: list, neighbors: np.ndarray, per_block: int, d: int) -> np.ndarray:
    """Gather [atom, slot, d, d] from diagonal and lower bond blocks of an anti-Hermitian operator."""
    na, nb = neighbors.shape
    out = np.zeros((na, nb + 1, d, d), dtype=complex)

    def local(x):
        return slice((x % per_block) * d, (x % per_block + 1) * d)

    for x in range(na):
        bx = x // per_block
        out[x, 0] = diag[bx][local(x), local(x)]
        for s, y in enumerate(neighbors[x]):
            by = y // per_block
            if by == bx:
                out[x, s + 1] = diag[bx][local(x), local(y)]
            elif bx == by + 1:
                out[x, s + 1] = lower[by][local(x), local(y)]
            else:
                out[x, s + 1] = -_h(lower[bx][local(y), local(x)])
    return out


def _block_diagonal(per_atom: np.ndarray, bnum: int) -> BlockTriMatrix:
    per_block = per_atom.shape[0] // bnum
    diag = [scipy.linalg.block_diag(*per_atom[n * per_block:(n + 1) * per_block]) for n in range(bnum)]
    zero = np.zeros_like(diag[0])
    return BlockTriMatrix(diag=diag, upper=[zero] * (bnum - 1), lower=[zero] * (bnum - 1))


def _add_boundary(m: BlockTriMatrix, left: np.ndarray, right: np.ndarray, coeff: float = 1.0) -> BlockTriMatrix:
    diag = list(m.diag)
    diag[0] = diag[0] + coeff * left
    diag[-1] = diag[-1] + coeff * right
    return BlockTriMatrix(diag=diag, upper=list(m.upper), lower=list(m.lower))


def retarded_from(lesser: np.ndarray, greater: np.ndarray) -> np.ndarray:
    """Anti-Hermitian retarded part (S^> - S^<)/2; the principal-value part is left out."""
    return 0.5 * (greater - lesser)


def _contact_inflow(table: BoundaryTable, m: int, p: int, res: RGFResult) -> np.ndarray:
    """Re Tr[S_B^< G^> - S_B^> G^<] on the first and last block: inflow from the left and right lead."""
    inflow = np.empty(2)
    for side, n in ((0, 0), (1, -1)):
        into = np.einsum("ij,ji->", table.lesser[side, m, p], res.greater[n])
        out = np.einsum("ij,ji->", table.greater[side, m, p], res.lesser[n])
        inflow[side] = (into - out).real
    return inflow


# --- GF phase ---

def _boundary(device: Device, grid: SpectralGrid, carrier: str, cache_mode: str, cache: GFCache,
              threads: int, counter: OpCounter) -> BoundaryTable:
    if cache_mode != "no_cache" and carrier in cache.boundary:
        return cache.boundary[carrier]
    table = boundary_selfenergies(device, grid, carrier, threads=threads, counter=counter)
    if cache_mode != "no_cache":
        cache.boundary[carrier] = table
    return table


def gf_phase(device: Device, grid: SpectralGrid, selfenergies=None, cache_mode: str = "cache_bc_spec",
             cache: Optional[GFCache] = None, threads: int = 1,
             counter: Optional[OpCounter] = None) -> GFPhaseResult:
    """
    Solve every electron (kz, E) and phonon (qz, omega) point by RGF.
    Args:
        selfenergies: scattering Sigma/Pi tensors from the previous SSE phase, or None
        cache_mode (str): no_cache, cache_bc or cache_bc_spec
        cache (GFCache): state shared between calls of one run
        counter (OpCounter): receives boundary_solves, specializations and flop tallies
    Returns:
        GFPhaseResult: electron and phonon tensors plus the counters of this call
    """
    if cache_mode not in CACHE_MODES:
        raise ConfigError("cache_mode", f"expected one of {CACHE_MODES}, got {cache_mode!r}")
    cache = cache if cache is not None else GFCache()
    counter = counter if counter is not None else OpCounter()
    before = counter.snapshot()

    electron = _electron_phase(device, grid, selfenergies, cache_mode, cache, threads, counter)
    phonon = _phonon_phase(device, grid, selfenergies, cache_mode, cache, threads, counter)

    delta = {k: v - before.get(k, 0) for k, v in counter.snapshot().items()}
    logger.debug(f"GF phase ({cache_mode}): {delta}")
    return GFPhaseResult(electron=electron, phonon=phonon, counters=delta)


def _solve_all(solve, points, threads: int, counter: OpCounter, name: str):
    results, failures = map_points(solve, points, threads)
    if failures:
        raise PointFailures(failures)
    for res in results:
        counter.add(f"rgf_flops_{name}", res[1])
        counter.add("rgf_flops", res[1])
    return [res[0] for res in results]


def _electron_phase(device, grid, selfenergies, cache_mode, cache, threads, counter) -> ElectronGFTensor:
    st, ops = device.structure, device.operators
    table = _boundary(device, grid, "electron", cache_mode, cache, threads, counter)
    kz, energies = grid.kz, grid.energies
    per_block, norb = st.atoms_per_block, st.Norb
    hams = [ops.hamiltonian(k) for k in kz]
    overlaps = [ops.overlap(k) for k in kz]
    sigma_l = getattr(selfenergies, "sigma_lesser", None)
    sigma_g = getattr(selfenergies, "sigma_greater", None)
    points = [(m, e) for m in range(len(kz)) for e in range(len(energies))]

    def system(m, e):
        key = ("electron", m, e)
        if cache_mode == "cache_bc_spec" and key in cache.systems:
            return cache.systems[key]
        z = energies[e] + 1j * settings.ETA_DEVICE
        a0 = overlaps[m].scaled(z).combine(hams[m], -1.0)
        a0 = _add_boundary(a0, table.retarded[0, m, e], table.retarded[1, m, e], -1.0)
        counter.add("specializations", 1)
        if cache_mode == "cache_bc_spec":
            cache.systems[key] = a0
        return a0

    # specialization runs up front so the counter is touched from one thread only
    systems = {p: system(*p) for p in points}

    def solve(point):
        m, e = point
        A = systems[point]
        zero_tri = BlockTriMatrix.zeros_like(A)
        sl = _add_boundary(zero_tri, table.lesser[0, m, e], table.lesser[1, m, e])
        sg = _add_boundary(zero_tri, table.greater[0, m, e], table.greater[1, m, e])
        if sigma_l is not None:
            scatt_l = _block_diagonal(sigma_l[m, e], st.bnum)
            scatt_g = _block_diagonal(sigma_g[m, e], st.bnum)
            A = A.combine(_block_diagonal(retarded_from(sigma_l[m, e], sigma_g[m, e]), st.bnum), -1.0)
            sl, sg = sl.combine(scatt_l), sg.combine(scatt_g)
        local = OpCounter()
        res = rgf_point(A, sl, sg, counter=local, point=("electron", m, e))
        return res, local["rgf_flops"]

    results = _solve_all(solve, points, threads, counter, "electron")

    shape = (len(kz), len(energies), st.Na, norb, norb)
    out = ElectronGFTensor(
        lesser=np.zeros(shape, dtype=complex), greater=np.zeros(shape, dtype=complex),
        retarded=np.zeros(shape, dtype=complex), contact_inflow=np.zeros((len(kz), len(energies), 2)),
    )
    bd = per_block * norb
    if st.bnum > 1:
        bond_shape = (len(kz), len(energies), st.bnum - 1, bd, bd)
        out.lesser_bond = np.zeros(bond_shape, dtype=complex)
        out.greater_bond = np.zeros(bond_shape, dtype=complex)
    for (m, e), res in zip(points, results):
        for n in range(st.bnum):
            atoms = slice(n * per_block, (n + 1) * per_block)
            out.lesser[m, e, atoms] = _atom_diagonal(res.lesser[n], per_block, norb)
            out.greater[m, e, atoms] = _atom_diagonal(res.greater[n], per_block, norb)
            out.retarded[m, e, atoms] = _atom_diagonal(res.retarded[n], per_block, norb)
        out.contact_inflow[m, e] = _contact_inflow(table, m, e, res)
        if st.bnum > 1:
            out.lesser_bond[m, e] = np.stack(res.lesser_bond)
            out.greater_bond[m, e] = np.stack(res.greater_bond)
    return out


def _phonon_phase(device, grid, selfenergies, cache_mode, cache, threads, counter) -> PhononGFTensor:
    st, ops = device.structure, device.operators
    table = _boundary(device, grid, "phonon", cache_mode, cache, threads, counter)
    qz, freqs = grid.qz, grid.frequencies
    per_block, d = st.atoms_per_block, st.N3D
    dyns = [ops.dynamical(q) for q in qz]
    pi_l = getattr(selfenergies, "pi_lesser", None)
    pi_g = getattr(selfenergies, "pi_greater", None)
    points = [(m, w) for m in range(len(qz)) for w in range(len(freqs))]
    eye = np.eye(per_block * d)
    zero = np.zeros_like(eye)

    def system(m, w):
        key = ("phonon", m, w)
        if cache_mode == "cache_bc_spec" and key in cache.systems:
            return cache.systems[key]
        z = (freqs[w] + 1j * settings.ETA_DEVICE) ** 2
        identity = BlockTriMatrix(diag=[z * eye] * st.bnum, upper=[zero] * (st.bnum - 1), lower=[zero] * (st.bnum - 1))
        a0 = identity.combine(dyns[m], -1.0)
        a0 = _add_boundary(a0, table.retarded[0, m, w], table.retarded[1, m, w], -1.0)
        counter.add("specializations", 1)
        if cache_mode == "cache_bc_spec":
            cache.systems[key] = a0
        return a0

    systems = {p: system(*p) for p in points}

    def solve(point):
        m, w = point
        A = systems[point]
        zero_tri = BlockTriMatrix.zeros_like(A)
        sl = _add_boundary(zero_tri, table.lesser[0, m, w], table.lesser[1, m, w])
        sg = _add_boundary(zero_tri, table.greater[0, m, w], table.greater[1, m, w])
        if pi_l is not None:
            scatt_l = BlockTriMatrix.from_dense(_pair_dense(pi_l[m, w], st.neighbors), st.bnum)
            scatt_g = BlockTriMatrix.from_dense(_pair_dense(pi_g[m, w], st.neighbors), st.bnum)
            A = A.combine(scatt_g.combine(scatt_l, -1.0).scaled(0.5), -1.0)
            sl, sg = sl.combine(scatt_l), sg.combine(scatt_g)
        local = OpCounter()
        res = rgf_point(A, sl, sg, counter=local, point=("phonon", m, w))
        return res, local["rgf_flops"]

    results = _solve_all(solve, points, threads, counter, "phonon")

    out = PhononGFTensor.zeros(len(qz), len(freqs), st.Na, st.Nb, d)
    out.contact_inflow = np.zeros((len(qz), len(freqs), 2))
    bd = per_block * d
    if st.bnum > 1:
        out.lesser_bond = np.zeros((len(qz), len(freqs), st.bnum - 1, bd, bd), dtype=complex)
    for (m, w), res in zip(points, results):
        out.lesser[m, w] = _pair_blocks(res.lesser, res.lesser_bond, st.neighbors, per_block, d)
        out.greater[m, w] = _pair_blocks(res.greater, res.greater_bond, st.neighbors, per_block, d)
        out.contact_inflow[m, w] = _contact_inflow(table, m, w, res)
        if st.bnum > 1:
            out.lesser_bond[m, w] = np.stack(res.lesser_bond)
    return out


# --- observables ---

@dataclass
class Observables:
    """Profiles over the internal block boundaries (x in nm) and flows through the two contacts.

    Bond currents at an internal boundary miss the carriers that scatter between neighbors on
    either side of it, so conservation is judged at the contacts, where no scattering bond is cut.
    Contact arrays are [left, right], positive from source to drain.
    """

    boundary_x: np.ndarray
    current: np.ndarray
    spectral_current: np.ndarray
    electron_energy_current: np.ndarray
    phonon_energy_current: np.ndarray
    contact_current: np.ndarray
    contact_electron_energy_current: np.ndarray
    contact_phonon_energy_current: np.ndarray

    @property
    def total_energy_current(self) -> np.ndarray:
        return self.electron_energy_current + self.phonon_energy_current

    @property
    def contact_energy_current(self) -> np.ndarray:
        return self.contact_electron_energy_current + self.contact_phonon_energy_current

    @property
    def dissipated_power(self) -> float:
        """Electron energy handed to the lattice, which leaves as phonon heat."""
        return float(self.contact_electron_energy_current[0] - self.contact_electron_energy_current[1])

    @property
    def drain_current(self) -> float:
        return float(self.current[-1])

    @staticmethod
    def _spread(profile: np.ndarray) -> float:
        mean = float(np.mean(profile))
        spread = float(np.max(profile) - np.min(profile))
        if spread == 0.0:
            return 0.0
        return spread / abs(mean) if mean != 0.0 else float("inf")

    @property
    def current_residual(self) -> float:
        return self._spread(self.current)

    @property
    def contact_current_residual(self) -> float:
        return self._spread(self.contact_current)

    @property
    def energy_conservation_residual(self) -> float:
        return self._spread(self.contact_energy_current)


def _bond_trace(coupling: np.ndarray, bond: np.ndarray) -> np.ndarray:
    """2 Re Tr[X_{n,n+1} Y_{n+1,n}] over the trailing block axes."""
    return 2.0 * np.real(np.einsum("nij,...nji->...n", coupling, bond))


def _through_flow(inflow: np.ndarray) -> np.ndarray:
    """[left, right] inflows -> flow towards the drain at each contact."""
    return np.array([inflow[0], -inflow[1]])


def observables(electron: ElectronGFTensor, phonon: Optional[PhononGFTensor], device: Device,
                grid: SpectralGrid) -> Observables:
    """
    Bond currents at every internal block boundary and lead flows at the contacts.
    Args:
        electron (ElectronGFTensor): needs lesser_bond and contact_inflow
        phonon (PhononGFTensor): optional; without it the phonon energy currents are zero
    Returns:
        Observables: current, energy currents, the (boundary, E) spectral current and contact flows
    """
    st, ops = device.structure, device.operators
    if st.bnum < 2 or electron.lesser_bond is None:
        raise MissingBondBlocksError("current observables need bnum >= 2 and retained bond blocks")
    if electron.contact_inflow is None:
        raise MissingBondBlocksError("electron tensors carry no contact inflow")

    spectral = np.zeros((st.bnum - 1, grid.ne))
    for m, k in enumerate(grid.kz):
        upper = np.stack(ops.hamiltonian(k).upper)
        spectral += _bond_trace(upper, electron.lesser_bond[m]).T / (2.0 * np.pi * grid.nkz)
    current = spectral.sum(axis=1) * grid.dE
    energy_current = (spectral * grid.energies[None, :]).sum(axis=1) * grid.dE

    w_el = grid.dE / (2.0 * np.pi * grid.nkz)
    inflow = electron.contact_inflow.sum(axis=0)
    contact_current = _through_flow(w_el * inflow.sum(axis=0))
    contact_energy = _through_flow(w_el * (grid.energies[:, None] * inflow).sum(axis=0))

    phonon_current = np.zeros(st.bnum - 1)
    contact_phonon = np.zeros(2)
    if phonon is not None:
        if phonon.lesser_bond is None or phonon.contact_inflow is None:
            raise MissingBondBlocksError("phonon tensors carry no bond blocks")
        w_ph = grid.domega / (2.0 * np.pi * grid.nqz)
        for m, q in enumerate(grid.qz):
            upper = np.stack(ops.dynamical(q).upper)
            per_freq = _bond_trace(upper, phonon.lesser_bond[m])
            phonon_current -= w_ph * (grid.frequencies[:, None] * per_freq).sum(axis=0)
        # D^< = -i PSD flips the sign of the inflow trace relative to electrons
        ph_inflow = phonon.contact_inflow.sum(axis=0)
        contact_phonon = _through_flow(-w_ph * (grid.frequencies[:, None] * ph_inflow).sum(axis=0))

    return Observables(
        boundary_x=st.boundary_x(), current=current, spectral_current=spectral,
        electron_energy_current=energy_current, phonon_energy_current=phonon_current,
        contact_current=contact_current, contact_electron_energy_current=contact_energy,
        contact_phonon_energy_current=contact_phonon,
    )
