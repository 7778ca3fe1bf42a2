import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from core.device_model import Device, SpectralGrid
from core.errors import ConfigError, GridMisalignmentError, PointFailures
from core.linalg import HalfComplexBatch, SmallMatBatch, compute_scale, sbsmm, sbsmm_half
from core.rgf_solver import ElectronGFTensor, PhononGFTensor
from core.workers import map_points

logger = logging.getLogger(__name__)

VARIANTS = ("naive", "regrouped", "mixed")
KINDS = ("lesser", "greater")
# (name, sign of the energy/momentum shift of the electron Green's function)
BRANCHES = (("absorption", -1), ("emission", +1))


@dataclass
class SelfEnergyTensors:
    sigma_lesser: np.ndarray
    sigma_greater: np.ndarray
    pi_lesser: np.ndarray
    pi_greater: np.ndarray

    @classmethod
    def zeros(cls, electron_shape: tuple, phonon_shape: tuple) -> "SelfEnergyTensors":
        return cls(
            np.zeros(electron_shape, dtype=complex), np.zeros(electron_shape, dtype=complex),
            np.zeros(phonon_shape, dtype=complex), np.zeros(phonon_shape, dtype=complex),
        )

    def mixed_with(self, previous: Optional["SelfEnergyTensors"], alpha: float) -> "SelfEnergyTensors":
        """alpha * self + (1 - alpha) * previous; a missing previous counts as zero."""
        if previous is None:
            return SelfEnergyTensors(alpha * self.sigma_lesser, alpha * self.sigma_greater,
                                     alpha * self.pi_lesser, alpha * self.pi_greater)
        mix = lambda new, old: alpha * new + (1.0 - alpha) * old
        return SelfEnergyTensors(
            mix(self.sigma_lesser, previous.sigma_lesser), mix(self.sigma_greater, previous.sigma_greater),
            mix(self.pi_lesser, previous.pi_lesser), mix(self.pi_greater, previous.pi_greater),
        )

    def sigma_relative_error(self, reference: "SelfEnergyTensors") -> float:
        """max |self - reference| / max |reference| over both electron tensors."""
        diff = max(np.max(np.abs(self.sigma_lesser - reference.sigma_lesser)),
                   np.max(np.abs(self.sigma_greater - reference.sigma_greater)))
        ref = max(np.max(np.abs(reference.sigma_lesser)), np.max(np.abs(reference.sigma_greater)))
        return float(diff / ref) if ref > 0 else float(diff)

    def sigma_elementwise_error(self, reference: "SelfEnergyTensors", floor: float = 1e-6) -> float:
        """Mean |self - reference| / |reference| over entries above floor * max |reference|."""
        new = np.concatenate([self.sigma_lesser.ravel(), self.sigma_greater.ravel()])
        ref = np.concatenate([reference.sigma_lesser.ravel(), reference.sigma_greater.ravel()])
        mags = np.abs(ref)
        if mags.size == 0 or mags.max() == 0.0:
            return float(np.max(np.abs(new), initial=0.0))
        keep = mags > floor * mags.max()
        return float(np.mean(np.abs(new[keep] - ref[keep]) / mags[keep]))


@dataclass
class FlopLedger:
    """Multiply-model flops (8 per complex multiply-add), model bytes and batch calls."""

    variant: str = ""
    sigma_flops: int = 0
    pi_flops: int = 0
    bytes_moved: int = 0
    batches: int = 0

    @property
    def total_flops(self) -> int:
        return self.sigma_flops + self.pi_flops

    def matmul(self, target: str, count: int, n: int) -> None:
        setattr(self, f"{target}_flops", getattr(self, f"{target}_flops") + 8 * count * n ** 3)
        self.bytes_moved += 16 * 3 * count * n * n
        self.batches += 1

    def contraction(self, target: str, count: int, n: int) -> None:
        setattr(self, f"{target}_flops", getattr(self, f"{target}_flops") + 8 * count * n * n)
        self.bytes_moved += 16 * 2 * count * n * n

    def merge(self, other: "FlopLedger") -> None:
        self.sigma_flops += other.sigma_flops
        self.pi_flops += other.pi_flops
        self.bytes_moved += other.bytes_moved
        self.batches += other.batches

    def snapshot(self) -> dict:
        return {"variant": self.variant, "sigma_flops": self.sigma_flops, "pi_flops": self.pi_flops,
                "bytes_moved": self.bytes_moved, "batches": self.batches}


@dataclass
class Coupling:
    """Hamiltonian derivatives dh[a, slot, i] = dH^i_{a, neighbors[a, slot]} and the neighbor table."""

    dh: np.ndarray
    neighbors: np.ndarray

    def __post_init__(self):
        na, nb = self.neighbors.shape
        self.reverse = np.empty_like(self.neighbors)
        for a in range(na):
            for s, b in enumerate(self.neighbors[a]):
                self.reverse[a, s] = int(np.nonzero(self.neighbors[b] == a)[0][0])

    @classmethod
    def from_device(cls, device: Device) -> "Coupling":
        return cls(dh=device.operators.dh, neighbors=device.structure.neighbors)

    def forward(self, a: int, s: int) -> np.ndarray:
        """dH^i_ab for all i."""
        return self.dh[a, s]

    def backward(self, a: int, s: int) -> np.ndarray:
        """dH^i_ba for all i."""
        return self.dh[self.neighbors[a, s], self.reverse[a, s]]


def check_alignment(electron: ElectronGFTensor, phonon: PhononGFTensor, coupling: Coupling,
                    grid: SpectralGrid) -> None:
    """Reject tensors that do not sit on the declared grid."""
    grid.validate()
    nkz, ne, na, norb, _ = electron.lesser.shape
    nqz, nomega, na_ph, slots, n3d, _ = phonon.lesser.shape
    if (nkz, ne) != (grid.nkz, grid.ne):
        raise GridMisalignmentError("ne", f"electron tensors are {nkz}x{ne}, grid is {grid.nkz}x{grid.ne}")
    if (nqz, nomega) != (grid.nqz, grid.nomega):
        raise GridMisalignmentError(
            "nomega", f"phonon tensors are {nqz}x{nomega}, grid is {grid.nqz}x{grid.nomega}"
        )
    if na_ph != na or slots != coupling.neighbors.shape[1] + 1 or coupling.dh.shape[:2] != (na, slots - 1):
        raise GridMisalignmentError("Na", "atom or neighbor counts differ between tensors and coupling")
    if np.any(grid.omega_offsets != np.rint(grid.omega_offsets)):
        raise GridMisalignmentError("omega_step", "phonon energies are not multiples of dE")


def _combination(phonon_tensor: np.ndarray, a: int, s: int, b: int, rs: int) -> np.ndarray:
    """(D_ba - D_bb - D_aa + D_ab)[q, w, i, j]."""
    return (phonon_tensor[:, :, b, rs + 1] - phonon_tensor[:, :, b, 0]
            - phonon_tensor[:, :, a, 0] + phonon_tensor[:, :, a, s + 1])


def _weights(combo: np.ndarray, m_ba: np.ndarray, transpose: bool) -> np.ndarray:
    """W[q, w, i] = sum_j C[q, w, i, j] dH^j_ba (C^T for emission)."""
    if transpose:
        combo = np.swapaxes(combo, -1, -2)
    return np.einsum("qwij,jxy->qwixy", combo, m_ba)


def _window(grid: SpectralGrid, sign: int) -> tuple:
    """Range of source energies a branch can read."""
    m_min = int(grid.omega_offsets[0])
    return (0, grid.ne - m_min) if sign < 0 else (m_min, grid.ne)


def _spans(grid: SpectralGrid, sign: int, offset: int) -> tuple:
    """(output energies, source energies) of one phonon frequency."""
    if sign < 0:
        return slice(offset, grid.ne), slice(0, grid.ne - offset)
    return slice(0, grid.ne - offset), slice(offset, grid.ne)


def _other(kind: str) -> str:
    return "greater" if kind == "lesser" else "lesser"


# --- scattering self-energy of the electrons ---

def _sigma_atom_naive(a, G, D, coupling, grid, ledger):
    nkz, ne, _, norb, _ = G["lesser"].shape
    out = {kind: np.zeros((nkz, ne, norb, norb), dtype=complex) for kind in KINDS}
    for s, b in enumerate(coupling.neighbors[a]):
        rs = coupling.reverse[a, s]
        m_ab, m_ba = coupling.forward(a, s), coupling.backward(a, s)
        combos = {kind: _combination(D[kind], a, s, b, rs) for kind in KINDS}
        for kind in KINDS:
            for _, sign in BRANCHES:
                combo = combos[kind] if sign < 0 else combos[_other(kind)]
                weights = _weights(combo, m_ba, transpose=sign > 0)
                for i in range(m_ab.shape[0]):
                    for k in range(nkz):
                        for q in range(grid.nqz):
                            src_k = grid.shifted_k(k, q, sign)
                            for w, offset in enumerate(grid.omega_offsets):
                                dst, src = _spans(grid, sign, int(offset))
                                left = np.matmul(m_ab[i], G[kind][src_k, src, b])
                                out[kind][k, dst] += np.matmul(left, weights[q, w, i])
                                ledger.matmul("sigma", 2 * (dst.stop - dst.start), norb)
    return out


def _transient(m_i: np.ndarray, g_window: np.ndarray, ledger, half: Optional[dict]) -> np.ndarray:
    """dH^i_ab G_bb over every (kz, E) of a branch window, one batched call."""
    nkz, width, norb, _ = g_window.shape
    count = nkz * width
    right = g_window.reshape(count, norb, norb)
    result = SmallMatBatch.zeros(count, norb)
    if half is None:
        left = SmallMatBatch.from_stack(np.broadcast_to(m_i, (count, norb, norb)))
        sbsmm(left, SmallMatBatch.from_stack(right), result)
    else:
        left = HalfComplexBatch.from_batch(m_i[None], scale=half["dh"])
        sbsmm_half(left, HalfComplexBatch.from_batch(right, scale=half["g"]), result)
    ledger.matmul("sigma", count, norb)
    return result.to_stack().reshape(nkz, width, norb, norb)


def _sigma_atom_regrouped(a, G, D, coupling, grid, ledger, half=None):
    nkz, ne, _, norb, _ = G["lesser"].shape
    out = {kind: np.zeros((nkz, ne, norb, norb), dtype=complex) for kind in KINDS}
    for s, b in enumerate(coupling.neighbors[a]):
        rs = coupling.reverse[a, s]
        m_ab, m_ba = coupling.forward(a, s), coupling.backward(a, s)
        combos = {kind: _combination(D[kind], a, s, b, rs) for kind in KINDS}
        for kind in KINDS:
            for _, sign in BRANCHES:
                combo = combos[kind] if sign < 0 else combos[_other(kind)]
                weights = _weights(combo, m_ba, transpose=sign > 0)
                lo, hi = _window(grid, sign)
                w_scale = None
                if half is not None:
                    w_scale = compute_scale(weights) if half["scaling"] else 1.0
                for i in range(m_ab.shape[0]):
                    # hoisted: independent of (qz, omega)
                    trans = _transient(m_ab[i], G[kind][:, lo:hi, b], ledger, half)
                    trans_half = None
                    if half is not None:
                        t_scale = compute_scale(trans) if half["scaling"] else 1.0
                        trans_half = HalfComplexBatch.from_batch(trans.reshape(-1, norb, norb), scale=t_scale)
                    for q in range(grid.nqz):
                        src_k = np.array([grid.shifted_k(k, q, sign) for k in range(nkz)])
                        for w, offset in enumerate(grid.omega_offsets):
                            dst, src = _spans(grid, sign, int(offset))
                            width = dst.stop - dst.start
                            count = nkz * width
                            acc = SmallMatBatch.zeros(count, norb)
                            if half is None:
                                gathered = trans[src_k][:, src.start - lo:src.stop - lo]
                                sbsmm(SmallMatBatch.from_stack(gathered.reshape(count, norb, norb)),
                                      SmallMatBatch.from_stack(np.broadcast_to(weights[q, w, i], (count, norb, norb))),
                                      acc)
                            else:
                                flat = (src_k[:, None] * (hi - lo)
                                        + np.arange(src.start - lo, src.stop - lo)[None, :]).ravel()
                                w_half = HalfComplexBatch.from_batch(weights[q, w, i][None], scale=w_scale)
                                sbsmm_half(trans_half.take(flat), w_half, acc)
                            ledger.matmul("sigma", count, norb)
                            out[kind][:, dst] += acc.views().reshape(nkz, width, norb, norb)
    return out


# --- scattering self-energy of the phonons ---

def _pi_atom_naive(a, G, coupling, grid, ledger):
    """P[s, kind, q, w, i, j] for the ordered bonds (a, neighbors[a, s])."""
    nkz, ne, _, norb, _ = G["lesser"].shape
    n3d = coupling.dh.shape[2]
    out = np.zeros((coupling.neighbors.shape[1], 2, grid.nqz, grid.nomega, n3d, n3d), dtype=complex)
    for s, b in enumerate(coupling.neighbors[a]):
        m_ab, m_ba = coupling.forward(a, s), coupling.backward(a, s)
        for t, kind in enumerate(KINDS):
            for q in range(grid.nqz):
                for w, offset in enumerate(grid.omega_offsets):
                    dst, src = _spans(grid, +1, int(offset))
                    width = dst.stop - dst.start
                    for k in range(nkz):
                        kq = grid.shifted_k(k, q, +1)
                        g_a = G[kind][kq, src, a]
                        g_b = G[_other(kind)][k, dst, b]
                        left = np.matmul(m_ba[:, None], g_a[None])
                        right = np.matmul(m_ab[:, None], g_b[None])
                        out[s, t, q, w] += np.einsum("iexy,jeyx->ij", left, right)
                        ledger.matmul("pi", 2 * n3d * width, norb)
                        ledger.contraction("pi", n3d * n3d * width, norb)
    return out


def _pi_atom_regrouped(a, G, coupling, grid, ledger):
    nkz, ne, _, norb, _ = G["lesser"].shape
    n3d = coupling.dh.shape[2]
    out = np.zeros((coupling.neighbors.shape[1], 2, grid.nqz, grid.nomega, n3d, n3d), dtype=complex)
    for s, b in enumerate(coupling.neighbors[a]):
        m_ab, m_ba = coupling.forward(a, s), coupling.backward(a, s)
        for t, kind in enumerate(KINDS):
            # hoisted: both products are independent of (qz, omega)
            left = np.matmul(m_ba[:, None, None], G[kind][None, :, :, a])
            right = np.matmul(m_ab[:, None, None], G[_other(kind)][None, :, :, b])
            ledger.matmul("pi", 2 * n3d * nkz * ne, norb)
            for q in range(grid.nqz):
                src_k = np.array([grid.shifted_k(k, q, +1) for k in range(nkz)])
                for w, offset in enumerate(grid.omega_offsets):
                    dst, src = _spans(grid, +1, int(offset))
                    width = dst.stop - dst.start
                    out[s, t, q, w] = np.einsum("ikexy,jkeyx->ij", left[:, src_k, src], right[:, :, dst])
                    ledger.contraction("pi", n3d * n3d * nkz * width, norb)
    return out


def _assemble_pi(partial: np.ndarray, coupling: Coupling, grid: SpectralGrid) -> dict:
    """Pi_ab = -(P_ab + P_ba) on bonds and Pi_aa = sum_b (P_ab + P_ba)."""
    na, nb = coupling.neighbors.shape
    n3d = partial.shape[-1]
    weight = -1j * grid.dE / (2.0 * np.pi * grid.nkz)
    result = {}
    for t, kind in enumerate(KINDS):
        pi = np.zeros((grid.nqz, grid.nomega, na, nb + 1, n3d, n3d), dtype=complex)
        for a in range(na):
            for s, b in enumerate(coupling.neighbors[a]):
                bond = weight * (partial[a, s, t] + partial[b, coupling.reverse[a, s], t])
                pi[:, :, a, s + 1] = -bond
                pi[:, :, a, 0] += bond
        result[kind] = pi
    return result


# --- public kernels ---

def _run(variant: str, electron: ElectronGFTensor, phonon: PhononGFTensor, coupling: Coupling,
         grid: SpectralGrid, ledger: Optional[FlopLedger], threads: int, half: Optional[dict] = None):
    check_alignment(electron, phonon, coupling, grid)
    ledger = ledger if ledger is not None else FlopLedger(variant)
    ledger.variant = ledger.variant or variant
    G = {"lesser": electron.lesser, "greater": electron.greater}
    D = {"lesser": phonon.lesser, "greater": phonon.greater}
    na = electron.lesser.shape[2]

    def per_atom(a):
        local = FlopLedger(variant)
        if variant == "naive":
            sigma = _sigma_atom_naive(a, G, D, coupling, grid, local)
            pi = _pi_atom_naive(a, G, coupling, grid, local)
        else:
            sigma = _sigma_atom_regrouped(a, G, D, coupling, grid, local, half)
            pi = _pi_atom_regrouped(a, G, coupling, grid, local)
        return sigma, pi, local

    results, failures = map_points(per_atom, range(na), threads)
    if failures:
        raise PointFailures(failures)

    weight = -1j * grid.domega / (2.0 * np.pi * grid.nqz)
    sigma = {kind: np.zeros_like(electron.lesser) for kind in KINDS}
    partial = np.stack([res[1] for res in results])
    for a, (atom_sigma, _, local) in enumerate(results):
        for kind in KINDS:
            sigma[kind][:, :, a] = weight * atom_sigma[kind]
        ledger.merge(local)
    pi = _assemble_pi(partial, coupling, grid)
    logger.debug(f"SSE {variant}: sigma {ledger.sigma_flops:.3e} flop, pi {ledger.pi_flops:.3e} flop")
    return SelfEnergyTensors(sigma["lesser"], sigma["greater"], pi["lesser"], pi["greater"])


def sse_naive(electron: ElectronGFTensor, phonon: PhononGFTensor, coupling: Coupling, grid: SpectralGrid,
              ledger: Optional[FlopLedger] = None, threads: int = 1) -> SelfEnergyTensors:
    """
    Scattering self-energies term by term: both products are redone for every (qz, omega).
    Args:
        electron (ElectronGFTensor): G^<, G^> per atom
        phonon (PhononGFTensor): D^<, D^> per atom pair
        coupling (Coupling): dH per ordered bond
        ledger (FlopLedger): receives the multiply-model flop counts
        threads (int): atoms are split over this many workers
    Returns:
        SelfEnergyTensors: Sigma^<> and Pi^<> shaped like the Green's functions
    """
    return _run("naive", electron, phonon, coupling, grid, ledger, threads)


def sse_regrouped(electron: ElectronGFTensor, phonon: PhononGFTensor, coupling: Coupling, grid: SpectralGrid,
                  ledger: Optional[FlopLedger] = None, threads: int = 1) -> SelfEnergyTensors:
    """Same result as sse_naive with the omega-independent products computed once per branch."""
    return _run("regrouped", electron, phonon, coupling, grid, ledger, threads)


def sse_mixed(electron: ElectronGFTensor, phonon: PhononGFTensor, coupling: Coupling, grid: SpectralGrid,
              ledger: Optional[FlopLedger] = None, threads: int = 1, scaling: bool = True) -> SelfEnergyTensors:
    """
    Regrouped dataflow with the Sigma products in emulated binary16.
    Pi stays in full precision. scaling=False forces every scale factor to 1.
    """
    half = {
        "scaling": scaling,
        "dh": compute_scale(coupling.dh) if scaling else 1.0,
        "g": compute_scale(np.concatenate([electron.lesser.ravel(), electron.greater.ravel()])) if scaling else 1.0,
    }
    return _run("mixed", electron, phonon, coupling, grid, ledger, threads, half)


def compute_self_energies(variant: str, electron: ElectronGFTensor, phonon: PhononGFTensor,
                          coupling: Coupling, grid: SpectralGrid, ledger: Optional[FlopLedger] = None,
                          threads: int = 1, scaling: bool = True) -> SelfEnergyTensors:
    if variant == "naive":
        return sse_naive(electron, phonon, coupling, grid, ledger, threads)
    if variant == "regrouped":
        return sse_regrouped(electron, phonon, coupling, grid, ledger, threads)
    if variant == "mixed":
        return sse_mixed(electron, phonon, coupling, grid, ledger, threads, scaling=scaling)
    raise ConfigError("sse_variant", f"expected one of {VARIANTS}, got {variant!r}")


def naive_flop_count(grid: SpectralGrid, na: int, nb: int, norb: int, n3d: int) -> dict:
    """Closed-form naive ledger including the energy-grid truncation."""
    valid = sum(grid.ne - int(o) for o in grid.omega_offsets)
    pairs = na * nb * grid.nkz * grid.nqz
    sigma = 2 * 2 * n3d * pairs * valid * 16 * norb ** 3
    pi = 2 * pairs * valid * 8 * (2 * n3d * norb ** 3 + n3d * n3d * norb * norb)
    return {"sigma": sigma, "pi": pi}
