import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg
from scipy.special import expit

from config import settings
from core.device_model import Device, SpectralGrid
from core.errors import BoundaryConvergenceError, CausalityError, ConfigError
from core.linalg import OpCounter
from core.workers import map_points

logger = logging.getLogger(__name__)

CARRIERS = ("electron", "phonon")


@dataclass
class SurfaceGF:
    g: np.ndarray
    iterations: int
    residual: float
    block_ops: int


def surface_gf(H00: np.ndarray, H01: np.ndarray, S00: Optional[np.ndarray] = None,
               S01: Optional[np.ndarray] = None, z: complex = 0.0,
               tol: float = settings.DECIMATION_TOL,
               max_iter: int = settings.DECIMATION_MAX_ITER) -> SurfaceGF:
    """
    Surface Green's function of a semi-infinite lead by Lopez-Sancho decimation.
    H01 couples the surface layer to the next layer into the bulk.
    Args:
        z (complex): E + i*eta for electrons, (omega + i*eta)^2 for phonons
        tol (float): stop once the renormalized couplings fall below tol
    Returns:
        SurfaceGF: the surface block plus iteration diagnostics
    """
    if np.imag(z) <= 0.0:
        raise ConfigError("eta", f"broadening must be positive, got Im(z)={np.imag(z):.3e}")
    n = H00.shape[0]
    S00 = np.eye(n) if S00 is None else S00
    S01 = np.zeros_like(H01) if S01 is None else S01

    alpha = H01 - z * S01
    beta = H01.conj().T - z * S01.conj().T
    eps = H00.astype(complex)
    eps_s = H00.astype(complex)
    zs = z * S00
    residual, ops = np.inf, 0
    for it in range(1, max_iter + 1):
        rhs = np.hstack([alpha, beta])
        sol = scipy.linalg.solve(zs - eps, rhs)
        g_alpha, g_beta = sol[:, :n], sol[:, n:]
        eps_s = eps_s + alpha @ g_beta
        eps = eps + alpha @ g_beta + beta @ g_alpha
        alpha = alpha @ g_alpha
        beta = beta @ g_beta
        ops += settings.BC_BLOCK_OPS_PER_STEP
        residual = max(np.linalg.norm(alpha, 1), np.linalg.norm(beta, 1))
        if residual < tol:
            break
    else:
        raise BoundaryConvergenceError(residual, max_iter)

    g = scipy.linalg.inv(zs - eps_s)
    ops += 1
    _check_retarded(g)
    return SurfaceGF(g=g, iterations=it, residual=float(residual), block_ops=ops)


def _check_retarded(block: np.ndarray) -> None:
    spectral = (block - block.conj().T) / 2j
    top = float(np.max(np.linalg.eigvalsh(spectral)))
    scale = max(1.0, float(np.max(np.abs(block))))
    if top > settings.CAUSALITY_TOL * scale:
        raise CausalityError(f"surface block is not retarded (Im eigenvalue {top:.3e} > 0)")


def fermi(energy, mu: float, kT: float = settings.KT):
    return expit(-(np.asarray(energy) - mu) / kT)


def bose(omega, kT: float = settings.KT):
    return 1.0 / np.expm1(np.asarray(omega) / kT)


@dataclass
class BoundaryTable:
    """Boundary self-energies of both leads over every (E, kz) or (omega, qz) point.

    Arrays are indexed [side, momentum, energy, row, col]; side 0 feeds block 0,
    side 1 feeds the last block.
    """

    carrier: str
    retarded: np.ndarray
    lesser: np.ndarray
    greater: np.ndarray
    occupancy: np.ndarray
    iterations: np.ndarray

    @property
    def broadening(self) -> np.ndarray:
        return 1j * (self.retarded - np.conj(np.swapaxes(self.retarded, -1, -2)))


def lead_occupancy(device: Device, grid: SpectralGrid, carrier: str) -> np.ndarray:
    """occupancy[side, energy] from Fermi-Dirac (electrons) or Bose-Einstein (phonons)."""
    if carrier == "electron":
        mus = (settings.MU_LEFT, settings.MU_LEFT - device.structure.Vds)
        return np.stack([fermi(grid.energies, mu) for mu in mus])
    n = bose(grid.frequencies)
    return np.stack([n, n])


def boundary_selfenergies(device: Device, grid: SpectralGrid, carrier: str, threads: int = 1,
                          counter: Optional[OpCounter] = None) -> BoundaryTable:
    """
    Retarded, lesser and greater boundary self-energies of both leads.
    Args:
        carrier (str): 'electron' or 'phonon'
        threads (int): worker-pool size for the independent points
        counter (OpCounter): receives 'boundary_solves' and 'boundary_flops'
    Returns:
        BoundaryTable: per-point blocks of size blockdim
    """
    if carrier not in CARRIERS:
        raise ConfigError("carrier", f"expected one of {CARRIERS}")
    ops = device.operators
    if carrier == "electron":
        momenta, values = grid.kz, grid.energies
    else:
        momenta, values = grid.qz, grid.frequencies
    points = [(m, e) for m in range(len(momenta)) for e in range(len(values))]

    def solve_point(point):
        m, e = point
        sides = []
        for side in (0, 1):
            if carrier == "electron":
                h00, h01, s00, s01 = ops.lead_hamiltonian(side, momenta[m])
                z = values[e] + 1j * settings.ETA
            else:
                h00, h01 = ops.lead_dynamical(momenta[m])
                s00, s01 = np.eye(h00.shape[0]), np.zeros_like(h01)
                z = (values[e] + 1j * settings.ETA) ** 2
            try:
                if side == 0:
                    surf = surface_gf(h00, h01.conj().T, s00, s01.conj().T, z)
                    tau = h01.conj().T - z * s01.conj().T
                else:
                    surf = surface_gf(h00, h01, s00, s01, z)
                    tau = h01 - z * s01
            except BoundaryConvergenceError as err:
                raise err.at((carrier, m, e, side)) from err
            sides.append((tau @ surf.g @ tau.conj().T, surf.iterations, surf.block_ops))
        return sides

    results, failures = map_points(solve_point, points, threads)
    if failures:
        raise failures[0][1]

    dim = results[0][0][0].shape[0]
    retarded = np.zeros((2, len(momenta), len(values), dim, dim), dtype=complex)
    iterations = np.zeros((2, len(momenta), len(values)), dtype=int)
    block_ops = 0
    for (m, e), sides in zip(points, results):
        for side, (sigma, its, n_ops) in enumerate(sides):
            retarded[side, m, e] = sigma
            iterations[side, m, e] = its
            block_ops += n_ops

    occupancy = lead_occupancy(device, grid, carrier)
    occ = occupancy[:, None, :, None, None]
    spectral = retarded - np.conj(np.swapaxes(retarded, -1, -2))
    if carrier == "electron":
        lesser, greater = -occ * spectral, (1.0 - occ) * spectral
    else:
        lesser, greater = occ * spectral, (1.0 + occ) * spectral

    if counter is not None:
        counter.add("boundary_solves", 2 * len(points))
        counter.add("boundary_flops", 8 * block_ops * dim ** 3)
    logger.debug(f"{carrier} boundary table: {len(points)} points, "
                 f"max decimation steps {int(iterations.max())}")
    return BoundaryTable(carrier, retarded, lesser, greater, occupancy, iterations)
