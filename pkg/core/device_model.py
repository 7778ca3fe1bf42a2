import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from config import settings
from core.errors import (ConfigError, DimensionError, GridMisalignmentError, HeaderError,
                         HermiticityError, NeighborCountError, PartitionError)
from core.linalg import BlockTriMatrix

logger = logging.getLogger(__name__)

LATTICE_KINDS = ("chain", "ribbon")
NEIGHBORS_BY_KIND = {"chain": 2, "ribbon": 4}

_DTYPE_CODES = {1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("<c16")}
_CODE_OF = {np.dtype("<f8"): 1, np.dtype("<i8"): 2, np.dtype("<c16"): 3}
_DTYPE_NAMES = {"float64": np.dtype("<f8"), "int64": np.dtype("<i8"), "complex128": np.dtype("<c16")}


@dataclass(frozen=True, eq=False)
class DeviceStructure:
    kind: str
    Na: int
    Nb: int
    Norb: int
    bnum: int
    positions: np.ndarray
    neighbors: np.ndarray
    width: int
    slices: int
    Vds: float = 0.0
    Vgs: float = 0.0
    seed: int = 0
    N3D: int = settings.N3D

    @property
    def atoms_per_block(self) -> int:
        return self.Na // self.bnum

    def block_of(self, atom: int) -> int:
        return atom // self.atoms_per_block

    def slice_of(self, atom: int) -> int:
        return atom // (2 * self.width)

    def equals(self, other: "DeviceStructure") -> bool:
        scalars = ("kind", "Na", "Nb", "Norb", "bnum", "width", "slices", "Vds", "Vgs", "seed", "N3D")
        return (all(getattr(self, f) == getattr(other, f) for f in scalars)
                and np.array_equal(self.positions, other.positions)
                and np.array_equal(self.neighbors, other.neighbors))

    def reverse_slots(self) -> np.ndarray:
        """rev[a, s] = slot of a in the neighbor list of neighbors[a, s]."""
        rev = np.empty_like(self.neighbors)
        for a in range(self.Na):
            for s, b in enumerate(self.neighbors[a]):
                rev[a, s] = int(np.nonzero(self.neighbors[b] == a)[0][0])
        return rev

    def boundary_x(self) -> np.ndarray:
        """x coordinate (nm) of each internal block boundary."""
        edges = []
        for n in range(self.bnum - 1):
            last = (n + 1) * self.atoms_per_block - 1
            edges.append(0.5 * (self.positions[last, 0] + self.positions[last + 1, 0]))
        return np.array(edges)


@dataclass
class SpectralGrid:
    nkz: int
    nqz: int
    ne: int
    nomega: int
    e_min: float = settings.E_MIN
    e_max: float = settings.E_MAX
    omega_step: int = settings.OMEGA_STEP

    def validate(self) -> "SpectralGrid":
        for name in ("nkz", "nqz", "ne", "nomega", "omega_step"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be a positive integer")
        if self.nkz != self.nqz:
            raise GridMisalignmentError(
                "nqz", f"momentum grids must be commensurate (Nkz={self.nkz}, Nqz={self.nqz})"
            )
        if self.ne < 2:
            raise ConfigError("ne", "need at least two energies")
        if self.e_max <= self.e_min:
            raise ConfigError("e_max", "energy window is empty")
        if self.ne < 2 * self.nomega * self.omega_step:
            raise GridMisalignmentError(
                "nomega", f"NE={self.ne} must be at least 2*Nomega*step={2 * self.nomega * self.omega_step}"
            )
        return self

    @staticmethod
    def _momenta(n: int) -> np.ndarray:
        c = (n - 1) // 2
        return 2.0 * np.pi * (np.arange(n) - c) / n

    @property
    def kz(self) -> np.ndarray:
        return self._momenta(self.nkz)

    @property
    def qz(self) -> np.ndarray:
        return self._momenta(self.nqz)

    @property
    def energies(self) -> np.ndarray:
        return np.linspace(self.e_min, self.e_max, self.ne)

    @property
    def dE(self) -> float:
        return (self.e_max - self.e_min) / (self.ne - 1)

    @property
    def domega(self) -> float:
        return self.dE * self.omega_step

    @property
    def omega_offsets(self) -> np.ndarray:
        """Energy-grid shift of each phonon frequency."""
        return self.omega_step * np.arange(1, self.nomega + 1)

    @property
    def frequencies(self) -> np.ndarray:
        return self.dE * self.omega_offsets

    def shifted_k(self, k: int, q: int, sign: int) -> int:
        """Index of kz_k + sign * qz_q wrapped onto the grid."""
        c = (self.nkz - 1) // 2
        if sign < 0:
            return (k - q + c) % self.nkz
        return (k + q - c) % self.nkz


@dataclass
class MaterialOperators:
    """Operators of one device; kz/qz dependence is X0 + X1 e^{ik} + X1^H e^{-ik}."""

    h0: BlockTriMatrix
    h1: BlockTriMatrix
    s0: BlockTriMatrix
    s1: BlockTriMatrix
    phi0: BlockTriMatrix
    phi1: BlockTriMatrix
    dh: np.ndarray
    lead_h00: np.ndarray
    lead_h1: np.ndarray
    lead_h01: np.ndarray
    lead_s0: np.ndarray
    lead_s1: np.ndarray
    lead_phi00: np.ndarray
    lead_phi1: np.ndarray
    lead_phi01: np.ndarray

    @staticmethod
    def _at(x0: BlockTriMatrix, x1: BlockTriMatrix, k: float) -> BlockTriMatrix:
        phase = np.exp(1j * k)
        return x0.combine(x1, phase).combine(x1.adjoint(), np.conj(phase))

    @staticmethod
    def _block_at(x0: np.ndarray, x1: np.ndarray, k: float) -> np.ndarray:
        phase = np.exp(1j * k)
        return x0 + phase * x1 + np.conj(phase) * x1.conj().T

    def hamiltonian(self, kz: float, sparse: bool = False) -> BlockTriMatrix:
        h = self._at(self.h0, self.h1, kz)
        return h.attach_sparse() if sparse else h

    def overlap(self, kz: float) -> BlockTriMatrix:
        return self._at(self.s0, self.s1, kz)

    def dynamical(self, qz: float) -> BlockTriMatrix:
        return self._at(self.phi0, self.phi1, qz)

    def lead_hamiltonian(self, side: int, kz: float) -> Tuple[np.ndarray, ...]:
        """(H00, H01, S00, S01) of lead side 0 (source) or 1 (drain)."""
        h00 = self._block_at(self.lead_h00[side], self.lead_h1[side], kz)
        s00 = self._block_at(self.lead_s0, self.lead_s1, kz)
        return h00, self.lead_h01[side], s00, np.zeros_like(s00)

    def lead_dynamical(self, qz: float) -> Tuple[np.ndarray, np.ndarray]:
        return self._block_at(self.lead_phi00, self.lead_phi1, qz), self.lead_phi01


@dataclass
class Device:
    structure: DeviceStructure
    operators: MaterialOperators
    grid: Optional[SpectralGrid] = None


def _choose_width(kind: str, Na: int, Nb: int, bnum: int) -> int:
    if kind not in LATTICE_KINDS:
        raise ConfigError("kind", f"unknown lattice kind {kind!r}, expected one of {LATTICE_KINDS}")
    if Nb != NEIGHBORS_BY_KIND[kind]:
        raise NeighborCountError(kind, Nb, f"{kind} atoms always have {NEIGHBORS_BY_KIND[kind]}")
    per_block = Na // bnum
    if kind == "chain":
        candidates = [1]
    else:
        candidates = range(3, per_block // 2 + 1)
    for width in candidates:
        if per_block % (2 * width) == 0:
            if Na // (2 * width) < 2:
                raise NeighborCountError(kind, Nb, "the strip needs at least two slices")
            return width
    raise NeighborCountError(kind, Nb, f"no slice width fits {per_block} atoms per block")


def spring_tensor(u: np.ndarray, stiffness: float = settings.SPRING_CONSTANT,
                  transverse: float = settings.SPRING_TRANSVERSE) -> np.ndarray:
    """Force-constant tensor of a bond along unit vector u."""
    longitudinal = np.outer(u, u)
    return stiffness * (longitudinal + transverse * (np.eye(3) - longitudinal))


def _bonds(width: int, slices: int) -> List[tuple]:
    """(from, to, class, in-plane direction) for every bond of the folded strip."""
    idx = lambda s, sheet, j: s * 2 * width + sheet * width + j
    bonds = []
    for s in range(slices):
        for sheet in (0, 1):
            for j in range(width):
                if s + 1 < slices:
                    bonds.append((idx(s, sheet, j), idx(s + 1, sheet, j), "x", (1.0, 0.0)))
                if width >= 3:
                    bonds.append((idx(s, sheet, j), idx(s, sheet, (j + 1) % width), "y", (0.0, 1.0)))
    for s in (0, slices - 1):
        for j in range(width):
            bonds.append((idx(s, 0, j), idx(s, 1, j), "rung", (0.0, -1.0)))
    return bonds


def _bond_vector(direction) -> np.ndarray:
    u = np.array([direction[0], direction[1], settings.BOND_BUCKLING])
    return u / np.linalg.norm(u)


def _cut(dense: np.ndarray, bnum: int) -> BlockTriMatrix:
    return BlockTriMatrix.from_dense(dense, bnum)


def _diag_operator(per_atom: List[np.ndarray], bnum: int) -> BlockTriMatrix:
    dense = np.zeros((sum(b.shape[0] for b in per_atom),) * 2, dtype=complex)
    offset = 0
    for blk in per_atom:
        m = blk.shape[0]
        dense[offset:offset + m, offset:offset + m] = blk
        offset += m
    return _cut(dense, bnum)


def generate_device(kind: str, Na: int, Nb: int, Norb: int, bnum: int, seed: int,
                    Vds: float = 0.0, Vgs: float = 0.0) -> Device:
    """
    Build a toy folded-strip device and all of its operators.
    Args:
        kind (str): 'chain' (Nb=2) or 'ribbon' (Nb=4)
        Na (int): atom count, divisible by bnum
        Nb (int): neighbors per atom
        Norb (int): orbitals per atom
        bnum (int): number of diagonal blocks
        seed (int): RNG seed; identical inputs give bitwise-identical output
    Returns:
        Device: structure plus operators (grid left unset)
    """
    if bnum < 1 or Na < 1 or Norb < 1:
        raise ConfigError("Na", "Na, Norb and bnum must be positive")
    if Na % bnum:
        raise PartitionError(Na, bnum)
    width = _choose_width(kind, Na, Nb, bnum)
    slices = Na // (2 * width)
    rng = np.random.default_rng(seed)

    onsite = rng.uniform(*settings.ONSITE_RANGE, size=(Norb, Norb))
    onsite = 0.5 * (onsite + onsite.T)
    hopping = {cls: -rng.uniform(*settings.HOPPING_RANGE, size=(Norb, Norb))
               for cls in ("x", "y", "rung")}
    bonds = _bonds(width, slices)

    per_block = Na // bnum
    neighbor_sets = [set() for _ in range(Na)]
    for a, b, _, _ in bonds:
        if abs(a // per_block - b // per_block) > 1:
            raise NeighborCountError(kind, Nb, f"bond {a}-{b} spans non-adjacent blocks")
        neighbor_sets[a].add(b)
        neighbor_sets[b].add(a)
    counts = {len(s) for s in neighbor_sets}
    if counts != {Nb}:
        raise NeighborCountError(kind, Nb, f"construction produced neighbor counts {sorted(counts)}")
    neighbors = np.array([sorted(s) for s in neighbor_sets], dtype=np.int64)
    slot = {(a, int(b)): s for a in range(Na) for s, b in enumerate(neighbors[a])}

    positions = np.zeros((Na, 2))
    for s in range(slices):
        for sheet in (0, 1):
            for j in range(width):
                a = s * 2 * width + sheet * width + j
                y = j * settings.BOND_LENGTH if sheet == 0 else -(j + 1) * settings.BOND_LENGTH
                positions[a] = (s * settings.BOND_LENGTH, y)

    slice_idx = np.arange(Na) // (2 * width)
    drop = slice_idx / (slices - 1)
    potential = -Vds * drop - Vgs

    n_el, n_ph = Na * Norb, Na * settings.N3D
    h_dense = np.zeros((n_el, n_el), dtype=complex)
    phi_dense = np.zeros((n_ph, n_ph), dtype=complex)
    dh = np.zeros((Na, Nb, settings.N3D, Norb, Norb), dtype=complex)
    eye_orb = np.eye(Norb)
    el = lambda a: slice(a * Norb, (a + 1) * Norb)
    ph = lambda a: slice(a * settings.N3D, (a + 1) * settings.N3D)

    for a in range(Na):
        h_dense[el(a), el(a)] = onsite + potential[a] * eye_orb
    for a, b, cls, direction in bonds:
        t = hopping[cls]
        h_dense[el(a), el(b)] = t
        h_dense[el(b), el(a)] = t.conj().T
        u = _bond_vector(direction)
        k_ab = spring_tensor(u)
        phi_dense[ph(a), ph(b)] = -k_ab
        phi_dense[ph(b), ph(a)] = -k_ab
        phi_dense[ph(a), ph(a)] += k_ab
        phi_dense[ph(b), ph(b)] += k_ab
        for i in range(settings.N3D):
            m_ab = settings.EPH_COUPLING * u[i] * t
            dh[a, slot[(a, b)], i] = m_ab
            dh[b, slot[(b, a)], i] = m_ab.conj().T
    for a in range(Na):
        phi_dense[ph(a), ph(a)] += 2.0 * settings.SPRING_Z * np.eye(settings.N3D)

    h1_atoms = [(settings.HOPPING_Z + settings.OVERLAP_Z * potential[a]) * eye_orb for a in range(Na)]
    s0_atoms = [eye_orb.astype(complex) for _ in range(Na)]
    s1_atoms = [settings.OVERLAP_Z * eye_orb.astype(complex) for _ in range(Na)]
    phi1_atoms = [-settings.SPRING_Z * np.eye(settings.N3D, dtype=complex) for _ in range(Na)]

    leads = _lead_blocks(width, per_block, Norb, onsite, hopping, (0.0, -Vds))

    structure = DeviceStructure(
        kind=kind, Na=Na, Nb=Nb, Norb=Norb, bnum=bnum, positions=positions,
        neighbors=neighbors, width=width, slices=slices, Vds=float(Vds), Vgs=float(Vgs), seed=int(seed),
    )
    operators = MaterialOperators(
        h0=_cut(h_dense, bnum), h1=_diag_operator(h1_atoms, bnum),
        s0=_diag_operator(s0_atoms, bnum), s1=_diag_operator(s1_atoms, bnum),
        phi0=_cut(phi_dense, bnum), phi1=_diag_operator(phi1_atoms, bnum),
        dh=dh, **leads,
    )
    logger.debug(f"generated {kind} device Na={Na} W={width} L={slices} bnum={bnum}")
    return Device(structure, operators)


def _lead_blocks(width: int, per_block: int, Norb: int, onsite: np.ndarray,
                 hopping: Dict[str, np.ndarray], lead_potential: tuple) -> dict:
    """Bulk principal layer of per_block atoms (no fold rungs), one per lead potential."""
    slices = per_block // (2 * width)
    bulk = [(a, b, cls, d) for a, b, cls, d in _bonds(width, 2 * slices) if cls != "rung"]
    n_el, n_ph = per_block * Norb, per_block * settings.N3D
    h00 = np.zeros((n_el, n_el), dtype=complex)
    h01 = np.zeros((n_el, n_el), dtype=complex)
    phi00 = np.zeros((n_ph, n_ph), dtype=complex)
    phi01 = np.zeros((n_ph, n_ph), dtype=complex)
    el = lambda a: slice(a * Norb, (a + 1) * Norb)
    ph = lambda a: slice(a * settings.N3D, (a + 1) * settings.N3D)
    for a in range(per_block):
        h00[el(a), el(a)] = onsite
        phi00[ph(a), ph(a)] = 2.0 * settings.SPRING_Z * np.eye(settings.N3D)
    for a, b, cls, direction in bulk:
        # bonds of a two-layer window; layer 0 keeps its own bonds and its bonds into layer 1
        if a >= per_block:
            continue
        t = hopping[cls]
        k_ab = spring_tensor(_bond_vector(direction))
        phi00[ph(a), ph(a)] += k_ab
        if b < per_block:
            h00[el(a), el(b)] = t
            h00[el(b), el(a)] = t.conj().T
            phi00[ph(a), ph(b)] = -k_ab
            phi00[ph(b), ph(a)] = -k_ab
            phi00[ph(b), ph(b)] += k_ab
        else:
            h01[el(a), el(b - per_block)] = t
            phi01[ph(a), ph(b - per_block)] = -k_ab
    # each atom of the first slice is also bonded to the previous layer
    for a, b, cls, direction in bulk:
        if cls == "x" and a < per_block <= b:
            phi00[ph(b - per_block), ph(b - per_block)] += spring_tensor(_bond_vector(direction))

    eye = np.eye(per_block * Norb)
    lead_h00 = np.stack([h00 + u * eye for u in lead_potential])
    lead_h1 = np.stack([(settings.HOPPING_Z + settings.OVERLAP_Z * u) * eye for u in lead_potential])
    return {
        "lead_h00": lead_h00,
        "lead_h1": lead_h1.astype(complex),
        "lead_h01": np.stack([h01, h01]),
        "lead_s0": eye.astype(complex),
        "lead_s1": settings.OVERLAP_Z * eye.astype(complex),
        "lead_phi00": phi00,
        "lead_phi1": -settings.SPRING_Z * np.eye(n_ph, dtype=complex),
        "lead_phi01": phi01,
    }


# === device file format ===

def write_array(path: str, array: np.ndarray) -> None:
    """Little-endian array prefixed by a 16-byte record (dtype code, ndim, element count)."""
    array = np.ascontiguousarray(array)
    dtype = array.dtype.newbyteorder("<")
    code = _CODE_OF[dtype]
    record = np.array([code, array.ndim], dtype="<u4").tobytes() + np.array([array.size], dtype="<u8").tobytes()
    with open(path, "wb") as fh:
        fh.write(record)
        fh.write(array.astype(dtype, copy=False).tobytes())


def read_array(path: str, shape: tuple, dtype_name: str) -> np.ndarray:
    with open(path, "rb") as fh:
        record = fh.read(16)
        payload = fh.read()
    if len(record) != 16:
        raise DimensionError(f"{os.path.basename(path)}: truncated shape record")
    code, ndim = np.frombuffer(record[:8], dtype="<u4")
    (count,) = np.frombuffer(record[8:], dtype="<u8")
    dtype = _DTYPE_CODES.get(int(code))
    if dtype is None or dtype != _DTYPE_NAMES[dtype_name]:
        raise DimensionError(f"{os.path.basename(path)}: dtype code {code} does not match header {dtype_name}")
    if int(ndim) != len(shape) or int(count) != int(np.prod(shape)):
        raise DimensionError(
            f"{os.path.basename(path)}: record says ndim={ndim}, count={count}; header says shape {shape}"
        )
    if len(payload) != int(count) * dtype.itemsize:
        raise DimensionError(f"{os.path.basename(path)}: payload holds {len(payload)} bytes, expected {int(count) * dtype.itemsize}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def _operator_arrays(ops: MaterialOperators) -> Dict[str, np.ndarray]:
    arrays = {}
    for name in ("h0", "h1", "s0", "s1", "phi0", "phi1"):
        op = getattr(ops, name)
        arrays[f"{name}_diag"] = np.stack(op.diag)
        if op.bnum > 1:
            arrays[f"{name}_upper"] = np.stack(op.upper)
            arrays[f"{name}_lower"] = np.stack(op.lower)
    for name in ("dh", "lead_h00", "lead_h1", "lead_h01", "lead_s0", "lead_s1",
                 "lead_phi00", "lead_phi1", "lead_phi01"):
        arrays[name] = getattr(ops, name)
    return arrays


def save_device(device: Device, path: str) -> None:
    """Write the device directory: text header plus one binary file per array."""
    st = device.structure
    grid = device.grid or SpectralGrid(nkz=1, nqz=1, ne=2, nomega=1)
    os.makedirs(path, exist_ok=True)
    arrays = {"positions": st.positions, "neighbors": st.neighbors}
    arrays.update(_operator_arrays(device.operators))
    lines = [
        settings.DEVICE_MAGIC,
        f"Na {st.Na}", f"Nb {st.Nb}", f"Norb {st.Norb}", f"N3D {st.N3D}", f"bnum {st.bnum}",
        f"Nkz {grid.nkz}", f"Nqz {grid.nqz}", f"NE {grid.ne}", f"Nomega {grid.nomega}",
        f"Emin {grid.e_min!r}", f"Emax {grid.e_max!r}", f"omega_step {grid.omega_step}",
        f"Vds {st.Vds!r}", f"Vgs {st.Vgs!r}", f"kind {st.kind}", f"seed {st.seed}",
        f"width {st.width}", f"slices {st.slices}",
    ]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype_name = {"f": "float64", "i": "int64", "c": "complex128"}[arr.dtype.kind]
        lines.append(f"array {name} {dtype_name} {','.join(str(d) for d in arr.shape)}")
        write_array(os.path.join(path, f"{name}.bin"), arr.astype(_DTYPE_NAMES[dtype_name]))
    with open(os.path.join(path, settings.DEVICE_HEADER_FILE), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    logger.info(f"Saved device ({st.kind}, Na={st.Na}) to {path}")


def _parse_header(path: str) -> Tuple[dict, Dict[str, tuple]]:
    header_path = os.path.join(path, settings.DEVICE_HEADER_FILE)
    if not os.path.exists(header_path):
        raise HeaderError(f"no header file at {header_path}")
    with open(header_path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != settings.DEVICE_MAGIC:
        raise HeaderError(f"bad magic {lines[0] if lines else ''!r}, expected {settings.DEVICE_MAGIC}")
    fields, arrays = {}, {}
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] == "array":
            if len(parts) != 4 or parts[2] not in _DTYPE_NAMES:
                raise HeaderError(f"malformed array line {ln!r}")
            shape = tuple(int(d) for d in parts[3].split(",")) if parts[3] else ()
            arrays[parts[1]] = (shape, parts[2])
        elif len(parts) == 2:
            fields[parts[0]] = parts[1]
        else:
            raise HeaderError(f"malformed header line {ln!r}")
    return fields, arrays


def _field(fields: dict, name: str, kind=int):
    if name not in fields:
        raise HeaderError(f"header is missing {name}")
    try:
        return kind(fields[name])
    except ValueError as e:
        raise HeaderError(f"header field {name}={fields[name]!r} is not a valid {kind.__name__}") from e


def load_device(path: str, herm_tol: float = 1e-12) -> Device:
    """
    Read a device directory written by save_device.
    Args:
        path (str): device directory
        herm_tol (float): largest tolerated |X - X^H| entry
    Returns:
        Device: structure, operators and the stored grid
    """
    fields, specs = _parse_header(path)
    Na, Nb, Norb = _field(fields, "Na"), _field(fields, "Nb"), _field(fields, "Norb")
    bnum, kind = _field(fields, "bnum"), _field(fields, "kind", str)
    if bnum < 1 or Na % bnum:
        raise PartitionError(Na, bnum)
    if _field(fields, "N3D") != settings.N3D:
        raise DimensionError(f"N3D must be {settings.N3D}")
    grid = SpectralGrid(
        nkz=_field(fields, "Nkz"), nqz=_field(fields, "Nqz"), ne=_field(fields, "NE"),
        nomega=_field(fields, "Nomega"), e_min=_field(fields, "Emin", float),
        e_max=_field(fields, "Emax", float), omega_step=_field(fields, "omega_step"),
    )

    arrays = {}
    for name, (shape, dtype_name) in specs.items():
        file_path = os.path.join(path, f"{name}.bin")
        if not os.path.exists(file_path):
            raise DimensionError(f"array file {name}.bin is missing")
        arrays[name] = read_array(file_path, shape, dtype_name)

    bd_el, bd_ph = (Na // bnum) * Norb, (Na // bnum) * settings.N3D
    expected = {"positions": (Na, 2), "neighbors": (Na, Nb), "dh": (Na, Nb, settings.N3D, Norb, Norb)}
    for name in ("h0", "h1", "s0", "s1"):
        expected[f"{name}_diag"] = (bnum, bd_el, bd_el)
    for name in ("phi0", "phi1"):
        expected[f"{name}_diag"] = (bnum, bd_ph, bd_ph)
    for name, shape in expected.items():
        if name not in arrays:
            raise DimensionError(f"array {name} is missing from the header")
        if arrays[name].shape != shape:
            raise DimensionError(f"array {name} has shape {arrays[name].shape}, expected {shape}")

    def block_op(name: str) -> BlockTriMatrix:
        diag = list(arrays[f"{name}_diag"])
        upper = list(arrays.get(f"{name}_upper", np.empty((0,) + diag[0].shape)))
        lower = list(arrays.get(f"{name}_lower", np.empty((0,) + diag[0].shape)))
        if len(upper) != bnum - 1 or len(lower) != bnum - 1:
            raise DimensionError(f"{name} needs {bnum - 1} off-diagonal blocks")
        return BlockTriMatrix(diag=diag, upper=upper, lower=lower)

    ops = {name: block_op(name) for name in ("h0", "h1", "s0", "s1", "phi0", "phi1")}
    for name in ("h0", "s0", "phi0"):
        deviation, block = ops[name].hermiticity_deviation()
        if deviation > herm_tol:
            raise HermiticityError(name, block, deviation)
    dh = arrays["dh"]
    neighbors = arrays["neighbors"]
    for a in range(Na):
        for s, b in enumerate(neighbors[a]):
            back = np.nonzero(neighbors[b] == a)[0]
            if back.size != 1:
                raise DimensionError(f"neighbor relation is not symmetric for atoms {a}, {b}")
            if np.max(np.abs(dh[b, back[0]] - np.conj(np.swapaxes(dh[a, s], -1, -2)))) > herm_tol:
                raise HermiticityError("dh", (a, int(b)), float(
                    np.max(np.abs(dh[b, back[0]] - np.conj(np.swapaxes(dh[a, s], -1, -2))))))

    structure = DeviceStructure(
        kind=kind, Na=Na, Nb=Nb, Norb=Norb, bnum=bnum, positions=arrays["positions"],
        neighbors=neighbors, width=_field(fields, "width"), slices=_field(fields, "slices"),
        Vds=_field(fields, "Vds", float), Vgs=_field(fields, "Vgs", float), seed=_field(fields, "seed"),
    )
    leads = {name: arrays[name] for name in ("lead_h00", "lead_h1", "lead_h01", "lead_s0", "lead_s1",
                                             "lead_phi00", "lead_phi1", "lead_phi01")}
    operators = MaterialOperators(dh=dh, **ops, **leads)
    logger.info(f"Loaded device ({kind}, Na={Na}, bnum={bnum}) from {path}")
    return Device(structure, operators, grid)
