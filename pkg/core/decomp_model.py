import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from config import settings
from core.errors import ConfigError, InfeasiblePlanError

logger = logging.getLogger(__name__)

COMPLEX_BYTES = 16
# lesser + greater of one tensor
PAIR_BYTES = 2 * COMPLEX_BYTES
GIB = 2.0 ** 30
TIB = 2.0 ** 40
PFLOP = 1.0e15

SCHEMES = ("momentum_energy", "atom_energy")
POLICIES = ("kz_aligned", "min_volume", "atoms_only")
KERNELS = ("sse_omen", "sse_dace", "sse_sigma", "sse_pi", "rgf", "rgf_electron", "rgf_phonon",
           "boundary", "boundary_electron", "boundary_phonon")
GROUPS = {"G/Sigma": ("G", "Sigma"), "D/Pi": ("D", "Pi")}

# Published single-iteration loads (Pflop) and SSE exchange volumes (TiB) of the Small structure
REFERENCE_FLOPS = {
    "Boundary Conditions": [8.45, 14.12, 19.77, 25.42, 31.06],
    "RGF": [52.95, 88.25, 123.55, 158.85, 194.15],
    "SSE (OMEN)": [24.41, 67.80, 132.89, 219.67, 328.15],
    "SSE (DaCe)": [12.38, 34.19, 66.85, 110.36, 164.71],
}
REFERENCE_NKZ = (3, 5, 7, 9, 11)
REFERENCE_WEAK = {
    "procs": [768, 1280, 1792, 2304, 2816],
    "OMEN": [32.11, 89.18, 174.80, 288.95, 431.65],
    "DaCe": [0.54, 1.22, 2.17, 3.38, 4.86],
}
REFERENCE_STRONG = {
    "procs": [224, 448, 896, 1792, 2688],
    "OMEN": [108.24, 117.75, 136.76, 174.80, 212.84],
    "DaCe": [0.95, 1.13, 1.48, 2.17, 2.87],
}
REFERENCE_STRONG_NKZ = 7
# Large run (NE = 1000 in the quoted figures)
REFERENCE_LARGE = {
    "omen_D_per_process_GiB": 276.0,
    "omen_G_total_PiB": 2.58,
    "dace_G_per_process_GiB": 6.13,
    "dace_D_per_process_MiB": 28.26,
    "crossover_processes": 440000,
    "dpi_collective_seconds": 1.85,
}


@dataclass(frozen=True)
class StructureParams:
    Na: int
    Nb: int
    Norb: int
    N3D: int
    NE: int
    Nomega: int
    Nkz: int
    Nqz: int
    bnum: int = settings.DEFAULT_BNUM

    @classmethod
    def from_mapping(cls, values: Mapping) -> "StructureParams":
        names = {f.name for f in fields(cls)}
        if "Nω" in values:
            values = {("Nomega" if k == "Nω" else k): v for k, v in values.items()}
        extra = [k for k in values if k not in names]
        if extra:
            raise ConfigError(extra[0], "unknown structure parameter")
        params = cls(**{k: int(v) for k, v in values.items() if k in names})
        params.validate()
        return params

    @classmethod
    def small(cls, nkz: int = 3) -> "StructureParams":
        return cls.from_mapping(dict(settings.SMALL_STRUCTURE, Nkz=nkz, Nqz=nkz))

    @classmethod
    def large(cls, **overrides) -> "StructureParams":
        return cls.from_mapping(dict(settings.LARGE_STRUCTURE, **overrides))

    def validate(self) -> None:
        for name, value in asdict(self).items():
            if value < 1:
                raise ConfigError(name, f"must be positive, got {value}")

    def with_(self, **changes) -> "StructureParams":
        return replace(self, **changes)


Params = Union[StructureParams, Mapping]


def _params(params: Params) -> StructureParams:
    return params if isinstance(params, StructureParams) else StructureParams.from_mapping(params)


def _rgf_flops(points: int, n_total: int, bnum: int) -> float:
    n = n_total / bnum
    return float(points) * 8.0 * (26 * bnum - 25) * n ** 3


def _boundary_flops(points: int, n_total: int, bnum: int) -> float:
    # two leads, each decimated for BC_DECIMATION_STEPS steps of dense block operations
    n = n_total / bnum
    return float(points) * 2 * settings.BC_DECIMATION_STEPS * settings.BC_BLOCK_OPS_PER_STEP * 8.0 * n ** 3


def flop_model(params: Params, kernel: str) -> float:
    """
    Closed-form single-iteration flop count of one kernel.
    Args:
        params: structure parameters (StructureParams or a mapping with Na, Nb, Norb, N3D, NE, Nomega, Nkz, Nqz, bnum)
        kernel (str): one of KERNELS
    Returns:
        float: flops
    """
    p = _params(params)
    shifts = p.Nqz * p.Nomega
    if kernel == "sse_omen":
        return 64.0 * p.Na * p.Nb * p.N3D * p.Nkz * p.Nqz * p.NE * p.Nomega * p.Norb ** 3
    if kernel in ("sse_dace", "sse_sigma"):
        return flop_model(p, "sse_omen") * (shifts + 1) / (2.0 * shifts)
    if kernel == "sse_pi":
        return (16.0 * p.Na * p.Nb * p.Nkz * p.Nqz * p.NE * p.Nomega
                * (2 * p.N3D * p.Norb ** 3 + p.N3D ** 2 * p.Norb ** 2))
    if kernel in ("rgf", "rgf_electron"):
        return _rgf_flops(p.Nkz * p.NE, p.Na * p.Norb, p.bnum)
    if kernel == "rgf_phonon":
        return _rgf_flops(p.Nqz * p.Nomega, p.Na * p.N3D, p.bnum)
    if kernel in ("boundary", "boundary_electron"):
        return _boundary_flops(p.Nkz * p.NE, p.Na * p.Norb, p.bnum)
    if kernel == "boundary_phonon":
        return _boundary_flops(p.Nqz * p.Nomega, p.Na * p.N3D, p.bnum)
    raise ConfigError("kernel", f"expected one of {KERNELS}, got {kernel!r}")


@dataclass(frozen=True)
class DecompositionPlan:
    scheme: str
    P: int
    Ta: int = 1
    TE: int = 1
    policy: str = ""
    ghost_atoms: int = 0
    ghost_energies: int = 0
    kz_groups: int = 1
    energy_groups: int = 1

    def rank(self, atom_tile: int, energy_tile: int) -> int:
        return energy_tile * self.Ta + atom_tile

    def atom_ranges(self, na: int) -> List[range]:
        """Contiguous atom ownership per atom tile; tiles past Na own nothing."""
        bounds = np.linspace(0, na, self.Ta + 1).round().astype(int) if self.Ta <= na \
            else np.concatenate([np.arange(na + 1), np.full(self.Ta - na, na)])
        return [range(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]

    def energy_ranges(self, ne: int) -> List[range]:
        bounds = np.linspace(0, ne, self.TE + 1).round().astype(int)
        return [range(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]

    def describe(self) -> str:
        if self.scheme == "atom_energy":
            return f"atom_energy P={self.P} Ta={self.Ta} TE={self.TE} ({self.policy})"
        return f"momentum_energy P={self.P} kz={self.kz_groups} x E/{self.energy_groups}"


def _atom_energy_plan(p: StructureParams, P: int, Ta: int, TE: int, policy: str,
                      allow_oversubscription: bool) -> DecompositionPlan:
    if Ta < 1 or TE < 1 or Ta * TE != P:
        raise InfeasiblePlanError(f"Ta*TE must equal P: {Ta}*{TE} != {P}")
    if TE > p.NE:
        raise InfeasiblePlanError(f"TE={TE} exceeds NE={p.NE}")
    if Ta > p.Na and not allow_oversubscription:
        raise InfeasiblePlanError(f"Ta={Ta} exceeds Na={p.Na}; pass allow_oversubscription to idle atom tiles")
    return DecompositionPlan(
        scheme="atom_energy", P=P, Ta=Ta, TE=TE, policy=policy,
        ghost_atoms=p.Nb, ghost_energies=2 * p.Nomega if TE > 1 else 0,
    )


def momentum_energy_plan(params: Params, P: int) -> DecompositionPlan:
    p = _params(params)
    if P < 1:
        raise InfeasiblePlanError(f"need at least one process, got {P}")
    kz = min(p.Nkz, P)
    return DecompositionPlan(scheme="momentum_energy", P=P, policy="omen",
                             kz_groups=kz, energy_groups=max(P // kz, 1))


def _owned_atoms(p: StructureParams, Ta: int) -> float:
    return p.Na / Ta if Ta <= p.Na else float(math.ceil(p.Na / Ta))


def _atom_energy_bytes(p: StructureParams, plan: DecompositionPlan) -> Dict[str, Dict[str, float]]:
    atoms = _owned_atoms(p, plan.Ta)
    energies = p.NE / plan.TE
    electron_elems = p.Norb ** 2
    phonon_elems = (p.Nb + 1) * p.N3D ** 2

    g_owned = PAIR_BYTES * p.Nkz * energies * atoms * electron_elems
    g_all = PAIR_BYTES * p.Nkz * (energies + plan.ghost_energies) * (atoms + plan.ghost_atoms) * electron_elems
    d_owned = PAIR_BYTES * p.Nqz * p.Nomega * atoms * phonon_elems
    d_all = PAIR_BYTES * p.Nqz * p.Nomega * (atoms + plan.ghost_atoms) * phonon_elems
    electron = {"owned": g_owned, "ghost": g_all - g_owned}
    phonon = {"owned": d_owned, "ghost": d_all - d_owned}
    return {"G": dict(electron), "Sigma": dict(electron), "D": dict(phonon), "Pi": dict(phonon)}


def choose_plan(params: Params, P: int, policy: str = "kz_aligned", allow_oversubscription: bool = False,
                Ta: Optional[int] = None, TE: Optional[int] = None) -> DecompositionPlan:
    """
    Pick the Ta x TE tiling of P processes.
    Explicit Ta and/or TE override the policy.
    Raises:
        InfeasiblePlanError: no tiling satisfies Ta*TE = P, TE <= NE and (unless allowed) Ta <= Na
    """
    p = _params(params)
    if P < 1:
        raise InfeasiblePlanError(f"need at least one process, got {P}")
    if Ta is not None or TE is not None:
        if Ta is None:
            Ta = P // TE if TE and P % TE == 0 else 0
        if TE is None:
            TE = P // Ta if Ta and P % Ta == 0 else 0
        return _atom_energy_plan(p, P, Ta, TE, "explicit", allow_oversubscription)
    if policy not in POLICIES:
        raise ConfigError("policy", f"expected one of {POLICIES}, got {policy!r}")

    if policy == "atoms_only":
        plan = _atom_energy_plan(p, P, P, 1, policy, allow_oversubscription)
    elif policy == "kz_aligned" and P % p.Nkz == 0 and p.Nkz <= p.NE \
            and (P // p.Nkz <= p.Na or allow_oversubscription):
        plan = _atom_energy_plan(p, P, P // p.Nkz, p.Nkz, policy, allow_oversubscription)
    else:
        if policy == "kz_aligned":
            logger.warning(f"Nkz={p.Nkz} does not tile P={P}; falling back to min_volume")
        candidates = []
        for te in range(1, min(P, p.NE) + 1):
            if P % te or (P // te > p.Na and not allow_oversubscription):
                continue
            cand = _atom_energy_plan(p, P, P // te, te, "min_volume", allow_oversubscription)
            volume = sum(part["owned"] + part["ghost"] for part in _atom_energy_bytes(p, cand).values())
            candidates.append((volume, te, cand))
        if not candidates:
            raise InfeasiblePlanError(f"no Ta x TE tiling of P={P} fits Na={p.Na}, NE={p.NE}")
        plan = min(candidates, key=lambda c: (c[0], c[1]))[2]
    logger.info(f"decomposition plan: {plan.describe()}")
    return plan


@dataclass
class Stage:
    send: np.ndarray
    recv: np.ndarray

    @property
    def conserved(self) -> bool:
        return bool(np.isclose(self.send.sum(), self.recv.sum(), rtol=1e-9, atol=0.0))


@dataclass
class Collective:
    """Per-rank send/receive byte counts of one exchange, possibly in several stages."""
    name: str
    stages: List[Stage] = field(default_factory=list)

    @property
    def P(self) -> int:
        return len(self.stages[0].send) if self.stages else 0

    @property
    def total_sent(self) -> float:
        return float(sum(s.send.sum() for s in self.stages))

    @property
    def total_received(self) -> float:
        return float(sum(s.recv.sum() for s in self.stages))

    @property
    def conserved(self) -> bool:
        return all(s.conserved for s in self.stages)

    @classmethod
    def uniform_alltoall(cls, P: int, bytes_per_rank: float, name: str = "alltoall",
                         include_self: bool = True) -> "Collective":
        """Every rank contributes bytes_per_rank; without include_self the local share stays put."""
        share = 1.0 if include_self else (P - 1) / P
        per = np.full(P, float(bytes_per_rank) * share)
        return cls(name, [Stage(per, per.copy())])

    @classmethod
    def scatter_then_forward(cls, P: int, holders: int, slab_bytes: float, forward_bytes: float,
                             name: str) -> "Collective":
        """
        Slab holders 0..holders-1 (folded onto P ranks) scatter their slabs evenly,
        then every rank forwards forward_bytes of ghost data. A single rank sends nothing.
        """
        send = np.bincount(np.arange(holders) % P, minlength=P).astype(float) * slab_bytes * (P - 1) / P
        recv = np.full(P, send.sum() / P)
        stages = [Stage(send, recv)]
        if forward_bytes > 0 and P > 1:
            ghost = np.full(P, float(forward_bytes))
            stages.append(Stage(ghost, ghost.copy()))
        return cls(name, stages)

    def reversed(self, name: str) -> "Collective":
        return Collective(name, [Stage(s.recv.copy(), s.send.copy()) for s in reversed(self.stages)])


@dataclass
class CostReport:
    params: StructureParams
    plan: DecompositionPlan
    per_process: Dict[str, Dict[str, float]]
    totals: Dict[str, float]
    messages: int
    flops: Dict[str, float]
    collectives: List[Collective]
    reference_total: float

    @property
    def total_bytes(self) -> float:
        return float(sum(self.totals.values()))

    @property
    def network_bytes(self) -> float:
        """Bytes that leave their rank; a single process only copies locally."""
        if self.plan.scheme == "atom_energy":
            return self.total_bytes * (self.plan.P - 1) / self.plan.P
        return self.total_bytes

    @property
    def reduction_ratio(self) -> float:
        return self.reference_total / self.total_bytes if self.total_bytes > 0 else math.inf

    def per_process_bytes(self, group: str, part: Optional[str] = None) -> float:
        names = GROUPS.get(group, (group,))
        parts = (part,) if part else ("owned", "ghost")
        return float(sum(self.per_process[n][x] for n in names for x in parts))

    def group_total(self, group: str) -> float:
        return float(sum(self.totals[n] for n in GROUPS.get(group, (group,))))

    def summary(self) -> dict:
        return {
            "plan": self.plan.describe(),
            "total_TiB": self.total_bytes / TIB,
            "reference_TiB": self.reference_total / TIB,
            "reduction_ratio": self.reduction_ratio,
            "messages": self.messages,
            "G/Sigma_per_process_GiB": self.per_process_bytes("G/Sigma") / GIB,
            "D/Pi_per_process_GiB": self.per_process_bytes("D/Pi") / GIB,
        }


def momentum_energy_bytes(params: Params, P: int) -> Dict[str, float]:
    """
    Total bytes moved by the momentum-energy scheme: every G is replicated
    point-to-point 2*Nqz*Nomega times and each D/Pi slab is broadcast to (and
    reduced from) the other P-1 electron processes.
    """
    p = _params(params)
    shifts = p.Nqz * p.Nomega
    g_bytes = PAIR_BYTES * p.Nkz * p.NE * p.Na * p.Norb ** 2
    d_bytes = PAIR_BYTES * shifts * p.Na * (p.Nb + 1) * p.N3D ** 2
    return {"G": g_bytes * 2 * shifts, "Sigma": 0.0,
            "D": d_bytes * (P - 1), "Pi": d_bytes * (P - 1)}


def _flops(p: StructureParams) -> Dict[str, float]:
    return {k: flop_model(p, k) for k in KERNELS}


def comm_model(params: Params, plan: DecompositionPlan) -> CostReport:
    """
    Communication volume of one SSE phase under a decomposition plan.
    Returns:
        CostReport: per-process owned/ghost bytes, totals, collectives and the ratio
                    against the momentum-energy scheme at the same P
    """
    p = _params(params)
    P = plan.P
    reference = momentum_energy_bytes(p, P)
    reference_total = float(sum(reference.values()))
    shifts = p.Nqz * p.Nomega

    if plan.scheme == "momentum_energy":
        totals = reference
        per_process = {n: {"owned": v / P, "ghost": 0.0} for n, v in totals.items()}
        slab = PAIR_BYTES * p.Na * (p.Nb + 1) * p.N3D ** 2
        collectives = [
            Collective.uniform_alltoall(P, totals["G"] / P, "G", include_self=False),
            Collective.scatter_then_forward(P, shifts, slab * P, 0.0, "D"),
        ]
        collectives.append(collectives[1].reversed("Pi"))
        messages = shifts * (P - 1) * 2 + 2 * shifts * P
    elif plan.scheme == "atom_energy":
        if plan.Ta * plan.TE != P:
            raise InfeasiblePlanError(f"Ta*TE must equal P: {plan.Ta}*{plan.TE} != {P}")
        if plan.TE > p.NE:
            raise InfeasiblePlanError(f"TE={plan.TE} exceeds NE={p.NE}")
        per_process = _atom_energy_bytes(p, plan)
        totals = {n: P * (parts["owned"] + parts["ghost"]) for n, parts in per_process.items()}
        # D/Pi: one holder per qz slab scatters to every energy tile, then atom ghosts are forwarded
        slab = PAIR_BYTES * p.Nomega * p.Na * (p.Nb + 1) * p.N3D ** 2 * plan.TE
        forward = per_process["D"]["ghost"]
        d_collective = Collective.scatter_then_forward(P, p.Nqz, slab, forward, "D")
        collectives = [
            Collective.uniform_alltoall(P, totals["G"] / P, "G", include_self=False),
            Collective.uniform_alltoall(P, totals["Sigma"] / P, "Sigma", include_self=False),
            d_collective,
            d_collective.reversed("Pi"),
        ]
        messages = 4 * P * (P - 1)
    else:
        raise ConfigError("scheme", f"expected one of {SCHEMES}, got {plan.scheme!r}")

    report = CostReport(params=p, plan=plan, per_process=per_process, totals=totals, messages=messages,
                        flops=_flops(p), collectives=collectives, reference_total=reference_total)
    logger.debug(f"comm model {plan.describe()}: {report.total_bytes / TIB:.3f} TiB, "
                 f"ratio {report.reduction_ratio:.1f}")
    return report


def time_lower_bound(report: Union[CostReport, Sequence[Collective]], injection_bw: float,
                     procs_per_node: int) -> Dict[str, float]:
    """
    Seconds per collective: per stage, the busiest node's aggregated send bytes over
    the injection bandwidth; stages run back to back.
    """
    if not injection_bw > 0:
        raise ConfigError("injection_bw", "bandwidth must be positive")
    if procs_per_node < 1:
        raise ConfigError("procs_per_node", "need at least one process per node")
    collectives = report.collectives if isinstance(report, CostReport) else list(report)
    bounds = {}
    for coll in collectives:
        seconds = 0.0
        for stage in coll.stages:
            nodes = -(-len(stage.send) // procs_per_node)
            padded = np.zeros(nodes * procs_per_node)
            padded[:len(stage.send)] = stage.send
            seconds += padded.reshape(nodes, procs_per_node).sum(axis=1).max() / injection_bw
        bounds[coll.name] = float(seconds)
    return bounds


def crossover_processes(params: Params) -> float:
    """
    P beyond which the atom-energy tiling (Ta = P, TE = 1) moves more G/Sigma bytes than the
    momentum-energy scheme replicates G: Na + P*Nb = Na*Nqz*Nomega.
    """
    p = _params(params)
    return p.Na * (p.Nqz * p.Nomega - 1) / p.Nb


@dataclass
class ProcessSplit:
    electron: int
    phonon: int
    electron_load: float
    phonon_load: float

    @property
    def imbalance(self) -> float:
        per = (self.electron_load / self.electron, self.phonon_load / self.phonon)
        return max(per) / min(per) if min(per) > 0 else math.inf


def split_by_load(electron_load: float, phonon_load: float, P: int) -> ProcessSplit:
    if P < 2:
        raise ConfigError("P", "need at least two processes to split")
    total = electron_load + phonon_load
    share = P * electron_load / total if total > 0 else P / 2
    electron = min(max(int(round(share)), 1), P - 1)
    return ProcessSplit(electron, P - electron, electron_load, phonon_load)


def balance_processes(params: Params, P: int) -> ProcessSplit:
    """Split P between electron and phonon work in proportion to their modelled flops."""
    p = _params(params)
    electron = sum(flop_model(p, k) for k in ("boundary_electron", "rgf_electron", "sse_sigma"))
    phonon = sum(flop_model(p, k) for k in ("boundary_phonon", "rgf_phonon", "sse_pi"))
    split = split_by_load(electron, phonon, P)
    logger.info(f"P={P}: {split.electron} electron / {split.phonon} phonon processes, "
                f"imbalance {split.imbalance:.3f}")
    return split


def _rows(table: str, row: str, columns: Sequence[str], computed: Sequence[float],
          reference: Sequence[Optional[float]], unit: str) -> List[dict]:
    out = []
    for col, value, ref in zip(columns, computed, reference):
        out.append({
            "table": table, "row": row, "column": col, "unit": unit, "computed": value,
            "reference": ref, "rel_diff": (value - ref) / ref if ref else None,
        })
    return out


def flop_table(params: Optional[Params] = None, nkz_values: Sequence[int] = REFERENCE_NKZ) -> pd.DataFrame:
    """Single-iteration load (Pflop) per kernel and Nkz = Nqz."""
    base = _params(params) if params is not None else StructureParams.small()
    kernels = {"Boundary Conditions": "boundary", "RGF": "rgf", "SSE (OMEN)": "sse_omen", "SSE (DaCe)": "sse_dace"}
    columns = [f"Nkz={n}" for n in nkz_values]
    rows = []
    for label, kernel in kernels.items():
        values = [flop_model(base.with_(Nkz=n, Nqz=n), kernel) / PFLOP for n in nkz_values]
        ref = REFERENCE_FLOPS[label] if tuple(nkz_values) == REFERENCE_NKZ else [None] * len(columns)
        rows += _rows("flops", label, columns, values, ref, "Pflop")
    return pd.DataFrame(rows)


def _volume_rows(table: str, configs: Sequence[tuple], reference: Optional[dict], policy: str) -> List[dict]:
    columns, omen, dace, ratio = [], [], [], []
    for params, P in configs:
        report = comm_model(params, choose_plan(params, P, policy=policy))
        columns.append(f"Nkz={params.Nkz} P={P}")
        omen.append(report.reference_total / TIB)
        dace.append(report.total_bytes / TIB)
        ratio.append(report.reduction_ratio)
    if reference is None:
        reference = {"OMEN": [None] * len(columns), "DaCe": [None] * len(columns)}
    ref_ratio = [o / d if o and d else None for o, d in zip(reference["OMEN"], reference["DaCe"])]
    return (_rows(table, "OMEN", columns, omen, reference["OMEN"], "TiB")
            + _rows(table, "DaCe", columns, dace, reference["DaCe"], "TiB")
            + _rows(table, "ratio", columns, ratio, ref_ratio, "x"))


def weak_scaling_table(params: Optional[Params] = None, nkz_values: Sequence[int] = REFERENCE_NKZ,
                       procs_per_kz: int = 256, policy: str = "kz_aligned") -> pd.DataFrame:
    """Weak scaling: SSE exchange volume with P = procs_per_kz * Nkz."""
    base = _params(params) if params is not None else StructureParams.small()
    configs = [(base.with_(Nkz=n, Nqz=n), procs_per_kz * n) for n in nkz_values]
    known = tuple(nkz_values) == REFERENCE_NKZ and procs_per_kz == 256
    return pd.DataFrame(_volume_rows("weak_scaling", configs, REFERENCE_WEAK if known else None, policy))


def strong_scaling_table(params: Optional[Params] = None,
                         procs: Sequence[int] = tuple(REFERENCE_STRONG["procs"]),
                         nkz: int = REFERENCE_STRONG_NKZ, policy: str = "kz_aligned") -> pd.DataFrame:
    """Strong scaling: SSE exchange volume at fixed Nkz = Nqz."""
    base = (_params(params) if params is not None else StructureParams.small()).with_(Nkz=nkz, Nqz=nkz)
    configs = [(base, P) for P in procs]
    known = list(procs) == REFERENCE_STRONG["procs"] and nkz == REFERENCE_STRONG_NKZ
    return pd.DataFrame(_volume_rows("strong_scaling", configs, REFERENCE_STRONG if known else None, policy))


def large_run_summary(params: Optional[Params] = None, P: int = settings.LARGE_RUN_PROCESSES,
                      injection_bw: float = settings.LARGE_RUN_INJECTION_BW,
                      procs_per_node: int = settings.LARGE_RUN_PROCS_PER_NODE) -> pd.DataFrame:
    """Large-structure figures next to the quoted ones (Ta = P, TE = 1)."""
    p = _params(params) if params is not None else StructureParams.large()
    quoted = p.with_(NE=1000)
    omen = momentum_energy_bytes(quoted, P)
    plan = choose_plan(p, P, Ta=P, TE=1, allow_oversubscription=True)
    report = comm_model(p, plan)
    bounds = time_lower_bound(report, injection_bw, procs_per_node)
    rows = [
        ("omen_D_per_process_GiB", (omen["D"] + omen["Pi"]) / (P - 1) / GIB if P > 1 else 0.0),
        ("omen_G_total_PiB", omen["G"] / 2.0 ** 50),
        ("dace_G_per_process_GiB", report.per_process_bytes("G/Sigma", "ghost") / GIB),
        ("dace_D_per_process_MiB", report.per_process_bytes("D/Pi", "owned") / 2.0 ** 20),
        ("crossover_processes", crossover_processes(p)),
        ("dpi_collective_seconds", bounds["D"]),
    ]
    data = []
    for name, value in rows:
        ref = REFERENCE_LARGE[name]
        data.append({"table": "large", "row": name, "column": f"P={P}", "unit": name.rsplit("_", 1)[-1],
                     "computed": value, "reference": ref, "rel_diff": (value - ref) / ref})
    return pd.DataFrame(data)


def cost_tables(params: Optional[Params] = None, policy: str = "kz_aligned") -> pd.DataFrame:
    """All cost tables in long form: table, row, column, unit, computed, reference, rel_diff."""
    return pd.concat(
        [flop_table(params), weak_scaling_table(params, policy=policy),
         strong_scaling_table(params, policy=policy), large_run_summary()],
        ignore_index=True,
    )
