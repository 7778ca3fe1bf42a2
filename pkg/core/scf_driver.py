import logging
import time
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
import pandas as pd

from config import settings
from core.device_model import Device, SpectralGrid
from core.errors import ConfigError, DivergenceError
from core.linalg import OpCounter
from core.rgf_solver import (CACHE_MODES, ElectronGFTensor, GFCache, Observables, PhononGFTensor,
                             gf_phase, observables)
from core.sse_kernel import (VARIANTS, Coupling, FlopLedger, SelfEnergyTensors, compute_self_energies,
                             sse_mixed, sse_regrouped)

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["iter", "current", "rel_change", "gf_seconds", "sse_seconds",
                 "flops_gf", "flops_sse", "econs_residual"]


@dataclass
class ScfConfig:
    """Loop policy: iteration cap, tolerance, caching, kernel variant, mixing and threads."""

    max_iter: int = settings.SCF_MAX_ITER
    tol: float = settings.SCF_TOL
    cache_mode: str = "cache_bc_spec"
    sse_variant: str = "regrouped"
    mixing: float = settings.MIXING
    threads: int = 1
    scaling: bool = True

    def validate(self) -> "ScfConfig":
        if self.max_iter < 1:
            raise ConfigError("max_iter", "need at least one iteration")
        if not self.tol > 0:
            raise ConfigError("tol", "tolerance must be positive")
        if not 0.0 < self.mixing <= 1.0:
            raise ConfigError("mixing", f"alpha must lie in (0, 1], got {self.mixing}")
        if self.cache_mode not in CACHE_MODES:
            raise ConfigError("cache_mode", f"expected one of {CACHE_MODES}")
        if self.sse_variant not in VARIANTS:
            raise ConfigError("sse_variant", f"expected one of {VARIANTS}")
        return self


@dataclass
class ScfTrace:
    """One row per iteration with the TRACE_COLUMNS fields."""

    rows: List[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def append(self, **row) -> None:
        self.rows.append({col: row[col] for col in TRACE_COLUMNS})

    @property
    def currents(self) -> np.ndarray:
        return np.array([r["current"] for r in self.rows])

    @property
    def rel_changes(self) -> np.ndarray:
        return np.array([r["rel_change"] for r in self.rows])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=TRACE_COLUMNS)

    def to_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False)


@dataclass
class ScfResult:
    """Final tensors and observables of a run plus its trace and counters."""

    electron: ElectronGFTensor
    phonon: PhononGFTensor
    selfenergies: Optional[SelfEnergyTensors]
    observables: Observables
    trace: ScfTrace
    converged: bool
    counters: dict

    @property
    def iterations(self) -> int:
        return len(self.trace)

    @property
    def current(self) -> float:
        return float(self.trace.currents[-1])

    @property
    def status(self) -> dict:
        """Status dict written to the manifest."""
        return {
            "status": "converged" if self.converged else "max_iter",
            "iterations": self.iterations,
            "current": self.current,
            "rel_change": float(self.trace.rel_changes[-1]),
        }


def _settled(change: float, current: float, tol: float) -> bool:
    """Relative change below tol, or an absolute change below CURRENT_FLOOR (zero-bias runs)."""
    return change < tol * abs(current) or change < settings.CURRENT_FLOOR


def _diverging(currents: List[float]) -> bool:
    """|I| grew DIVERGENCE_FACTOR-fold within DIVERGENCE_WINDOW iterations from above CURRENT_FLOOR."""
    window = settings.DIVERGENCE_WINDOW
    if len(currents) <= window:
        return False
    old, new = abs(currents[-1 - window]), abs(currents[-1])
    return old > settings.CURRENT_FLOOR and new > settings.DIVERGENCE_FACTOR * old


def run_scf(device: Device, grid: SpectralGrid, config: ScfConfig,
            counter: Optional[OpCounter] = None) -> ScfResult:
    """
    Alternate GF and SSE phases until the drain current settles.
    Iteration n solves the GF phase with the mixed self-energies of iteration n-1
    (zero for n = 0) and stops before the SSE phase once the current has converged.
    Args:
        device (Device): structure and operators
        grid (SpectralGrid): energy/momentum grid, validated here
        config (ScfConfig): loop and kernel policy
        counter (OpCounter): receives boundary_solves, specializations and flop tallies
    Returns:
        ScfResult: last GF tensors, self-energies, observables and the per-iteration trace
    """
    grid.validate()
    config.validate()
    counter = counter if counter is not None else OpCounter()
    cache = GFCache()
    coupling = Coupling.from_device(device)
    trace = ScfTrace()
    sigma: Optional[SelfEnergyTensors] = None
    previous = 0.0
    currents: List[float] = []
    converged = False

    for it in range(config.max_iter):
        start = time.perf_counter()
        gf = gf_phase(device, grid, sigma, config.cache_mode, cache, config.threads, counter)
        obs = observables(gf.electron, gf.phonon, device, grid)
        gf_seconds = time.perf_counter() - start
        flops_gf = gf.counters.get("rgf_flops", 0) + gf.counters.get("boundary_flops", 0)

        current = obs.drain_current
        change = abs(current - previous)
        rel = change / max(abs(current), settings.CURRENT_FLOOR)
        currents.append(current)
        row = dict(iter=it, current=current, rel_change=rel, gf_seconds=gf_seconds, sse_seconds=0.0,
                   flops_gf=flops_gf, flops_sse=0, econs_residual=obs.energy_conservation_residual)

        if _settled(change, current, config.tol):
            converged = True
            trace.append(**row)
            logger.info(f"iteration {it}: I={current:.6e} rel={rel:.3e} converged")
            break
        if _diverging(currents):
            trace.append(**row)
            raise DivergenceError(
                f"current grew from {currents[-1 - settings.DIVERGENCE_WINDOW]:.3e} to {current:.3e} "
                f"within {settings.DIVERGENCE_WINDOW} iterations", trace
            )
        if it == config.max_iter - 1:
            trace.append(**row)
            logger.warning(f"iteration {it}: I={current:.6e} rel={rel:.3e}, max_iter reached")
            break

        start = time.perf_counter()
        ledger = FlopLedger(config.sse_variant)
        computed = compute_self_energies(config.sse_variant, gf.electron, gf.phonon, coupling, grid,
                                         ledger=ledger, threads=config.threads, scaling=config.scaling)
        sigma = computed.mixed_with(sigma, config.mixing)
        row.update(sse_seconds=time.perf_counter() - start, flops_sse=ledger.total_flops)
        trace.append(**row)
        logger.info(f"iteration {it}: I={current:.6e} rel={rel:.3e} "
                    f"gf {row['gf_seconds']:.2f}s sse {row['sse_seconds']:.2f}s")
        previous = current

    logger.info(f"SCF {'converged' if converged else 'stopped'} after {len(trace)} iteration(s); "
                f"boundary solves {counter['boundary_solves']}, specializations {counter['specializations']}")
    return ScfResult(
        electron=gf.electron, phonon=gf.phonon, selfenergies=sigma, observables=obs,
        trace=trace, converged=converged, counters=counter.snapshot(),
    )


@dataclass
class PrecisionReport:
    """Results of the three precision variants and their Sigma errors, histograms and curves."""

    results: dict
    errors: dict
    histograms: pd.DataFrame
    curves: pd.DataFrame

    @property
    def iterations(self) -> dict:
        return {name: res.iterations for name, res in self.results.items()}

    @property
    def rate_match(self) -> bool:
        """Mixed and double runs converge within two iterations of each other."""
        its = self.iterations
        return abs(its["mixed"] - its["double"]) <= 2

    @property
    def current_difference(self) -> float:
        ref = self.results["double"].current
        return abs(self.results["mixed"].current - ref) / max(abs(ref), settings.CURRENT_FLOOR)

    def summary(self) -> dict:
        return {
            "iterations": self.iterations,
            "rate_match": self.rate_match,
            "current_difference": self.current_difference,
            "sigma_error": self.errors,
        }


def _log_histogram(values: np.ndarray, bins: np.ndarray) -> np.ndarray:
    """Counts of log10|values| over the nonzero entries."""
    mags = np.abs(values.ravel())
    mags = mags[mags > 0]
    counts, _ = np.histogram(np.log10(mags), bins=bins)
    return counts


def compare_precision(device: Device, grid: SpectralGrid, config: ScfConfig,
                      bins: int = 40) -> PrecisionReport:
    """
    Run the loop in double precision, with scaled binary16 Sigma products and
    with scaling switched off; compare convergence and Sigma accuracy.
    Returns:
        PrecisionReport: per-variant results, Sigma errors, magnitude histograms and current curves
    """
    variants = {
        "double": replace(config, sse_variant="regrouped", scaling=True),
        "mixed": replace(config, sse_variant="mixed", scaling=True),
        "mixed_unscaled": replace(config, sse_variant="mixed", scaling=False),
    }
    results = {name: run_scf(device, grid, cfg) for name, cfg in variants.items()}

    # every variant evaluated on the same converged double-precision Green's functions
    base = results["double"]
    coupling = Coupling.from_device(device)
    reference = sse_regrouped(base.electron, base.phonon, coupling, grid, threads=config.threads)
    evaluated = {
        "double": reference,
        "mixed": sse_mixed(base.electron, base.phonon, coupling, grid, threads=config.threads),
        "mixed_unscaled": sse_mixed(base.electron, base.phonon, coupling, grid, threads=config.threads,
                                    scaling=False),
    }
    errors = {name: sigma.sigma_elementwise_error(reference) for name, sigma in evaluated.items()}

    mags = np.abs(np.concatenate([reference.sigma_lesser.ravel(), reference.sigma_greater.ravel()]))
    mags = mags[mags > 0]
    lo, hi = (np.floor(np.log10(mags.min())), np.ceil(np.log10(mags.max()))) if mags.size else (-1.0, 0.0)
    edges = np.linspace(lo, max(hi, lo + 1.0), bins + 1)
    histograms = pd.DataFrame({"log10_low": edges[:-1], "log10_high": edges[1:]})
    for name, sigma in evaluated.items():
        both = np.concatenate([sigma.sigma_lesser.ravel(), sigma.sigma_greater.ravel()])
        histograms[name] = _log_histogram(both, edges)

    curves = pd.concat(
        [res.trace.to_frame()[["iter", "current", "rel_change"]].assign(variant=name)
         for name, res in results.items()],
        ignore_index=True,
    )
    report = PrecisionReport(results=results, errors=errors, histograms=histograms, curves=curves)
    logger.info(f"precision comparison: {report.summary()}")
    return report
