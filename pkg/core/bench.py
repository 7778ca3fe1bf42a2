import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence

import numpy as np
import pandas as pd

from config import settings
from core.device_model import SpectralGrid, generate_device
from core.errors import ConfigError
from core.linalg import STRATEGIES, SmallMatBatch, SparseBlock, sbsmm, triple_product
from core.rgf_solver import gf_phase
from core.sse_kernel import VARIANTS, Coupling, compute_self_energies

logger = logging.getLogger(__name__)

BENCHMARKS = ("sbsmm", "triple_product", "sse")
BENCH_COLUMNS = ["benchmark", "variant", "size", "repeats", "median_s", "min_s", "max_s", "spread"]


def time_call(fn: Callable[[], object], repeats: int = settings.BENCH_REPEATS) -> Dict[str, float]:
    """Wall-clock fn() `repeats` times; median with min/max spread."""
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    samples = np.array(samples)
    median = float(np.median(samples))
    return {
        "repeats": repeats,
        "median_s": median,
        "min_s": float(samples.min()),
        "max_s": float(samples.max()),
        "spread": float((samples.max() - samples.min()) / median) if median > 0 else 0.0,
    }


@dataclass
class BenchReport:
    rows: List[dict] = field(default_factory=list)

    def add(self, benchmark: str, variant: str, size: str, timing: Dict[str, float]) -> None:
        self.rows.append(dict(benchmark=benchmark, variant=variant, size=size, **timing))
        logger.info(f"{benchmark}/{variant} [{size}]: median {timing['median_s'] * 1e3:.3f} ms "
                    f"(spread {timing['spread']:.1%})")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=BENCH_COLUMNS)


def _bench_sbsmm(report: BenchReport, repeats: int, rng: np.random.Generator,
                 count: int = 2048, n: int = 12) -> None:
    shape = (count, n, n)
    A = SmallMatBatch.from_stack(rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    B = SmallMatBatch.from_stack(rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    C = SmallMatBatch.zeros(count, n)
    a, b, c = A.views(), B.views(), C.views()

    def loop():
        for k in range(count):
            c[k] = a[k] @ b[k]

    size = f"{count}x{n}x{n}"
    report.add("sbsmm", "batched", size, time_call(lambda: sbsmm(A, B, C), repeats))
    report.add("sbsmm", "loop", size, time_call(loop, repeats))


def _bench_triple(report: BenchReport, repeats: int, rng: np.random.Generator,
                  n: int = 192, density: float = 0.05) -> None:
    def sparse_block():
        block = rng.standard_normal((n, n)) * (rng.random((n, n)) < density)
        return SparseBlock.from_dense(block.astype(complex))

    F, E = sparse_block(), sparse_block()
    gR = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    for strategy in STRATEGIES:
        report.add("triple_product", strategy, f"n={n} density={density}",
                   time_call(lambda s=strategy: triple_product(F, gR, E, s), repeats))


def _bench_sse(report: BenchReport, repeats: int, seed: int) -> None:
    device = generate_device("ribbon", Na=24, Nb=4, Norb=2, bnum=4, seed=seed)
    grid = SpectralGrid(nkz=1, nqz=1, ne=16, nomega=4).validate()
    gf = gf_phase(device, grid)
    coupling = Coupling.from_device(device)
    size = f"Na={device.structure.Na} NE={grid.ne} Nomega={grid.nomega}"
    for variant in VARIANTS:
        report.add("sse", variant, size, time_call(
            lambda v=variant: compute_self_energies(v, gf.electron, gf.phonon, coupling, grid), repeats))


def run_bench(benchmarks: Sequence[str], repeats: int = settings.BENCH_REPEATS, seed: int = 0) -> BenchReport:
    """
    Micro-benchmarks of the batched kernels, the triple-product strategies and the SSE variants.
    An empty selection gives an empty report.
    """
    unknown = [b for b in benchmarks if b not in BENCHMARKS]
    if unknown:
        raise ConfigError("bench", f"unknown benchmark(s) {unknown}; expected {BENCHMARKS}")
    if repeats < 1:
        raise ConfigError("repeats", "need at least one repetition")
    report = BenchReport()
    rng = np.random.default_rng(seed)
    for name in benchmarks:
        if name == "sbsmm":
            _bench_sbsmm(report, repeats, rng)
        elif name == "triple_product":
            _bench_triple(report, repeats, rng)
        else:
            _bench_sse(report, repeats, seed)
    return report
