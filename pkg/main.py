import argparse
import logging
import os
import sys
import time
from typing import List, Optional

import pandas as pd

# Add the project root to the Python path
sys.path.insert(0, os.path.abspath(os.path.dirname(__file__)))

from config import settings
from core import reports
from core.bench import BENCHMARKS, run_bench
from core.decomp_model import (POLICIES, StructureParams, choose_plan, comm_model, cost_tables,
                               time_lower_bound)
from core.device_model import LATTICE_KINDS, SpectralGrid, generate_device, load_device, save_device
from core.errors import (ConfigError, DeviceFormatError, DivergenceError, GridMisalignmentError,
                         InfeasiblePlanError, NegfError, PartitionError)
from core.scf_driver import ScfConfig, compare_precision, run_scf
from core.sse_kernel import VARIANTS
from core.workers import resolve_threads

CACHE_FLAGS = {"none": "no_cache", "bc": "cache_bc", "bc+spec": "cache_bc_spec"}
# bad input -> 1, numerical failure -> 2
INPUT_ERRORS = (ConfigError, PartitionError, GridMisalignmentError, DeviceFormatError, InfeasiblePlanError)


def setup_logging(out_dir: str, verbose: bool = False) -> None:
    os.makedirs(out_dir, exist_ok=True)
    level = logging.DEBUG if verbose else getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(levelname)s: %(message)s',
        handlers=[
            logging.FileHandler(os.path.join(out_dir, settings.LOG_FILE_NAME)),
            logging.StreamHandler(sys.stdout)
        ],
        force=True,
    )


def _grid(args) -> SpectralGrid:
    return SpectralGrid(nkz=args.nkz, nqz=args.nqz, ne=args.ne, nomega=args.nomega).validate()


def _scf_config(args, threads: int) -> ScfConfig:
    return ScfConfig(max_iter=args.max_iter, tol=args.tol, cache_mode=CACHE_FLAGS[args.cache],
                     sse_variant=args.sse, mixing=args.mixing, threads=threads).validate()


def _load(args):
    if not args.device:
        raise ConfigError("device", "--device is required for this command")
    return load_device(args.device)


def cmd_generate(args, threads: int) -> dict:
    device = generate_device(args.kind, Na=args.na, Nb=args.nb, Norb=args.norb, bnum=args.bnum,
                             seed=args.seed, Vds=args.vds, Vgs=args.vgs)
    path = args.device or os.path.join(args.out, "device")
    save_device(device, path)
    logging.info(f"Device written to {path}")
    st = device.structure
    return {"status": "success", "artifacts": {"device": path},
            "device": {"Na": st.Na, "Nb": st.Nb, "Norb": st.Norb, "bnum": st.bnum}}


def cmd_simulate(args, threads: int) -> dict:
    device, grid = _load(args), _grid(args)
    config = _scf_config(args, threads)
    try:
        result = run_scf(device, grid, config)
    except DivergenceError as e:
        if e.trace is not None and len(e.trace):
            e.trace.to_csv(os.path.join(args.out, reports.SCF_TRACE_CSV))
        raise
    frames = reports.simulation_frames(result.trace, result.observables, grid)
    artifacts = reports.write_frames(frames, args.out)
    if args.xlsx:
        artifacts["xlsx"] = reports.write_workbook(frames, args.out)
    print(reports.format_table(result.trace.to_frame()))
    return {"status": "success", **result.status, "counters": result.counters, "artifacts": artifacts}


def cmd_compare_precision(args, threads: int) -> dict:
    device, grid = _load(args), _grid(args)
    report = compare_precision(device, grid, _scf_config(args, threads))
    errors = pd.DataFrame(
        [{"variant": k, "sigma_error": v, "iterations": report.iterations[k],
          "current": report.results[k].current} for k, v in report.errors.items()]
    )
    frames = {"precision_errors.csv": errors, "sigma_histograms.csv": report.histograms,
              "convergence_curves.csv": report.curves}
    artifacts = reports.write_frames(frames, args.out)
    if args.xlsx:
        artifacts["xlsx"] = reports.write_workbook(frames, args.out)
    print(reports.format_table(errors, floatfmt=".3e"))
    return {"status": "success", **report.summary(), "artifacts": artifacts}


def cmd_cost_model(args, threads: int) -> dict:
    overrides = {k: v for k, v in (("NE", args.ne_model), ("Nomega", args.nomega_model)) if v}
    preset = StructureParams.large if args.preset == "large" else StructureParams.small
    params = preset().with_(**overrides)
    tables = cost_tables(params, policy=args.policy)
    frames = {reports.COST_TABLES_CSV: tables}
    result = {"status": "success"}

    if args.procs:
        run_params = params.with_(Nkz=args.nkz, Nqz=args.nkz) if args.nkz_set else params
        plan = choose_plan(run_params, args.procs, policy=args.policy, Ta=args.ta, TE=args.te,
                           allow_oversubscription=args.allow_oversubscription)
        report = comm_model(run_params, plan)
        bounds = time_lower_bound(report, args.injection_bw, args.procs_per_node)
        result.update(plan=report.summary(), lower_bound_seconds=bounds)
        frames["cost_plan.csv"] = pd.DataFrame(
            [{"collective": name, "seconds": sec, "total_bytes": report.totals[name]}
             for name, sec in bounds.items()]
        )

    artifacts = reports.write_frames(frames, args.out)
    if args.xlsx:
        artifacts["xlsx"] = reports.write_workbook(frames, args.out)
    print(reports.cost_summary(tables))
    result["artifacts"] = artifacts
    return result


def cmd_bench(args, threads: int) -> dict:
    names = list(BENCHMARKS) if args.bench is None else args.bench
    report = run_bench(names, repeats=args.repeats, seed=args.seed)
    frame = report.to_frame()
    artifacts = reports.write_frames({"bench.csv": frame}, args.out)
    if len(frame):
        print(reports.format_table(frame, floatfmt=".3e"))
    return {"status": "success", "benchmarks": names, "artifacts": artifacts}


COMMANDS = {
    "generate": cmd_generate,
    "simulate": cmd_simulate,
    "cost-model": cmd_cost_model,
    "compare-precision": cmd_compare_precision,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Dissipative NEGF transport on a desk-scale device')
    parser.add_argument('command', choices=list(COMMANDS))
    parser.add_argument('--device', help='Device directory (written by generate, read by simulate)')
    parser.add_argument('--out', default=settings.DEFAULT_OUT_DIR, help='Output directory')
    parser.add_argument('--threads', type=int, default=None, help=f'Worker threads (else ${settings.THREADS_ENV})')
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--xlsx', action='store_true', help='Also write reports.xlsx')
    parser.add_argument('--verbose', action='store_true')

    device = parser.add_argument_group('generate')
    device.add_argument('--kind', choices=LATTICE_KINDS, default='chain')
    device.add_argument('--na', type=int, default=16)
    device.add_argument('--nb', type=int, default=2)
    device.add_argument('--norb', type=int, default=2)
    device.add_argument('--bnum', type=int, default=4)
    device.add_argument('--vds', type=float, default=0.0)
    device.add_argument('--vgs', type=float, default=0.0)

    scf = parser.add_argument_group('simulate / compare-precision')
    scf.add_argument('--nkz', type=int, default=None)
    scf.add_argument('--nqz', type=int, default=None)
    scf.add_argument('--ne', type=int, default=32)
    scf.add_argument('--nomega', type=int, default=4)
    scf.add_argument('--max-iter', type=int, default=settings.SCF_MAX_ITER)
    scf.add_argument('--tol', type=float, default=settings.SCF_TOL)
    scf.add_argument('--mixing', type=float, default=settings.MIXING)
    scf.add_argument('--cache', choices=list(CACHE_FLAGS), default='bc+spec')
    scf.add_argument('--sse', choices=VARIANTS, default='regrouped')

    cost = parser.add_argument_group('cost-model')
    cost.add_argument('--preset', choices=('small', 'large'), default='small')
    cost.add_argument('--policy', choices=POLICIES, default='kz_aligned')
    cost.add_argument('--procs', type=int, default=None)
    cost.add_argument('--ta', type=int, default=None)
    cost.add_argument('--te', type=int, default=None)
    cost.add_argument('--injection-bw', type=float, default=settings.LARGE_RUN_INJECTION_BW)
    cost.add_argument('--procs-per-node', type=int, default=settings.LARGE_RUN_PROCS_PER_NODE)
    cost.add_argument('--allow-oversubscription', action='store_true')
    cost.add_argument('--ne-model', type=int, default=None, help='Override the preset NE')
    cost.add_argument('--nomega-model', type=int, default=None, help='Override the preset Nomega')

    bench = parser.add_argument_group('bench')
    bench.add_argument('--bench', nargs='*', default=None, help=f'Subset of {BENCHMARKS}; empty runs nothing')
    bench.add_argument('--repeats', type=int, default=settings.BENCH_REPEATS)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    args.nkz_set = args.nkz is not None
    args.nkz = args.nkz or 1
    args.nqz = args.nqz or args.nkz
    setup_logging(args.out, args.verbose)

    config = {k: v for k, v in vars(args).items() if k != 'nkz_set'}
    started = time.perf_counter()
    threads = None
    try:
        threads = resolve_threads(args.threads)
        logging.info(f"Running {args.command} with {threads} thread(s), output in {args.out}")
        result = COMMANDS[args.command](args, threads)
        code = 0
    except INPUT_ERRORS as e:
        logging.error(f"Invalid input: {e}")
        result, code = {'status': 'error', 'error': str(e), 'kind': type(e).__name__}, 1
    except NegfError as e:
        logging.error(f"{args.command} failed: {e}")
        result, code = {'status': 'error', 'error': str(e), 'kind': type(e).__name__}, 2
    except Exception as e:
        logging.exception(f"Unexpected failure in {args.command}")
        result, code = {'status': 'error', 'error': str(e), 'kind': type(e).__name__}, 2

    artifacts = result.pop('artifacts', {}) if isinstance(result, dict) else {}
    timings = {"total_seconds": time.perf_counter() - started}
    path = reports.write_manifest(args.out, args.command, config, result, timings, threads, artifacts)
    logging.info(f"[INFO] {args.command} finished with exit code {code}; manifest at {path}")
    return code


if __name__ == '__main__':
    sys.exit(main())
