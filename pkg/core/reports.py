import json
import logging
import os
import platform
from typing import Dict, Optional

import numpy as np
import pandas as pd
import scipy
from tabulate import tabulate

from config import settings
from core.device_model import SpectralGrid
from core.rgf_solver import Observables
from core.scf_driver import ScfTrace

logger = logging.getLogger(__name__)

SCF_TRACE_CSV = "scf_trace.csv"
CURRENT_PROFILE_CSV = "current_profile.csv"
SPECTRAL_CURRENT_CSV = "spectral_current.csv"
ENERGY_CURRENTS_CSV = "energy_currents.csv"
CONTACT_CURRENTS_CSV = "contact_currents.csv"
COST_TABLES_CSV = "cost_tables.csv"
WORKBOOK_NAME = "reports.xlsx"


def current_profile_frame(obs: Observables) -> pd.DataFrame:
    """Bond current at each internal block boundary."""
    return pd.DataFrame({
        "boundary": np.arange(len(obs.boundary_x)),
        "x_nm": obs.boundary_x,
        "current": obs.current,
    })


def spectral_current_frame(obs: Observables, grid: SpectralGrid) -> pd.DataFrame:
    """Long form: one row per (boundary, energy)."""
    nbound, ne = obs.spectral_current.shape
    return pd.DataFrame({
        "boundary": np.repeat(np.arange(nbound), ne),
        "x_nm": np.repeat(obs.boundary_x, ne),
        "energy": np.tile(grid.energies, nbound),
        "spectral_current": obs.spectral_current.ravel(),
    })


def energy_currents_frame(obs: Observables) -> pd.DataFrame:
    """Electron, phonon and total bond energy currents per internal boundary."""
    return pd.DataFrame({
        "boundary": np.arange(len(obs.boundary_x)),
        "x_nm": obs.boundary_x,
        "electron": obs.electron_energy_current,
        "phonon": obs.phonon_energy_current,
        "total": obs.total_energy_current,
    })


def contact_currents_frame(obs: Observables) -> pd.DataFrame:
    """Particle and energy flows through the source and drain contacts."""
    return pd.DataFrame({
        "contact": ["source", "drain"],
        "current": obs.contact_current,
        "electron_energy": obs.contact_electron_energy_current,
        "phonon_energy": obs.contact_phonon_energy_current,
        "total_energy": obs.contact_energy_current,
    })


def simulation_frames(trace: ScfTrace, obs: Observables, grid: SpectralGrid) -> Dict[str, pd.DataFrame]:
    """Every CSV a simulate run writes, keyed by file name."""
    return {
        SCF_TRACE_CSV: trace.to_frame(),
        CURRENT_PROFILE_CSV: current_profile_frame(obs),
        SPECTRAL_CURRENT_CSV: spectral_current_frame(obs, grid),
        ENERGY_CURRENTS_CSV: energy_currents_frame(obs),
        CONTACT_CURRENTS_CSV: contact_currents_frame(obs),
    }


def write_frames(frames: Dict[str, pd.DataFrame], out_dir: str) -> Dict[str, str]:
    """Write each frame to out_dir/<name>; returns name -> path."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for name, frame in frames.items():
        path = os.path.join(out_dir, name)
        frame.to_csv(path, index=False)
        paths[name] = path
        logger.info(f"wrote {path} ({len(frame)} rows)")
    return paths


def write_workbook(frames: Dict[str, pd.DataFrame], out_dir: str) -> str:
    """One sheet per frame; sheet names are the CSV stems cut to Excel's 31 characters."""
    path = os.path.join(out_dir, WORKBOOK_NAME)
    with pd.ExcelWriter(path, engine="openpyxl") as writer:
        for name, frame in frames.items():
            frame.to_excel(writer, sheet_name=os.path.splitext(name)[0][:31], index=False)
    logger.info(f"wrote {path} with {len(frames)} sheet(s)")
    return path


def format_table(frame: pd.DataFrame, floatfmt: str = ".4g") -> str:
    """GitHub-style text table for the console."""
    return tabulate(frame, headers="keys", tablefmt="github", showindex=False, floatfmt=floatfmt)


def cost_summary(tables: pd.DataFrame) -> str:
    """Wide text view of the long-form cost tables, computed value with the reference in brackets."""
    blocks = []
    for name, part in tables.groupby("table", sort=False):
        cell = part.apply(
            lambda r: f"{r['computed']:.4g}" + (f" [{r['reference']:.4g}]" if pd.notna(r["reference"]) else ""),
            axis=1,
        )
        wide = part.assign(cell=cell).pivot(index="row", columns="column", values="cell")
        wide = wide.reindex(index=part["row"].unique(), columns=part["column"].unique())
        blocks.append(f"{name} ({', '.join(part['unit'].unique())})\n"
                      + tabulate(wide, headers="keys", tablefmt="github"))
    return "\n\n".join(blocks)


def versions() -> dict:
    """Interpreter and numeric library versions recorded in the manifest."""
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
    }


def write_manifest(out_dir: str, command: str, config: dict, status: dict, timings: dict,
                   threads: Optional[int] = None, artifacts: Optional[dict] = None) -> str:
    """Write manifest.json (command, config echo, versions, timings, status, artifacts); returns its path."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "versions": versions(),
        "threads": threads,
        "timings": timings,
        "status": status,
        "artifacts": artifacts or {},
    }
    path = os.path.join(out_dir, settings.MANIFEST_FILE_NAME)
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(manifest, indent=2, ensure_ascii=False, default=str))
    return path
