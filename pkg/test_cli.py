import json
import os

import pandas as pd
import pytest

from config import settings
from main import main


def _manifest(out_dir):
    with open(os.path.join(out_dir, settings.MANIFEST_FILE_NAME), encoding="utf-8") as f:
        return json.load(f)


@pytest.fixture
def device_dir(tmp_path):
    out = str(tmp_path / "gen")
    code = main(["generate", "--out", out, "--kind", "chain", "--na", "8", "--nb", "2", "--norb", "2",
                 "--bnum", "4", "--vds", "0.1", "--seed", "7"])
    assert code == 0
    return os.path.join(out, "device")


def test_generate_writes_a_loadable_device(device_dir):
    assert os.path.exists(os.path.join(device_dir, settings.DEVICE_HEADER_FILE))
    manifest = _manifest(os.path.dirname(device_dir))
    assert manifest["command"] == "generate"
    assert manifest["status"]["device"]["bnum"] == 4
    assert manifest["artifacts"]["device"] == device_dir


def test_simulate_writes_reports(tmp_path, device_dir):
    out = str(tmp_path / "sim")
    code = main(["simulate", "--device", device_dir, "--out", out, "--ne", "10", "--nomega", "2",
                 "--max-iter", "2", "--threads", "2", "--xlsx"])
    assert code == 0
    for name in ("scf_trace.csv", "current_profile.csv", "spectral_current.csv", "energy_currents.csv",
                 "contact_currents.csv", "reports.xlsx", settings.LOG_FILE_NAME):
        assert os.path.exists(os.path.join(out, name)), name
    trace = pd.read_csv(os.path.join(out, "scf_trace.csv"))
    assert len(trace) == 2
    profile = pd.read_csv(os.path.join(out, "current_profile.csv"))
    assert len(profile) == 3
    contacts = pd.read_csv(os.path.join(out, "contact_currents.csv"))
    assert list(contacts["contact"]) == ["source", "drain"]
    manifest = _manifest(out)
    assert manifest["threads"] == 2
    assert manifest["status"]["iterations"] == 2
    assert "numpy" in manifest["versions"]


def test_cost_model_reports_tables(tmp_path):
    out = str(tmp_path / "cost")
    code = main(["cost-model", "--out", out, "--procs", "768"])
    assert code == 0
    tables = pd.read_csv(os.path.join(out, "cost_tables.csv"))
    sse = tables[(tables["row"] == "SSE (OMEN)") & (tables["column"] == "Nkz=3")]
    assert sse["computed"].iloc[0] == pytest.approx(24.40, abs=0.01)
    plan = pd.read_csv(os.path.join(out, "cost_plan.csv"))
    assert set(plan["collective"]) == {"G", "Sigma", "D", "Pi"}
    assert _manifest(out)["status"]["plan"]["plan"].startswith("atom_energy P=768")


def test_empty_bench_selection_runs_nothing(tmp_path):
    out = str(tmp_path / "bench")
    assert main(["bench", "--out", out, "--bench"]) == 0
    assert pd.read_csv(os.path.join(out, "bench.csv")).empty


def test_missing_device_is_an_input_error(tmp_path):
    out = str(tmp_path / "err")
    assert main(["simulate", "--out", out]) == 1
    manifest = _manifest(out)
    assert manifest["status"]["status"] == "error"
    assert manifest["status"]["kind"] == "ConfigError"


def test_incommensurate_momenta_are_an_input_error(tmp_path, device_dir):
    out = str(tmp_path / "err")
    assert main(["simulate", "--device", device_dir, "--out", out, "--nkz", "3", "--nqz", "1"]) == 1
    assert _manifest(out)["status"]["kind"] == "GridMisalignmentError"


def test_infeasible_tiling_is_an_input_error(tmp_path):
    out = str(tmp_path / "err")
    assert main(["cost-model", "--out", out, "--procs", "768", "--te", "5"]) == 1
    assert _manifest(out)["status"]["kind"] == "InfeasiblePlanError"


def test_unknown_benchmark_is_an_input_error(tmp_path):
    assert main(["bench", "--out", str(tmp_path), "--bench", "fft"]) == 1
