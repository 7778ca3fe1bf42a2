import pytest

from core.bench import BENCH_COLUMNS, run_bench, time_call
from core.errors import ConfigError
from core.linalg import STRATEGIES


def test_time_call_reports_the_spread():
    timing = time_call(lambda: sum(range(100)), repeats=3)
    assert timing["repeats"] == 3
    assert timing["min_s"] <= timing["median_s"] <= timing["max_s"]
    assert timing["spread"] >= 0.0


def test_triple_product_bench_covers_every_strategy():
    frame = run_bench(["triple_product"], repeats=1).to_frame()
    assert list(frame.columns) == BENCH_COLUMNS
    assert set(frame["variant"]) == set(STRATEGIES)


def test_empty_selection():
    assert run_bench([]).to_frame().empty


@pytest.mark.parametrize("names,repeats", [(["fft"], 1), (["sbsmm"], 0)])
def test_bad_selection(names, repeats):
    with pytest.raises(ConfigError):
        run_bench(names, repeats=repeats)
