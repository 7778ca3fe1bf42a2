import pytest

from config import settings
from core.errors import ConfigError
from core.workers import map_points, resolve_threads


def test_flag_wins_over_environment(monkeypatch):
    monkeypatch.setenv(settings.THREADS_ENV, "3")
    assert resolve_threads(5) == 5
    assert resolve_threads() == 3


def test_bad_environment_value_falls_back(monkeypatch):
    monkeypatch.setenv(settings.THREADS_ENV, "many")
    assert resolve_threads() >= 1


@pytest.mark.parametrize("threads", [1, 4])
def test_results_keep_input_order(threads):
    results, failures = map_points(lambda x: x * x, range(10), threads=threads)
    assert results == [x * x for x in range(10)]
    assert failures == []


def test_failures_are_collected_per_point():
    def odd_fails(x):
        if x % 2:
            raise ConfigError("x", f"{x} is odd")
        return x

    results, failures = map_points(odd_fails, range(5), threads=2)
    assert results == [0, None, 2, None, 4]
    assert [p for p, _ in failures] == [1, 3]
