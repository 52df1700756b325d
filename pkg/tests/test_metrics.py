import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilt_matching.metrics import CSV_COLUMNS, MetricsReport, energy_w2, histogram, read_metrics_csv

finite = st.floats(-50, 50, allow_nan=False)
samples = st.lists(finite, min_size=1, max_size=40)


def test_identical_sets_have_zero_distance():
    x = np.random.default_rng(0).normal(size=100)
    assert energy_w2(x, x) == 0.0


def test_shifted_diracs():
    assert energy_w2(np.zeros(10), np.full(7, 0.3)) == pytest.approx(0.3, abs=1e-15)


def test_unit_gaussian_shift():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=100_000), 1.0 + rng.normal(size=100_000)
    assert energy_w2(a, b) == pytest.approx(1.0, rel=0.02)


def test_unequal_sizes_match_quantile_integral():
    a = np.array([0.0, 1.0])
    b = np.array([0.0, 1.0, 2.0])
    # quantile pieces: [0,1/3) 0 vs 0, [1/3,1/2) 0 vs 1, [1/2,2/3) 1 vs 1, [2/3,1) 1 vs 2
    assert energy_w2(a, b) == pytest.approx(np.sqrt(1 / 6 + 1 / 3))


def test_energy_function_applied():
    x = np.array([[1.0, 0.0], [0.0, 2.0]])
    energy = lambda p: np.sum(p ** 2, axis=1)
    assert energy_w2(x, x[::-1], energy) == 0.0
    assert energy_w2(x, x + 1.0, energy) > 0


def test_empty_rejected():
    with pytest.raises(ValueError):
        energy_w2([], [1.0])


@settings(max_examples=100)
@given(samples, samples)
def test_symmetric(a, b):
    assert energy_w2(a, b) == pytest.approx(energy_w2(b, a), abs=1e-12)


@settings(max_examples=100)
@given(samples, samples, samples)
def test_triangle_inequality(a, b, c):
    assert energy_w2(a, c) <= energy_w2(a, b) + energy_w2(b, c) + 1e-9


def test_histogram_is_density():
    edges, dens = histogram(np.random.default_rng(0).uniform(0, 6, 1000), bins=100, value_range=(0, 6))
    assert edges.size == 101 and np.sum(dens * np.diff(edges)) == pytest.approx(1.0)


def test_csv_schema_is_stable(tmp_path):
    rep = MetricsReport("exp", ess=0.5, values={"var_0": 2.0, "mean_0": 1.0})
    path = tmp_path / "m.csv"
    rep.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert [line.split(",")[1] for line in lines[1:]] == ["final_ess", "energy_w2", "mean_0", "var_0"]
    vals = read_metrics_csv(path)
    assert vals["final_ess"] == 0.5 and np.isnan(vals["energy_w2"])


def test_read_rejects_foreign_csv(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_metrics_csv(path)


def test_distance_hist_written(tmp_path):
    rep = MetricsReport("exp", distance_hist=histogram([1.0, 2.0], bins=4, value_range=(0, 4)))
    rep.write_distance_hist(tmp_path / "h.csv")
    assert len((tmp_path / "h.csv").read_text().splitlines()) == 5
