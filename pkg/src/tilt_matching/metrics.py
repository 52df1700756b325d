"""Sample-quality metrics and stable-schema CSV output.

The metrics CSV written by ``run`` has exactly three columns,
``experiment,metric,value``, one row per metric. Rows present for every
experiment: ``final_ess``, ``energy_w2``, ``mean_energy``, ``n_levels``,
``n_failed``, ``mean_<j>`` and ``var_<j>`` for each coordinate ``j``. Gaussian
targets add ``analytic_mean_<j>`` and ``analytic_var_<j>``. Lennard-Jones
targets add ``mean_distance``. Runs with ``mala_steps > 0`` add
``mala_acceptance``, ``mala_mean_energy`` and (with a reference sampler)
``mala_energy_w2`` for the MALA-refined final samples; ``final_ess`` always
refers to the raw model samples. Missing values are written as ``nan``.

``energy_w2`` is the 1D energy-histogram W2. The geometric W2 variant that
needs rigid-body alignment of particle clouds is not provided.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

CSV_COLUMNS = ("experiment", "metric", "value")


def _as_energies(samples, energy_fn):
    arr = np.asarray(samples, dtype=np.float64)
    if energy_fn is not None:
        arr = np.asarray(energy_fn(arr), dtype=np.float64)
    arr = arr.reshape(-1)
    if arr.size == 0:
        raise ValueError("empty sample set")
    return np.sort(arr)


def energy_w2(samples_a, samples_b, energy_fn: Optional[Callable] = None) -> float:
    """Exact W2 between the empirical laws of ``E(samples_a)`` and ``E(samples_b)``.

    Without ``energy_fn`` the inputs are taken to be energies already. Both
    quantile functions are step functions; they are compared on the merged
    set of breakpoints, which handles unequal sample sizes exactly.
    """
    ea, eb = _as_energies(samples_a, energy_fn), _as_energies(samples_b, energy_fn)
    n, m = ea.size, eb.size
    if n == m:
        return float(np.sqrt(np.mean((ea - eb) ** 2)))
    u = np.union1d(np.arange(1, n + 1) / n, np.arange(1, m + 1) / m)
    du = np.diff(np.concatenate([[0.0], u]))
    mid = u - 0.5 * du
    qa = ea[np.minimum((mid * n).astype(np.int64), n - 1)]
    qb = eb[np.minimum((mid * m).astype(np.int64), m - 1)]
    return float(np.sqrt(np.sum(du * (qa - qb) ** 2)))


def histogram(values, bins: int = 100, value_range=None):
    """Density-normalised histogram as ``(edges, density)`` plot data."""
    density, edges = np.histogram(np.asarray(values).reshape(-1), bins=bins, range=value_range,
                                  density=True)
    return edges, density


@dataclass
class MetricsReport:
    experiment: str
    ess: float = float("nan")
    energy_w2: float = float("nan")
    values: dict = field(default_factory=dict)
    distance_hist: Optional[tuple] = None
    trace_path: Optional[str] = None

    def rows(self):
        yield self.experiment, "final_ess", self.ess
        yield self.experiment, "energy_w2", self.energy_w2
        for key in sorted(self.values):
            yield self.experiment, key, self.values[key]

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for exp, key, value in self.rows():
                writer.writerow([exp, key, repr(float(value))])

    def write_distance_hist(self, path) -> None:
        if self.distance_hist is None:
            return
        edges, density = self.distance_hist
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_lo", "bin_hi", "density"])
            for lo, hi, d in zip(edges[:-1], edges[1:], density):
                writer.writerow([repr(float(lo)), repr(float(hi)), repr(float(d))])


def read_metrics_csv(path) -> dict:
    with Path(path).open() as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected metrics columns {reader.fieldnames}")
        return {row["metric"]: float(row["value"]) for row in reader}
