"""Average accuracy and the fine / coarse / overall forgetting rates.

Accuracies are fractions in [0, 1]. Sessions are indexed 0..T with session 0 the
coarse base session.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UndefinedMetric


@dataclass
class MetricSeries:
    A_t: list  # sessions 0..T
    A_c: list  # sessions 0..T (None where not evaluated)
    A_f: list  # sessions 0..T (None at 0)
    c: list  # cumulative fine classes c_t, sessions 1..T
    N_f: int

    @property
    def T(self) -> int:
        return len(self.A_t) - 1


def average_accuracy(A_t) -> float:
    A_t = list(A_t)
    if not A_t:
        raise ConfigError("empty accuracy series")
    return float(np.mean(A_t))


def fine_forgetting(prev: float, cur: float) -> float:
    if prev is None or cur is None:
        raise UndefinedMetric("fine accuracy not evaluated")
    if prev == 0:
        raise UndefinedMetric("previous fine accuracy is zero")
    return (prev - cur) / prev


def coarse_forgetting(base: float, cur: float) -> float:
    if base is None or cur is None:
        raise UndefinedMetric("coarse accuracy not evaluated")
    if base == 0:
        raise UndefinedMetric("base coarse accuracy is zero")
    return (base - cur) / base


def overall_forgetting(s: MetricSeries) -> float:
    """Weighted forgetting rate.

    Fine terms run over t = 2..T weighted by c_t / N_f; coarse terms over
    t = 1..T-1 weighted by 1 - c_t / N_f, each weight taken at its own t.
    """
    T = s.T
    if T < 2:
        raise UndefinedMetric(f"overall forgetting needs T >= 2, got {T}")
    total = 0.0
    for t in range(2, T + 1):
        total += fine_forgetting(s.A_f[t - 1], s.A_f[t]) * s.c[t - 1] / s.N_f
    for t in range(1, T):
        total += coarse_forgetting(s.A_c[0], s.A_c[t]) * (1.0 - s.c[t - 1] / s.N_f)
    return total / (T - 1)


def per_session_forgetting(s: MetricSeries) -> tuple[dict, dict]:
    """F_f^t (t >= 2) and F_c^t (t >= 1) with None where undefined."""
    Ff, Fc = {}, {}
    for t in range(2, s.T + 1):
        try:
            Ff[t] = fine_forgetting(s.A_f[t - 1], s.A_f[t])
        except UndefinedMetric:
            Ff[t] = None
    for t in range(1, s.T + 1):
        try:
            Fc[t] = coarse_forgetting(s.A_c[0], s.A_c[t])
        except UndefinedMetric:
            Fc[t] = None
    return Ff, Fc


def pct(x) -> str:
    return "N/A" if x is None else f"{100 * x:.2f}"
