"""Shared test helpers: tiny builders and an independent gradient oracle."""

from datetime import datetime, timezone

import numpy as np
import pytest

from fedcast.data import ConsumptionSeries, GeneratorConfig, synth_population
from fedcast.neural import ew_mse, forward

START = datetime(2021, 3, 1, tzinfo=timezone.utc)


def make_series(values, building_id="b0"):
    return ConsumptionSeries(
        building_id=building_id, start=START, values=np.asarray(values, dtype=np.float64)
    )


def sine_series(days=4, base=2.0, amplitude=1.0, noise=0.0, seed=0, building_id="b0"):
    """Smooth daily-periodic consumption with optional noise, clipped at 0."""
    n = days * 96
    t = np.arange(n)
    rng = np.random.default_rng(seed)
    vals = base + amplitude * np.sin(2 * np.pi * t / 96) + rng.normal(0, noise, n)
    return make_series(np.maximum(vals, 0.0), building_id)


def two_class_population(days=5, n_per_class=3, seed=9):
    gen = GeneratorConfig.from_dict(
        {
            "days": days,
            "seed": seed,
            "classes": [
                {"name": "low", "base_kwh": 0.8, "n_clients": n_per_class,
                 "amplitude": 0.4, "noise_sigma": 0.02, "scale_jitter": 0.1},
                {"name": "high", "base_kwh": 6.0, "n_clients": n_per_class,
                 "amplitude": 3.0, "noise_sigma": 0.15, "scale_jitter": 0.1},
            ],
        }
    )
    return synth_population(gen)


def fd_gradients(cfg, params, X, Y, ew_base=1.0, h=1e-5):
    """Central-difference gradients of the training loss.

    Built only from forward() and ew_mse(), so it is independent of the
    backpropagation code it is used to check.
    """
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            plus = {k: v.copy() for k, v in params.items()}
            minus = {k: v.copy() for k, v in params.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            up = ew_mse(forward(cfg, plus, X), Y, ew_base)
            down = ew_mse(forward(cfg, minus, X), Y, ew_base)
            g[idx] = (up - down) / (2.0 * h)
            it.iternext()
        grads[name] = g
    return grads


def max_rel_err(analytic, numeric, floor=1e-8):
    """Worst relative disagreement, with a denominator guard.

    Relative error is meaningless for coordinates where both gradients are
    near zero (the finite-difference estimate is pure rounding noise there),
    so denominators are floored. Callers who raise the floor should bound the
    absolute error on the guarded coordinates separately.
    """
    worst = 0.0
    for name in analytic:
        a = analytic[name]
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def max_abs_err_below(analytic, numeric, magnitude):
    """Worst absolute disagreement over coordinates smaller than magnitude."""
    worst = 0.0
    for name in analytic:
        a = analytic[name]
        n = numeric[name]
        small = np.maximum(np.abs(a), np.abs(n)) < magnitude
        if small.any():
            worst = max(worst, float(np.max(np.abs(a - n)[small])))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
