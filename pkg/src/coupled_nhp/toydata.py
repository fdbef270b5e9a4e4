"""Generator for the bundled toy panels.

The toy world is a small coupled system: eight mildly self-exciting
count streams, a two-dimensional latent response driven by three of
them, and twenty search-interest terms loading on the latent response.
Volumes are kept modest so every CLI path runs in seconds.
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from .hawkes import HawkesParams, inv_softplus, monthly_counts, simulate_thinning
from .panel import COMPONENTS, TRENDS_TERMS, CountPanel, TrendsPanel, write_counts, write_trends

TOY_SEED = 20260408
TOY_ORIGIN = "2014-01"
TOY_MONTHS = 120


def toy_panels(seed: int = TOY_SEED, months: int = TOY_MONTHS):
    """Return ``(balanced, low_threshold, trends)`` panels."""
    rng = np.random.default_rng(seed)
    D = len(COMPONENTS)
    base = rng.uniform(2, 8, size=D)
    alpha = np.diag(rng.uniform(0.1, 0.3, size=D))
    omega = np.full((D, D), 1.5)
    p = HawkesParams(inv_softplus(base), alpha, omega, np.zeros((D, 0)))
    stream = simulate_thinning(p, None, months, seed)
    # slow upward drift in volume
    drift = np.linspace(0.8, 1.4, months)[:, None]
    raw = monthly_counts(stream, TOY_ORIGIN).counts
    balanced = rng.binomial(np.round(raw * drift * 2).astype(np.int64), 0.5)
    low = balanced + rng.poisson(0.15 * balanced + 1)

    x = (balanced - balanced.mean(0)) / balanced.std(0)
    B = np.zeros((2, D))
    B[0, COMPONENTS.index("natural language processing")] = 0.4
    B[0, COMPONENTS.index("speech")] = 0.3
    B[1, COMPONENTS.index("hardware")] = 0.35
    A = np.array([[0.85, 0.05], [0.0, 0.7]])
    z = np.zeros((months, 2))
    for m in range(1, months):
        z[m] = A @ z[m - 1] + B @ x[m - 1] + rng.normal(0, 0.3, size=2)
    load = rng.uniform(0.4, 1.0, size=(len(TRENDS_TERMS), 2)) * np.array([1.0, 0.5])
    season = 3 * np.sin(2 * np.pi * np.arange(months) / 12)[:, None]
    vals = 45 + 8 * z @ load.T + season + rng.normal(0, 2.5, size=(months, len(TRENDS_TERMS)))
    vals = np.clip(vals, 0, 100)
    mo = np.arange(months)
    return (CountPanel(TOY_ORIGIN, mo, balanced), CountPanel(TOY_ORIGIN, mo, low),
            TrendsPanel(TOY_ORIGIN, mo, TRENDS_TERMS, vals))


def write_toy(out_dir, seed: int = TOY_SEED) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    balanced, low, trends = toy_panels(seed)
    write_counts(balanced, out / "toy_counts.csv")
    write_counts(low, out / "toy_counts_low.csv")
    write_trends(trends, out / "toy_trends.csv")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description="write the toy panels")
    ap.add_argument("out", nargs="?", default=str(Path(__file__).parent / "data"))
    write_toy(ap.parse_args().out)
