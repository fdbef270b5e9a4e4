"""Held-out scores, block-bootstrap intervals, paired deltas and regret.

Count pseudo-log-likelihood is a Gaussian log density of each held-out
month's total count, centred on the model's expected total, with the
variance of the model's one-step total-count residuals on its training
months.  Count RMSE is also on monthly totals.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

BASE_SEED = 20260408
LEVEL = 0.95
BLOCK = 3
RESAMPLES = 1000
METRICS = ("count_pll", "count_rmse", "resp_rmse")
HIGHER_BETTER = {"count_pll": True, "count_rmse": False, "resp_rmse": False}

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a_64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def label_seed(label: str, base_seed: int = BASE_SEED) -> int:
    return (int(base_seed) ^ fnv1a_64(label)) & _MASK64


@dataclass(frozen=True, eq=False)
class ScoreStream:
    """Per-month contributions; ``reduction`` is ``sum`` or ``rms``."""

    label: str
    months: np.ndarray
    per_month: np.ndarray
    reduction: str = "sum"

    def __post_init__(self):
        if self.reduction not in ("sum", "rms"):
            raise ValueError("reduction must be 'sum' or 'rms'")
        months = np.asarray(self.months, dtype=np.int64)
        vals = np.asarray(self.per_month, dtype=float)
        if months.shape != vals.shape:
            raise ValueError("months and per_month differ in length")
        object.__setattr__(self, "months", months)
        object.__setattr__(self, "per_month", vals)

    @property
    def aggregate(self) -> float:
        return reduce(self.per_month, self.reduction)


def reduce(values: np.ndarray, reduction: str) -> float:
    if reduction == "sum":
        return float(np.sum(values))
    return float(np.sqrt(np.mean(values)))


@dataclass(frozen=True)
class ConfidenceInterval:
    point: float
    lo: float
    hi: float
    level: float = LEVEL
    resamples: int = RESAMPLES
    block: int = BLOCK
    seed: int = BASE_SEED


# ------------------------------------------------------------------ scores


def gaussian_logpdf(x, mean, var) -> np.ndarray:
    if np.any(np.asarray(var) <= 0):
        raise ValueError("variance must be positive")
    x = np.asarray(x, dtype=float)
    return -0.5 * (np.log(2 * np.pi * var) + (x - mean) ** 2 / var)


def count_pll(model, stream, y, counts, months, label: str = "count_pll") -> ScoreStream:
    months = np.asarray(months, dtype=np.int64)
    fc = model.count_forecasts(stream, y, months)
    obs = np.asarray(counts)[months].sum(axis=1)
    return ScoreStream(label, months, gaussian_logpdf(obs, fc.sum(axis=1), model.count_resid_var))


def count_rmse(model, stream, y, counts, months, label: str = "count_rmse") -> ScoreStream:
    months = np.asarray(months, dtype=np.int64)
    fc = model.count_forecasts(stream, y, months)
    obs = np.asarray(counts)[months].sum(axis=1)
    return ScoreStream(label, months, (obs - fc.sum(axis=1)) ** 2, "rms")


def response_rmse(model, y, counts, months, label: str = "resp_rmse") -> ScoreStream:
    months = np.asarray(months, dtype=np.int64)
    fc = model.response_forecasts(y, counts, months)
    yy = np.asarray(y, dtype=float)
    obs = (yy[:, 0] if yy.ndim == 2 else yy)[months]
    return ScoreStream(label, months, (obs - fc) ** 2, "rms")


# --------------------------------------------------------------- bootstrap


def block_indices(n: int, block: int, rng: np.random.Generator) -> np.ndarray:
    """Concatenated moving blocks with starts in ``[0, n - block]``, truncated to n."""
    n_blocks = math.ceil(n / block)
    starts = rng.integers(0, n - block + 1, size=n_blocks)
    return (starts[:, None] + np.arange(block)[None, :]).ravel()[:n]


def _draw_rng(seed: int, draw: int) -> np.random.Generator:
    # every draw gets its own substream, so resamples are order independent
    return np.random.default_rng(np.random.SeedSequence((seed, draw)))


def _percentile_ci(point, stats, level, B, block, seed) -> ConfidenceInterval:
    a = (1 - level) / 2
    lo, hi = np.percentile(stats, [100 * a, 100 * (1 - a)])
    return ConfidenceInterval(float(point), float(lo), float(hi), level, B, block, seed)


def bootstrap_stats(s: ScoreStream, block: int = BLOCK, B: int = RESAMPLES,
                    base_seed: int = BASE_SEED, draws=None) -> np.ndarray:
    n = len(s.per_month)
    if n < block:
        raise ValueError(f"stream of length {n} is shorter than the block size {block}")
    seed = label_seed(s.label, base_seed)
    draws = range(B) if draws is None else draws
    return np.array([reduce(s.per_month[block_indices(n, block, _draw_rng(seed, b))], s.reduction)
                     for b in draws])


def block_bootstrap_ci(s: ScoreStream, block: int = BLOCK, B: int = RESAMPLES,
                       base_seed: int = BASE_SEED, level: float = LEVEL) -> ConfidenceInterval:
    stats = bootstrap_stats(s, block, B, base_seed)
    return _percentile_ci(s.aggregate, stats, level, B, block, label_seed(s.label, base_seed))


def paired_delta_ci(a: ScoreStream, b: ScoreStream, base_seed: int = BASE_SEED,
                    block: int = BLOCK, B: int = RESAMPLES, level: float = LEVEL,
                    label: str | None = None) -> ConfidenceInterval:
    """Interval for ``aggregate(a) - aggregate(b)`` with shared resample indices."""
    if not np.array_equal(a.months, b.months):
        raise ValueError("streams cover different months")
    if a.reduction != b.reduction:
        raise ValueError("streams use different reductions")
    n = len(a.months)
    if n < block:
        raise ValueError(f"stream of length {n} is shorter than the block size {block}")
    label = f"delta:{a.label}|{b.label}" if label is None else label
    seed = label_seed(label, base_seed)
    stats = np.empty(B)
    for k in range(B):
        idx = block_indices(n, block, _draw_rng(seed, k))
        stats[k] = reduce(a.per_month[idx], a.reduction) - reduce(b.per_month[idx], b.reduction)
    return _percentile_ci(a.aggregate - b.aggregate, stats, level, B, block, seed)


def ablation_delta(primary: ScoreStream, variant: ScoreStream, metric: str,
                   base_seed: int = BASE_SEED, B: int = RESAMPLES,
                   label: str | None = None) -> ConfidenceInterval:
    """Delta oriented so that a positive value means the variant is worse."""
    if HIGHER_BETTER[metric]:
        return paired_delta_ci(primary, variant, base_seed, B=B, label=label)
    return paired_delta_ci(variant, primary, base_seed, B=B, label=label)


# ------------------------------------------------------------------ tables


def regret_table(results: dict) -> dict:
    """``results[model][metric]`` -> gap to the best model in each metric column."""
    metrics = sorted({m for row in results.values() for m in row if row[m] is not None})
    best = {}
    for metric in metrics:
        col = [row[metric] for row in results.values() if row.get(metric) is not None]
        if not col:
            raise ValueError(f"no values for {metric}")
        best[metric] = max(col) if HIGHER_BETTER.get(metric, False) else min(col)
    out = {}
    for model, row in results.items():
        out[model] = {}
        for metric in metrics:
            v = row.get(metric)
            if v is None:
                out[model][metric] = None
            elif HIGHER_BETTER.get(metric, False):
                out[model][metric] = best[metric] - v
            else:
                out[model][metric] = v - best[metric]
    return out


def evaluate_model(name: str, model, stream, y, counts, months, base_seed: int = BASE_SEED,
                   B: int = RESAMPLES):
    """Score streams and intervals for every metric the model supports."""
    streams = {}
    if model.count_forecasts(stream, y, months[:1]) is not None:
        streams["count_pll"] = count_pll(model, stream, y, counts, months, f"{name}/count_pll")
        streams["count_rmse"] = count_rmse(model, stream, y, counts, months, f"{name}/count_rmse")
    if model.response_forecasts(y, counts, months[:1]) is not None:
        streams["resp_rmse"] = response_rmse(model, y, counts, months, f"{name}/resp_rmse")
    cis = {k: block_bootstrap_ci(s, B=B, base_seed=base_seed) for k, s in streams.items()}
    return streams, cis


TABLE2_COLUMNS = ("model", "count_pll", "count_pll_lo", "count_pll_hi", "count_rmse",
                  "count_rmse_lo", "count_rmse_hi", "resp_rmse", "resp_rmse_lo", "resp_rmse_hi")


def table2_row(name: str, cis: dict) -> dict:
    row = {"model": name}
    for metric in METRICS:
        ci = cis.get(metric)
        row[metric] = "" if ci is None else ci.point
        row[f"{metric}_lo"] = "" if ci is None else ci.lo
        row[f"{metric}_hi"] = "" if ci is None else ci.hi
    return row


def write_rows(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in columns})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return v


def write_metrics(path, cis_by_label: dict) -> None:
    """CSV ``label,metric,point,lo,hi``; keys are ``(label, metric)``."""
    rows = [{"label": lab, "metric": met, "point": ci.point, "lo": ci.lo, "hi": ci.hi}
            for (lab, met), ci in cis_by_label.items()]
    write_rows(path, ("label", "metric", "point", "lo", "hi"), rows)


def write_streams(path, streams) -> None:
    rows = [{"label": s.label, "month": int(m), "value": float(v)}
            for s in streams for m, v in zip(s.months, s.per_month)]
    write_rows(path, ("label", "month", "value"), rows)


def read_streams(path) -> list[ScoreStream]:
    by_label: dict = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            by_label.setdefault(r["label"], []).append((int(r["month"]), float(r["value"])))
    out = []
    for lab, pairs in by_label.items():
        months, vals = zip(*pairs)
        red = "rms" if lab.endswith("rmse") else "sum"
        out.append(ScoreStream(lab, np.array(months), np.array(vals), red))
    return out


def label_registry() -> tuple[str, ...]:
    """Every bootstrap label the command-line tools can emit."""
    from .baselines import KINDS
    from .trainer import VARIANTS
    models = ("coupled",) + KINDS + tuple(VARIANTS)
    labels = [f"{m}/{metric}" for m in models for metric in METRICS]
    labels += [f"delta/{v}/{metric}" for v in VARIANTS for metric in METRICS]
    labels += ["regime/milestone", "regime/placebo"]
    return tuple(labels)
