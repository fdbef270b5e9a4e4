"""Split-date scoring with placebo candidates.

For a candidate month m, the coupled model is fit once on the 24 months
``[m-12, m+12)`` and separately on each 12-month half.  The count gain
is the summed in-window event log-likelihood of the halves minus that of
the pooled fit; the response gain is the pooled one-step RMSE minus the
split RMSE on the same months.  Both gains are divided by their standard
deviation across all candidates in the study and added.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .evaluation import label_seed
from .hawkes import EventStream
from .trainer import FitConfig, _as_matrix, effective_B, fit_coupled, objective_parts

HALF = 12
HALF_EM_ITERATIONS = 3
KINDS = ("milestone", "placebo")
REGIME_COLUMNS = ("rank", "month", "kind", "count_ll_gain", "resp_rmse_gain", "joint",
                  "coupling_shift_norm")


@dataclass(frozen=True)
class SplitCandidate:
    month: int
    kind: str = "placebo"
    label: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")


@dataclass(frozen=True)
class SplitScore:
    candidate: SplitCandidate
    count_ll_gain: float
    resp_rmse_gain: float
    coupling_shift_norm: float
    pooled_ll: float
    split_ll: float
    pooled_rmse: float
    split_rmse: float


def _window(stream: EventStream, y, counts, start: int, stop: int):
    return (stream.window(start, stop), _as_matrix(y)[start:stop],
            np.asarray(counts)[start:stop])


def _fit_window(cfg: FitConfig, stream, y, counts):
    return fit_coupled(cfg, stream, y, len(y), counts=counts)


def _in_window_scores(model, stream, y, counts, months):
    ll = objective_parts(model, stream, y).ll_event
    fc = model.response_forecasts(y, counts, months)
    err = fc - y[months, 0]
    return ll, err


def split_gain(candidate: SplitCandidate, stream: EventStream, y, counts,
               cfg: FitConfig | None = None) -> SplitScore:
    """Pooled-versus-split gains for one candidate (before normalization)."""
    cfg = FitConfig() if cfg is None else cfg
    m = int(candidate.month)
    lo, hi = m - HALF, m + HALF
    if lo < 0 or hi > min(stream.n_months, len(_as_matrix(y))):
        raise ValueError(f"window [{lo}, {hi}) for month {m} does not fit inside the panel")
    pooled_cfg = replace(cfg, min_train_months=2 * HALF)
    half_cfg = replace(cfg, min_train_months=HALF, em_iterations=HALF_EM_ITERATIONS)
    # months of each half that have enough history for a one-step forecast
    # forecasting month k uses features at k - 1, which need the lag stack behind it
    lags = cfg.context_lags if (cfg.enable_head and cfg.enable_context) else 0
    local = np.arange(lags + 1, HALF)

    s_all, y_all, c_all = _window(stream, y, counts, lo, hi)
    pooled = _fit_window(pooled_cfg, s_all, y_all, c_all)
    pooled_ll, pooled_err = _in_window_scores(pooled, s_all, y_all, c_all,
                                              np.concatenate([local, local + HALF]))

    split_ll = 0.0
    split_err = []
    Bs = []
    for start in (lo, m):
        s_h, y_h, c_h = _window(stream, y, counts, start, start + HALF)
        model = _fit_window(half_cfg, s_h, y_h, c_h)
        ll, err = _in_window_scores(model, s_h, y_h, c_h, local)
        split_ll += ll
        split_err.append(err)
        Bs.append(effective_B(model.theta, model.config))
    pooled_rmse = float(np.sqrt(np.mean(pooled_err ** 2)))
    split_rmse = float(np.sqrt(np.mean(np.concatenate(split_err) ** 2)))
    return SplitScore(candidate, split_ll - pooled_ll, pooled_rmse - split_rmse,
                      float(np.linalg.norm(Bs[1] - Bs[0])), pooled_ll, split_ll,
                      pooled_rmse, split_rmse)


def _scale(values) -> float:
    # sorted first so the constant does not depend on candidate order
    s = float(np.std(np.sort(values)))
    return s if s > 0 else 1.0


def joint_scores(scores: list[SplitScore]) -> np.ndarray:
    ll = np.array([s.count_ll_gain for s in scores])
    rm = np.array([s.resp_rmse_gain for s in scores])
    return ll / _scale(ll) + rm / _scale(rm)


def rank_scores(scores: list[SplitScore]) -> list[dict]:
    """Rows sorted by joint score (ties broken by month, then label)."""
    if not scores:
        raise ValueError("no candidates")
    joint = joint_scores(scores)
    order = sorted(range(len(scores)),
                   key=lambda i: (-joint[i], scores[i].candidate.month, scores[i].candidate.label))
    rows = []
    for rank, i in enumerate(order, start=1):
        s = scores[i]
        rows.append({"rank": rank, "month": s.candidate.month, "kind": s.candidate.kind,
                     "label": s.candidate.label, "count_ll_gain": s.count_ll_gain,
                     "resp_rmse_gain": s.resp_rmse_gain, "joint": float(joint[i]),
                     "coupling_shift_norm": s.coupling_shift_norm})
    return rows


def group_means(rows: list[dict], B: int = 1000, base_seed: int = 20260408) -> dict:
    """Mean joint score per kind with a plain bootstrap 95% interval."""
    out = {}
    for kind in KINDS:
        vals = np.array([r["joint"] for r in rows if r["kind"] == kind])
        if len(vals) == 0:
            continue
        rng = np.random.default_rng(label_seed(f"regime/{kind}", base_seed))
        boots = vals[rng.integers(0, len(vals), size=(B, len(vals)))].mean(axis=1)
        lo, hi = np.percentile(boots, [2.5, 97.5])
        out[kind] = {"mean": float(vals.mean()), "lo": float(lo), "hi": float(hi), "n": len(vals)}
    return out


def placebo_rank(candidates: list[SplitCandidate], stream: EventStream, y, counts,
                 cfg: FitConfig | None = None):
    """Score every candidate with shared normalization; returns (rows, group means)."""
    if not candidates:
        raise ValueError("no candidates")
    scores = [split_gain(c, stream, y, counts, cfg) for c in candidates]
    rows = rank_scores(scores)
    return rows, group_means(rows)


def write_regime_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(REGIME_COLUMNS), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k])
                        for k in REGIME_COLUMNS})
