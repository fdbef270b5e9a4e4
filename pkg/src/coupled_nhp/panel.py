"""Monthly panels, CSV ingestion and the train-only response transform.

Month indices are integers counted from a panel origin (the first month
present in the input file).  All statistics used to build the response
index are estimated on a fit window and frozen; applying them never
re-estimates anything.
"""
from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

COMPONENTS = (
    "machine learning",
    "evolutionary computing",
    "natural language processing",
    "speech",
    "vision",
    "planning and control",
    "knowledge representation",
    "hardware",
)

TRENDS_TERMS = (
    "artificial intelligence",
    "machine learning",
    "deep learning",
    "neural network",
    "natural language processing",
    "computer vision",
    "reinforcement learning",
    "robotics",
    "autonomous vehicle",
    "self-driving car",
    "facial recognition",
    "deepfake",
    "AI ethics",
    "AI bias",
    "AI regulation",
    "AI surveillance",
    "AI healthcare",
    "ChatGPT",
    "generative AI",
    "large language model",
)

ORIENTATION_TERM = "artificial intelligence"

_MONTH_RE = re.compile(r"^(\d{4})-(\d{2})$")


class PanelError(ValueError):
    """Raised for malformed or inconsistent panel input."""


def parse_month(label: str) -> tuple[int, int]:
    m = _MONTH_RE.match(label.strip())
    if not m:
        raise PanelError(f"malformed month label {label!r}")
    year, month = int(m.group(1)), int(m.group(2))
    if not 1 <= month <= 12:
        raise PanelError(f"malformed month label {label!r}")
    return year, month


def _ordinal(label: str) -> int:
    year, month = parse_month(label)
    return 12 * year + (month - 1)


def month_label(origin: str, index: int) -> str:
    """Calendar label of ``index`` months after ``origin``."""
    o = _ordinal(origin) + int(index)
    return f"{o // 12:04d}-{o % 12 + 1:02d}"


def month_index(origin: str, label: str) -> int:
    return _ordinal(label) - _ordinal(origin)


@dataclass(frozen=True)
class MonthIndex:
    value: int
    calendar: str

    def __post_init__(self):
        if self.value < 0:
            raise PanelError("month index must be non-negative")

    @classmethod
    def from_label(cls, origin: str, label: str) -> "MonthIndex":
        return cls(month_index(origin, label), label)


def _check_contiguous(ordinals: list[int]) -> None:
    for a, b in zip(ordinals, ordinals[1:]):
        if b != a + 1:
            raise PanelError("gap in month sequence")


@dataclass(frozen=True, eq=False)
class CountPanel:
    """Per-month innovation counts, one column per component."""

    origin: str
    months: np.ndarray
    counts: np.ndarray
    components: tuple[str, ...] = COMPONENTS

    def __post_init__(self):
        months = np.asarray(self.months, dtype=np.int64)
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape != (len(months), len(self.components)):
            raise PanelError("count matrix shape does not match months x components")
        if len(months) and np.any(np.diff(months) != 1):
            raise PanelError("months must be strictly increasing and contiguous")
        if len(months) and months[0] < 0:
            raise PanelError("month index must be non-negative")
        if np.any(counts < 0):
            raise PanelError("counts must be non-negative")
        months.setflags(write=False)
        counts.setflags(write=False)
        object.__setattr__(self, "months", months)
        object.__setattr__(self, "counts", counts)

    @property
    def D(self) -> int:
        return len(self.components)

    @property
    def labels(self) -> list[str]:
        return [month_label(self.origin, m) for m in self.months]

    def window(self, start: int, stop: int) -> "CountPanel":
        """Rows with ``start <= month < stop`` (panel-global indices)."""
        sel = (self.months >= start) & (self.months < stop)
        return CountPanel(self.origin, self.months[sel], self.counts[sel], self.components)

    def __eq__(self, other):
        if not isinstance(other, CountPanel):
            return NotImplemented
        return (self.origin == other.origin and self.components == other.components
                and np.array_equal(self.months, other.months)
                and np.array_equal(self.counts, other.counts))


@dataclass(frozen=True, eq=False)
class TrendsPanel:
    """Per-month search-interest values in [0, 100], one column per term."""

    origin: str
    months: np.ndarray
    terms: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        months = np.asarray(self.months, dtype=np.int64)
        values = np.asarray(self.values, dtype=float)
        if len(self.terms) < 2:
            raise PanelError("trends panel needs at least two terms")
        if values.shape != (len(months), len(self.terms)):
            raise PanelError("value matrix shape does not match months x terms")
        if len(months) and np.any(np.diff(months) != 1):
            raise PanelError("months must be contiguous")
        if not np.all(np.isfinite(values)):
            raise PanelError("missing trends values")
        if np.any(values < 0) or np.any(values > 100):
            raise PanelError("trends values must lie in [0, 100]")
        months.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "months", months)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "terms", tuple(self.terms))

    def rows(self, start: int, stop: int) -> np.ndarray:
        """Raw value rows for panel months in ``[start, stop]`` (inclusive)."""
        if start < self.months[0] or stop > self.months[-1] or start > stop:
            raise PanelError(f"window [{start}, {stop}] outside trends range")
        i0 = int(start - self.months[0])
        return self.values[i0:i0 + (stop - start + 1)]


@dataclass(frozen=True, eq=False)
class ResponseSeries:
    origin: str
    months: np.ndarray
    values: np.ndarray  # (n_months, channels)

    def __post_init__(self):
        months = np.asarray(self.months, dtype=np.int64)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != len(months):
            raise PanelError("response length does not match months")
        if not np.all(np.isfinite(values)):
            raise PanelError("response values must be finite")
        object.__setattr__(self, "months", months)
        object.__setattr__(self, "values", values)

    @property
    def pc1(self) -> np.ndarray:
        return self.values[:, 0]

    def window(self, start: int, stop: int) -> "ResponseSeries":
        sel = (self.months >= start) & (self.months < stop)
        return ResponseSeries(self.origin, self.months[sel], self.values[sel])


@dataclass(frozen=True)
class SplitConfig:
    train_end: int
    val_end: int
    test_end: int

    def __post_init__(self):
        if not (0 <= self.train_end < self.val_end < self.test_end):
            raise PanelError("split must satisfy train_end < val_end < test_end")

    @classmethod
    def default_for(cls, n_months: int, eval_months: int = 12) -> "SplitConfig":
        """Last year held out, the year before it used for validation."""
        last = n_months - 1
        return cls(last - 2 * eval_months, last - eval_months, last)


# ---------------------------------------------------------------- ingestion


def load_counts(path, components: tuple[str, ...] = COMPONENTS) -> CountPanel:
    """Read a long-format ``month,component,count`` CSV into a dense panel.

    Every (month, component) cell must be present exactly once; missing
    cells are an error rather than zero.
    """
    cells: dict[tuple[int, str], int] = {}
    labels: dict[int, str] = {}
    known = set(components)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["month", "component", "count"]:
            raise PanelError("counts CSV header must be month,component,count")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise PanelError(f"line {lineno}: expected 3 fields")
            label, comp, raw = (c.strip() for c in row)
            o = _ordinal(label)
            if comp not in known:
                raise PanelError(f"line {lineno}: unknown component {comp!r}")
            if (o, comp) in cells:
                raise PanelError(f"line {lineno}: duplicate cell ({label}, {comp})")
            try:
                value = int(raw)
            except ValueError:
                raise PanelError(f"line {lineno}: count {raw!r} is not an integer") from None
            if value < 0:
                raise PanelError(f"line {lineno}: negative count")
            cells[(o, comp)] = value
            labels[o] = label
    if not labels:
        raise PanelError("counts CSV has no rows")
    ordinals = sorted(labels)
    _check_contiguous(ordinals)
    origin = labels[ordinals[0]]
    counts = np.zeros((len(ordinals), len(components)), dtype=np.int64)
    for i, o in enumerate(ordinals):
        for j, comp in enumerate(components):
            if (o, comp) not in cells:
                raise PanelError(f"missing cell ({labels[o]}, {comp})")
            counts[i, j] = cells[(o, comp)]
    return CountPanel(origin, np.arange(len(ordinals)), counts, tuple(components))


def write_counts(panel: CountPanel, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["month", "component", "count"])
        for label, row in zip(panel.labels, panel.counts):
            for comp, c in zip(panel.components, row):
                w.writerow([label, comp, int(c)])


def load_trends(path) -> TrendsPanel:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "month" or len(header) < 3:
            raise PanelError("trends CSV header must be month,<term1>,...,<termN>")
        terms = tuple(h.strip() for h in header[1:])
        if len(set(terms)) != len(terms):
            raise PanelError("duplicate term in trends header")
        ordinals, labels, rows = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise PanelError(f"line {lineno}: expected {len(header)} fields")
            label = row[0].strip()
            ordinals.append(_ordinal(label))
            labels.append(label)
            try:
                vals = [float(c) if c.strip() else np.nan for c in row[1:]]
            except ValueError:
                raise PanelError(f"line {lineno}: non-numeric trends value") from None
            if any(np.isnan(vals)):
                raise PanelError(f"line {lineno}: missing trends value")
            rows.append(vals)
    if not rows:
        raise PanelError("trends CSV has no rows")
    order = np.argsort(ordinals, kind="stable")
    ordinals = [ordinals[i] for i in order]
    if len(set(ordinals)) != len(ordinals):
        raise PanelError("duplicate month in trends CSV")
    _check_contiguous(ordinals)
    values = np.array([rows[i] for i in order], dtype=float)
    return TrendsPanel(labels[order[0]], np.arange(len(ordinals)), terms, values)


def write_trends(panel: TrendsPanel, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["month", *panel.terms])
        for m, row in zip(panel.months, panel.values):
            w.writerow([month_label(panel.origin, m), *(f"{v:.4f}" for v in row)])


def align_origin(counts: CountPanel, trends: TrendsPanel) -> None:
    if counts.origin != trends.origin or not np.array_equal(counts.months, trends.months):
        raise PanelError("counts and trends panels cover different months")


# -------------------------------------------------------- response transform


@dataclass(frozen=True, eq=False)
class ResponseTransform:
    fit_window: tuple[int, int]
    terms: tuple[str, ...]
    term_means: np.ndarray
    term_stds: np.ndarray
    loadings: np.ndarray  # (terms, retained)
    explained_variance: np.ndarray
    orientation_term: str
    retained: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "retained", int(self.loadings.shape[1]))

    def to_json(self) -> dict:
        return {
            "fit_window": list(self.fit_window),
            "terms": list(self.terms),
            "term_means": self.term_means.tolist(),
            "term_stds": self.term_stds.tolist(),
            "loadings": self.loadings.tolist(),
            "retained": self.retained,
            "explained_variance": self.explained_variance.tolist(),
            "orientation_term": self.orientation_term,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ResponseTransform":
        return cls(
            fit_window=tuple(obj["fit_window"]),
            terms=tuple(obj["terms"]),
            term_means=np.asarray(obj["term_means"], dtype=float),
            term_stds=np.asarray(obj["term_stds"], dtype=float),
            loadings=np.asarray(obj["loadings"], dtype=float),
            explained_variance=np.asarray(obj["explained_variance"], dtype=float),
            orientation_term=obj["orientation_term"],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


def fit_response_transform(trends: TrendsPanel, fit_window: tuple[int, int],
                           retained: int = 1,
                           orientation_term: str = ORIENTATION_TERM) -> ResponseTransform:
    """Z-score each term on ``fit_window`` and keep the leading PCA axes.

    PCA is the eigendecomposition of the window correlation matrix.  The
    first axis is signed so that ``orientation_term`` loads non-negatively
    (falling back to the first term if it is absent); later axes are
    signed so their largest-magnitude loading is positive.
    """
    start, stop = int(fit_window[0]), int(fit_window[1])
    n_terms = len(trends.terms)
    if retained < 1 or retained > n_terms:
        raise PanelError(f"retained={retained} must be in [1, {n_terms}]")
    X = trends.rows(start, stop)
    if X.shape[0] < retained + 1:
        raise PanelError("fit window too short for the requested components")
    means = X.mean(axis=0)
    stds = X.std(axis=0)
    flat = [t for t, s in zip(trends.terms, stds) if not s > 0]
    if flat:
        raise PanelError(f"zero-variance term(s) in fit window: {flat}")
    Zs = (X - means) / stds
    corr = Zs.T @ Zs / Zs.shape[0]
    corr = 0.5 * (corr + corr.T)
    evals, evecs = np.linalg.eigh(corr)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order][:, :retained].copy()

    if orientation_term not in trends.terms:
        orientation_term = trends.terms[0]
    k_or = trends.terms.index(orientation_term)
    if evecs[k_or, 0] < 0:
        evecs[:, 0] *= -1
    for j in range(1, retained):
        if evecs[np.argmax(np.abs(evecs[:, j])), j] < 0:
            evecs[:, j] *= -1
    explained = evals[:retained] / evals.sum()
    return ResponseTransform((start, stop), trends.terms, means, stds, evecs,
                             explained, orientation_term)


def apply_response_transform(t: ResponseTransform, trends: TrendsPanel,
                             window: tuple[int, int]) -> ResponseSeries:
    """Project raw rows in ``window`` (inclusive) with frozen statistics."""
    if tuple(trends.terms) != tuple(t.terms):
        raise PanelError("trends terms differ from the fitted transform")
    start, stop = int(window[0]), int(window[1])
    X = trends.rows(start, stop)
    Y = ((X - t.term_means) / t.term_stds) @ t.loadings
    return ResponseSeries(trends.origin, np.arange(start, stop + 1), Y)


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("pearson needs two 1-D series of equal length")
    if len(a) < 2:
        raise ValueError("pearson needs at least two points")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(da @ da), np.sqrt(db @ db)
    if sa == 0 or sb == 0:
        raise ValueError("pearson undefined for a zero-variance series")
    return float(np.clip((da @ db) / (sa * sb), -1.0, 1.0))


def standardize_counts(counts: np.ndarray, ref: np.ndarray | None = None):
    """Per-component z-scores using statistics of ``ref`` (defaults to ``counts``)."""
    ref = counts if ref is None else ref
    mean = ref.mean(axis=0)
    std = ref.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (counts - mean) / std, mean, std
