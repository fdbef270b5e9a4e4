"""Structured one-step response predictor.

Features for predicting ``y[m+1]`` at month ``m``::

    [y[m], PCA_3(standardized stack of x[m-1], ..., x[m-L]), sin(2 pi m / 12), cos(2 pi m / 12)]

fit by closed-form ridge with an unpenalized intercept.  The lag-stack
standardization and its PCA loadings are estimated on training months only.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class HeadConfig:
    ar_lags: int = 1
    context_components: int = 3
    context_lags: int = 2
    calendar: bool = True
    context: bool = True
    ridge_lambda: float = 1e-6
    blend_alpha: float = 0.65

    def __post_init__(self):
        if not self.ridge_lambda > 0:
            raise ValueError("ridge_lambda must be positive")
        if self.ar_lags < 0 or self.context_lags < 0:
            raise ValueError("lags must be non-negative")
        if not 0 <= self.blend_alpha <= 1:
            raise ValueError("blend_alpha must lie in [0, 1]")
        if self.ar_lags > 1:
            raise ValueError("only one autoregressive lag is supported")


@dataclass(frozen=True, eq=False)
class HeadParams:
    cfg: HeadConfig
    stack_mean: np.ndarray
    stack_std: np.ndarray
    context_pca: np.ndarray      # (D * L, n_components)
    weights: np.ndarray
    intercept: float
    extra_dim: int = 0
    feature_names: tuple = field(default=())

    @property
    def n_features(self) -> int:
        return len(self.weights)

    def to_json(self) -> dict:
        return {"cfg": self.cfg.__dict__, "stack_mean": self.stack_mean.tolist(),
                "stack_std": self.stack_std.tolist(), "context_pca": self.context_pca.tolist(),
                "weights": self.weights.tolist(), "intercept": self.intercept,
                "extra_dim": self.extra_dim, "feature_names": list(self.feature_names)}

    @classmethod
    def from_json(cls, obj) -> "HeadParams":
        pca = np.array(obj["context_pca"], dtype=float)
        n = len(obj["stack_mean"])
        return cls(HeadConfig(**obj["cfg"]), np.array(obj["stack_mean"], dtype=float),
                   np.array(obj["stack_std"], dtype=float), pca.reshape(n, -1),
                   np.array(obj["weights"], dtype=float), float(obj["intercept"]),
                   int(obj["extra_dim"]), tuple(obj["feature_names"]))


def lag_stack(counts: np.ndarray, m: int, L: int) -> np.ndarray:
    """Concatenate ``x[m-1], ..., x[m-L]``."""
    if m - L < 0:
        raise ValueError(f"month {m} has fewer than {L} prior months of counts")
    return np.concatenate([counts[m - k] for k in range(1, L + 1)]) if L else np.zeros(0)


def calendar(m) -> np.ndarray:
    # phase reduced mod 12 first so the features are exactly periodic
    ph = 2 * np.pi * (np.asarray(m) % 12) / 12
    return np.stack([np.sin(ph), np.cos(ph)], axis=-1)


def _fit_context_pca(stacks: np.ndarray, n_comp: int):
    mean = stacks.mean(axis=0)
    std = stacks.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    Z = (stacks - mean) / std
    cov = Z.T @ Z / Z.shape[0]
    evals, evecs = np.linalg.eigh(0.5 * (cov + cov.T))
    order = np.argsort(evals)[::-1][:n_comp]
    V = evecs[:, order].copy()
    for j in range(V.shape[1]):
        if V[np.argmax(np.abs(V[:, j])), j] < 0:
            V[:, j] *= -1
    return mean, std, V


def build_features(y_m: float, counts: np.ndarray, m: int, params: HeadParams,
                   extra=None) -> np.ndarray:
    """Feature vector at month ``m`` (predicting month ``m + 1``)."""
    cfg = params.cfg
    parts = [np.atleast_1d(float(y_m))] if cfg.ar_lags else []
    if cfg.context and cfg.context_lags:
        s = lag_stack(np.asarray(counts, dtype=float), m, cfg.context_lags)
        parts.append(((s - params.stack_mean) / params.stack_std) @ params.context_pca)
    if cfg.calendar:
        parts.append(calendar(m))
    if params.extra_dim:
        if extra is None:
            raise ValueError("head was fit with extra features")
        parts.append(np.atleast_1d(np.asarray(extra, dtype=float)))
    return np.concatenate(parts) if parts else np.zeros(0)


def ridge_with_intercept(X: np.ndarray, y: np.ndarray, lam: float):
    """Solve ``(Xa' Xa + P) beta = Xa' y`` with ``Xa = [1, X]`` and ``P = diag(0, lam, ...)``."""
    n, p = X.shape
    Xa = np.hstack([np.ones((n, 1)), X])
    pen = np.full(p + 1, lam)
    pen[0] = 0.0
    G = Xa.T @ Xa + np.diag(pen)
    beta = np.linalg.solve(G, Xa.T @ y)
    return beta[1:], float(beta[0])


def fit_head(y: np.ndarray, counts: np.ndarray, train_stop: int, cfg: HeadConfig = HeadConfig(),
             extra: np.ndarray | None = None) -> HeadParams:
    """Fit on pairs ``(features(m), y[m+1])`` with ``m + 1 < train_stop``.

    ``y`` and ``counts`` are indexed by the same months starting at 0;
    ``extra`` (optional, months x k) adds further features such as the
    filtered latent state.
    """
    y = np.asarray(y, dtype=float).ravel()
    counts = np.asarray(counts, dtype=float)
    L = cfg.context_lags if cfg.context else 0
    first = max(L, 0)
    months = np.arange(first, train_stop - 1)
    if len(months) == 0:
        raise ValueError("no usable training pairs for the forecast head")
    D = counts.shape[1]
    if cfg.context and L:
        stacks = np.array([lag_stack(counts, m, L) for m in months])
        mean, std, V = _fit_context_pca(stacks, min(cfg.context_components, D * L))
    else:
        mean, std, V = np.zeros(D * L), np.ones(D * L), np.zeros((D * L, 0))
    extra_dim = 0 if extra is None else np.asarray(extra).reshape(len(y), -1).shape[1]
    proto = HeadParams(cfg, mean, std, V, np.zeros(0), 0.0, extra_dim)
    ex = None if extra is None else np.asarray(extra, dtype=float).reshape(len(y), -1)
    X = np.array([build_features(y[m], counts, m, proto, None if ex is None else ex[m])
                  for m in months])
    target = y[months + 1]
    if X.shape[0] < X.shape[1] + 1:
        raise ValueError("too few training pairs for the forecast head")
    w, b = ridge_with_intercept(X, target, cfg.ridge_lambda)
    names = (["y_lag1"] if cfg.ar_lags else []) + [f"ctx{j + 1}" for j in range(V.shape[1])] \
        + (["cal_sin", "cal_cos"] if cfg.calendar else []) + [f"extra{j + 1}" for j in range(extra_dim)]
    return HeadParams(cfg, mean, std, V, w, b, extra_dim, tuple(names))


def predict_next(params: HeadParams, features) -> float:
    f = np.asarray(features, dtype=float)
    if f.shape != params.weights.shape:
        raise ValueError(f"expected {params.weights.shape[0]} features, got {f.shape}")
    return float(f @ params.weights + params.intercept)


def head_forecasts(params: HeadParams, y: np.ndarray, counts: np.ndarray, months,
                   extra: np.ndarray | None = None) -> np.ndarray:
    """One-step forecasts of ``y[m]`` for each ``m`` in ``months`` (uses data up to m-1)."""
    y = np.asarray(y, dtype=float).ravel()
    out = []
    for m in months:
        f = build_features(y[m - 1], counts, m - 1, params, None if extra is None else extra[m - 1])
        out.append(predict_next(params, f))
    return np.array(out)
