"""Comparison models behind one fit/forecast interface.

Every fitted model exposes ``count_forecasts(stream, y, months)`` and
``response_forecasts(y, counts, months)``; a model that does not
forecast one of the two returns ``None`` there.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize

from .forecast_head import HeadConfig, HeadParams, fit_head, head_forecasts
from .hawkes import (
    EventStream, HawkesParams, event_log_likelihood, event_log_likelihood_grad,
    expected_month_counts, inv_softplus,
)
from .trainer import (
    CoupledModel, FitConfig, _LOG_OMEGA_BOUNDS, _as_matrix, fit_coupled, monthly_counts_array,
)

KINDS = ("self_exciting_hawkes", "exo_hawkes", "ar1", "factor_arx", "varx", "local_level",
         "coupled_v1")
COUNT_KINDS = ("self_exciting_hawkes", "exo_hawkes", "coupled_v1")
RESPONSE_KINDS = ("ar1", "factor_arx", "varx", "local_level", "coupled_v1")
VARX_RIDGE = 1e-4


def v1_config(base: FitConfig | None = None) -> FitConfig:
    """Frozen stand-in for the first, untuned coupled variant."""
    base = FitConfig() if base is None else base
    return replace(base, em_iterations=1, enable_head=False, enable_ir=True, enable_ri=True,
                   enable_coupling=True, invert_directions=False, gates_learned=False,
                   lambda_sp=0.0, xi_init=base.xi_open)


# ----------------------------------------------------------------- hawkes


def _exo_latent(y: np.ndarray, n_months: int) -> np.ndarray:
    """Lag-one response as a per-month covariate (month 0 sees 0)."""
    z = np.zeros((n_months, 1))
    k = min(n_months - 1, len(y) - 1)
    if k > 0:
        z[1:k + 1, 0] = y[:k]
    return z


def fit_hawkes_mle(stream: EventStream, latent=None, K: int = 0, maxiter: int = 200,
                   gtol: float = 1e-8) -> HawkesParams:
    """Bounded quasi-Newton maximum likelihood for (mu, alpha, omega[, gamma])."""
    D = stream.D
    M = stream.n_months
    counts = monthly_counts_array(stream, M)
    rate = np.maximum(counts.mean(axis=0), 1e-3)
    mu0 = inv_softplus(np.maximum(rate * 0.8, 1e-3))
    alpha0 = np.full((D, D), 0.01) + np.eye(D) * 0.09
    v0 = np.concatenate([mu0, alpha0.ravel(), np.zeros(D * D), np.zeros(D * K)])
    bounds = [(-30.0, 30.0)] * D + [(0.0, 10.0)] * (D * D) + [_LOG_OMEGA_BOUNDS] * (D * D) \
        + [(-20.0, 20.0)] * (D * K)

    def unpack(v):
        return HawkesParams(v[:D].copy(), np.maximum(v[D:D + D * D], 0).reshape(D, D),
                            np.exp(v[D + D * D:D + 2 * D * D]).reshape(D, D),
                            v[D + 2 * D * D:].reshape(D, K).copy())

    def f(v):
        p = unpack(v)
        ll, g = event_log_likelihood_grad(p, stream, latent if K else None)
        grad = [g["mu"], g["alpha"].ravel(), (g["omega"] * p.omega).ravel()]
        if K:
            grad.append(g["gamma"].ravel())
        return -ll, -np.concatenate(grad)

    res = minimize(f, v0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": maxiter, "gtol": gtol, "maxcor": 30})
    return unpack(res.x)


# ------------------------------------------------------------ response models


def ols_ar1(y: np.ndarray):
    """Least squares ``y[m] = c + phi * y[m-1]``; returns ``(phi, c)``."""
    y = np.asarray(y, dtype=float)
    X = np.column_stack([np.ones(len(y) - 1), y[:-1]])
    beta, *_ = np.linalg.lstsq(X, y[1:], rcond=None)
    return float(beta[1]), float(beta[0])


def varx_fit(y: np.ndarray, x: np.ndarray, ridge: float = VARX_RIDGE):
    """Ridge fit of ``y[m]`` on ``[1, y[m-1], x[m-1]]`` (intercept unpenalized)."""
    y = np.asarray(y, dtype=float)
    X = np.column_stack([np.ones(len(y) - 1), y[:-1], x[:-1]])
    pen = np.full(X.shape[1], ridge)
    pen[0] = 0.0
    beta = np.linalg.solve(X.T @ X + np.diag(pen), X.T @ y[1:])
    return beta


def local_level_filter(y: np.ndarray, q: float, r: float):
    """Random walk plus noise with a diffuse start.

    Returns ``(pred, filt, loglik)``; ``pred[m]`` uses observations before
    ``m`` (``pred[0]`` is set to ``y[0]``) and the log-likelihood skips the
    first, diffuse, observation.
    """
    y = np.asarray(y, dtype=float)
    pred = np.empty(len(y))
    filt = np.empty(len(y))
    # a diffuse prior collapses onto the first observation
    a, P = float(y[0]), r
    pred[0] = filt[0] = a
    ll = 0.0
    for m in range(1, len(y)):
        P = P + q
        pred[m] = a
        F = P + r
        v = y[m] - a
        if F > 0:
            ll += -0.5 * (np.log(2 * np.pi * F) + v * v / F)
            gain = P / F
        else:
            gain = 1.0
        a = a + gain * v
        P = (1 - gain) * P
        filt[m] = a
    return pred, filt, float(ll)


def fit_local_level(y: np.ndarray):
    y = np.asarray(y, dtype=float)
    v = max(float(np.var(np.diff(y))), 1e-8)

    def nll(w):
        return -local_level_filter(y, np.exp(w[0]), np.exp(w[1]))[2]

    best = None
    for w0 in ([np.log(v / 2), np.log(v / 2)], [np.log(v), np.log(v / 10)],
               [np.log(v / 10), np.log(v)]):
        res = minimize(nll, np.array(w0), method="Nelder-Mead",
                       options={"xatol": 1e-8, "fatol": 1e-10, "maxiter": 2000})
        if best is None or res.fun < best.fun:
            best = res
    return float(np.exp(best.x[0])), float(np.exp(best.x[1]))


# --------------------------------------------------------------- container


@dataclass(frozen=True, eq=False)
class BaselineModel:
    kind: str
    params: dict
    n_train: int
    count_resid_var: float = 1.0
    x_mean: np.ndarray | None = None
    x_std: np.ndarray | None = None
    head: HeadParams | None = None
    coupled: CoupledModel | None = None

    def standardize(self, counts) -> np.ndarray:
        return (np.asarray(counts, dtype=float) - self.x_mean) / self.x_std

    @property
    def hawkes(self) -> HawkesParams | None:
        if self.kind == "coupled_v1":
            return self.coupled.hawkes
        return self.params.get("hawkes")

    def count_forecasts(self, stream: EventStream, y, months):
        months = np.asarray(months, dtype=np.int64)
        if self.kind == "coupled_v1":
            return self.coupled.count_forecasts(stream, y, months)
        if self.kind == "self_exciting_hawkes":
            p = self.params["hawkes"]
            return expected_month_counts(p, stream, months, np.zeros((len(months), p.D)))
        if self.kind == "exo_hawkes":
            p = self.params["hawkes"]
            z = _exo_latent(_as_matrix(y)[:, 0], int(months.max()) + 1)
            return expected_month_counts(p, stream, months, z[months] @ p.gamma.T)
        return None

    def response_forecasts(self, y, counts, months):
        months = np.asarray(months, dtype=np.int64)
        y1 = _as_matrix(y)[:, 0]
        if self.kind == "coupled_v1":
            return self.coupled.response_forecasts(y, counts, months)
        if self.kind == "ar1":
            return self.params["phi"] * y1[months - 1] + self.params["c"]
        if self.kind == "factor_arx":
            return head_forecasts(self.head, y1, counts, months)
        if self.kind == "varx":
            b = self.params["beta"]
            x = self.standardize(np.asarray(counts)[months - 1])
            return b[0] + b[1] * y1[months - 1] + x @ b[2:]
        if self.kind == "local_level":
            stop = int(months.max()) + 1
            pred, _, _ = local_level_filter(y1[:stop], self.params["q"], self.params["r"])
            return pred[months]
        return None

    @property
    def varx_count_coefficients(self) -> np.ndarray:
        if self.kind != "varx":
            raise ValueError("only defined for varx")
        return self.params["beta"][2:]

    def to_json(self) -> dict:
        out = {"kind": self.kind, "n_train": self.n_train, "count_resid_var": self.count_resid_var}
        if self.coupled is not None:
            out["coupled"] = self.coupled.to_json()
        if self.head is not None:
            out["head"] = self.head.to_json()
        if self.x_mean is not None:
            out["x_mean"] = self.x_mean.tolist()
            out["x_std"] = self.x_std.tolist()
        params = {}
        for k, v in self.params.items():
            params[k] = v.to_json() if isinstance(v, HawkesParams) else np.asarray(v).tolist()
        out["params"] = params
        return out

    @classmethod
    def from_json(cls, obj) -> "BaselineModel":
        params = {}
        for k, v in obj["params"].items():
            if k == "hawkes":
                params[k] = HawkesParams.from_json(v)
            elif isinstance(v, list):
                params[k] = np.array(v, dtype=float)
            else:
                params[k] = v
        return cls(obj["kind"], params, int(obj["n_train"]), float(obj["count_resid_var"]),
                   np.array(obj["x_mean"]) if "x_mean" in obj else None,
                   np.array(obj["x_std"]) if "x_std" in obj else None,
                   HeadParams.from_json(obj["head"]) if "head" in obj else None,
                   CoupledModel.from_json(obj["coupled"]) if "coupled" in obj else None)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)


def _resid_var(model: BaselineModel, stream: EventStream, y, n_train: int) -> float:
    counts = monthly_counts_array(stream, n_train)
    fc = model.count_forecasts(stream, y, np.arange(n_train))
    return max(float(np.mean((counts.sum(axis=1) - fc.sum(axis=1)) ** 2)), 1.0)


def fit_baseline(kind: str, stream: EventStream, response, train_stop: int,
                 cfg: FitConfig | None = None, counts=None) -> BaselineModel:
    """Fit ``kind`` on months ``[0, train_stop)``."""
    if kind not in KINDS:
        raise ValueError(f"unknown baseline {kind!r}; choose from {KINDS}")
    cfg = FitConfig() if cfg is None else cfg
    if train_stop < cfg.min_train_months:
        raise ValueError(f"training window of {train_stop} months is shorter than "
                         f"{cfg.min_train_months}")
    y = _as_matrix(response)
    y1 = y[:, 0]
    if kind == "coupled_v1":
        m = fit_coupled(v1_config(cfg), stream, y, train_stop, counts=counts)
        return BaselineModel(kind, {}, train_stop, m.count_resid_var, coupled=m)
    train_stream = stream.window(0, train_stop) if stream.horizon > train_stop else stream
    if counts is None:
        counts = monthly_counts_array(stream, stream.n_months)
    counts = np.asarray(counts)
    if kind == "self_exciting_hawkes":
        p = fit_hawkes_mle(train_stream, None, 0, cfg.hawkes_maxiter, cfg.hawkes_gtol)
        model = BaselineModel(kind, {"hawkes": p}, train_stop)
        return replace(model, count_resid_var=_resid_var(model, stream, y, train_stop))
    if kind == "exo_hawkes":
        z = _exo_latent(y1[:train_stop], train_stop)
        p = fit_hawkes_mle(train_stream, z, 1, cfg.hawkes_maxiter, cfg.hawkes_gtol)
        model = BaselineModel(kind, {"hawkes": p}, train_stop)
        return replace(model, count_resid_var=_resid_var(model, stream, y, train_stop))
    if kind == "ar1":
        phi, c = ols_ar1(y1[:train_stop])
        return BaselineModel(kind, {"phi": phi, "c": c}, train_stop)
    if kind == "factor_arx":
        head = fit_head(y1, counts, train_stop, HeadConfig(ridge_lambda=cfg.head_ridge))
        return BaselineModel(kind, {}, train_stop, head=head)
    if kind == "varx":
        c_train = counts[:train_stop].astype(float)
        mean = c_train.mean(axis=0)
        std = c_train.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        beta = varx_fit(y1[:train_stop], (c_train - mean) / std, VARX_RIDGE)
        return BaselineModel(kind, {"beta": beta}, train_stop, x_mean=mean, x_std=std)
    q, r = fit_local_level(y1[:train_stop])
    return BaselineModel(kind, {"q": q, "r": r}, train_stop)


def forecast_baseline(model: BaselineModel, stream: EventStream, response, counts, months):
    """``(count forecasts or None, response forecasts or None)``."""
    return (model.count_forecasts(stream, response, months),
            model.response_forecasts(response, counts, months))
