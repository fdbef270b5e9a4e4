"""Joint objective and the EM-style fitting loop for the coupled model.

The objective is

    J = l_event(z) + l_response + l_dynamics - KL - lambda_sp * sum E[g]

with the latent path ``z`` replaced by its smoothed means and gates by
their expectations.  Every outer iteration runs four block updates
(state-space, mlp correction, Hawkes, gates).  A block's proposal is
only kept if the full objective, recomputed with a fresh E-step, does
not go down; otherwise the step is halved up to three times and then
dropped.  That makes the outer trace monotone by construction, and the
trace is still checked at the end of each iteration.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from .forecast_head import HeadConfig, HeadParams, fit_head, head_forecasts
from .gates import IR, RI, GateSet, active_structure, expected_gate_xi, sparsity_penalty
from .hawkes import (
    EventStream, HawkesParams, event_log_likelihood, event_log_likelihood_grad,
    expected_month_counts, inv_softplus,
)
from .latent_state import MLP, FilteredStates, StateSpaceParams, filter_smooth, mlp_inputs
from .panel import ResponseSeries

MONOTONE_SLACK = 1e-6
_STEPS = (1.0, 0.5, 0.25, 0.125)
_VAR_FLOOR = 1e-6
_LOG_OMEGA_BOUNDS = (np.log(0.05), np.log(20.0))


class MonotonicityError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitConfig:
    em_iterations: int = 6
    ridge: float = 1e-4
    blend_alpha: float = 0.65
    count_selfexciting_mix: float = 0.0
    enable_ir: bool = True
    enable_ri: bool = False
    enable_head: bool = True
    enable_calendar: bool = True
    enable_context: bool = True
    head_uses_state: bool = False
    enable_coupling: bool = True
    invert_directions: bool = False
    enable_count_blend: bool = True
    enable_mlp: bool = True
    gates_learned: bool = True
    seed: int = 20260408
    K: int = 2
    lambda_sp: float = 12.0
    tau: float = 2.0 / 3.0
    xi_init: float = 1.0
    xi_open: float = 6.0
    xi_closed: float = -60.0
    threshold: float = 0.03
    head_ridge: float = 1e-6
    context_components: int = 3
    context_lags: int = 2
    mlp_hidden: int = 8
    mlp_ridge: float = 10.0
    hawkes_maxiter: int = 200
    hawkes_gtol: float = 1e-8
    min_train_months: int = 24

    def __post_init__(self):
        if self.em_iterations < 1:
            raise ValueError("em_iterations must be >= 1")
        if not 0 <= self.count_selfexciting_mix <= 1:
            raise ValueError("count_selfexciting_mix must lie in [0, 1]")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.lambda_sp < 0 or self.ridge < 0:
            raise ValueError("penalties must be non-negative")

    def directions(self) -> tuple[bool, bool]:
        """Effective (I->R, R->I) switches."""
        if not self.enable_coupling:
            return False, False
        ir, ri = self.enable_ir, self.enable_ri
        if self.invert_directions:
            ir, ri = ri, ir
        return ir, ri

    def head_config(self) -> HeadConfig:
        return HeadConfig(context_components=self.context_components,
                          context_lags=self.context_lags, calendar=self.enable_calendar,
                          context=self.enable_context, ridge_lambda=self.head_ridge,
                          blend_alpha=self.blend_alpha)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "FitConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "FitConfig":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


VARIANTS = {
    "no_i_to_r": ("enable_ir", False),
    "add_r_to_i": ("enable_ri", True),
    "reverse_only": ("invert_directions", True),
    "no_coupling": ("enable_coupling", False),
    "no_count_blend": ("enable_count_blend", False),
    "no_count_context": ("enable_context", False),
    "no_calendar": ("enable_calendar", False),
    "add_state": ("head_uses_state", True),
    "no_response_head": ("enable_head", False),
    "no_nonlinear_correction": ("enable_mlp", False),
}


def make_variant(cfg: FitConfig, name: str) -> FitConfig:
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    field_name, value = VARIANTS[name]
    return replace(cfg, **{field_name: value})


# ------------------------------------------------------------------ data


@dataclass(frozen=True, eq=False)
class TrainingData:
    stream: EventStream
    counts: np.ndarray   # (M, D) raw monthly counts
    x: np.ndarray        # standardized counts
    y: np.ndarray        # (M, P)

    @property
    def M(self) -> int:
        return self.counts.shape[0]


def _as_matrix(response) -> np.ndarray:
    if isinstance(response, ResponseSeries):
        return response.values
    y = np.asarray(response, dtype=float)
    return y[:, None] if y.ndim == 1 else y


# ----------------------------------------------------------- parameters


@dataclass(frozen=True, eq=False)
class Theta:
    """Flat working parameter set; gated matrices are stored raw."""

    mu: np.ndarray
    alpha: np.ndarray
    omega: np.ndarray
    gamma_raw: np.ndarray
    xi_ri: np.ndarray
    A: np.ndarray
    B_raw: np.ndarray
    xi_ir: np.ndarray
    Q: np.ndarray
    C: np.ndarray
    R: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    zeta: np.ndarray

    def __post_init__(self):
        # contiguous storage keeps BLAS reductions identical after a JSON round trip
        for f in fields(self):
            object.__setattr__(self, f.name, np.ascontiguousarray(getattr(self, f.name), dtype=float))

    def blend(self, other: "Theta", s: float) -> "Theta":
        if s == 1.0:
            return other
        kw = {}
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            kw[f.name] = a if a is b else a + s * (b - a)
        return Theta(**kw)


def _gate_mean(xi, tau):
    return expected_gate_xi(xi, tau)


def effective_B(th: Theta, cfg: FitConfig) -> np.ndarray:
    ir, _ = cfg.directions()
    if not ir:
        return np.zeros_like(th.B_raw)
    return th.B_raw * _gate_mean(th.xi_ir, cfg.tau)


def effective_gamma(th: Theta, cfg: FitConfig) -> np.ndarray:
    _, ri = cfg.directions()
    if not ri:
        return np.zeros_like(th.gamma_raw)
    return th.gamma_raw * _gate_mean(th.xi_ri, cfg.tau)


def gate_sets(th: Theta, cfg: FitConfig) -> list[GateSet]:
    ir, ri = cfg.directions()
    out = []
    if ir:
        out.append(GateSet(th.xi_ir, th.B_raw, IR, cfg.tau))
    if ri:
        out.append(GateSet(th.xi_ri, th.gamma_raw, RI, cfg.tau))
    return out


def state_params(th: Theta, cfg: FitConfig) -> StateSpaceParams:
    mlp = MLP(th.W1, th.b1, th.W2) if cfg.enable_mlp else None
    return StateSpaceParams(th.A, effective_B(th, cfg), th.Q, th.C, th.R, mlp)


def hawkes_params(th: Theta, cfg: FitConfig) -> HawkesParams:
    return HawkesParams(th.mu, th.alpha, th.omega, effective_gamma(th, cfg))


@dataclass(frozen=True, eq=False)
class Evaluation:
    J: float
    ll_event: float
    ll_response: float
    ll_dynamics: float
    kl: float
    penalty: float
    fs: FilteredStates


def evaluate(th: Theta, data: TrainingData, cfg: FitConfig, ll_event: float | None = None) -> Evaluation:
    """Objective and its parts.  ``ll_event`` may be passed in when unchanged."""
    sp = state_params(th, cfg)
    fs = filter_smooth(sp, data.x, data.y, frozen=th.zeta if cfg.enable_mlp else None)
    _, ri = cfg.directions()
    if ll_event is None:
        ll_event = event_log_likelihood(hawkes_params(th, cfg), data.stream,
                                        fs.means if ri else None)
    pen = sparsity_penalty(gate_sets(th, cfg), cfg.lambda_sp)
    J = ll_event + fs.ll_response + fs.ll_dynamics - fs.kl - pen
    return Evaluation(float(J), float(ll_event), fs.ll_response, fs.ll_dynamics, fs.kl, pen, fs)


# ------------------------------------------------------------- the model


@dataclass(frozen=True, eq=False)
class CoupledModel:
    config: FitConfig
    theta: Theta
    head: HeadParams | None
    x_mean: np.ndarray
    x_std: np.ndarray
    n_train: int
    count_resid_var: float
    objective_trace: tuple

    @property
    def hawkes(self) -> HawkesParams:
        return hawkes_params(self.theta, self.config)

    @property
    def state(self) -> StateSpaceParams:
        return state_params(self.theta, self.config)

    @property
    def gate_ir(self) -> GateSet | None:
        ir, _ = self.config.directions()
        return GateSet(self.theta.xi_ir, self.theta.B_raw, IR, self.config.tau) if ir else None

    @property
    def gate_ri(self) -> GateSet | None:
        _, ri = self.config.directions()
        return GateSet(self.theta.xi_ri, self.theta.gamma_raw, RI, self.config.tau) if ri else None

    def standardize(self, counts) -> np.ndarray:
        return (np.asarray(counts, dtype=float) - self.x_mean) / self.x_std

    def structure(self) -> dict:
        """Masks and densities per direction (disabled directions are all-zero)."""
        thr = self.config.threshold
        K, D = self.theta.B_raw.shape
        out = {}
        for key, g, shape in (("ir", self.gate_ir, (K, D)), ("ri", self.gate_ri, (D, K))):
            if g is None:
                out[key] = (np.zeros(shape, dtype=bool), 0.0)
            else:
                out[key] = active_structure(g, thr)
        return out

    def component_mask(self, direction: str = "ir") -> np.ndarray:
        """Per-component activity: column (I->R) or row (R->I) with any active entry."""
        mask, _ = self.structure()[direction]
        return mask.any(axis=0) if direction == "ir" else mask.any(axis=1)

    def online_filter(self, y, counts, stop: int) -> FilteredStates:
        """Filter over months ``[0, stop)``; predicted means only use earlier months."""
        y = _as_matrix(y)[:stop]
        x = self.standardize(np.asarray(counts)[:stop])
        return filter_smooth(self.state, x, y)

    def count_forecasts(self, stream: EventStream, y, months) -> np.ndarray:
        """Expected per-component counts for each month given data before it."""
        months = np.asarray(months, dtype=np.int64)
        cfg = self.config
        _, ri = cfg.directions()
        gamma = self.hawkes.gamma
        if ri and len(months):
            counts = monthly_counts_array(stream, int(months.max()) + 1)
            fs = self.online_filter(y, counts, int(months.max()) + 1)
            offsets = fs.predicted_means[months] @ gamma.T
        else:
            offsets = np.zeros((len(months), len(self.theta.mu)))
        learned = expected_month_counts(self.hawkes, stream, months, offsets)
        mix = cfg.count_selfexciting_mix if cfg.enable_count_blend else 0.0
        if mix > 0:
            plain = replace(self.hawkes, gamma=np.zeros_like(gamma))
            selfexc = expected_month_counts(plain, stream, months, np.zeros_like(offsets))
            learned = (1 - mix) * learned + mix * selfexc
        return learned

    def response_forecasts(self, y, counts, months) -> np.ndarray:
        """One-step forecasts of the first response channel for each month."""
        months = np.asarray(months, dtype=np.int64)
        y = _as_matrix(y)
        counts = np.asarray(counts)
        cfg = self.config
        stop = int(months.max()) + 1
        fs = self.online_filter(y, counts, stop)
        state_fc = (fs.predicted_means[months] @ self.theta.C.T)[:, 0]
        if not cfg.enable_head or self.head is None:
            return state_fc
        extra = fs.filtered_means if cfg.head_uses_state else None
        head_fc = head_forecasts(self.head, y[:, 0], counts, months, extra)
        a = cfg.blend_alpha
        return a * head_fc + (1 - a) * state_fc

    def to_json(self) -> dict:
        return {
            "config": self.config.to_json(),
            "theta": {f.name: getattr(self.theta, f.name).tolist() for f in fields(self.theta)},
            "head": None if self.head is None else self.head.to_json(),
            "x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
            "n_train": self.n_train, "count_resid_var": self.count_resid_var,
            "objective_trace": list(self.objective_trace),
        }

    @classmethod
    def from_json(cls, obj) -> "CoupledModel":
        cfg = FitConfig.from_json(obj["config"])
        raw = obj["theta"]
        D = len(raw["mu"])
        K = cfg.K
        shapes = {"mu": (D,), "alpha": (D, D), "omega": (D, D), "gamma_raw": (D, K),
                  "xi_ri": (D, K), "A": (K, K), "B_raw": (K, D), "xi_ir": (K, D), "Q": (K,),
                  "C": (-1, K), "R": (-1,), "W1": (len(raw["b1"]), -1), "b1": (-1,),
                  "W2": (K, -1), "zeta": (-1, K)}
        th = Theta(**{k: np.array(raw[k], dtype=float).reshape(shapes[k]) for k in shapes})
        head = None if obj["head"] is None else HeadParams.from_json(obj["head"])
        return cls(cfg, th, head, np.array(obj["x_mean"]), np.array(obj["x_std"]),
                   int(obj["n_train"]), float(obj["count_resid_var"]),
                   tuple(obj["objective_trace"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "CoupledModel":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def monthly_counts_array(stream: EventStream, n_months: int) -> np.ndarray:
    idx = np.floor(stream.times).astype(np.int64)
    keep = idx < n_months
    flat = idx[keep] * stream.D + stream.components[keep]
    return np.bincount(flat, minlength=n_months * stream.D).reshape(n_months, stream.D)


def joint_objective(model: CoupledModel, stream: EventStream, response) -> float:
    return objective_parts(model, stream, response).J


def objective_parts(model: CoupledModel, stream: EventStream, response) -> Evaluation:
    data, _, _ = _training_data(stream, response, model.n_train, model.x_mean, model.x_std)
    return evaluate(model.theta, data, model.config)


def _training_data(stream, response, n_train, x_mean=None, x_std=None):
    y = _as_matrix(response)[:n_train]
    if y.shape[0] < n_train:
        raise ValueError("response shorter than the training window")
    if stream.horizon < n_train:
        raise ValueError("event stream shorter than the training window")
    train_stream = stream.window(0, n_train) if stream.horizon > n_train else stream
    counts = monthly_counts_array(train_stream, n_train)
    if x_mean is None:
        x_mean = counts.mean(axis=0)
        x_std = counts.std(axis=0)
        x_std = np.where(x_std > 0, x_std, 1.0)
    x = (counts - x_mean) / x_std
    return TrainingData(train_stream, counts, x, y), x_mean, x_std


# ------------------------------------------------------------- blocks


def _init_theta(data: TrainingData, cfg: FitConfig) -> Theta:
    M, D = data.counts.shape
    K, P = cfg.K, data.y.shape[1]
    rng = np.random.default_rng(cfg.seed)
    rate = np.maximum(data.counts.mean(axis=0), 1e-3)
    alpha = np.full((D, D), 0.01) + np.eye(D) * 0.09
    mu = inv_softplus(np.maximum(rate * 0.8, 1e-3))
    omega = np.ones((D, D))
    vy = max(float(np.var(data.y)), 1e-6)
    A = np.diag(np.linspace(0.9, 0.5, K)) if K > 1 else np.array([[0.9]])
    # start the coupling at the lagged count effect seen directly in the
    # response, split evenly over latent rows; random jitter breaks ties
    B_raw = rng.normal(0.0, 0.01, size=(K, D))
    if M > 2:
        Z = np.hstack([data.y[:-1, :1], data.x[:-1]])
        Z = Z - Z.mean(axis=0)
        t = data.y[1:, 0] - data.y[1:, 0].mean()
        coef = np.linalg.solve(Z.T @ Z + cfg.ridge * np.eye(D + 1), Z.T @ t)
        B_raw += coef[1:] / (K * float(_gate_mean(np.array(cfg.xi_init), cfg.tau)))
    net = MLP.init(K + D, K, hidden=cfg.mlp_hidden, seed=cfg.seed)
    return Theta(mu=mu, alpha=alpha, omega=omega, gamma_raw=np.zeros((D, K)),
                 xi_ri=np.full((D, K), cfg.xi_init), A=A, B_raw=B_raw,
                 xi_ir=np.full((K, D), cfg.xi_init), Q=np.full(K, 0.1 * vy / K),
                 C=np.ones((P, K)), R=np.full(P, 0.2 * vy),
                 W1=net.W1, b1=net.b1, W2=net.W2, zeta=np.zeros((M, K)))


def _guarded(th_old: Theta, ev_old: Evaluation, th_new: Theta, data, cfg,
             ll_event=None):
    for s in _STEPS:
        cand = th_old.blend(th_new, s)
        try:
            ev = evaluate(cand, data, cfg, ll_event)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError):
            continue
        if np.isfinite(ev.J) and ev.J >= ev_old.J:
            return cand, ev
    return th_old, ev_old


def _moments(fs: FilteredStates):
    mu = fs.means
    Ezz = fs.covs + mu[:, :, None] * mu[:, None, :]
    Ecross = fs.cross_covs + mu[:, :, None] * np.roll(mu, 1, axis=0)[:, None, :]
    return mu, Ezz, Ecross


def _state_block(th: Theta, ev: Evaluation, data: TrainingData, cfg: FitConfig):
    fs = ev.fs
    M, K = fs.means.shape
    if M < 2:
        return th, ev
    ir, _ = cfg.directions()
    mu, Ezz, Ecross = _moments(fs)
    u = np.zeros((M, K))
    if cfg.enable_mlp:
        u = mlp_inputs(state_params(th, cfg), th.zeta, data.x)
    g = _gate_mean(th.xi_ir, cfg.tau)
    X = data.x[:-1]
    A = th.A.copy()
    B_raw = th.B_raw.copy()
    Q = th.Q.copy()
    lam = cfg.ridge
    for i in range(K):
        feats_x = X * g[i] if ir else np.zeros((M - 1, 0))
        nx = feats_x.shape[1]
        n = K + nx
        G = np.zeros((n, n))
        G[:K, :K] = Ezz[:-1].sum(axis=0)
        if nx:
            cx = mu[:-1].T @ feats_x
            G[:K, K:] = cx
            G[K:, :K] = cx.T
            G[K:, K:] = feats_x.T @ feats_x
        t_mean = mu[1:, i] - u[1:, i]
        h = np.zeros(n)
        h[:K] = Ecross[1:, i, :].sum(axis=0) - u[1:, i] @ mu[:-1]
        if nx:
            h[K:] = t_mean @ feats_x
        coef = np.linalg.solve(G + lam * np.eye(n), h)
        Et2 = np.sum(fs.covs[1:, i, i] + t_mean ** 2)
        q = (Et2 - 2 * coef @ h + coef @ G @ coef) / (M - 1)
        A[i] = coef[:K]
        if nx:
            B_raw[i] = coef[K:]
        Q[i] = max(q, _VAR_FLOOR)
    rho = np.max(np.abs(np.linalg.eigvals(A)))
    if rho > 1.0:
        A = A / rho
    y = data.y
    Szz = Ezz.sum(axis=0)
    C = np.linalg.solve(Szz + lam * np.eye(K), (y.T @ mu).T).T
    R = np.array([max((y[:, p] @ y[:, p] - 2 * C[p] @ (y[:, p] @ mu) + C[p] @ Szz @ C[p]) / M,
                      _VAR_FLOOR) for p in range(y.shape[1])])
    new = replace(th, A=A, B_raw=B_raw, Q=Q, C=C, R=R)
    return _guarded(th, ev, new, data, cfg, _reuse_event(ev, cfg))


def _reuse_event(ev: Evaluation, cfg: FitConfig):
    # l_event depends on the latent path only through the R->I block
    _, ri = cfg.directions()
    return None if ri else ev.ll_event


def _mlp_block(th: Theta, ev: Evaluation, data: TrainingData, cfg: FitConfig):
    if not cfg.enable_mlp or data.M < 3:
        return th, ev
    fs = ev.fs
    mu = fs.means
    B = effective_B(th, cfg)
    target = mu[1:] - mu[:-1] @ th.A.T - data.x[:-1] @ B.T
    net = MLP(th.W1, th.b1, th.W2)
    H = net.hidden(np.hstack([th.zeta[:-1], data.x[:-1]]))
    # a real weight decay keeps the ungated correction from absorbing
    # count effects that belong to the gated coupling
    W2 = np.linalg.solve(H.T @ H + cfg.mlp_ridge * np.eye(H.shape[1]), H.T @ target).T
    trial = replace(th, W2=W2)
    try:
        zeta = filter_smooth(state_params(trial, cfg), data.x, data.y, frozen=th.zeta).means
    except np.linalg.LinAlgError:
        return th, ev
    return _guarded(th, ev, replace(trial, zeta=zeta), data, cfg, _reuse_event(ev, cfg))


def _pack(th: Theta, ri: bool) -> np.ndarray:
    parts = [th.mu, th.alpha.ravel(), np.log(th.omega).ravel()]
    if ri:
        parts.append(th.gamma_raw.ravel())
    return np.concatenate(parts)


def _unpack(v: np.ndarray, th: Theta, ri: bool) -> Theta:
    D = len(th.mu)
    mu = v[:D]
    alpha = np.maximum(v[D:D + D * D].reshape(D, D), 0.0)
    omega = np.exp(v[D + D * D:D + 2 * D * D]).reshape(D, D)
    gamma_raw = v[D + 2 * D * D:].reshape(D, -1) if ri else th.gamma_raw
    return replace(th, mu=mu.copy(), alpha=alpha, omega=omega, gamma_raw=gamma_raw.copy())


def hawkes_objective(v: np.ndarray, th: Theta, stream: EventStream, latent, cfg: FitConfig):
    """Negative event log-likelihood and gradient over (mu, alpha, log omega).

    The response-to-event weights stay at their values in ``th``.
    """
    _, ri = cfg.directions()
    cand = _unpack(v, th, False)
    hp = hawkes_params(cand, cfg)
    ll, g = event_log_likelihood_grad(hp, stream, latent if ri else None)
    grads = [g["mu"], g["alpha"].ravel(), (g["omega"] * cand.omega).ravel()]
    return -ll, -np.concatenate(grads)


def _with_gamma(th: Theta, v: np.ndarray) -> Theta:
    return replace(th, gamma_raw=np.ascontiguousarray(v.reshape(th.gamma_raw.shape)))


def gamma_objective(v: np.ndarray, th: Theta, stream: EventStream, latent, cfg: FitConfig):
    """Negative event log-likelihood and gradient over the raw feedback weights."""
    ll, g = event_log_likelihood_grad(hawkes_params(_with_gamma(th, v), cfg), stream, latent)
    return -ll, -(g["gamma"] * _gate_mean(th.xi_ri, cfg.tau)).ravel()


def _hawkes_block(th: Theta, ev: Evaluation, data: TrainingData, cfg: FitConfig):
    # Excitation first with the feedback held fixed, then the feedback alone.  With
    # every feedback gate closed the first stage is exactly the one-way problem.
    _, ri = cfg.directions()
    D = len(th.mu)
    bounds = [(-30.0, 30.0)] * D + [(0.0, 10.0)] * (D * D) + [_LOG_OMEGA_BOUNDS] * (D * D)
    v0 = np.clip(_pack(th, False), [b[0] for b in bounds], [b[1] for b in bounds])
    res = minimize(hawkes_objective, v0, args=(th, data.stream, ev.fs.means, cfg), jac=True,
                   method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": cfg.hawkes_maxiter, "gtol": cfg.hawkes_gtol, "maxcor": 30})
    if np.all(np.isfinite(res.x)):
        th, ev = _guarded(th, ev, _unpack(res.x, th, False), data, cfg)
    if ri and np.any(effective_gamma(th, cfg) != 0.0):
        v0 = np.clip(th.gamma_raw.ravel(), -20.0, 20.0)
        res = minimize(gamma_objective, v0, args=(th, data.stream, ev.fs.means, cfg), jac=True,
                       method="L-BFGS-B", bounds=[(-20.0, 20.0)] * v0.size,
                       options={"maxiter": cfg.hawkes_maxiter, "gtol": cfg.hawkes_gtol})
        if np.all(np.isfinite(res.x)):
            th, ev = _guarded(th, ev, _with_gamma(th, res.x), data, cfg)
    return th, ev


def _gate_block(th: Theta, ev: Evaluation, data: TrainingData, cfg: FitConfig):
    ir, ri = cfg.directions()
    # Feedback gates first, so a closed feedback direction leaves the coupling
    # search on the same path as the one-way model.
    if ri:
        th, ev = _gate_block_ri(th, ev, data, cfg)
    if ir:
        th, ev = _gate_block_ir(th, ev, data, cfg)
    return th, ev


def _gate_block_ir(th, ev, data, cfg):
    """Coordinate ascent over each I->R log-odds: keep, close, or open.

    Opening searches the entry's effective coefficient on the full
    objective.  The single-entry regression on the current smoothed path
    only brackets the search: that path was smoothed without the entry,
    so the regression is biased toward zero.
    """
    K, D = th.B_raw.shape
    g_open = float(_gate_mean(np.array(cfg.xi_open), cfg.tau))
    reuse = _reuse_event(ev, cfg)
    X = data.x[:-1]
    sxx = np.sum(X ** 2, axis=0) + cfg.ridge
    # the correction depends on the frozen path only, not on B
    u = mlp_inputs(state_params(th, cfg), th.zeta, data.x) if cfg.enable_mlp else None

    def J_of(cand):
        try:
            e = evaluate(cand, data, cfg, reuse)
        except (np.linalg.LinAlgError, FloatingPointError):
            return None
        return e if np.isfinite(e.J) else None

    for i in range(K):
        for j in range(D):
            mu = ev.fs.means
            if u is None:
                u = np.zeros_like(mu)
            Beff = effective_B(th, cfg)
            resid = mu[1:, i] - u[1:, i] - mu[:-1] @ th.A[i] - X @ Beff[i] + X[:, j] * Beff[i, j]
            b_star = float(resid @ X[:, j] / sxx[j])

            xi = th.xi_ir.copy()
            xi[i, j] = cfg.xi_closed
            e = J_of(replace(th, xi_ir=xi))
            if e is not None and e.J > ev.J:
                th, ev = replace(th, xi_ir=xi), e

            xi_open = th.xi_ir.copy()
            xi_open[i, j] = cfg.xi_open
            memo = {}

            def opened(b):
                Braw = th.B_raw.copy()
                Braw[i, j] = b / g_open
                return replace(th, xi_ir=xi_open, B_raw=Braw)

            def neg(b):
                e = J_of(opened(b))
                memo[b] = e
                return np.inf if e is None else -e.J

            span = 4.0 * abs(b_star) + 0.5
            res = minimize_scalar(neg, bounds=(b_star - span, b_star + span), method="bounded",
                                  options={"xatol": 1e-3, "maxiter": 30})
            e = memo.get(res.x)
            if e is not None and e.J > ev.J:
                th, ev = opened(res.x), e
    return th, ev


def _gate_block_ri(th, ev, data, cfg):
    D, K = th.gamma_raw.shape
    g_open = float(_gate_mean(np.array(cfg.xi_open), cfg.tau))
    latent = ev.fs.means

    def event_ll(cand):
        return event_log_likelihood(hawkes_params(cand, cfg), data.stream, latent)

    for d in range(D):
        for k in range(K):
            cands = []
            xi = th.xi_ri.copy()
            xi[d, k] = cfg.xi_closed
            cands.append(replace(th, xi_ri=xi))
            xi_open = th.xi_ri.copy()
            xi_open[d, k] = cfg.xi_open

            def neg(b):
                G = th.gamma_raw.copy()
                G[d, k] = b / g_open
                return -event_ll(replace(th, xi_ri=xi_open, gamma_raw=G))

            res = minimize_scalar(neg, bounds=(-5.0, 5.0), method="bounded",
                                  options={"xatol": 1e-4, "maxiter": 40})
            G = th.gamma_raw.copy()
            G[d, k] = res.x / g_open
            cands.append(replace(th, xi_ri=xi_open, gamma_raw=G))
            for cand in cands:
                ll = event_ll(cand)
                pen = sparsity_penalty(gate_sets(cand, cfg), cfg.lambda_sp)
                J = ev.J - ev.ll_event + ll + ev.penalty - pen
                if np.isfinite(J) and J > ev.J:
                    th = cand
                    ev = Evaluation(J, ll, ev.ll_response, ev.ll_dynamics, ev.kl, pen, ev.fs)
    return th, ev


# ---------------------------------------------------------------- fitting


def fit_coupled(cfg: FitConfig, stream: EventStream, response, train_stop: int | None = None,
                counts=None) -> CoupledModel:
    """Fit on months ``[0, train_stop)``.

    ``response`` is a (months,) or (months, channels) array or a
    ResponseSeries aligned with month 0 of ``stream``.  ``counts`` (raw
    monthly counts, for the head) defaults to the binned stream.
    """
    y_all = _as_matrix(response)
    n_train = int(train_stop if train_stop is not None else min(stream.n_months, len(y_all)))
    if n_train < cfg.min_train_months:
        raise ValueError(f"training window of {n_train} months is shorter than "
                         f"{cfg.min_train_months}")
    data, x_mean, x_std = _training_data(stream, y_all, n_train)
    th = _init_theta(data, cfg)
    ev = evaluate(th, data, cfg)
    trace = [ev.J]
    for it in range(cfg.em_iterations):
        th, ev = _state_block(th, ev, data, cfg)
        th, ev = _mlp_block(th, ev, data, cfg)
        th, ev = _hawkes_block(th, ev, data, cfg)
        if cfg.gates_learned:
            th, ev = _gate_block(th, ev, data, cfg)
        if ev.J < trace[-1] - MONOTONE_SLACK:
            raise MonotonicityError(f"objective fell from {trace[-1]} to {ev.J} at iteration {it}")
        trace.append(ev.J)

    raw_counts = data.counts if counts is None else np.asarray(counts)[:n_train]
    model = CoupledModel(cfg, th, None, x_mean, x_std, n_train, 1.0, tuple(trace))
    head = None
    if cfg.enable_head:
        extra = None
        if cfg.head_uses_state:
            extra = model.online_filter(data.y, raw_counts, n_train).filtered_means
        head = fit_head(data.y[:, 0], raw_counts, n_train, cfg.head_config(), extra)
    model = replace(model, head=head)
    fc = model.count_forecasts(stream, y_all, np.arange(n_train))
    resid = data.counts.sum(axis=1) - fc.sum(axis=1)
    var = float(np.mean(resid ** 2))
    return replace(model, count_resid_var=max(var, 1.0))
