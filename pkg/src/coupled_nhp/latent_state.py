"""Monthly latent response dynamics.

    z_m = A z_{m-1} + B x_{m-1} + u(z_{m-1}, x_{m-1}, c_m) + eps_m,   eps ~ N(0, diag(Q))
    y_m = C z_m + eta_m,                                          eta ~ N(0, diag(R))

``u`` is a one-hidden-layer tanh network.  Inference treats its output
as a known input evaluated at frozen latent means, so the filter and
smoother below are exact linear-Gaussian recursions.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

MAX_HIDDEN = 16
_LOG2PI = np.log(2 * np.pi)


@dataclass(frozen=True, eq=False)
class MLP:
    """``W2 @ tanh(W1 @ [z; x; c] + b1)``."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray

    def __post_init__(self):
        if self.W1.shape[0] > MAX_HIDDEN:
            raise ValueError(f"hidden width {self.W1.shape[0]} exceeds {MAX_HIDDEN}")

    @classmethod
    def init(cls, n_in: int, n_out: int, hidden: int = 8, seed: int = 0,
             scale: float = 1.0) -> "MLP":
        if hidden > MAX_HIDDEN:
            raise ValueError(f"hidden width {hidden} exceeds {MAX_HIDDEN}")
        rng = np.random.default_rng(seed)
        W1 = rng.normal(0.0, scale / np.sqrt(max(n_in, 1)), size=(hidden, n_in))
        b1 = rng.normal(0.0, 0.1, size=hidden)
        return cls(W1, b1, np.zeros((n_out, hidden)))

    def hidden(self, inputs: np.ndarray) -> np.ndarray:
        return np.tanh(inputs @ self.W1.T + self.b1)

    def __call__(self, z, x, c=None) -> np.ndarray:
        parts = [np.atleast_1d(z), np.atleast_1d(x)]
        if c is not None and np.size(c):
            parts.append(np.atleast_1d(c))
        inp = np.concatenate(parts, axis=-1)
        return self.hidden(inp) @ self.W2.T

    def to_json(self) -> dict:
        return {"W1": self.W1.tolist(), "b1": self.b1.tolist(), "W2": self.W2.tolist()}

    @classmethod
    def from_json(cls, obj) -> "MLP":
        return cls(np.array(obj["W1"], dtype=float).reshape(len(obj["b1"]), -1),
                   np.array(obj["b1"], dtype=float),
                   np.array(obj["W2"], dtype=float).reshape(-1, len(obj["b1"])))


@dataclass(frozen=True, eq=False)
class StateSpaceParams:
    A: np.ndarray          # (K, K)
    B: np.ndarray          # (K, D), effective (already gated)
    Q: np.ndarray          # (K,) process variances
    C: np.ndarray          # (P, K) observation map
    R: np.ndarray          # (P,) observation variances
    mlp: MLP | None = None
    z0_mean: np.ndarray | None = None
    z0_var: np.ndarray | None = None
    milestone_dim: int = 0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        K = A.shape[0]
        B = np.asarray(self.B, dtype=float).reshape(K, -1)
        C = np.asarray(self.C, dtype=float).reshape(-1, K)
        Q = np.asarray(self.Q, dtype=float).reshape(K)
        R = np.asarray(self.R, dtype=float).reshape(C.shape[0])
        if np.any(Q < 0) or np.any(R < 0):
            raise ValueError("Q and R must be non-negative")
        z0m = np.zeros(K) if self.z0_mean is None else np.asarray(self.z0_mean, float).reshape(K)
        z0v = np.ones(K) if self.z0_var is None else np.asarray(self.z0_var, float).reshape(K)
        for name, v in (("A", A), ("B", B), ("C", C), ("Q", Q), ("R", R),
                        ("z0_mean", z0m), ("z0_var", z0v)):
            object.__setattr__(self, name, v)

    @property
    def K(self) -> int:
        return self.A.shape[0]

    @property
    def D(self) -> int:
        return self.B.shape[1]

    @property
    def channels(self) -> int:
        return self.C.shape[0]

    def to_json(self) -> dict:
        return {
            "A": self.A.tolist(), "B": self.B.tolist(), "Q": self.Q.tolist(),
            "C": self.C.tolist(), "R": self.R.tolist(),
            "mlp": None if self.mlp is None else self.mlp.to_json(),
            "z0_mean": self.z0_mean.tolist(), "z0_var": self.z0_var.tolist(),
            "milestone_dim": self.milestone_dim,
        }

    @classmethod
    def from_json(cls, obj) -> "StateSpaceParams":
        return cls(np.array(obj["A"]), np.array(obj["B"]), np.array(obj["Q"]),
                   np.array(obj["C"]), np.array(obj["R"]),
                   None if obj.get("mlp") is None else MLP.from_json(obj["mlp"]),
                   np.array(obj["z0_mean"]), np.array(obj["z0_var"]),
                   int(obj.get("milestone_dim", 0)))


def _check_dims(p: StateSpaceParams, z=None, x=None):
    if z is not None and np.shape(z)[-1] != p.K:
        raise ValueError(f"latent dimension {np.shape(z)[-1]} != K={p.K}")
    if x is not None and np.shape(x)[-1] != p.D:
        raise ValueError(f"innovation dimension {np.shape(x)[-1]} != D={p.D}")


def transition_mean(p: StateSpaceParams, z_prev, x_prev, c=None) -> np.ndarray:
    z_prev = np.asarray(z_prev, dtype=float)
    x_prev = np.asarray(x_prev, dtype=float)
    _check_dims(p, z_prev, x_prev)
    out = z_prev @ p.A.T + x_prev @ p.B.T
    if p.mlp is not None:
        out = out + p.mlp(z_prev, x_prev, c)
    return out


def observation_mean(p: StateSpaceParams, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    _check_dims(p, z)
    return z @ p.C.T


def mlp_inputs(p: StateSpaceParams, z_prev: np.ndarray, x: np.ndarray, c=None) -> np.ndarray:
    """Correction ``u_m`` for m = 1..M-1 given previous-month latents ``z_prev``.

    Row ``m`` of the result is the input into month ``m``; row 0 is zero.
    """
    M = x.shape[0]
    u = np.zeros((M, p.K))
    if p.mlp is None or M < 2:
        return u
    cc = None if c is None or np.size(c) == 0 else np.asarray(c)[1:]
    u[1:] = p.mlp(z_prev[:-1], x[:-1], cc)
    return u


@dataclass(frozen=True, eq=False)
class FilteredStates:
    means: np.ndarray              # smoothed (M, K)
    covs: np.ndarray               # smoothed (M, K, K)
    filtered_means: np.ndarray
    filtered_covs: np.ndarray
    predicted_means: np.ndarray    # one-step prior predictive (M, K)
    predicted_covs: np.ndarray
    inputs: np.ndarray             # additive transition inputs B x + u, (M, K)
    ll_response: float
    ll_dynamics: float
    kl: float
    marginal_loglik: float
    cross_covs: np.ndarray = None  # Cov(z_m, z_{m-1}) given all data; row 0 unused
    variances: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "variances",
                           np.diagonal(self.covs, axis1=1, axis2=2).copy())


def _gauss_logpdf_diag(r: np.ndarray, var: np.ndarray) -> float:
    return float(-0.5 * np.sum(_LOG2PI + np.log(var) + r * r / var))


def _kl_gauss(m1, S1, m0, S0) -> float:
    K = len(m1)
    L = np.linalg.cholesky(S0)
    a = np.linalg.solve(L, S1)
    tr = np.trace(np.linalg.solve(L.T, a))
    d = np.linalg.solve(L, m1 - m0)
    _, logdet1 = np.linalg.slogdet(S1)
    logdet0 = 2 * np.sum(np.log(np.diag(L)))
    return 0.5 * (tr + d @ d - K + logdet0 - logdet1)



@njit(cache=True)
def _chol(S):
    n = S.shape[0]
    L = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1):
            s = S[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if not s > 0.0:
                    return L, False
                L[i, i] = np.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    return L, True


@njit(cache=True)
def _chol_solve(L, B):
    # solves (L L') X = B for X
    n = L.shape[0]
    X = B.copy()
    m = X.shape[1]
    for c in range(m):
        for i in range(n):
            s = X[i, c]
            for k in range(i):
                s -= L[i, k] * X[k, c]
            X[i, c] = s / L[i, i]
        for i in range(n - 1, -1, -1):
            s = X[i, c]
            for k in range(i + 1, n):
                s -= L[k, i] * X[k, c]
            X[i, c] = s / L[i, i]
    return X


@njit(cache=True)
def _kalman_core(A, C, Q, R, z0m, z0v, y, drive):
    M, P = y.shape
    K = A.shape[0]
    pred_m = np.zeros((M, K))
    pred_P = np.zeros((M, K, K))
    filt_m = np.zeros((M, K))
    filt_P = np.zeros((M, K, K))
    Rm = np.diag(R)
    Qm = np.diag(Q)
    eye = np.eye(K)
    marg = 0.0
    log2pi = np.log(2 * np.pi)
    mean = z0m.copy()
    cov = np.diag(z0v)
    for m in range(M):
        if m > 0:
            mean = A @ filt_m[m - 1] + drive[m]
            cov = A @ filt_P[m - 1] @ A.T + Qm
        pred_m[m] = mean
        pred_P[m] = cov
        S = C @ cov @ C.T + Rm
        S = 0.5 * (S + S.T)
        Ls, ok = _chol(S)
        if not ok:
            return pred_m, pred_P, filt_m, filt_P, filt_m, filt_P, pred_P, marg, 0.0, m
        resid = y[m] - C @ mean
        w = resid.copy()
        for i in range(P):
            s = w[i]
            for k in range(i):
                s -= Ls[i, k] * w[k]
            w[i] = s / Ls[i, i]
        ld = 0.0
        for i in range(P):
            ld += np.log(Ls[i, i])
        marg += -0.5 * (P * log2pi + 2 * ld + w @ w)
        gain = _chol_solve(Ls, C @ cov).T
        filt_m[m] = mean + gain @ resid
        IKC = eye - gain @ C
        Pf = IKC @ cov @ IKC.T + gain @ Rm @ gain.T
        filt_P[m] = 0.5 * (Pf + Pf.T)

    sm_m = filt_m.copy()
    sm_P = filt_P.copy()
    cross = np.zeros((M, K, K))
    for m in range(M - 2, -1, -1):
        Lp, ok = _chol(pred_P[m + 1])
        if not ok:
            return pred_m, pred_P, filt_m, filt_P, sm_m, sm_P, cross, marg, 0.0, -(m + 2)
        J = _chol_solve(Lp, A @ filt_P[m]).T
        sm_m[m] = filt_m[m] + J @ (sm_m[m + 1] - pred_m[m + 1])
        Ps = filt_P[m] + J @ (sm_P[m + 1] - pred_P[m + 1]) @ J.T
        sm_P[m] = 0.5 * (Ps + Ps.T)
        cross[m + 1] = sm_P[m + 1] @ J.T

    kl = 0.0
    for m in range(M):
        L0, ok0 = _chol(pred_P[m])
        L1, ok1 = _chol(sm_P[m])
        if not (ok0 and ok1):
            return pred_m, pred_P, filt_m, filt_P, sm_m, sm_P, cross, marg, 0.0, -(m + 2)
        T = _chol_solve(L0, sm_P[m])
        d = (sm_m[m] - pred_m[m]).reshape(K, 1)
        q = _chol_solve(L0, d)
        ld0 = 0.0
        ld1 = 0.0
        for i in range(K):
            ld0 += np.log(L0[i, i])
            ld1 += np.log(L1[i, i])
        tr = 0.0
        quad = 0.0
        for i in range(K):
            tr += T[i, i]
            quad += d[i, 0] * q[i, 0]
        kl += 0.5 * (tr + quad - K + 2 * ld0 - 2 * ld1)
    return pred_m, pred_P, filt_m, filt_P, sm_m, sm_P, cross, marg, kl, M

def filter_smooth(p: StateSpaceParams, x, y, frozen=None, c=None) -> FilteredStates:
    """Kalman filter and RTS smoother.

    ``x`` is the (M, D) innovation feature matrix and ``y`` the (M, P)
    response.  The mlp correction is evaluated at ``frozen`` (M, K)
    latent means from a previous pass; with ``frozen=None`` it uses the
    running filtered mean, which is what an online forecaster sees.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    M = x.shape[0]
    _check_dims(p, x=x)
    if y.shape != (M, p.channels):
        raise ValueError("response shape does not match months x channels")
    cc = None if c is None or np.size(c) == 0 else np.asarray(c, dtype=float)
    if p.mlp is not None and frozen is None:
        return _filter_smooth_online(p, x, y, cc)

    inputs = np.zeros((M, p.K))
    if M > 1:
        inputs[1:] = x[:-1] @ p.B.T
        if p.mlp is not None:
            inputs += mlp_inputs(p, np.asarray(frozen, dtype=float), x, cc)
    out = _kalman_core(p.A, p.C, p.Q, p.R, p.z0_mean, p.z0_var, np.ascontiguousarray(y), inputs)
    pred_m, pred_P, filt_m, filt_P, sm_m, sm_P, cross, marg, kl, status = out
    if status != M:
        where = status if status >= 0 else -status - 2
        raise np.linalg.LinAlgError(
            f"covariance not positive definite at month {where}; check Q and R")
    return _assemble(p, y, inputs, sm_m, sm_P, filt_m, filt_P, pred_m, pred_P, marg, kl, cross)


def _assemble(p, y, inputs, sm_m, sm_P, filt_m, filt_P, pred_m, pred_P, marg, kl, cross):
    # plug-in terms at the smoothed means
    ll_resp = _gauss_logpdf_diag(y - sm_m @ p.C.T, p.R[None, :])
    ll_dyn = _gauss_logpdf_diag(sm_m[0] - p.z0_mean, p.z0_var)
    if len(sm_m) > 1:
        r = sm_m[1:] - sm_m[:-1] @ p.A.T - inputs[1:]
        ll_dyn += _gauss_logpdf_diag(r, p.Q[None, :])
    return FilteredStates(sm_m, sm_P, filt_m, filt_P, pred_m, pred_P, inputs,
                          ll_resp, ll_dyn, max(float(kl), 0.0), float(marg), cross)


def _filter_smooth_online(p: StateSpaceParams, x, y, cc) -> FilteredStates:
    M, K = x.shape[0], p.K
    A, C = p.A, p.C
    Qm, Rm = np.diag(p.Q), np.diag(p.R)
    eye = np.eye(K)
    pred_m = np.zeros((M, K))
    pred_P = np.zeros((M, K, K))
    filt_m = np.zeros((M, K))
    filt_P = np.zeros((M, K, K))
    inputs = np.zeros((M, K))
    marg = 0.0
    mean, cov = p.z0_mean.copy(), np.diag(p.z0_var)
    for m in range(M):
        if m > 0:
            drive = p.B @ x[m - 1] + p.mlp(filt_m[m - 1], x[m - 1], None if cc is None else cc[m])
            inputs[m] = drive
            mean = A @ filt_m[m - 1] + drive
            cov = A @ filt_P[m - 1] @ A.T + Qm
        pred_m[m], pred_P[m] = mean, cov
        S = C @ cov @ C.T + Rm
        S = 0.5 * (S + S.T)
        try:
            Ls = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError(
                f"covariance not positive definite at month {m}; check Q and R") from None
        resid = y[m] - C @ mean
        w = np.linalg.solve(Ls, resid)
        marg += -0.5 * (len(resid) * _LOG2PI + 2 * np.sum(np.log(np.diag(Ls))) + w @ w)
        gain = np.linalg.solve(Ls.T, np.linalg.solve(Ls, C @ cov)).T
        filt_m[m] = mean + gain @ resid
        IKC = eye - gain @ C
        Pf = IKC @ cov @ IKC.T + gain @ Rm @ gain.T
        filt_P[m] = 0.5 * (Pf + Pf.T)

    sm_m = filt_m.copy()
    sm_P = filt_P.copy()
    cross = np.zeros((M, K, K))
    for m in range(M - 2, -1, -1):
        J = np.linalg.solve(pred_P[m + 1].T, (filt_P[m] @ A.T).T).T
        sm_m[m] = filt_m[m] + J @ (sm_m[m + 1] - pred_m[m + 1])
        Ps = filt_P[m] + J @ (sm_P[m + 1] - pred_P[m + 1]) @ J.T
        sm_P[m] = 0.5 * (Ps + Ps.T)
        cross[m + 1] = sm_P[m + 1] @ J.T
    kl = sum(_kl_gauss(sm_m[m], sm_P[m], pred_m[m], pred_P[m]) for m in range(M))
    return _assemble(p, y, inputs, sm_m, sm_P, filt_m, filt_P, pred_m, pred_P, marg, kl, cross)


def sample_path(p: StateSpaceParams, x, z0, seed, c=None):
    """Ancestral draw of ``(z, y)`` given innovations ``x`` and initial state ``z0``."""
    x = np.asarray(x, dtype=float)
    _check_dims(p, x=x)
    z0 = np.asarray(z0, dtype=float).reshape(p.K)
    M = x.shape[0]
    rng = np.random.default_rng(seed)
    cc = None if c is None or np.size(c) == 0 else np.asarray(c, dtype=float)
    z = np.zeros((M, p.K))
    z[0] = z0
    q_sd = np.sqrt(p.Q)
    r_sd = np.sqrt(p.R)
    for m in range(1, M):
        z[m] = transition_mean(p, z[m - 1], x[m - 1], None if cc is None else cc[m])
        z[m] += q_sd * rng.standard_normal(p.K)
    y = z @ p.C.T + r_sd * rng.standard_normal((M, p.channels))
    return z, y


def with_B(p: StateSpaceParams, B) -> StateSpaceParams:
    return replace(p, B=np.asarray(B, dtype=float).reshape(p.K, p.D))
