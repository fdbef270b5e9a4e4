"""Hard-concrete gates on the two coupling matrices.

A gate value is ``clamp01(sigmoid((logit(u) + xi) / tau))`` with
``u ~ Uniform(0, 1)``.  There is no stretch interval, so the clamp never
binds and gates are strictly inside (0, 1); exact zeros in the reported
structure come from thresholding ``|theta * E[g]|`` and the density caps.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

IR = "I->R"
RI = "R->I"
DEFAULT_CAPS = {IR: 0.50, RI: 0.25}
THRESHOLD = 0.03
QUAD_NODES = 1024

_gl_x, _gl_w = np.polynomial.legendre.leggauss(QUAD_NODES)
# keep the positive half; the integrand is evaluated at +x and -x together
_HALF = _gl_x > 0
_QX = _gl_x[_HALF]
_QW = _gl_w[_HALF]
_QV = 2.0 * np.arctanh(_QX)  # logit((1 + x) / 2)


@dataclass(frozen=True, eq=False)
class GateSet:
    xi: np.ndarray
    raw_weights: np.ndarray
    direction: str = IR
    tau: float = 2.0 / 3.0
    density_cap: float | None = None

    def __post_init__(self):
        if self.direction not in (IR, RI):
            raise ValueError(f"direction must be {IR!r} or {RI!r}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        xi = np.asarray(self.xi, dtype=float)
        w = np.asarray(self.raw_weights, dtype=float)
        if xi.shape != w.shape or xi.ndim != 2:
            raise ValueError("xi and raw_weights must be matrices of the same shape")
        cap = DEFAULT_CAPS[self.direction] if self.density_cap is None else float(self.density_cap)
        if not 0 < cap <= 1:
            raise ValueError("density_cap must lie in (0, 1]")
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "raw_weights", w)
        object.__setattr__(self, "density_cap", cap)

    @classmethod
    def open(cls, raw_weights, direction=IR, xi0: float = 1.0, tau: float = 2.0 / 3.0,
             density_cap=None) -> "GateSet":
        w = np.asarray(raw_weights, dtype=float)
        return cls(np.full(w.shape, float(xi0)), w, direction, tau, density_cap)

    @property
    def shape(self):
        return self.xi.shape

    @property
    def size(self) -> int:
        return self.xi.size

    def with_weights(self, raw_weights) -> "GateSet":
        return replace(self, raw_weights=np.asarray(raw_weights, dtype=float).reshape(self.shape))

    def with_xi(self, xi) -> "GateSet":
        return replace(self, xi=np.asarray(xi, dtype=float).reshape(self.shape))

    def effective(self) -> np.ndarray:
        """``theta * E[g]``, the matrix that enters the model."""
        return self.raw_weights * expected_gate(self)

    def to_json(self) -> dict:
        return {"direction": self.direction, "tau": self.tau, "density_cap": self.density_cap,
                "xi": self.xi.tolist(), "raw_weights": self.raw_weights.tolist()}

    @classmethod
    def from_json(cls, obj) -> "GateSet":
        w = np.array(obj["raw_weights"], dtype=float)
        xi = np.array(obj["xi"], dtype=float).reshape(w.shape)
        return cls(xi, w, obj["direction"], obj["tau"], obj["density_cap"])


def _sigmoid(x):
    # written through tanh so that sigmoid(a) - 1/2 is exactly odd in a
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def gate_sample(g: GateSet, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0) or np.any(u >= 1):
        raise ValueError("uniform draws must lie strictly inside (0, 1)")
    u = np.broadcast_to(u, g.shape)
    return np.clip(_sigmoid((np.log(u) - np.log1p(-u) + g.xi) / g.tau), 0.0, 1.0)


def expected_gate_xi(xi, tau: float) -> np.ndarray:
    """E[g] for an array of log-odds by Gauss-Legendre quadrature on u."""
    xi = np.asarray(xi, dtype=float)
    a = (xi[..., None] + _QV) / tau
    b = (xi[..., None] - _QV) / tau
    # each +/- node pair carries weight w/2 on [0, 1] and the half weights sum to 1
    return np.clip(0.5 + 0.25 * ((np.tanh(0.5 * a) + np.tanh(0.5 * b)) @ _QW), 0.0, 1.0)


def expected_gate(g: GateSet) -> np.ndarray:
    return expected_gate_xi(g.xi, g.tau)


def sparsity_penalty(gatesets, lambda_sp: float) -> float:
    if lambda_sp < 0:
        raise ValueError("lambda_sp must be non-negative")
    total = 0.0
    for g in gatesets:
        total += float(expected_gate(g).sum())
    return lambda_sp * total


def active_structure(g: GateSet, threshold: float = THRESHOLD):
    """Boolean mask of active entries and its density.

    An entry is active when ``|theta * E[g]| > threshold``.  If more than
    ``cap * entries`` pass, only the largest ``floor(cap * entries)`` by
    magnitude are kept (ties broken by flat index).
    """
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    mag = np.abs(g.effective())
    mask = mag > threshold
    n = g.size
    limit = int(np.floor(g.density_cap * n + 1e-12))
    if mask.sum() > limit:
        flat = mag.ravel()
        order = np.lexsort((np.arange(n), -flat))
        keep = np.zeros(n, dtype=bool)
        keep[order[:limit]] = True
        mask = keep.reshape(g.shape) & mask
    return mask, float(mask.sum()) / n if n else 0.0


def structure_json(g: GateSet, threshold: float = THRESHOLD,
                   source_names=None, target_names=None) -> dict:
    """Active edges as ``(source, target, weight)``.

    For I->R the matrix is (latent x component), so the source is the
    column; for R->I it is (component x latent) and the source is again
    the column.
    """
    mask, density = active_structure(g, threshold)
    eff = g.effective()
    edges = []
    for i, j in zip(*np.nonzero(mask)):
        src = j if source_names is None else source_names[j]
        dst = i if target_names is None else target_names[i]
        edges.append({"source": src if isinstance(src, str) else int(src),
                      "target": dst if isinstance(dst, str) else int(dst),
                      "weight": float(eff[i, j])})
    return {"direction": g.direction, "edges": edges, "density": density}
