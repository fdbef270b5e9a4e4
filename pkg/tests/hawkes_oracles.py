"""Independent reference computations for the Hawkes block (no recursion)."""
import numpy as np


def softplus(x):
    return np.logaddexp(0.0, x)


def naive_preact(p, times, comps, offsets, t, include_equal=False):
    x = p.mu + offsets[min(int(np.floor(t)), len(offsets) - 1)]
    for s, c in zip(times, comps):
        if s < t or (include_equal and s == t):
            x = x + p.alpha[c] * p.omega[c] * np.exp(-p.omega[c] * (t - s))
    return x


def naive_intensity(p, stream, offsets, t):
    return softplus(naive_preact(p, stream.times, stream.components, offsets, t))


def fine_compensator(p, stream, offsets, n_nodes=10_000):
    """Integral of the total intensity using ~n_nodes trapezoid nodes.

    Nodes are spread over the smooth pieces between consecutive
    breakpoints (events and month boundaries) in proportion to length.
    """
    T = stream.horizon
    bps = np.unique(np.concatenate([[0.0, T], stream.times, np.arange(1, int(np.ceil(T)))]))
    total = 0.0
    times, comps = stream.times, stream.components
    for a, b in zip(bps[:-1], bps[1:]):
        n = max(4, int(round(n_nodes * (b - a) / T)))
        ts = np.linspace(a, b, n + 1)
        past = times <= a
        # (nodes, events) decay factors for each target column
        dt = ts[:, None] - times[past][None, :]
        src = comps[past]
        x = p.mu + offsets[min(int(np.floor(a)), len(offsets) - 1)]
        x = np.broadcast_to(x, (len(ts), p.D)).copy()
        for d in range(p.D):
            aw = p.alpha[src, d] * p.omega[src, d]
            x[:, d] += (aw[None, :] * np.exp(-p.omega[src, d][None, :] * dt)).sum(axis=1)
        lam = softplus(x).sum(axis=1)
        total += float(np.sum(0.5 * (lam[1:] + lam[:-1]) * np.diff(ts)))
    return total


def naive_log_term(p, stream, offsets):
    out = 0.0
    for s, c in zip(stream.times, stream.components):
        out += np.log(softplus(naive_preact(p, stream.times, stream.components, offsets, s)[c]))
    return out
