"""Independent numeric oracles, written without the package's interval code."""

import numpy as np


class PrefixMaxEnd:
    """max end over flows with start <= t, answered for arrays of t."""

    def __init__(self, spans):
        spans = sorted(spans)
        self.starts = np.array([s for s, _ in spans], dtype=float)
        self.ends = np.maximum.accumulate(np.array([e for _, e in spans], dtype=float)) if spans else np.array([])

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if not len(self.starts):
            return np.full(t.shape, -np.inf)
        k = np.searchsorted(self.starts, t, side="right") - 1
        out = np.where(k >= 0, self.ends[np.maximum(k, 0)], -np.inf)
        return out


def live_at(spans, t):
    """Boolean array: some [s, e) in ``spans`` contains t."""
    return PrefixMaxEnd(spans)(t) > np.asarray(t)


def dual_success(spans, t, wait):
    """No flow live at t lasts beyond t + wait."""
    return ~(PrefixMaxEnd(spans)(t) > np.asarray(t) + wait)


def busy_end(web, t):
    """End of the web busy period containing t (t itself when idle)."""
    pm = PrefixMaxEnd(web)
    b = np.asarray(t, dtype=float).copy()
    while True:
        nxt = np.maximum(b, pm(b))
        if np.array_equal(nxt, b):
            return b
        b = nxt


def single_success(web, spans, t, wait):
    t = np.asarray(t, dtype=float)
    b = busy_end(web, t)
    tau = np.where(b == t, t, np.where(b - t <= wait, b, t + wait))
    return ~live_at(spans, tau)


def breakpoint_integral(indicator, lo, hi, points):
    """Exact integral of a piecewise-constant indicator over [lo, hi], via segment midpoints."""
    cuts = np.unique(np.clip(np.concatenate([[lo, hi], np.asarray(points, dtype=float)]), lo, hi))
    mids = (cuts[:-1] + cuts[1:]) / 2
    widths = np.diff(cuts)
    return float(np.sum(widths * indicator(mids)) / (hi - lo))
