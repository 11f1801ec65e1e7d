"""Discrimination and survival statistics.

AUROC (Mann-Whitney), Harrell's concordance index, the Kaplan-Meier
product-limit estimator, the two-group log-rank test and a Cox
proportional-hazards fit for one binary covariate (Breslow ties).
"""
from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np
from scipy.special import erfc

from .errors import NoComparablePairs, NoEvents, NonConvergence, SingleClass


@dataclass
class SurvivalSample:
    risk: float
    time: float
    event: bool
    group: int | None = None


@dataclass
class KmCurve:
    """Step function: ``survival[i]`` holds from ``times[i]`` until the next step."""

    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def at(self, t):
        """S(t) for an arbitrary time (1.0 before the first event)."""
        i = np.searchsorted(self.times, t, side="right") - 1
        return 1.0 if i < 0 else float(self.survival[i])


def _arrays(samples):
    risk = np.array([s.risk for s in samples], dtype=float)
    time = np.array([s.time for s in samples], dtype=float)
    event = np.array([bool(s.event) for s in samples])
    return risk, time, event


def auroc(labels, scores):
    """P(score+ > score-) + 0.5 P(tie) over all positive/negative pairs."""
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores, dtype=float)
    pos, neg = scores[labels], scores[~labels]
    if pos.size == 0 or neg.size == 0:
        raise SingleClass("AUROC needs both classes")
    neg = np.sort(neg)
    below = np.searchsorted(neg, pos, side="left")
    tied = np.searchsorted(neg, pos, side="right") - below
    return float((below.sum() + 0.5 * tied.sum()) / (pos.size * neg.size))


class _Fenwick:
    def __init__(self, n):
        self.tree = np.zeros(n + 1, dtype=np.int64)

    def add(self, i):
        i += 1
        while i < len(self.tree):
            self.tree[i] += 1
            i += i & -i

    def prefix(self, i):
        """Count of inserted positions < i."""
        s = 0
        while i > 0:
            s += self.tree[i]
            i -= i & -i
        return int(s)


def concordance_counts(risk, time, event):
    """(concordant, tied, comparable) pair counts for Harrell's c-index.

    A pair (i, j) is comparable when ``time[i] < time[j]`` and ``event[i]``;
    it is concordant when ``risk[i] > risk[j]``.
    """
    risk = np.asarray(risk, dtype=float)
    time = np.asarray(time, dtype=float)
    event = np.asarray(event).astype(bool)
    ranks = np.unique(risk, return_inverse=True)[1]
    n_ranks = int(ranks.max()) + 1 if risk.size else 0
    order = np.argsort(-time, kind="stable")
    tree = _Fenwick(n_ranks)
    conc = tied = comp = 0
    seen = 0
    i = 0
    # sweep from the longest time down; a block of equal times is queried before insertion
    while i < order.size:
        j = i
        while j < order.size and time[order[j]] == time[order[i]]:
            j += 1
        block = order[i:j]
        for b in block:
            if event[b]:
                r = ranks[b]
                lower = tree.prefix(r)
                equal = tree.prefix(r + 1) - lower
                conc += lower
                tied += equal
                comp += seen
        for b in block:
            tree.add(ranks[b])
        seen += block.size
        i = j
    return conc, tied, comp


def c_index(samples=None, *, risk=None, time=None, event=None):
    """Harrell's concordance index; tied risks count one half."""
    if samples is not None:
        risk, time, event = _arrays(samples)
    conc, tied, comp = concordance_counts(risk, time, event)
    if comp == 0:
        raise NoComparablePairs("no comparable pairs")
    return (conc + 0.5 * tied) / comp


def km_curve(samples=None, *, time=None, event=None):
    """Kaplan-Meier estimate; one step per distinct event time."""
    if samples is not None:
        _, time, event = _arrays(samples)
    time = np.asarray(time, dtype=float)
    event = np.asarray(event).astype(bool)
    if time.size == 0:
        raise ValueError("km_curve needs at least one sample")
    ts = np.unique(time[event])
    at_risk = np.array([(time >= t).sum() for t in ts], dtype=np.int64)
    d = np.array([((time == t) & event).sum() for t in ts], dtype=np.int64)
    surv = np.cumprod(1.0 - d / at_risk) if ts.size else np.zeros(0)
    return KmCurve(ts, surv, at_risk, d)


def chi2_sf_1dof(x):
    """Upper tail of chi-square with one degree of freedom."""
    return float(erfc(math.sqrt(max(x, 0.0) / 2.0)))


def logrank(group_a, group_b):
    """Two-group log-rank test; returns ``(chi2, p)``."""
    _, ta, ea = _arrays(group_a)
    _, tb, eb = _arrays(group_b)
    if ta.size == 0 or tb.size == 0:
        raise ValueError("both groups must be non-empty")
    time = np.concatenate([ta, tb])
    event = np.concatenate([ea, eb])
    in_a = np.concatenate([np.ones(ta.size, bool), np.zeros(tb.size, bool)])
    ts = np.unique(time[event])
    if ts.size == 0:
        raise NoEvents("log-rank test needs at least one event")
    # integer numerators keep the statistic exactly symmetric in the two groups
    o_minus_e = 0.0
    var = 0.0
    for t in ts:
        risk = time >= t
        n = int(risk.sum())
        na = int((risk & in_a).sum())
        dt = int((event & (time == t)).sum())
        da = int((event & (time == t) & in_a).sum())
        o_minus_e += (da * n - dt * na) / n
        if n > 1:
            var += dt * na * (n - na) * (n - dt) / (n * n * (n - 1))
    if var <= 0:
        return 0.0, 1.0
    chi2 = o_minus_e ** 2 / var
    return float(chi2), chi2_sf_1dof(chi2)


def cox_partial_loglik(beta, time, event, x):
    """Breslow partial log-likelihood of a single covariate."""
    time = np.asarray(time, dtype=float)
    event = np.asarray(event).astype(bool)
    x = np.asarray(x, dtype=float)
    ll = 0.0
    for t in np.unique(time[event]):
        d = event & (time == t)
        risk = time >= t
        ll += beta * x[d].sum() - d.sum() * np.log(np.exp(beta * x[risk]).sum())
    return float(ll)


def _cox_derivatives(beta, time, event, x):
    ll = g = h = 0.0
    for t in np.unique(time[event]):
        d = event & (time == t)
        risk = time >= t
        e = np.exp(beta * x[risk])
        s0 = e.sum()
        s1 = (e * x[risk]).sum()
        s2 = (e * x[risk] ** 2).sum()
        nd = d.sum()
        ll += beta * x[d].sum() - nd * np.log(s0)
        g += x[d].sum() - nd * s1 / s0
        h -= nd * (s2 / s0 - (s1 / s0) ** 2)
    return ll, g, h


def cox_binary_hr(samples=None, *, time=None, event=None, group=None, tol=1e-8, max_iter=50):
    """Newton-Raphson Cox fit for a 0/1 group covariate.

    Returns ``(beta, hr, se)`` with ``hr = exp(beta)`` the hazard of
    group 1 relative to group 0. Raises :class:`NonConvergence` when the
    likelihood is monotone (e.g. groups perfectly separated in time).
    """
    if samples is not None:
        _, time, event = _arrays(samples)
        group = np.array([s.group for s in samples], dtype=float)
    time = np.asarray(time, dtype=float)
    event = np.asarray(event).astype(bool)
    x = np.asarray(group, dtype=float)
    if not event.any():
        raise NoEvents("Cox fit needs at least one event")
    if np.unique(x).size < 2:
        raise SingleClass("Cox fit needs both groups")
    # fit one canonical coding so swapping the groups negates beta exactly
    n1, n0 = int((x == 1).sum()), int((x == 0).sum())
    sign = 1.0 if (n1 < n0 or (n1 == n0 and x[0] == 1)) else -1.0
    if sign < 0:
        x = 1.0 - x
    beta = 0.0
    ll, g, h = _cox_derivatives(beta, time, event, x)
    for _ in range(max_iter):
        if h >= 0:
            raise NonConvergence("observed information is not positive")
        step = -g / h
        new_beta = beta + step
        new_ll, new_g, new_h = _cox_derivatives(new_beta, time, event, x)
        halvings = 0
        while new_ll < ll - 1e-12 and halvings < 30:
            step /= 2
            new_beta = beta + step
            new_ll, new_g, new_h = _cox_derivatives(new_beta, time, event, x)
            halvings += 1
        beta, ll, g, h = new_beta, new_ll, new_g, new_h
        if abs(step) < tol:
            if h >= 0:
                raise NonConvergence("flat partial likelihood at the optimum")
            beta = sign * beta
            return float(beta), float(math.exp(beta)), float(math.sqrt(-1.0 / h))
    raise NonConvergence(f"Cox fit did not converge in {max_iter} iterations (beta={beta:.3g}); "
                         "the partial likelihood may be monotone")
