"""Paired hypothesis tests with Holm step-down correction."""

from __future__ import annotations

import itertools

import numpy as np
from scipy import stats

from .errors import ContractViolation


def holm(pvalues) -> np.ndarray:
    """Holm-Bonferroni adjusted p-values, returned in the input order.

    Sorted ascending, the i-th smallest (0-based) is scaled by ``m - i``; a running
    maximum keeps the adjustment monotone and the result is capped at 1.
    """
    p = np.asarray(pvalues, dtype=float)
    if p.ndim != 1:
        raise ContractViolation("holm expects a 1-d family of p-values")
    if np.any((p < 0) | (p > 1) | ~np.isfinite(p)):
        raise ContractViolation(f"p-values must lie in [0, 1], got {p}")
    m = len(p)
    order = np.argsort(p, kind="stable")
    adjusted = np.empty(m)
    running = 0.0
    for rank, idx in enumerate(order):
        running = max(running, (m - rank) * p[idx])
        adjusted[idx] = min(1.0, running)
    return adjusted


def stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return "ns"


def paired_ttest(a, b, alternative: str = "two-sided") -> float:
    """p-value of a paired t-test on ``a - b``.

    Degenerate zero-variance differences are resolved directly: all-equal gives
    p = 1, a constant nonzero shift gives p = 0 in the direction it points (and
    p = 1 against it for one-sided tests).
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractViolation(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    if len(a) < 2:
        raise ContractViolation("paired test needs at least two pairs")
    d = a - b
    if np.ptp(d) == 0:
        shift = d[0]
        if shift == 0:
            return 1.0
        if alternative == "two-sided":
            return 0.0
        return 0.0 if (shift < 0) == (alternative == "less") else 1.0
    return float(stats.ttest_rel(a, b, alternative=alternative).pvalue)


def paired_tests(table: dict, comparisons=None, alternative: str = "two-sided", family: str = "default") -> list:
    """Paired t-tests between methods, Holm-corrected within one family.

    ``table`` maps method name to a per-trajectory metric vector; all vectors
    must be paired (same trajectories, same order). ``comparisons`` defaults to
    all unordered pairs. Returns one dict per comparison.
    """
    names = list(table)
    if len(names) < 2:
        raise ContractViolation("paired_tests needs at least two methods")
    lengths = {len(np.asarray(table[n])) for n in names}
    if len(lengths) != 1:
        raise ContractViolation(f"unequal trajectory pairing: lengths {sorted(lengths)}")
    comparisons = list(comparisons) if comparisons is not None else list(itertools.combinations(names, 2))
    raw = [paired_ttest(table[a], table[b], alternative) for a, b in comparisons]
    adj = holm(raw) if raw else []
    return [
        {"family": family, "a": a, "b": b, "alternative": alternative,
         "mean_diff": float(np.mean(np.asarray(table[a], float) - np.asarray(table[b], float))),
         "p_raw": float(p), "p_holm": float(q), "stars": stars(q)}
        for (a, b), p, q in zip(comparisons, raw, adj)
    ]
