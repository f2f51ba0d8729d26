"""Two-group separation of a probability field by an exact threshold scan.

The lattice is split into a high-attention (foreground) and a
low-attention (background) group by the threshold that minimizes the
sum, over both groups, of absolute deviations from the group mean.
Because the field is one dimensional and there are two groups, the
optimum lies at one of the gaps between consecutive sorted values, so
an exact scan replaces iterative clustering and is fully deterministic.

The split happens in the forward pass only; no gradients flow through
the assignment.  A squared-deviation cost is available behind a flag
for the classical two-means reading of the objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFieldError, ShapeMismatchError

# Fields whose spread is below this cannot be split meaningfully.
DEGENERATE_SPREAD = 1e-6

# Scan-phase costs use prefix sums; candidates within this slack of the
# scan minimum are re-evaluated with the direct formula so the reported
# cost is exactly the enumeration minimum.
_REFINE_SLACK = 1e-9

PSEUDO_FOREGROUND_LABEL = 1
PSEUDO_BACKGROUND_LABEL = 0


@dataclass
class Separation:
    """A two-group split of lattice indices by an attention threshold.

    Every probability in ``foreground`` is strictly greater than every
    probability in ``background``; the foreground is the higher-mean
    group and carries pseudo-label 1.
    """

    foreground: np.ndarray
    background: np.ndarray
    threshold: float
    cost: float
    pseudo_fg_label: int = PSEUDO_FOREGROUND_LABEL
    pseudo_bg_label: int = PSEUDO_BACKGROUND_LABEL


def _segment_cost(segment: np.ndarray, squared: bool) -> float:
    if squared:
        return float(((segment - segment.mean()) ** 2).sum())
    return float(np.abs(segment - segment.mean()).sum())


def _scan_costs(v: np.ndarray, splits: np.ndarray, squared: bool) -> np.ndarray:
    """Approximate split costs for all candidate splits at once.

    ``v`` is sorted ascending; a split ``k`` puts v[:k] low, v[k:] high.
    """
    n = v.size
    prefix = np.concatenate(([0.0], np.cumsum(v)))
    k = splits.astype(np.float64)
    lo_mean = prefix[splits] / k
    hi_mean = (prefix[n] - prefix[splits]) / (n - k)
    if squared:
        sq = np.concatenate(([0.0], np.cumsum(v * v)))
        lo = sq[splits] - k * lo_mean**2
        hi = (sq[n] - sq[splits]) - (n - k) * hi_mean**2
        return lo + hi
    # L1 deviation around the mean: elements below the mean form a prefix
    # of the sorted segment, found by binary search.
    j_lo = np.searchsorted(v, lo_mean, side="left")
    lo = (j_lo * lo_mean - prefix[j_lo]) + (
        (prefix[splits] - prefix[j_lo]) - (splits - j_lo) * lo_mean
    )
    j_hi = np.searchsorted(v, hi_mean, side="left")
    hi = ((j_hi - splits) * hi_mean - (prefix[j_hi] - prefix[splits])) + (
        (prefix[n] - prefix[j_hi]) - (n - j_hi) * hi_mean
    )
    return lo + hi


def separate_regions(probs, squared: bool = False) -> Separation:
    """Split a probability field into foreground and background groups.

    Returns the threshold partition minimizing the deviation cost over
    all gaps between distinct sorted values.  Raises
    ``DegenerateFieldError`` when the field has no usable spread, in
    which case the caller skips this sample for the iteration.
    """
    p = np.asarray(probs, dtype=np.float64).ravel()
    if p.size < 2:
        raise ShapeMismatchError(f"separate_regions: need >= 2 values, got {p.size}")
    if float(p.max() - p.min()) < DEGENERATE_SPREAD:
        raise DegenerateFieldError(
            f"separate_regions: spread {p.max() - p.min():.3e} below "
            f"{DEGENERATE_SPREAD:.0e}"
        )
    order = np.argsort(p, kind="stable")
    v = p[order]
    splits = np.nonzero(v[1:] > v[:-1])[0] + 1  # threshold-consistent gaps

    approx = _scan_costs(v, splits, squared)
    best_approx = approx.min()
    slack = _REFINE_SLACK * max(1.0, abs(best_approx)) + _REFINE_SLACK
    candidates = splits[approx <= best_approx + slack]

    best_k = -1
    best_cost = np.inf
    for k in candidates:
        cost = _segment_cost(v[:k], squared) + _segment_cost(v[k:], squared)
        if cost < best_cost:
            best_cost = cost
            best_k = int(k)
    threshold = 0.5 * (v[best_k - 1] + v[best_k])
    return Separation(
        foreground=np.sort(order[best_k:]),
        background=np.sort(order[:best_k]),
        threshold=float(threshold),
        cost=float(best_cost),
    )


def clustering_cost(clusters, probs, squared: bool = False) -> float:
    """Deviation-from-mean cost of an arbitrary partition into index groups."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    total = 0.0
    for idx in clusters:
        idx = np.asarray(idx, dtype=np.intp)
        if idx.size == 0:
            raise ShapeMismatchError("clustering_cost: empty cluster")
        total += _segment_cost(p[idx], squared)
    return total
