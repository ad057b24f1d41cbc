"""Energy-distance MMD and its permutation calibration.

The statistic is the V-statistic

    2 mean|x - y| - mean|x - x'| - mean|y - y'|

with the Euclidean norm, clamped at zero.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.spatial.distance import cdist

from . import _rng


def as_sample(x, name="sample"):
    """2-D float matrix (rows = observations); a 1-D input is one column."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValueError(f"{name} must be a matrix with at least one column")
    if x.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.isfinite(x).all():
        raise ValueError(f"{name} has non-finite entries")
    return x


def _check_pair(a, b):
    a, b = as_sample(a, "first sample"), as_sample(b, "second sample")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return a, b


def _combine(m_ab, m_aa, m_bb):
    return max(0.0, 2.0 * m_ab - (m_aa + m_bb))


def energy_mmd(a, b) -> float:
    """Energy distance between two samples (rows are points)."""
    a, b = _check_pair(a, b)
    # canonical argument order makes the result exactly symmetric
    if (a.shape, a.tobytes()) > (b.shape, b.tobytes()):
        a, b = b, a
    return _combine(cdist(a, b).mean(), cdist(a, a).mean(), cdist(b, b).mean())


def point_cost(s, b) -> float:
    """Energy distance of the single point ``s`` to sample ``b``."""
    b = as_sample(b, "target sample")
    s = np.asarray(s, dtype=float).reshape(1, -1)
    return energy_mmd(s, b)


class BaselinePool:
    """A fixed comparison sample with its self-distances cached.

    Many individuals are tested against the same baseline, so the
    baseline-by-baseline block of the pooled distance matrix is computed once.
    """

    def __init__(self, b):
        self.b = as_sample(b, "baseline")
        d_bb = cdist(self.b, self.b)
        self.d_bb32 = d_bb.astype(np.float32)
        self.row_bb = d_bb.sum(axis=1)
        self.mean_bb = float(d_bb.mean())

    def __len__(self):
        return len(self.b)

    def _check(self, a):
        a = as_sample(a)
        if a.shape[1] != self.b.shape[1]:
            raise ValueError(f"dimension mismatch: {a.shape[1]} vs {self.b.shape[1]}")
        return a

    def statistic(self, a):
        a = self._check(a)
        return _combine(cdist(a, self.b).mean(), cdist(a, a).mean(), self.mean_bb)

    def test(self, a, n_perm, alpha, seed):
        """Observed statistic and the (1 - alpha) permutation quantile."""
        a = self._check(a)
        d_ab = cdist(a, self.b)
        d_aa = cdist(a, a)
        observed = _combine(d_ab.mean(), d_aa.mean(), self.mean_bb)
        k = len(a)
        n = k + len(self.b)
        _validate(n, n_perm, alpha)
        if alpha >= 1.0:
            return observed, 0.0
        pooled = np.empty((n, n), dtype=np.float32)
        pooled[:k, :k] = d_aa
        pooled[:k, k:] = d_ab
        pooled[k:, :k] = d_ab.T
        pooled[k:, k:] = self.d_bb32
        rows = np.concatenate([d_aa.sum(axis=1) + d_ab.sum(axis=1), d_ab.sum(axis=0) + self.row_bb])
        stats = _permuted_statistics(pooled, rows, k, n_perm, seed)
        return observed, float(np.quantile(stats, 1.0 - alpha, method="higher"))


@lru_cache(maxsize=64)
def _labels(n, k, n_perm, seed):
    """Indicator matrix (n x n_perm) of ``k`` randomly chosen points per permutation."""
    rng = _rng.stream(seed, "permutation", n, k)
    keys = rng.random((n_perm, n))
    chosen = np.argpartition(keys, k - 1, axis=1)[:, :k]
    x = np.zeros((n, n_perm), dtype=np.float32)
    x[chosen, np.arange(n_perm)[:, None]] = 1.0
    x.setflags(write=False)
    return x


def _permuted_statistics(d, rows, k, n_perm, seed):
    """Statistics for ``n_perm`` random relabellings of pooled distances ``d``.

    With ``x`` the indicator of the first-labelled ``k`` points, every block
    sum follows from ``x'Dx``, ``x'r`` and the total, so all permutations are
    one matrix product.  ``rows`` holds the exact row sums of ``d``.
    """
    n = d.shape[0]
    m = n - k
    x = _labels(n, k, n_perm, int(seed))
    s_aa = (x * (d @ x)).sum(axis=0, dtype=np.float64)
    xr = rows @ x.astype(np.float64)
    total = rows.sum()
    s_ab = xr - s_aa
    s_bb = total - 2.0 * xr + s_aa
    stats = 2.0 * s_ab / (k * m) - s_aa / k**2 - s_bb / m**2
    return np.maximum(stats, 0.0)


def _validate(n, n_perm, alpha):
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    if n_perm < 100:
        raise ValueError("n_perm must be >= 100")
    if n < 4:
        raise ValueError("pooled sample needs at least 4 points")


def permutation_threshold(a, b, n_perm: int, alpha: float, seed: int) -> float:
    """(1 - alpha) quantile of the energy statistic over label-permuted pools."""
    a, b = _check_pair(a, b)
    return BaselinePool(b).test(a, n_perm, alpha, seed)[1]


def energy_test(a, b, n_perm: int, alpha: float, seed: int):
    """``(statistic, threshold, satisfied)`` for the two-sample energy test."""
    stat = energy_mmd(a, b)
    thr = permutation_threshold(a, b, n_perm, alpha, seed)
    return stat, thr, stat <= thr
