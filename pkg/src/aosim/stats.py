"""Small statistical helpers shared by the samplers and diagnostics."""

from __future__ import annotations

import math

import numpy as np
from scipy import stats as _st


def batch_means(x, n_batches: int = 50):
    """Mean, standard error and effective sample size of a correlated series."""
    x = np.asarray(x, dtype=float)
    n = len(x) // n_batches * n_batches
    if n < n_batches or n_batches < 2:
        raise ValueError("series too short for batch means")
    b = x[:n].reshape(n_batches, -1).mean(axis=1)
    mean = float(x[:n].mean())
    se = float(b.std(ddof=1) / math.sqrt(n_batches))
    var = float(x[:n].var())
    ess = n if se == 0.0 else min(n, var / se ** 2) if var > 0 else n
    return mean, se, float(ess)


def wilson_interval(k: int, n: float, z: float = 3.0):
    """Wilson score interval for a binomial proportion (``n`` may be an effective size)."""
    if n <= 0:
        return 0.0, 1.0
    p = k / n
    den = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    # the exact interval always contains p; clamp away rounding at k=0 and k=n
    return max(0.0, min(p, centre - half)), min(1.0, max(p, centre + half))


def batch_feature_means(features: np.ndarray, n_batches: int) -> np.ndarray:
    f = np.asarray(features, dtype=float)
    n = len(f) // n_batches * n_batches
    return f[:n].reshape(n_batches, -1, f.shape[1]).mean(axis=1)


def two_sample_batch_test(fa: np.ndarray, fb: np.ndarray, n_batches: int = 50,
                          min_mass: float = 0.0):
    """Hotelling-type comparison of the mean feature vectors of two correlated series.

    Each series is cut into batches; the batch means give the covariance of the
    overall mean.  Returns (statistic, dof, p-value).  Feature columns whose
    pooled mean is below ``min_mass`` are dropped; one column is dropped when
    the features sum to a constant (histogram fractions).
    """
    ba = batch_feature_means(fa, n_batches)
    bb = batch_feature_means(fb, n_batches)
    pooled = 0.5 * (ba.mean(axis=0) + bb.mean(axis=0))
    keep = np.nonzero(pooled > min_mass)[0] if min_mass > 0 else np.arange(ba.shape[1])
    ba, bb = ba[:, keep], bb[:, keep]
    if ba.shape[1] > 1 and np.allclose(ba.sum(axis=1), ba.sum(axis=1)[0]) \
            and np.allclose(bb.sum(axis=1), ba.sum(axis=1)[0]):
        drop = int(np.argmax(0.5 * (ba.mean(axis=0) + bb.mean(axis=0))))
        ba = np.delete(ba, drop, axis=1)
        bb = np.delete(bb, drop, axis=1)
    p = ba.shape[1]
    diff = ba.mean(axis=0) - bb.mean(axis=0)
    cov = (np.cov(ba, rowvar=False).reshape(p, p) + np.cov(bb, rowvar=False).reshape(p, p)) / n_batches
    t2 = float(diff @ np.linalg.pinv(cov) @ diff)
    nu = 2 * n_batches - 2
    if nu - p + 1 <= 0:
        raise ValueError("too few batches for the number of features")
    fstat = t2 * (nu - p + 1) / (p * nu)
    pval = float(_st.f.sf(fstat, p, nu - p + 1))
    return t2, p, pval


def z_score(a: float, se_a: float, b: float, se_b: float = 0.0) -> float:
    s = math.hypot(se_a, se_b)
    if s == 0.0:
        return 0.0 if a == b else math.inf
    return (a - b) / s


def chi_square_gof(counts: np.ndarray, probs: np.ndarray, min_expected: float = 5.0):
    """Pearson goodness of fit after merging adjacent cells with small expectation."""
    counts = np.asarray(counts, dtype=float)
    probs = np.asarray(probs, dtype=float)
    probs = probs / probs.sum()
    n = counts.sum()
    exp = n * probs
    oc, ec = [], []
    acc_o = acc_e = 0.0
    for o, e in zip(counts, exp):
        acc_o += o
        acc_e += e
        if acc_e >= min_expected:
            oc.append(acc_o)
            ec.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e > 0:
        if ec:
            oc[-1] += acc_o
            ec[-1] += acc_e
        else:
            oc.append(acc_o)
            ec.append(acc_e)
    oc, ec = np.asarray(oc), np.asarray(ec)
    chi2 = float(np.sum((oc - ec) ** 2 / ec))
    dof = len(oc) - 1
    return chi2, dof, float(_st.chi2.sf(chi2, dof)) if dof > 0 else 1.0
