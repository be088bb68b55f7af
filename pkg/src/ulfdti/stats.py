"""Image-similarity metrics and the statistical procedures of the evaluation."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .errors import UndefinedValueError, UsageError

LNCC_WINDOW = 10
LDA_RIDGE = 1e-6
EXACT_MAX_TOTAL = 20
EXACT_MAX_MIN = 10
RESULT_COLUMNS = ("metric", "value", "ci_low", "ci_high", "p_raw", "p_fdr")


# ---------------------------------------------------------------- image metrics

def _mask_or_all(shape, mask):
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = np.asarray(mask, dtype=bool)
    if m.shape != tuple(shape):
        raise UsageError(f"mask shape {m.shape} does not match {tuple(shape)}")
    if not m.any():
        raise UsageError("mask selects no voxels")
    return m


def mae(a, b, mask=None) -> float:
    """Mean absolute difference over ``mask`` (trailing channel axes are averaged too)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"shape mismatch {a.shape} vs {b.shape}")
    m = _mask_or_all(a.shape[:3] if mask is not None else a.shape, mask)
    return float(np.abs(a - b)[m].mean())


def _box_sums(x: np.ndarray, window: int) -> np.ndarray:
    """Sum of ``x`` over the window ``[i - w//2, i - w//2 + w)`` per axis, clipped to the volume."""
    out = x
    for ax in range(3):
        n = out.shape[ax]
        c = np.concatenate([np.zeros_like(np.take(out, [0], axis=ax)), np.cumsum(out, axis=ax)], axis=ax)
        lo = np.clip(np.arange(n) - window // 2, 0, n)
        hi = np.clip(np.arange(n) - window // 2 + window, 0, n)
        out = np.take(c, hi, axis=ax) - np.take(c, lo, axis=ax)
    return out


def local_correlation(a, b, window: int = LNCC_WINDOW) -> np.ndarray:
    """Windowed Pearson correlation per voxel; windows where either variance vanishes give 0."""
    if window < 2:
        raise UsageError("LNCC window must be at least 2")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3:
        raise UsageError("LNCC needs two 3-D fields of equal shape")
    n = _box_sums(np.ones_like(a), window)
    sa, sb = _box_sums(a, window), _box_sums(b, window)
    va = _box_sums(a * a, window) - sa * sa / n
    vb = _box_sums(b * b, window) - sb * sb / n
    cov = _box_sums(a * b, window) - sa * sb / n
    scale = np.maximum(np.abs(a).max(), np.abs(b).max()) ** 2 + 1e-300
    tol = 1e-12 * n * scale
    ok = (va > tol) & (vb > tol)
    out = np.zeros_like(a)
    out[ok] = cov[ok] / np.sqrt(va[ok] * vb[ok])
    return np.clip(out, -1.0, 1.0)


def lncc(a, b, window: int = LNCC_WINDOW, mask=None) -> float:
    """Mean local normalised cross-correlation."""
    c = local_correlation(a, b, window)
    return float(c[_mask_or_all(c.shape, mask)].mean())


def angular_error_v1(va, vb, mask=None) -> float:
    """Mean axial angle (degrees) between direction fields; sign-invariant."""
    va = np.asarray(va, dtype=np.float64)
    vb = np.asarray(vb, dtype=np.float64)
    if va.shape != vb.shape or va.shape[-1] != 3:
        raise UsageError("direction fields must match and end in 3")
    dot = np.clip(np.abs(np.sum(va * vb, axis=-1)), 0.0, 1.0)
    ang = np.degrees(np.arccos(dot))
    return float(ang[_mask_or_all(ang.shape, mask)].mean())


# ---------------------------------------------------------------- agreement

def icc_2way_absolute(measurements) -> float:
    """ICC(2,1): two-way random effects, absolute agreement, single rater."""
    x = np.asarray(measurements, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise UsageError("ICC needs a subjects x raters matrix with at least 2 of each")
    if not np.all(np.isfinite(x)):
        raise UsageError("ICC needs complete, finite measurements")
    n, k = x.shape
    grand = x.mean()
    ss_total = ((x - grand) ** 2).sum()
    if ss_total <= 0:
        raise UndefinedValueError("ICC undefined: zero total variance")
    ss_r = k * ((x.mean(axis=1) - grand) ** 2).sum()
    ss_c = n * ((x.mean(axis=0) - grand) ** 2).sum()
    ss_e = ss_total - ss_r - ss_c
    ms_r = ss_r / (n - 1)
    ms_c = ss_c / (k - 1)
    ms_e = ss_e / ((n - 1) * (k - 1))
    denom = ms_r + (k - 1) * ms_e + (k / n) * (ms_c - ms_e)
    if denom == 0:
        raise UndefinedValueError("ICC undefined: zero denominator")
    return float((ms_r - ms_e) / denom)


@dataclass(frozen=True)
class BlandAltman:
    bias: float
    lower: float
    upper: float
    means: np.ndarray
    diffs: np.ndarray
    slope: float


def bland_altman(a, b) -> BlandAltman:
    """Mean bias, bias +- 1.96 SD (ddof=1) and the LS slope of the difference on the mean."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape or a.size < 3:
        raise UsageError("Bland-Altman needs two equal-length vectors of at least 3 values")
    d = a - b
    m = 0.5 * (a + b)
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    mc = m - m.mean()
    sxx = float(mc @ mc)
    slope = float(mc @ (d - bias) / sxx) if sxx > 0 else 0.0
    return BlandAltman(bias, bias - 1.96 * sd, bias + 1.96 * sd, m, d, slope)


# ---------------------------------------------------------------- Wilcoxon rank-sum

def _midranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="mergesort")
    sv = v[order]
    ranks = np.empty(len(v))
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def rank_sum_distribution(ranks, n: int) -> dict[int, int]:
    """Counts of ``2 x`` (sum of ``n`` ranks) over all ``C(N, n)`` subsets (midranks allowed)."""
    twice = [int(round(2 * r)) for r in ranks]
    # dp[k] maps doubled sum -> count of k-subsets
    dp = [dict() for _ in range(n + 1)]
    dp[0][0] = 1
    for r in twice:
        for k in range(min(n, len(twice)), 0, -1):
            prev = dp[k - 1]
            cur = dp[k]
            for s, c in prev.items():
                cur[s + r] = cur.get(s + r, 0) + c
    return dp[n]


@dataclass(frozen=True)
class RankSumResult:
    statistic: float      # Mann-Whitney U for x
    pvalue: float
    method: str           # "exact" or "normal"


def wilcoxon_ranksum(x, y) -> RankSumResult:
    """Two-tailed Wilcoxon rank-sum (Mann-Whitney) test.

    Exact enumeration of the rank-sum distribution (midranks under ties) when
    ``min(n, m) <= 10`` and ``n + m <= 20``; otherwise the normal
    approximation with tie and continuity corrections.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size == 0 or y.size == 0:
        raise UsageError("both samples must be non-empty")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise UsageError("samples must be finite")
    n, m = x.size, y.size
    ranks = _midranks(np.concatenate([x, y]))
    w = ranks[:n].sum()
    u = w - n * (n + 1) / 2.0
    if min(n, m) <= EXACT_MAX_MIN and n + m <= EXACT_MAX_TOTAL:
        dist = rank_sum_distribution(ranks, n)
        total = sum(dist.values())
        w2 = int(round(2 * w))
        lower = sum(c for s, c in dist.items() if s <= w2) / total
        upper = sum(c for s, c in dist.items() if s >= w2) / total
        return RankSumResult(float(u), float(min(1.0, 2.0 * min(lower, upper))), "exact")
    big = n + m
    _, counts = np.unique(ranks, return_counts=True)
    tie = float(((counts ** 3) - counts).sum())
    var = n * m / 12.0 * ((big + 1) - tie / (big * (big - 1)))
    if var <= 0:
        return RankSumResult(float(u), 1.0, "normal")
    z = max(abs(u - n * m / 2.0) - 0.5, 0.0) / np.sqrt(var)
    return RankSumResult(float(u), float(min(1.0, 2.0 * norm.sf(z))), "normal")


# ---------------------------------------------------------------- multiple comparisons

def bh_fdr(pvalues) -> np.ndarray:
    """Benjamini-Hochberg step-up adjusted p-values, in the input order."""
    p = np.asarray(pvalues, dtype=np.float64).ravel()
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise UsageError("p-values must lie in [0, 1]")
    m = p.size
    if m == 0:
        return p.copy()
    order = np.argsort(p, kind="mergesort")
    scaled = p[order] * m / np.arange(1, m + 1)
    adj = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(adj, 1.0)
    return out


# ---------------------------------------------------------------- discriminant analysis

def auc_from_scores(scores, labels) -> float:
    """ROC AUC as the normalised Mann-Whitney statistic (ties count one half)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    n1, n0 = int(y.sum()), int((~y).sum())
    if n1 == 0 or n0 == 0:
        raise UsageError("AUC needs both classes")
    ranks = _midranks(s)
    return float((ranks[y].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


@dataclass(frozen=True)
class LdaResult:
    auc: float
    scores: np.ndarray
    ridge_used: bool


def _fisher_direction(x: np.ndarray, y: np.ndarray):
    mu1 = x[y].mean(axis=0)
    mu0 = x[~y].mean(axis=0)
    r1 = x[y] - mu1
    r0 = x[~y] - mu0
    sw = r1.T @ r1 + r0.T @ r0
    ridge = False
    if np.linalg.matrix_rank(sw) < sw.shape[0]:
        sw = sw + LDA_RIDGE * np.eye(sw.shape[0])
        ridge = True
    w = np.linalg.solve(sw, mu1 - mu0)
    return w, 0.5 * (mu1 + mu0), ridge


def fisher_lda_auc(points, labels) -> LdaResult:
    """Leave-one-out Fisher LDA; held-out score ``w^T (x - (mu1 + mu0) / 2)``, pooled AUC.

    Centring on the class midpoint of the training fold makes the scores
    invariant to a common invertible affine map of the features.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(labels).astype(bool).ravel()
    if x.shape[0] != y.size:
        raise UsageError("points and labels differ in length")
    if min(y.sum(), (~y).sum()) < 2:
        raise UsageError("each class needs at least 2 subjects so every LOO fold sees both")
    scores = np.empty(y.size)
    ridge_any = False
    for i in range(y.size):
        keep = np.arange(y.size) != i
        w, mid, ridge = _fisher_direction(x[keep], y[keep])
        ridge_any |= ridge
        scores[i] = w @ (x[i] - mid)
    if ridge_any:
        warnings.warn("singular within-class scatter; ridge 1e-6 added", RuntimeWarning, stacklevel=2)
    return LdaResult(auc_from_scores(scores, y), scores, ridge_any)


@dataclass(frozen=True)
class BootstrapResult:
    pvalue: float
    observed_diff: float
    ci_low: float
    ci_high: float
    diffs: np.ndarray
    rejected: int
    method: str = "percentile"


def paired_bootstrap_auc_diff(scores_a, scores_b, labels, iterations: int = 10000,
                              rng: np.random.Generator | None = None,
                              max_rejections: int | None = None) -> BootstrapResult:
    """Paired subject bootstrap of ``AUC(a) - AUC(b)``; two-sided percentile p-value around 0.

    Replicates drawing a single class are redrawn and counted in ``rejected``.
    """
    a = np.asarray(scores_a, dtype=np.float64).ravel()
    b = np.asarray(scores_b, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if not (a.size == b.size == y.size):
        raise UsageError("score sets and labels must be aligned per subject")
    if iterations < 1:
        raise UsageError("iterations must be positive")
    if rng is None:
        raise UsageError("bootstrap needs a seeded generator")
    observed = auc_from_scores(a, y) - auc_from_scores(b, y)
    limit = max_rejections if max_rejections is not None else 100 * iterations
    diffs = np.empty(iterations)
    rejected = 0
    k = 0
    while k < iterations:
        idx = rng.integers(0, y.size, y.size)
        yy = y[idx]
        if yy.all() or not yy.any():
            rejected += 1
            if rejected > limit:
                raise UndefinedValueError("bootstrap keeps drawing single-class replicates")
            continue
        diffs[k] = auc_from_scores(a[idx], yy) - auc_from_scores(b[idx], yy)
        k += 1
    p = min(1.0, 2.0 * min(np.mean(diffs <= 0), np.mean(diffs >= 0)))
    lo, hi = np.percentile(diffs, [2.5, 97.5])
    return BootstrapResult(float(p), float(observed), float(lo), float(hi), diffs, rejected)


def zscore_by_tract(values) -> np.ndarray:
    """Pool all entries of a subjects x tracts matrix and z-score (population SD)."""
    x = np.asarray(values, dtype=np.float64)
    if x.size < 2:
        raise UsageError("z-scoring needs at least 2 entries")
    sd = x.std()
    if not np.isfinite(sd) or sd <= 1e-300 * max(1.0, np.abs(x).max()):
        raise UndefinedValueError("z-score undefined: zero variance")
    return (x - x.mean()) / sd


# ---------------------------------------------------------------- results table

@dataclass
class ResultRow:
    metric: str
    value: float
    ci_low: float = float("nan")
    ci_high: float = float("nan")
    p_raw: float = float("nan")
    p_fdr: float = float("nan")


def apply_fdr(rows: list[ResultRow]) -> list[ResultRow]:
    """Fill ``p_fdr`` for rows with a finite ``p_raw`` (one BH family)."""
    idx = [i for i, r in enumerate(rows) if np.isfinite(r.p_raw)]
    if idx:
        adj = bh_fdr([rows[i].p_raw for i in idx])
        for i, q in zip(idx, adj):
            rows[i].p_fdr = float(q)
    return rows


def write_results_csv(path, rows, metadata: dict | None = None) -> None:
    """CSV with the fixed column set; ``metadata`` goes to a sibling ``.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([r.metric] + [repr(float(getattr(r, c))) for c in RESULT_COLUMNS[1:]])
    if metadata is not None:
        path.with_suffix(".json").write_text(json.dumps(metadata, indent=2, sort_keys=True))
