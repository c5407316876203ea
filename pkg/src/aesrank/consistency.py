"""Annotation consistency: Kendall's W, permutation tests, exact Spearman p-values, BH-FDR.

Batches are the unit of analysis: ``m`` raters who all scored the same ``n``
images. W gets a one-sided permutation test (each rater's scores shuffled
independently). Pairwise Spearman correlations get two-sided p-values from the
exact permutation distribution for small ``n`` and a Monte Carlo estimate
otherwise. Benjamini-Hochberg runs across batches.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from itertools import combinations

import numpy as np
from scipy.stats import rankdata

from ._rng import substream
from .metrics import UndefinedStatistic, spearman_rho

EXACT_LIMIT = 10
MC_PERMUTATIONS = 100_000


@dataclass
class RatingBatch:
    batch_id: str
    items: list[str]
    raters: list[str]
    scores: np.ndarray  # (m raters, n items)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        m, n = self.scores.shape
        if m < 2 or n < 2:
            raise ValueError(f"batch {self.batch_id}: need m >= 2 raters and n >= 2 items")
        if m != len(self.raters) or n != len(self.items):
            raise ValueError(f"batch {self.batch_id}: score matrix shape mismatch")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError(f"batch {self.batch_id}: missing scores")


def _as_scores(batch) -> np.ndarray:
    return batch.scores if isinstance(batch, RatingBatch) else np.asarray(batch, dtype=np.float64)


def _tie_term(ranks_row) -> float:
    _, t = np.unique(ranks_row, return_counts=True)
    return float(np.sum(t ** 3 - t))


def _w_parts(scores):
    R = rankdata(scores, axis=1)
    m, n = R.shape
    T = sum(_tie_term(r) for r in R)
    denom = m * m * (n ** 3 - n) - m * T
    return R, m, n, denom


def _w_from_rank_sums(Rsum, m, n, denom):
    S = np.sum((Rsum - m * (n + 1) / 2.0) ** 2, axis=-1)
    return 12.0 * S / denom


def kendall_w(batch) -> float:
    """Tie-corrected Kendall's W in [0, 1].

    ``W = 12 S / (m^2 (n^3 - n) - m sum_j T_j)`` with fractional ranks per
    rater, ``S`` the squared deviation of rank sums from their mean, and
    ``T_j = sum (t^3 - t)`` over rater j's tie groups.
    """
    R, m, n, denom = _w_parts(_as_scores(batch))
    if denom <= 0:
        raise UndefinedStatistic("Kendall's W undefined: every rater gave constant scores")
    return float(min(max(_w_from_rank_sums(R.sum(axis=0), m, n, denom), 0.0), 1.0))


def _null_w(scores, n_perm: int, rng, chunk: int = 2000) -> tuple[float, np.ndarray]:
    R, m, n, denom = _w_parts(scores)
    if denom <= 0:
        raise UndefinedStatistic("Kendall's W undefined: every rater gave constant scores")
    w_obs = float(_w_from_rank_sums(R.sum(axis=0), m, n, denom))
    out = np.empty(n_perm)
    for start in range(0, n_perm, chunk):
        size = min(chunk, n_perm - start)
        idx = np.argsort(rng.random((size, m, n)), axis=2)
        Rp = np.take_along_axis(np.broadcast_to(R, (size, m, n)), idx, axis=2)
        out[start:start + size] = _w_from_rank_sums(Rp.sum(axis=1), m, n, denom)
    return w_obs, out


def _upper_p(obs: float, null: np.ndarray) -> float:
    hits = np.count_nonzero(null >= obs - 1e-12 * max(1.0, abs(obs)))
    return (1.0 + hits) / (1.0 + null.size)


def permutation_test_w(batch, n_perm: int = 10_000, seed: int = 0) -> float:
    """One-sided p-value of W: ``(1 + #{W_perm >= W_obs}) / (1 + n_perm)``."""
    if n_perm < 1000:
        raise ValueError("n_perm must be at least 1000")
    w_obs, null = _null_w(_as_scores(batch), n_perm, substream(seed, "consistency.w"))
    return _upper_p(w_obs, null)


# --- exact Spearman null -----------------------------------------------------

def _doubled_ranks(x) -> np.ndarray:
    return np.rint(2 * rankdata(x)).astype(np.int64)


@lru_cache(maxsize=4096)
def _null_counts(A: tuple, B: tuple) -> np.ndarray:
    """Counts of ``T = sum_k A_k B_pi(k)`` over all ``n!`` permutations ``pi``.

    Dynamic programming over subsets of used B positions; index = T value.
    """
    n = len(A)
    tmax = int(sum(sorted(A)[k] * sorted(B)[k] for k in range(n)))
    full = (1 << n) - 1
    dp = np.zeros((1 << n, tmax + 1))
    dp[0, 0] = 1.0
    popcount = [bin(s).count("1") for s in range(1 << n)]
    for mask in range(full):
        row = dp[mask]
        if not row.any():
            continue
        k = popcount[mask]
        for v in range(n):
            if mask >> v & 1:
                continue
            inc = A[k] * B[v]
            dp[mask | (1 << v), inc:] += row[: tmax + 1 - inc]
    return dp[full]


def spearman_null(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact null distribution of tie-free Spearman rho: ``(values, probabilities)``."""
    r = tuple(range(2, 2 * n + 1, 2))
    counts = _null_counts(r, r)
    T = np.flatnonzero(counts)
    sa = sum(r)
    var = n * sum(x * x for x in r) - sa * sa
    rho = (n * T - sa * sa) / var
    return rho, counts[T] / counts.sum()


def spearman_pvalue_exact(a, b, exact_limit: int = EXACT_LIMIT, n_perm: int = MC_PERMUTATIONS,
                          seed: int = 0) -> float:
    """Two-sided permutation p-value of Spearman's rho.

    Exact over all ``n!`` permutations when ``n <= exact_limit`` (raw counts,
    ties handled through average ranks); otherwise Monte Carlo with add-one
    smoothing. Returns 1 when ``n < 3`` or either side is constant.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("need two 1-d vectors of equal length")
    n = a.size
    if n < 3:
        return 1.0
    A, B = _doubled_ranks(a), _doubled_ranks(b)
    sa, sb = int(A.sum()), int(B.sum())
    if n * int(A @ A) == sa * sa or n * int(B @ B) == sb * sb:
        return 1.0
    dev_obs = abs(n * int(A @ B) - sa * sb)
    if n <= exact_limit:
        counts = _null_counts(tuple(sorted(A.tolist())), tuple(sorted(B.tolist())))
        T = np.arange(counts.size)
        extreme = np.abs(n * T - sa * sb) >= dev_obs
        return float(counts[extreme].sum() / counts.sum())
    rng = substream(seed, "consistency.spearman_mc", n)
    hits, chunk = 0, 10_000
    for start in range(0, n_perm, chunk):
        size = min(chunk, n_perm - start)
        perm = np.argsort(rng.random((size, n)), axis=1)
        Tp = B[perm] @ A
        hits += int(np.count_nonzero(np.abs(n * Tp - sa * sb) >= dev_obs))
    return (1.0 + hits) / (1.0 + n_perm)


# --- multiple testing ----------------------------------------------------------

def benjamini_hochberg(pvalues, Q: float = 0.05) -> np.ndarray:
    """Indices rejected by the Benjamini-Hochberg step-up rule at FDR level ``Q``.

    ``k* = max{k : p_(k) <= k Q / m}``; the ``k*`` smallest p-values are rejected.
    """
    p = np.asarray(pvalues, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("p-values must be a 1-d vector")
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    if m == 0:
        return np.array([], dtype=np.int64)
    order = np.argsort(p, kind="stable")
    ok = np.flatnonzero(p[order] <= np.arange(1, m + 1) * Q / m)
    if ok.size == 0:
        return np.array([], dtype=np.int64)
    return np.sort(order[: ok[-1] + 1])


# --- batches and reports ---------------------------------------------------------

def batches_from_dataset(ds, batch_size: int = 10, split: str | None = None):
    """Group images into rater batches.

    Uses the records' ``batch`` tags when present; otherwise groups images that
    share the same rater set and chunks each group into ``batch_size`` images.
    Returns ``(batches, n_invalid)`` where invalid groups lack a full
    rater-by-image score matrix.
    """
    records = ds.subset(split)
    groups: dict[str, list] = defaultdict(list)
    if records and all(r.batch is not None for r in records):
        for r in records:
            groups[r.batch].append(r)
    else:
        by_raters: dict[tuple, list] = defaultdict(list)
        for r in records:
            if r.ratings:
                by_raters[tuple(sorted(x.rater_id for x in r.ratings))].append(r)
        for key in sorted(by_raters):
            members = sorted(by_raters[key], key=lambda r: r.id)
            for c in range(0, len(members), batch_size):
                groups[f"{'+'.join(key)}#{c // batch_size}"] = members[c:c + batch_size]
    batches, invalid = [], 0
    for bid in sorted(groups):
        members = sorted(groups[bid], key=lambda r: r.id)
        raters = sorted({x.rater_id for r in members for x in r.ratings})
        col = {rid: j for j, rid in enumerate(raters)}
        M = np.full((len(raters), len(members)), np.nan)
        for i, r in enumerate(members):
            for x in r.ratings:
                M[col[x.rater_id], i] = x.score
        try:
            batches.append(RatingBatch(bid, [r.id for r in members], raters, M))
        except ValueError:
            invalid += 1
    return batches, invalid


@dataclass
class BatchRow:
    batch_id: str
    m: int
    n: int
    W: float
    p_W: float
    mean_rho: float | None
    p_rho: float
    significant_W: bool = False
    significant_rho: bool = False


@dataclass
class ConsistencyReport:
    Q: float
    n_perm: int
    rows: list[BatchRow] = field(default_factory=list)
    n_skipped: int = 0
    average_W: float | None = None
    global_p_W: float | None = None
    fraction_significant_W: float | None = None
    fraction_significant_rho: float | None = None
    fraction_raw_W: float | None = None
    fraction_raw_rho: float | None = None
    rejected_W: list[str] = field(default_factory=list)
    rejected_rho: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)

    def write_csv(self, path) -> None:
        names = [f for f in BatchRow.__dataclass_fields__]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names)
            for row in self.rows:
                w.writerow([getattr(row, f) for f in names])


def _pairwise(scores, exact_limit):
    rhos, ps = [], []
    for a, b in combinations(range(scores.shape[0]), 2):
        ps.append(spearman_pvalue_exact(scores[a], scores[b], exact_limit=exact_limit))
        try:
            rhos.append(spearman_rho(scores[a], scores[b]))
        except UndefinedStatistic:
            pass
    return (float(np.mean(rhos)) if rhos else None), float(np.mean(ps))


def consistency_report(batches, Q: float = 0.05, n_perm: int = 10_000, seed: int = 0,
                       exact_limit: int = EXACT_LIMIT) -> ConsistencyReport:
    """Per-batch W and pairwise-Spearman tests with BH control across batches.

    The batch p-value for Spearman is the average of its pairwise exact
    p-values. The global test permutes within every batch simultaneously and
    compares the average W against its permutation distribution. ``fraction_raw_*``
    count batches with an uncorrected p-value below ``Q``.
    """
    if n_perm < 1000:
        raise ValueError("n_perm must be at least 1000")
    report = ConsistencyReport(Q=Q, n_perm=n_perm)
    nulls = []
    for b, batch in enumerate(batches):
        try:
            w_obs, null = _null_w(batch.scores, n_perm, substream(seed, "consistency.w", b))
        except UndefinedStatistic:
            report.n_skipped += 1
            continue
        mean_rho, p_rho = _pairwise(batch.scores, exact_limit)
        m, n = batch.scores.shape
        report.rows.append(BatchRow(batch.batch_id, m, n, min(max(w_obs, 0.0), 1.0),
                                    _upper_p(w_obs, null), mean_rho, p_rho))
        nulls.append(null)
    if not report.rows:
        return report
    pw = np.array([r.p_W for r in report.rows])
    pr = np.array([r.p_rho for r in report.rows])
    for idx in benjamini_hochberg(pw, Q):
        report.rows[idx].significant_W = True
    for idx in benjamini_hochberg(pr, Q):
        report.rows[idx].significant_rho = True
    k = len(report.rows)
    report.rejected_W = [r.batch_id for r in report.rows if r.significant_W]
    report.rejected_rho = [r.batch_id for r in report.rows if r.significant_rho]
    report.fraction_significant_W = len(report.rejected_W) / k
    report.fraction_significant_rho = len(report.rejected_rho) / k
    report.fraction_raw_W = float(np.mean(pw < Q))
    report.fraction_raw_rho = float(np.mean(pr < Q))
    ws = np.array([r.W for r in report.rows])
    report.average_W = float(ws.mean())
    report.global_p_W = _upper_p(report.average_W, np.mean(nulls, axis=0))
    return report
