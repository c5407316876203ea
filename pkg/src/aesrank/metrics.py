"""Spearman rank correlation, thresholded accuracy and per-rater agreement."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata


class UndefinedStatistic(ValueError):
    """The statistic has no value for this input (e.g. all-tied ranks)."""


def spearman_rho(a, b) -> float:
    """Spearman's rho with average ranks for ties.

    Tie-free inputs reduce to ``1 - 6 sum d^2 / (N^3 - N)``; with ties this is
    Pearson correlation of the fractional ranks.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("spearman_rho needs two 1-d vectors of equal length")
    n = a.size
    if n < 2:
        raise ValueError("spearman_rho needs N >= 2")
    ra, rb = rankdata(a), rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    den = np.sqrt(np.dot(ra, ra) * np.dot(rb, rb))
    if den == 0:
        raise UndefinedStatistic("zero rank variance")
    return float(np.clip(np.dot(ra, rb) / den, -1.0, 1.0))


def spearman_closed_form(a, b) -> float:
    """The tie-free formula ``1 - 6 sum d^2 / (N^3 - N)``."""
    ra, rb = rankdata(a), rankdata(b)
    n = ra.size
    return float(1.0 - 6.0 * np.sum((ra - rb) ** 2) / (n ** 3 - n))


def threshold_accuracy(scores, labels, tau: float) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    return float(np.mean((scores > tau) == labels))


def select_threshold(val_scores, val_labels) -> float:
    """Threshold maximizing validation accuracy of ``score > tau``.

    Candidates are midpoints between consecutive distinct scores plus one
    point below the minimum and one above the maximum. Ties go to the
    smallest candidate.
    """
    s = np.asarray(val_scores, dtype=np.float64)
    lab = np.asarray(val_labels)
    if s.shape != lab.shape or s.size == 0:
        raise ValueError("scores and labels must be nonempty and aligned")
    if not np.all((lab == 0) | (lab == 1)):
        raise ValueError("labels must be binary")
    if lab.min() == lab.max():
        raise ValueError("validation labels contain a single class")
    u = np.unique(s)
    gap = (u[-1] - u[0]) if u.size > 1 else 1.0
    cands = np.concatenate([[u[0] - gap], (u[:-1] + u[1:]) / 2, [u[-1]]])
    # accuracy of each candidate via sorted counts: positives above tau, negatives at or below
    order = np.argsort(s, kind="stable")
    ss, ll = s[order], lab[order].astype(np.int64)
    n_below = np.searchsorted(ss, cands, side="right")
    neg_cum = np.concatenate([[0], np.cumsum(1 - ll)])
    pos_cum = np.concatenate([[0], np.cumsum(ll)])
    correct = neg_cum[n_below] + (pos_cum[-1] - pos_cum[n_below])
    return float(cands[int(np.argmax(correct))])


@dataclass
class RaterAgreement:
    rater_id: str
    n_images: int
    rho: float | None


@dataclass
class EvalReport:
    split: str
    n_images: int
    rho: float | None
    accuracy: float | None = None
    tau: float | None = None
    label_threshold: float = 0.5
    per_rater: list[RaterAgreement] = field(default_factory=list)
    raters_skipped: int = 0
    note: str | None = None

    def to_json(self) -> dict:
        return asdict(self)


def per_rater_agreement(ds, scores_source="mean_of_raters", split: str | None = None,
                        model_scores: dict[str, float] | None = None):
    """Rank correlation between each rater's own scores and a reference score.

    ``scores_source`` is ``"mean_of_raters"`` (each image's ground-truth mean,
    the rater's own rating included) or ``"model"`` (``model_scores`` keyed by
    image id). Raters with fewer than two images in the split are skipped.
    Returns ``(entries, n_skipped)``; an entry's ``rho`` is None when either
    side is constant.
    """
    if scores_source == "model":
        if model_scores is None:
            raise ValueError("model scores required for scores_source='model'")
        ref = model_scores
    elif scores_source == "mean_of_raters":
        ref = {r.id: r.mean_score for r in ds.records}
    else:
        raise ValueError(f"unknown scores_source {scores_source!r}")
    allowed = None if split is None else {r.id for r in ds.subset(split)}
    entries, skipped = [], 0
    for rater in sorted(ds.rater_index):
        items = [(i, s) for i, s in ds.rater_index[rater]
                 if (allowed is None or i in allowed) and i in ref]
        if len(items) < 2:
            skipped += 1
            continue
        own = [s for _, s in items]
        other = [ref[i] for i, _ in items]
        try:
            rho = spearman_rho(own, other)
        except UndefinedStatistic:
            rho = None
        entries.append(RaterAgreement(rater, len(items), rho))
    return entries, skipped


def filter_raters(entries, min_images: int):
    """Raters with strictly more than ``min_images`` images."""
    return [e for e in entries if e.n_images > min_images]


def binary_labels(y, label_threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(y, dtype=np.float64) > label_threshold).astype(np.int64)


def fit_threshold(model, ds, split: str = "val", label_threshold: float = 0.5) -> float:
    """Pick the accuracy-maximizing threshold for ``model`` on ``split``."""
    return select_threshold(model.score_dataset(ds, split),
                            binary_labels(ds.scores(split), label_threshold))


def evaluate(model, cm, ds, split: str = "test", tau: float | None = None,
             label_threshold: float = 0.5, per_rater: bool = True) -> EvalReport:
    """Rank correlation (and thresholded accuracy when ``tau`` is given) on a split.

    ``model`` is anything with ``score_dataset(ds, split)``; a non-None ``cm``
    replaces the model's content model. A constant model gets ``rho=None``.
    """
    if cm is not None and hasattr(model, "content_model"):
        model.content_model = cm
    recs = ds.subset(split)
    if not recs:
        raise ValueError(f"split {split!r} is empty")
    pred = model.score_dataset(ds, split)
    y = ds.scores(split)
    note = None
    try:
        rho = spearman_rho(pred, y) if len(recs) >= 2 else None
    except UndefinedStatistic:
        rho, note = None, "rho undefined: zero rank variance"
    acc = None
    if tau is not None:
        acc = threshold_accuracy(pred, binary_labels(y, label_threshold), tau)
    report = EvalReport(split, len(recs), rho, acc, tau, label_threshold, note=note)
    if per_rater:
        scores = {r.id: float(s) for r, s in zip(recs, pred)}
        report.per_rater, report.raters_skipped = per_rater_agreement(
            ds, "model", split=split, model_scores=scores)
    return report
