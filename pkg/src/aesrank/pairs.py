"""Within-rater, cross-rater and mixed pair sampling for the ranking loss."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from math import comb

import numpy as np

from ._rng import substream
from .data import Dataset

STRATEGIES = ("within", "cross", "mixed")
_GAP_TOL = 1e-12
_MAX_TOPUPS = 64


class EmptyPoolError(ValueError):
    """No pair satisfies the sampling constraints."""


@dataclass(frozen=True)
class PairSample:
    id_i: str
    id_j: str
    label: int
    provenance: str  # "cross" or "within:<rater_id>"

    @property
    def rater(self) -> str | None:
        return self.provenance.split(":", 1)[1] if self.provenance.startswith("within:") else None


@dataclass(frozen=True)
class SamplerConfig:
    strategy: str = "mixed"
    budget: int = 10000
    cross_min_gap: float = 0.1
    mixed_within_fraction: float = 0.5
    seed: int = 0
    resample_per_epoch: bool = False

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.budget <= 0:
            raise ValueError("budget must be positive")
        if not 0.0 <= self.cross_min_gap <= 1.0:
            raise ValueError("cross_min_gap must lie in [0, 1]")
        if not 0.0 <= self.mixed_within_fraction <= 1.0:
            raise ValueError("mixed_within_fraction must lie in [0, 1]")


def _label(a: float, b: float) -> int:
    return 1 if a >= b else -1


class _WithinPool:
    """Per-rater image lists restricted to the training split."""

    def __init__(self, ds: Dataset):
        train = {r.id for r in ds.subset("train")}
        self.raters: list[str] = []
        self.images: list[np.ndarray] = []
        self.scores: list[np.ndarray] = []
        for rater in sorted(ds.rater_index):
            items = [(i, s) for i, s in ds.rater_index[rater] if i in train]
            if len(items) < 2:
                continue
            self.raters.append(rater)
            self.images.append(np.array([ds.position(i) for i, _ in items]))
            self.scores.append(np.array([s for _, s in items]))
        self.n_candidates = np.array([comb(len(x), 2) for x in self.images], dtype=np.float64)
        self.size = sum(
            comb(len(s), 2) - sum(comb(int(t), 2) for t in np.unique(s, return_counts=True)[1])
            for s in self.scores)

    def enumerate(self):
        for r, (img, sc) in enumerate(zip(self.images, self.scores)):
            a, b = np.triu_indices(len(img), k=1)
            keep = sc[a] != sc[b]
            for x, y in zip(a[keep], b[keep]):
                yield r, int(img[x]), int(img[y]), _label(sc[x], sc[y])

    def draw(self, rng, n):
        sizes = np.array([len(x) for x in self.images])
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        flat_img = np.concatenate(self.images)
        flat_sc = np.concatenate(self.scores)
        rs = rng.choice(len(self.raters), size=n, p=self.n_candidates / self.n_candidates.sum())
        m = sizes[rs]
        x = (rng.random(n) * m).astype(np.int64)
        y = (rng.random(n) * (m - 1)).astype(np.int64)
        y += y >= x
        gx, gy = offsets[rs] + x, offsets[rs] + y
        sx, sy = flat_sc[gx], flat_sc[gy]
        keep = sx != sy
        return [(int(r), int(i), int(j), 1 if a >= b else -1)
                for r, i, j, a, b in zip(rs[keep], flat_img[gx][keep], flat_img[gy][keep],
                                         sx[keep], sy[keep])]


class _CrossPool:
    """Mean-score pairs whose gap is at least the configured minimum."""

    def __init__(self, ds: Dataset, gap: float):
        train = ds.subset("train")
        self.pos = np.array([ds.position(r.id) for r in train], dtype=np.int64)
        self.y = np.array([r.mean_score for r in train])
        self.gap = gap
        n = len(self.y)
        self.order = np.argsort(self.y, kind="stable")
        ys = self.y[self.order]
        if gap <= _GAP_TOL:
            self.low = np.full(n, n - 1)
            self.high_start = np.full(n, n)
            self.counts = np.full(n, n - 1, dtype=np.int64)
        else:
            self.low = np.searchsorted(ys, self.y - gap + _GAP_TOL, side="right")
            self.high_start = np.searchsorted(ys, self.y + gap - _GAP_TOL, side="left")
            self.counts = self.low + (n - self.high_start)
        self.size = int(self.counts.sum() // 2)

    def enumerate(self):
        n = len(self.y)
        for a in range(n - 1):
            bs = np.arange(a + 1, n)
            bs = bs[np.abs(self.y[a] - self.y[bs]) >= self.gap - _GAP_TOL]
            for b in bs:
                yield -1, int(self.pos[a]), int(self.pos[b]), _label(self.y[a], self.y[b])

    def draw(self, rng, n):
        a = rng.choice(len(self.y), size=n, p=self.counts / self.counts.sum())
        r = (rng.random(n) * self.counts[a]).astype(np.int64)
        if self.gap <= _GAP_TOL:
            b = r + (r >= a)
        else:
            lo = r < self.low[a]
            b = np.where(lo, self.order[np.minimum(r, len(self.y) - 1)],
                         self.order[np.minimum(self.high_start[a] + r - self.low[a], len(self.y) - 1)])
        ya, yb = self.y[a], self.y[b]
        return [(-1, int(i), int(j), 1 if u >= v else -1)
                for i, j, u, v in zip(self.pos[a], self.pos[b], ya, yb)]


def _key(i: int, j: int) -> tuple[int, int]:
    return (i, j) if i < j else (j, i)


def _take(pool, budget: int, rng, exclude: set) -> list:
    """Draw ``budget`` distinct pairs (or the whole pool when it is smaller)."""
    if budget <= 0:
        return []
    if pool.size <= budget:
        out = []
        for item in pool.enumerate():
            k = _key(item[1], item[2])
            if k not in exclude:
                exclude.add(k)
                out.append(item)
        return out
    out: list = []
    need = budget
    for _ in range(_MAX_TOPUPS):
        for item in pool.draw(rng, need):
            k = _key(item[1], item[2])
            if k in exclude:
                continue
            exclude.add(k)
            out.append(item)
            if len(out) == budget:
                return out
        need = budget - len(out)
    return out


def sample_pairs(ds: Dataset, cfg: SamplerConfig, epoch: int | None = None) -> list[PairSample]:
    """Sample ordered image pairs from the training split.

    Within-rater pairs take their label from one rater's own two scores and
    skip ties. Cross-rater pairs take their label from mean scores and require
    a gap of at least ``cfg.cross_min_gap``. Pairs are drawn with replacement,
    deduplicated on the unordered image pair, and topped up until the budget
    is met. ``epoch`` selects a fresh deterministic stream for per-epoch
    resampling.
    """
    cfg.validate()
    if not ds.subset("train"):
        raise EmptyPoolError("dataset has no training records")
    extra = () if epoch is None else (epoch,)
    seen: set = set()
    chunks = []
    if cfg.strategy == "within":
        plan = [("within", cfg.budget)]
    elif cfg.strategy == "cross":
        plan = [("cross", cfg.budget)]
    else:
        n_within = int(round(cfg.budget * cfg.mixed_within_fraction))
        plan = [("within", n_within), ("cross", cfg.budget - n_within)]

    within_pool = None
    for kind, budget in plan:
        if kind == "within":
            within_pool = _WithinPool(ds)
            if within_pool.size == 0 and budget > 0:
                raise EmptyPoolError("empty pool: no rater scored two training images differently")
            pool = within_pool
        else:
            pool = _CrossPool(ds, cfg.cross_min_gap)
            if pool.size == 0 and budget > 0:
                raise EmptyPoolError(
                    f"empty pool: no training pair has mean-score gap >= {cfg.cross_min_gap}")
        chunks.extend(_take(pool, budget, substream(cfg.seed, f"pairs.{kind}", *extra), seen))

    out = []
    for r, i, j, label in chunks:
        prov = "cross" if r < 0 else f"within:{within_pool.raters[r]}"
        out.append(PairSample(ds.records[i].id, ds.records[j].id, label, prov))
    return out


def pool_sizes(ds: Dataset, cross_min_gap: float) -> dict[str, int]:
    """Number of eligible within- and cross-rater pairs before deduplication."""
    return {"within": _WithinPool(ds).size, "cross": _CrossPool(ds, cross_min_gap).size}


def pair_arrays(ds: Dataset, pairs) -> tuple[np.ndarray, np.ndarray]:
    """Dataset positions ``(P, 2)`` and labels ``(P,)`` for a pair list."""
    idx = np.array([(ds.position(p.id_i), ds.position(p.id_j)) for p in pairs], dtype=np.int64)
    labels = np.array([p.label for p in pairs], dtype=np.float64)
    return idx.reshape(-1, 2), labels


def write_pairs_csv(pairs, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id_i", "id_j", "label", "provenance"])
        for p in pairs:
            w.writerow([p.id_i, p.id_j, p.label, p.provenance])


def read_pairs_csv(path) -> list[PairSample]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [PairSample(row["id_i"], row["id_j"], int(row["label"]), row["provenance"])
                for row in csv.DictReader(fh)]
