"""Image records, JSONL loading, synthetic rater populations and splits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import N_ATTRIBUTES
from ._rng import substream

SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    """Raised for malformed or inconsistent dataset content."""


@dataclass(frozen=True)
class RaterRating:
    rater_id: str
    score: float

    def __post_init__(self):
        if not self.rater_id:
            raise DatasetError("empty rater id")
        if not 0.0 <= self.score <= 1.0:
            raise DatasetError(f"score out of range: {self.score}")


@dataclass(frozen=True)
class ImageRecord:
    id: str
    features: np.ndarray
    ratings: tuple[RaterRating, ...]
    mean_score: float
    attributes: np.ndarray | None = None
    content_label: str | None = None
    split: str = "train"
    batch: str | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DatasetError(f"{self.id}: unknown split {self.split!r}")
        if not 0.0 <= self.mean_score <= 1.0:
            raise DatasetError(f"{self.id}: score out of range: {self.mean_score}")
        if self.attributes is not None:
            if self.attributes.shape != (N_ATTRIBUTES,):
                raise DatasetError(f"{self.id}: expected {N_ATTRIBUTES} attributes")
            if np.any(np.abs(self.attributes) > 1.0):
                raise DatasetError(f"{self.id}: attribute out of range [-1, 1]")

    def to_json(self) -> dict:
        out: dict = {"id": self.id, "features": self.features.tolist()}
        if self.ratings:
            out["ratings"] = [{"rater": r.rater_id, "score": r.score} for r in self.ratings]
        else:
            out["score"] = self.mean_score
        if self.attributes is not None:
            out["attributes"] = self.attributes.tolist()
        if self.content_label is not None:
            out["content"] = self.content_label
        out["split"] = self.split
        if self.batch is not None:
            out["batch"] = self.batch
        return out


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


def make_record(id, features, ratings=(), score=None, attributes=None,
                content_label=None, split="train", batch=None) -> ImageRecord:
    """Build a record, deriving the ground-truth score from ratings when present."""
    ratings = tuple(r if isinstance(r, RaterRating) else RaterRating(*r) for r in ratings)
    if ratings:
        mean = math.fsum(r.score for r in ratings) / len(ratings)
    elif score is None:
        raise DatasetError(f"{id}: neither ratings nor score given")
    else:
        mean = float(score)
    return ImageRecord(
        id=str(id),
        features=_frozen(features),
        ratings=ratings,
        mean_score=mean,
        attributes=None if attributes is None else _frozen(attributes),
        content_label=content_label,
        split=split,
        batch=batch,
    )


@dataclass(frozen=True)
class Dataset:
    records: tuple[ImageRecord, ...]
    feature_dim: int
    rater_index: dict[str, tuple[tuple[str, float], ...]] = field(init=False, repr=False)
    _pos: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pos = {}
        index: dict[str, list] = {}
        for i, rec in enumerate(self.records):
            if rec.id in pos:
                raise DatasetError(f"duplicate id {rec.id!r}")
            if rec.features.shape != (self.feature_dim,):
                raise DatasetError(
                    f"{rec.id}: dimension mismatch, expected {self.feature_dim} "
                    f"got {rec.features.shape[0] if rec.features.ndim else 0}")
            pos[rec.id] = i
            for r in rec.ratings:
                index.setdefault(r.rater_id, []).append((rec.id, r.score))
        object.__setattr__(self, "_pos", pos)
        object.__setattr__(self, "rater_index", {k: tuple(v) for k, v in index.items()})

    @classmethod
    def from_records(cls, records: Iterable[ImageRecord], feature_dim: int | None = None):
        records = tuple(records)
        if feature_dim is None:
            if not records:
                raise DatasetError("empty dataset needs an explicit feature_dim")
            feature_dim = records[0].features.shape[0]
        return cls(records, int(feature_dim))

    def __len__(self):
        return len(self.records)

    def __getitem__(self, image_id: str) -> ImageRecord:
        return self.records[self._pos[image_id]]

    def position(self, image_id: str) -> int:
        return self._pos[image_id]

    def subset(self, split: str | None) -> list[ImageRecord]:
        if split is None:
            return list(self.records)
        return [r for r in self.records if r.split == split]

    def features(self, split: str | None = None) -> np.ndarray:
        recs = self.subset(split)
        if not recs:
            return np.zeros((0, self.feature_dim))
        return np.stack([r.features for r in recs])

    def scores(self, split: str | None = None) -> np.ndarray:
        return np.array([r.mean_score for r in self.subset(split)], dtype=np.float64)

    def content_labels(self) -> list[str]:
        """Sorted distinct content tokens over the whole dataset."""
        return sorted({r.content_label for r in self.records if r.content_label is not None})

    def with_splits(self, assignment: dict[str, str]) -> "Dataset":
        return Dataset(tuple(replace(r, split=assignment[r.id]) for r in self.records),
                       self.feature_dim)


# --- JSONL I/O --------------------------------------------------------------

def _parse_line(obj: dict, lineno: int) -> ImageRecord:
    try:
        ratings = [RaterRating(str(r["rater"]), float(r["score"])) for r in obj.get("ratings") or []]
        return make_record(
            obj["id"],
            obj["features"],
            ratings=ratings,
            score=obj.get("score"),
            attributes=obj.get("attributes"),
            content_label=obj.get("content"),
            split=obj.get("split", "train"),
            batch=obj.get("batch"),
        )
    except KeyError as exc:
        raise DatasetError(f"line {lineno}: missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"line {lineno}: {exc}") from None


def load_dataset(path, expected_dim: int | None = None) -> Dataset:
    """Read a JSONL dataset file.

    Each line holds one image. Errors carry the offending line number.
    """
    records = []
    dim = expected_dim
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            rec = _parse_line(obj, lineno)
            if dim is None:
                dim = rec.features.shape[0]
            elif rec.features.shape != (dim,):
                raise DatasetError(
                    f"line {lineno}: dimension mismatch, expected {dim} got {rec.features.shape[0]}")
            if rec.id in seen:
                raise DatasetError(f"line {lineno}: duplicate id {rec.id!r}")
            seen.add(rec.id)
            records.append(rec)
    if dim is None:
        raise DatasetError(f"{path}: no records")
    return Dataset(tuple(records), dim)


def dumps_dataset(ds: Dataset) -> str:
    return "".join(json.dumps(r.to_json(), separators=(",", ":")) + "\n" for r in ds.records)


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(dumps_dataset(ds), encoding="utf-8")


# --- synthetic populations --------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for the synthetic rater population.

    The first nine fields are the core population model. The rest shape the
    feature geometry: ``content_direction_mix`` rotates the quality-encoding
    direction per content cluster (0 keeps one shared direction, so quality is
    linearly decodable from features).
    """

    n_images: int = 1000
    n_raters: int = 20
    ratings_per_image: int = 5
    n_content_clusters: int = 4
    feature_dim: int = 16
    rater_bias_sd: float = 0.0
    rater_scale_sd: float = 0.0
    rating_noise_sd: float = 0.0
    seed: int = 0
    images_per_batch: int = 10
    quality_sd: float = 0.18
    cluster_separation: float = 3.0
    signal_scale: float = 4.0
    feature_noise_sd: float = 0.05
    content_direction_mix: float = 0.0
    rating_levels: int = 0

    def validate(self) -> None:
        for name in ("n_images", "n_raters", "ratings_per_image", "n_content_clusters",
                     "feature_dim", "images_per_batch"):
            if getattr(self, name) <= 0:
                raise DatasetError(f"{name} must be positive")
        for name in ("rater_bias_sd", "rater_scale_sd", "rating_noise_sd", "quality_sd",
                     "feature_noise_sd", "cluster_separation"):
            if getattr(self, name) < 0:
                raise DatasetError(f"{name} must be >= 0")
        if self.ratings_per_image > self.n_raters:
            raise DatasetError("ratings_per_image exceeds n_raters")
        if self.feature_dim < 2:
            raise DatasetError("feature_dim must be at least 2")
        if not 0.0 <= self.content_direction_mix <= 1.0:
            raise DatasetError("content_direction_mix must lie in [0, 1]")
        if self.rating_levels == 1 or self.rating_levels < 0:
            raise DatasetError("rating_levels must be 0 (continuous) or >= 2")


def _orthonormal_directions(rng, dim: int, count: int) -> np.ndarray:
    m = rng.normal(size=(dim, max(count, 1)))
    q, _ = np.linalg.qr(m)
    if count > dim:
        extra = rng.normal(size=(dim, count - dim))
        q = np.concatenate([q, extra / np.linalg.norm(extra, axis=0)], axis=1)
    return q[:, :count].T


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Draw a synthetic dataset whose ratings come from biased, noisy raters.

    Each image has a latent quality q in [0, 1]. Features sit around a content
    cluster mean and move along a quality direction in proportion to q. Rater r
    reports ``clip(s_r * q + b_r + noise, 0, 1)``. Images are handed out in
    batches that are all scored by the same ``ratings_per_image`` raters.
    All records are placed in the train split.
    """
    cfg.validate()
    K, d = cfg.n_content_clusters, cfg.feature_dim
    geo = substream(cfg.seed, "synthetic.geometry")
    # axis 0: shared quality direction; following axes: cluster means and per-cluster tilts
    dirs = _orthonormal_directions(geo, d, 1 + 2 * K)
    u = dirs[0]
    means = cfg.cluster_separation * dirs[1:1 + K]
    tilts = dirs[1 + K:1 + 2 * K]
    mix = cfg.content_direction_mix
    quality_dirs = []
    for k in range(K):
        v = (1.0 - mix) * u + mix * tilts[k]
        quality_dirs.append(v / np.linalg.norm(v))
    quality_dirs = np.array(quality_dirs)
    att_gain = geo.normal(0.0, 1.0, size=(K, N_ATTRIBUTES))
    att_offset = geo.normal(0.0, 0.2, size=(K, N_ATTRIBUTES))

    img = substream(cfg.seed, "synthetic.images")
    q = np.clip(img.normal(0.5, cfg.quality_sd, size=cfg.n_images), 0.0, 1.0)
    content = img.integers(0, K, size=cfg.n_images)
    noise = img.normal(0.0, cfg.feature_noise_sd, size=(cfg.n_images, d))
    X = means[content] + (q - 0.5)[:, None] * cfg.signal_scale * quality_dirs[content] + noise
    A = np.clip(att_gain[content] * (2.0 * q - 1.0)[:, None] + att_offset[content], -1.0, 1.0)

    rat = substream(cfg.seed, "synthetic.raters")
    bias = rat.normal(0.0, cfg.rater_bias_sd, size=cfg.n_raters)
    scale = np.exp(rat.normal(0.0, cfg.rater_scale_sd, size=cfg.n_raters))
    rater_ids = [f"r{j:03d}" for j in range(cfg.n_raters)]

    order = rat.permutation(cfg.n_images)
    n_batches = math.ceil(cfg.n_images / cfg.images_per_batch)
    ratings: list[list[RaterRating]] = [[] for _ in range(cfg.n_images)]
    batch_of = [""] * cfg.n_images
    for b in range(n_batches):
        members = np.sort(order[b * cfg.images_per_batch:(b + 1) * cfg.images_per_batch])
        raters = np.sort(rat.choice(cfg.n_raters, size=cfg.ratings_per_image, replace=False))
        eps = rat.normal(0.0, cfg.rating_noise_sd, size=(len(raters), len(members)))
        raw = scale[raters, None] * q[members][None, :] + bias[raters, None] + eps
        scores = np.clip(raw, 0.0, 1.0)
        if cfg.rating_levels:
            step = cfg.rating_levels - 1
            scores = np.round(scores * step) / step
        for jj, r in enumerate(raters):
            for ii, i in enumerate(members):
                ratings[i].append(RaterRating(rater_ids[r], float(scores[jj, ii])))
        for i in members:
            batch_of[i] = f"b{b:05d}"

    width = max(5, len(str(cfg.n_images - 1)))
    records = [
        make_record(
            f"img{i:0{width}d}",
            X[i],
            ratings=ratings[i],
            attributes=A[i],
            content_label=f"c{content[i]}",
            batch=batch_of[i],
        )
        for i in range(cfg.n_images)
    ]
    return Dataset(tuple(records), d)


def split_sizes(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    f = np.asarray(fractions, dtype=np.float64)
    if f.shape != (3,) or np.any(f < 0) or not math.isclose(f.sum(), 1.0, abs_tol=1e-9):
        raise DatasetError("split fractions must be three nonnegative numbers summing to 1")
    raw = f * n
    sizes = np.floor(raw).astype(int)
    # largest remainder, ties to the earlier split
    for idx in np.argsort(-(raw - sizes), kind="stable")[: n - sizes.sum()]:
        sizes[idx] += 1
    return int(sizes[0]), int(sizes[1]), int(sizes[2])


def split_dataset(ds: Dataset, fractions=(0.85, 0.05, 0.10), seed: int = 0) -> Dataset:
    """Randomly reassign train/val/test with sizes matching ``fractions``."""
    if len(ds) == 0:
        raise DatasetError("cannot split an empty dataset")
    n_train, n_val, _ = split_sizes(len(ds), fractions)
    perm = substream(seed, "split").permutation(len(ds))
    assignment = {}
    for rank, i in enumerate(perm):
        split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        assignment[ds.records[i].id] = split
    return ds.with_splits(assignment)
