"""Trained scorer bundle and its versioned binary checkpoint.

Layout, all little-endian::

    8s   magic b"AESRANK\\0"
    u32  version (1)
    u32  d, h1, h2, hc, K
    u32  variant code, fusion code, gating code
    u32  tensor count, then one u8 freeze flag per tensor
    f64  tensors, flattened row-major, in declared order
    u32  has content model; if 1: u32 K, u32 dim, f64 beta, f64 centroids
    u32  category count; per category: u32 byte length + UTF-8 bytes
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .cluster import ContentModel, content_weights
from .model import FusionMode, ModelDims, ModelParams, Variant, predict, tensor_specs

MAGIC = b"AESRANK\x00"
VERSION = 1
GATINGS = ("classifier", "kmeans")
_VARIANTS = list(Variant)
_FUSIONS = list(FusionMode)


class CheckpointError(ValueError):
    pass


@dataclass
class ScoringModel:
    params: ModelParams
    variant: Variant
    fusion: FusionMode = FusionMode.WEIGHTED_SUM_FT
    content_model: ContentModel | None = None
    categories: tuple[str, ...] = field(default_factory=tuple)
    gating: str = "classifier"

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.fusion = FusionMode(self.fusion)
        self.categories = tuple(self.categories)
        if self.gating not in GATINGS:
            raise ValueError(f"unknown gating {self.gating!r}")

    def gate_override(self, X, content_labels=None) -> np.ndarray | None:
        """Fixed content weights for this model, or None to use the classifier."""
        if self.variant.head != "content":
            return None
        K = self.params.dims.K
        if self.fusion is FusionMode.CONCAT_GT:
            if content_labels is None or any(c is None for c in content_labels):
                raise ValueError("concat_gt fusion needs content labels for every image")
            index = {c: k for k, c in enumerate(self.categories)}
            try:
                return np.eye(K)[[index[c] for c in content_labels]]
            except KeyError as exc:
                raise ValueError(f"unknown content label {exc.args[0]!r}") from None
        if self.gating == "kmeans" and self.fusion in (FusionMode.WEIGHTED_SUM,
                                                       FusionMode.WEIGHTED_SUM_FT):
            if self.content_model is None:
                raise ValueError("k-means gating needs a content model")
            return content_weights(self.content_model, X)
        return None

    def score(self, X, content_labels=None) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return predict(self.params, X, self.variant, self.fusion,
                       self.gate_override(X, content_labels))

    def score_dataset(self, ds, split: str | None = None) -> np.ndarray:
        recs = ds.subset(split)
        if not recs:
            return np.zeros(0)
        return self.score(np.stack([r.features for r in recs]),
                          [r.content_label for r in recs])


def to_bytes(model: ScoringModel) -> bytes:
    p = model.params
    specs = tensor_specs(p.dims)
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<5I", *p.dims.as_tuple()),
           struct.pack("<3I", _VARIANTS.index(model.variant), _FUSIONS.index(model.fusion),
                       GATINGS.index(model.gating)),
           struct.pack("<I", len(specs)),
           bytes(int(bool(p.frozen.get(n))) for n, _ in specs)]
    for name, _ in specs:
        out.append(np.ascontiguousarray(p.tensors[name], dtype="<f8").tobytes())
    cm = model.content_model
    if cm is None:
        out.append(struct.pack("<I", 0))
    else:
        K, dim = cm.centroids.shape
        out.append(struct.pack("<IIId", 1, K, dim, cm.beta))
        out.append(np.ascontiguousarray(cm.centroids, dtype="<f8").tobytes())
    out.append(struct.pack("<I", len(model.categories)))
    for c in model.categories:
        raw = c.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def from_bytes(buf: bytes) -> ScoringModel:
    r = _Reader(buf)
    if r.take(8) != MAGIC:
        raise CheckpointError("not an aesrank checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    dims = ModelDims(*r.unpack("<5I"))
    vcode, fcode, gcode = r.unpack("<3I")
    (n_tensors,) = r.unpack("<I")
    specs = tensor_specs(dims)
    if n_tensors != len(specs):
        raise CheckpointError("tensor count does not match dimensions")
    flags = r.take(n_tensors)
    tensors = {}
    for name, shape in specs:
        tensors[name] = r.floats(int(np.prod(shape))).reshape(shape)
    frozen = {name: bool(f) for (name, _), f in zip(specs, flags)}
    (has_cm,) = r.unpack("<I")
    cm = None
    if has_cm:
        K, dim, beta = r.unpack("<IId")
        cm = ContentModel(r.floats(K * dim).reshape(K, dim), beta)
    (n_cat,) = r.unpack("<I")
    cats = []
    for _ in range(n_cat):
        (length,) = r.unpack("<I")
        cats.append(r.take(length).decode("utf-8"))
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint")
    try:
        return ScoringModel(ModelParams(dims, tensors, frozen), _VARIANTS[vcode],
                            _FUSIONS[fcode], cm, tuple(cats), GATINGS[gcode])
    except IndexError:
        raise CheckpointError("unknown variant, fusion or gating code") from None


def save_checkpoint(model: ScoringModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(model))


def load_checkpoint(path) -> ScoringModel:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
