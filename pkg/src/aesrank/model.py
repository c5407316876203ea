"""Multi-branch scoring network over precomputed image features.

Layout (all affine layers, rectifiers after the trunk and content features)::

    x -> trunk1 -> relu -> trunk2 -> relu = h
    h -> reg                                   score (reg head)
    h -> att = a;  [h, a] -> att_fuse          score (attribute head)
    h -> cls -> softmax = w                    content posteriors
    h -> cont_k -> relu = c_k;  [a, c_k] -> head_k = s_k
    score (content head) = sum_k w_k s_k

Gradients are derived by hand and checked against finite differences in the
test suite. Both images of a pair go through the same parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import N_ATTRIBUTES
from ._rng import substream
from .losses import (
    LossComponents,
    LossConfig,
    loss_att_grad,
    loss_content_grad,
    loss_rank_grad,
    loss_reg_grad,
    softmax_rows,
)


class Variant(str, Enum):
    REG = "reg"
    REG_RANK = "reg_rank"
    REG_ATT = "reg_att"
    REG_RANK_ATT = "reg_rank_att"
    REG_RANK_CONT = "reg_rank_cont"
    FULL = "full"

    @property
    def head(self) -> str:
        if self in (Variant.REG, Variant.REG_RANK):
            return "reg"
        if self in (Variant.REG_ATT, Variant.REG_RANK_ATT):
            return "att"
        return "content"

    @property
    def uses_rank(self) -> bool:
        return self not in (Variant.REG, Variant.REG_ATT)

    @property
    def uses_attributes(self) -> bool:
        return self in (Variant.REG_ATT, Variant.REG_RANK_ATT, Variant.FULL)


class FusionMode(str, Enum):
    CONCAT_GT = "concat_gt"
    CONCAT_PRED = "concat_pred"
    AVERAGE = "average"
    WEIGHTED_SUM = "weighted_sum"
    WEIGHTED_SUM_FT = "weighted_sum_ft"


class NonFiniteError(FloatingPointError):
    def __init__(self, tensor: str):
        super().__init__(f"non-finite values in {tensor}")
        self.tensor = tensor


@dataclass(frozen=True)
class ModelDims:
    d: int
    h1: int = 32
    h2: int = 32
    hc: int = 8
    K: int = 10

    def __post_init__(self):
        if min(self.d, self.h1, self.h2, self.hc, self.K) <= 0:
            raise ValueError("model dimensions must be positive")

    def as_tuple(self):
        return (self.d, self.h1, self.h2, self.hc, self.K)


def tensor_specs(dims: ModelDims) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in checkpoint order."""
    d, h1, h2, hc, K = dims.as_tuple()
    A = N_ATTRIBUTES
    specs = [
        ("trunk1.W", (d, h1)), ("trunk1.b", (h1,)),
        ("trunk2.W", (h1, h2)), ("trunk2.b", (h2,)),
        ("reg.W", (h2, 1)), ("reg.b", (1,)),
        ("att.W", (h2, A)), ("att.b", (A,)),
        ("att_fuse.W", (h2 + A, 1)), ("att_fuse.b", (1,)),
        ("cls.W", (h2, K)), ("cls.b", (K,)),
    ]
    for k in range(K):
        specs += [
            (f"cont{k}.W", (h2, hc)), (f"cont{k}.b", (hc,)),
            (f"head{k}.W", (A + hc, 1)), (f"head{k}.b", (1,)),
        ]
    return specs


def branch_names(dims: ModelDims, prefixes) -> list[str]:
    """All tensor names that belong to the given layer prefixes (``cont`` matches every ``contK``)."""
    out = []
    for name, _ in tensor_specs(dims):
        layer = name.split(".")[0]
        base = layer.rstrip("0123456789")
        if layer in prefixes or base in prefixes:
            out.append(name)
    return out


@dataclass
class ModelParams:
    dims: ModelDims
    tensors: dict[str, np.ndarray]
    frozen: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        for name, shape in tensor_specs(self.dims):
            if name not in self.tensors:
                raise ValueError(f"missing tensor {name}")
            if self.tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {self.tensors[name].shape} != {shape}")
            self.frozen.setdefault(name, False)

    def names(self) -> list[str]:
        return [n for n, _ in tensor_specs(self.dims)]

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, {k: v.copy() for k, v in self.tensors.items()},
                           dict(self.frozen))

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def freeze_only(self, names) -> None:
        """Freeze exactly ``names``; everything else becomes trainable."""
        names = set(names)
        unknown = names - set(self.tensors)
        if unknown:
            raise KeyError(f"unknown tensors: {sorted(unknown)}")
        self.frozen = {n: n in names for n in self.names()}

    def train_only(self, names) -> None:
        names = set(names)
        self.freeze_only([n for n in self.names() if n not in names])

    def equals(self, other: "ModelParams") -> bool:
        return (self.dims == other.dims
                and all(np.array_equal(self.tensors[n], other.tensors[n]) for n in self.names()))


def init_params(dims: ModelDims | tuple, seed: int = 0) -> ModelParams:
    """Fan-in scaled uniform weights, zero biases."""
    if not isinstance(dims, ModelDims):
        dims = ModelDims(*dims)
    rng = substream(seed, "model.init")
    tensors = {}
    for name, shape in tensor_specs(dims):
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(dims, tensors)


def _finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(name)
    return arr


_TRACE = (("trunk1", "z1"), ("trunk2", "z2"), ("att", "A"), ("cls", "L"),
          ("content branches", "S"), ("score", "score"))


def _locate_nonfinite(cache):
    """Name the first intermediate holding a non-finite value."""
    for name, key in _TRACE:
        if key in cache and not np.all(np.isfinite(cache[key])):
            raise NonFiniteError(name)
    raise NonFiniteError("score")


def _gates(p, logits, fusion: FusionMode, content_weights):
    """Fusion weights and whether they depend on the classifier."""
    K = p.dims.K
    if content_weights is not None:
        w = np.asarray(content_weights, dtype=np.float64)
        if w.shape != logits.shape:
            raise ValueError(f"content_weights must have shape {logits.shape}")
        return w, False
    if fusion is FusionMode.CONCAT_GT:
        raise ValueError("concat_gt fusion needs ground-truth content weights")
    if fusion is FusionMode.AVERAGE:
        return np.full_like(logits, 1.0 / K), False
    if fusion is FusionMode.CONCAT_PRED:
        return np.eye(K)[np.argmax(logits, axis=1)], False
    return softmax_rows(logits), True


def _forward(p: ModelParams, X, variant: Variant, fusion: FusionMode, content_weights=None):
    # non-finite values are reported by name below, so numpy's warnings are noise
    with np.errstate(invalid="ignore", over="ignore"):
        return _forward_raw(p, X, variant, fusion, content_weights)


def _forward_raw(p, X, variant, fusion, content_weights):
    t = p.tensors
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != p.dims.d:
        raise ValueError(f"feature dimension mismatch: expected {p.dims.d}, got {X.shape[-1]}")
    c = {"X": X}
    c["z1"] = X @ t["trunk1.W"] + t["trunk1.b"]
    c["a1"] = np.maximum(c["z1"], 0.0)
    c["z2"] = c["a1"] @ t["trunk2.W"] + t["trunk2.b"]
    h = c["h"] = np.maximum(c["z2"], 0.0)
    A = c["A"] = h @ t["att.W"] + t["att.b"]
    L = c["L"] = h @ t["cls.W"] + t["cls.b"]
    posterior = softmax_rows(L)
    head = variant.head
    if head == "reg":
        score = h @ t["reg.W"][:, 0] + t["reg.b"][0]
    elif head == "att":
        c["F"] = np.concatenate([h, A], axis=1)
        score = c["F"] @ t["att_fuse.W"][:, 0] + t["att_fuse.b"][0]
    else:
        w, soft = _gates(p, L, fusion, content_weights)
        c["w"], c["w_soft"] = w, soft
        branch = np.empty((X.shape[0], p.dims.K))
        c["Zc"], c["G"] = [], []
        for k in range(p.dims.K):
            zk = h @ t[f"cont{k}.W"] + t[f"cont{k}.b"]
            gk = np.concatenate([A, np.maximum(zk, 0.0)], axis=1)
            branch[:, k] = gk @ t[f"head{k}.W"][:, 0] + t[f"head{k}.b"][0]
            c["Zc"].append(zk)
            c["G"].append(gk)
        c["S"] = branch
        score = np.sum(w * branch, axis=1)
    c["score"] = score
    # values the loss reads besides the score
    used = (A, L) if head == "content" else (A,) if head == "att" else ()
    if not (np.isfinite(score).all() and all(np.isfinite(u).all() for u in used)):
        _locate_nonfinite(c)
    return score, A, posterior, c


def forward(p: ModelParams, x, variant=Variant.FULL, fusion=FusionMode.WEIGHTED_SUM_FT,
            content_weights=None):
    """Score one feature vector or a batch.

    Returns ``(score, attributes, content_posteriors)``. ``content_weights``
    overrides the classifier gate (one-hot ground truth for ``concat_gt``, or
    k-means distance weights).
    """
    variant, fusion = Variant(variant), FusionMode(fusion)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    cw = content_weights
    if cw is not None and single:
        cw = np.asarray(cw, dtype=np.float64)[None, :]
    score, A, post, _ = _forward(p, X, variant, fusion, cw)
    if single:
        return float(score[0]), A[0], post[0]
    return score, A, post


def predict(p: ModelParams, X, variant, fusion, content_weights=None) -> np.ndarray:
    return forward(p, np.atleast_2d(X), variant, fusion, content_weights)[0]


def branch_scores(p: ModelParams, X) -> np.ndarray:
    """Per-content-branch scores ``(N, K)`` before gating."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    w = np.full((X.shape[0], p.dims.K), 1.0 / p.dims.K)
    return _forward(p, X, Variant.FULL, FusionMode.AVERAGE, w)[3]["S"]


@dataclass
class Batch:
    """Images plus the pairs and annotations a loss evaluation needs.

    ``pairs`` index rows of ``X``. ``att_mask`` marks rows whose attribute
    targets are present. ``content_labels`` feed the classifier pretraining
    loss.
    """

    X: np.ndarray
    y: np.ndarray | None = None
    pairs: np.ndarray | None = None
    labels: np.ndarray | None = None
    attributes: np.ndarray | None = None
    att_mask: np.ndarray | None = None
    content_weights: np.ndarray | None = None
    content_labels: np.ndarray | None = None


@dataclass(frozen=True)
class LossSpec:
    """Weights of each term in the batch objective."""

    reg: float = 1.0
    rank: float = 0.0
    att: float = 0.0
    content: float = 0.0
    margin: float = 0.02
    attribute_mode: str = "euclidean_11dim"

    @classmethod
    def for_variant(cls, variant, loss: LossConfig) -> "LossSpec":
        variant = Variant(variant)
        return cls(
            reg=1.0,
            rank=loss.omega_r if variant.uses_rank else 0.0,
            att=loss.omega_a if variant.uses_attributes else 0.0,
            margin=loss.margin,
            attribute_mode=loss.attribute_mode,
        )

    @classmethod
    def content_pretraining(cls) -> "LossSpec":
        return cls(reg=0.0, content=1.0)


def loss_and_grad(p: ModelParams, batch: Batch, variant, fusion, spec: LossSpec,
                  need_grad: bool = True):
    """Batch objective, its components, and gradients for every tensor.

    Frozen tensors receive exactly zero gradient.
    """
    variant, fusion = Variant(variant), FusionMode(fusion)
    t = p.tensors
    score, A, _, c = _forward(p, batch.X, variant, fusion, batch.content_weights)
    M = score.shape[0]
    comps = LossComponents()
    total = 0.0
    dscore = np.zeros(M)
    dA = np.zeros_like(A)
    dL = np.zeros_like(c["L"])

    if spec.reg:
        if batch.y is None:
            raise ValueError("regression term needs targets")
        comps.reg, g = loss_reg_grad(score, batch.y)
        total += spec.reg * comps.reg
        dscore += spec.reg * g
    if spec.rank:
        if batch.pairs is None or len(batch.pairs) == 0:
            raise ValueError("ranking term needs pairs")
        i, j = batch.pairs[:, 0], batch.pairs[:, 1]
        comps.rank, gi, gj = loss_rank_grad(score[i], score[j], batch.labels, spec.margin)
        total += spec.rank * comps.rank
        np.add.at(dscore, i, spec.rank * gi)
        np.add.at(dscore, j, spec.rank * gj)
    if spec.att:
        if batch.attributes is None:
            raise ValueError("attribute term needs attribute targets")
        mask = np.ones(M, bool) if batch.att_mask is None else np.asarray(batch.att_mask, bool)
        if mask.any():
            comps.att, g = loss_att_grad(A[mask], batch.attributes[mask], spec.attribute_mode)
            total += spec.att * comps.att
            dA[mask] += spec.att * g
        else:
            comps.att = 0.0
    if spec.content:
        if batch.content_labels is None:
            raise ValueError("content term needs content labels")
        comps.content, g = loss_content_grad(c["L"], batch.content_labels)
        total += spec.content * comps.content
        dL += spec.content * g
    if not np.isfinite(total):
        raise NonFiniteError("loss")
    if not need_grad:
        return total, comps, None

    grads = {n: np.zeros_like(v) for n, v in t.items()}
    h = c["h"]
    dh = np.zeros_like(h)
    head = variant.head
    if head == "reg":
        grads["reg.W"][:, 0] = h.T @ dscore
        grads["reg.b"][0] = dscore.sum()
        dh += np.outer(dscore, t["reg.W"][:, 0])
    elif head == "att":
        grads["att_fuse.W"][:, 0] = c["F"].T @ dscore
        grads["att_fuse.b"][0] = dscore.sum()
        dF = np.outer(dscore, t["att_fuse.W"][:, 0])
        h2 = p.dims.h2
        dh += dF[:, :h2]
        dA += dF[:, h2:]
    else:
        w, S = c["w"], c["S"]
        for k in range(p.dims.K):
            ds = dscore * w[:, k]
            grads[f"head{k}.W"][:, 0] = c["G"][k].T @ ds
            grads[f"head{k}.b"][0] = ds.sum()
            dG = np.outer(ds, t[f"head{k}.W"][:, 0])
            dA += dG[:, :N_ATTRIBUTES]
            dz = dG[:, N_ATTRIBUTES:] * (c["Zc"][k] > 0)
            grads[f"cont{k}.W"] = h.T @ dz
            grads[f"cont{k}.b"] = dz.sum(axis=0)
            dh += dz @ t[f"cont{k}.W"].T
        if c["w_soft"]:
            dw = dscore[:, None] * S
            dL += w * (dw - np.sum(w * dw, axis=1, keepdims=True))

    grads["cls.W"] = h.T @ dL
    grads["cls.b"] = dL.sum(axis=0)
    dh += dL @ t["cls.W"].T
    grads["att.W"] = h.T @ dA
    grads["att.b"] = dA.sum(axis=0)
    dh += dA @ t["att.W"].T

    dz2 = dh * (c["z2"] > 0)
    grads["trunk2.W"] = c["a1"].T @ dz2
    grads["trunk2.b"] = dz2.sum(axis=0)
    dz1 = (dz2 @ t["trunk2.W"].T) * (c["z1"] > 0)
    grads["trunk1.W"] = c["X"].T @ dz1
    grads["trunk1.b"] = dz1.sum(axis=0)

    for name, g in grads.items():
        if p.frozen.get(name):
            g[...] = 0.0
        else:
            _finite(f"grad {name}", g)
    return total, comps, grads


def backward(p: ModelParams, batch: Batch, variant, fusion, spec: LossSpec):
    """Gradients of the batch objective (same keys and shapes as ``p.tensors``)."""
    return loss_and_grad(p, batch, variant, fusion, spec)[2]
