"""Regression, pairwise hinge, attribute and content-classification losses.

Every loss is mean-normalized over its own item count, so duplicating a batch
leaves both value and gradient unchanged. The ``*_grad`` variants return the
value together with the derivative with respect to the predictions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from . import N_ATTRIBUTES

ATTRIBUTE_MODES = ("euclidean_11dim", "cross_entropy_binary")


@dataclass(frozen=True)
class LossConfig:
    omega_r: float = 1.0
    omega_a: float = 0.1
    margin: float = 0.02
    attribute_mode: str = "euclidean_11dim"

    def validate(self):
        for name in ("omega_r", "omega_a"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0")
        if not 0.0 <= self.margin <= 1.0:
            raise ValueError("margin must lie in [0, 1]")
        if self.attribute_mode not in ATTRIBUTE_MODES:
            raise ValueError(f"unknown attribute_mode {self.attribute_mode!r}")


def pair_label(y_i: float, y_j: float) -> int:
    """+1 when ``y_i >= y_j``, else -1 (equality counts as +1)."""
    return 1 if y_i >= y_j else -1


def _nonempty(n: int, what: str):
    if n == 0:
        raise ValueError(f"{what}: empty input (N = 0)")


def loss_reg_grad(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("prediction and target lengths differ")
    n = pred.shape[0] if pred.ndim else 1
    _nonempty(pred.size, "loss_reg")
    err = pred - target
    return float(np.sum(err * err) / (2 * n)), err / n


def loss_reg(pred, target) -> float:
    """Euclidean loss ``(1/2N) sum (pred - target)^2``."""
    return loss_reg_grad(pred, target)[0]


def loss_rank_grad(score_i, score_j, labels, margin: float):
    si = np.asarray(score_i, dtype=np.float64)
    sj = np.asarray(score_j, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.float64)
    if not (si.shape == sj.shape == lab.shape):
        raise ValueError("pair arrays differ in length")
    _nonempty(lab.size, "loss_rank")
    if not np.all((lab == 1) | (lab == -1)):
        raise ValueError("pair labels must be +1 or -1")
    n = lab.size
    slack = margin - lab * (si - sj)
    active = slack > 0  # zero subgradient exactly at the kink
    value = float(np.sum(np.where(active, slack, 0.0)) / (2 * n))
    g = np.where(active, -lab / (2 * n), 0.0)
    return value, g, -g


def loss_rank(score_i, score_j, labels, margin: float) -> float:
    """Pairwise hinge ``(1/2N) sum max(0, margin - label * (s_i - s_j))``."""
    return loss_rank_grad(score_i, score_j, labels, margin)[0]


def _check_att(pred, target):
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if pred.shape[-1] != N_ATTRIBUTES or target.shape[-1] != N_ATTRIBUTES:
        raise ValueError(f"attribute vectors must have dimension {N_ATTRIBUTES}")
    if pred.shape != target.shape:
        raise ValueError("attribute prediction and target shapes differ")
    _nonempty(pred.shape[0], "loss_att")
    return pred, target


def loss_att(pred, target, mode: str = "euclidean_11dim") -> float:
    """Attribute loss over ``N x 11`` predictions.

    In ``euclidean_11dim`` mode ``pred`` are activations compared against
    targets in [-1, 1]. In ``cross_entropy_binary`` mode ``pred`` are
    probabilities and targets are 0/1; the loss sums binary cross-entropy over
    the 11 attributes and averages over images.
    """
    pred, target = _check_att(pred, target)
    n = pred.shape[0]
    if mode == "euclidean_11dim":
        return float(np.sum((pred - target) ** 2) / (2 * n))
    if mode == "cross_entropy_binary":
        return float(-np.sum(xlogy(target, pred) + xlogy(1 - target, 1 - pred)) / n)
    raise ValueError(f"unknown attribute_mode {mode!r}")


def loss_att_grad(activations, target, mode: str):
    """Attribute loss and gradient w.r.t. raw activations (logits in binary mode)."""
    act, target = _check_att(activations, target)
    n = act.shape[0]
    if mode == "euclidean_11dim":
        err = act - target
        return float(np.sum(err * err) / (2 * n)), err / n
    if mode == "cross_entropy_binary":
        value = np.sum(np.logaddexp(0.0, act) - target * act) / n
        return float(value), (1.0 / (1.0 + np.exp(-act)) - target) / n
    raise ValueError(f"unknown attribute_mode {mode!r}")


def log_softmax_rows(logits) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_rows(logits) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def loss_content_grad(logits, labels):
    """Softmax cross-entropy of content logits ``(N, K)`` against class indices."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    _nonempty(n, "loss_content")
    logp = log_softmax_rows(logits)
    value = -float(np.sum(logp[np.arange(n), labels]) / n)
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    return value, g / n


@dataclass
class LossComponents:
    reg: float | None = None
    rank: float | None = None
    att: float | None = None
    content: float | None = None


def loss_total(components: LossComponents, cfg: LossConfig) -> float:
    """``reg + omega_r * rank + omega_a * att``; absent terms count as zero."""
    reg = components.reg or 0.0
    rank = components.rank or 0.0
    att = components.att or 0.0
    return reg + cfg.omega_r * rank + cfg.omega_a * att
