"""Shared builders for model tests."""

import numpy as np

from aesrank.model import Batch, FusionMode, LossSpec, ModelDims, Variant, init_params, loss_and_grad
from oracles import numeric_grad


def random_batch(rng, dims: ModelDims, n_pairs=4, fusion=FusionMode.WEIGHTED_SUM_FT):
    """``n_pairs`` pairs over ``2 * n_pairs`` images with every annotation present."""
    M = 2 * n_pairs
    pairs = np.arange(M).reshape(n_pairs, 2)
    cw = None
    if fusion is FusionMode.CONCAT_GT:
        cw = np.eye(dims.K)[rng.integers(0, dims.K, size=M)]
    return Batch(
        X=rng.normal(size=(M, dims.d)),
        y=rng.uniform(size=M),
        pairs=pairs,
        labels=rng.choice([-1.0, 1.0], size=n_pairs),
        attributes=rng.uniform(-1, 1, size=(M, 11)),
        att_mask=np.ones(M, bool),
        content_weights=cw,
        content_labels=rng.integers(0, dims.K, size=M),
    )


def full_spec(margin=0.5):
    # a wide margin keeps most hinges active so their gradients get checked
    return LossSpec(reg=1.0, rank=0.7, att=0.3, content=0.4, margin=margin)


def gradient_error(variant, fusion, seed, dims=ModelDims(8, 8, 8, 4, 3), eps=1e-5):
    """Worst relative error between analytic and central-difference gradients."""
    rng = np.random.default_rng(seed)
    p = init_params(dims, seed)
    for name in p.names():
        p.tensors[name] = p.tensors[name] + rng.normal(0, 0.3, size=p.tensors[name].shape)
    batch = random_batch(rng, dims, fusion=FusionMode(fusion))
    spec = full_spec()
    _, _, grads = loss_and_grad(p, batch, variant, fusion, spec)
    worst = 0.0
    for name in p.names():
        num = numeric_grad(lambda: loss_and_grad(p, batch, variant, fusion, spec, need_grad=False)[0],
                           p.tensors[name], eps)
        err = np.abs(grads[name] - num) / np.maximum(1e-6, np.abs(grads[name]) + np.abs(num))
        worst = max(worst, float(err.max()))
    return worst


ALL_VARIANTS = list(Variant)
ALL_FUSIONS = list(FusionMode)
