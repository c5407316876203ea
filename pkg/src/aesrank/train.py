"""Staged SGD training of the scoring network.

Stages run in order: regression pretraining, ranking, attribute branch,
content-classifier pretraining on cluster labels, and joint fine-tuning with
the content classifier frozen. Which stages run depends on the variant.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from ._rng import substream
from .checkpoint import ScoringModel
from .cluster import ContentModel, content_weights
from .data import Dataset
from .losses import LossConfig
from .metrics import UndefinedStatistic, spearman_rho
from .model import (
    Batch,
    FusionMode,
    LossSpec,
    ModelDims,
    ModelParams,
    NonFiniteError,
    Variant,
    branch_names,
    init_params,
    loss_and_grad,
    predict,
)
from .pairs import SamplerConfig, pair_arrays, sample_pairs

log = logging.getLogger(__name__)

STAGE_NAMES = ("pretrain_reg", "add_rank", "add_attributes", "pretrain_content", "joint_finetune")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    anneal_factor: float = 0.1
    anneal_period_epochs: int | None = None
    weight_decay: float = 1e-5
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 10
    stage_epochs: dict | None = None
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    gating: str = "classifier"

    def validate(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.anneal_factor <= 1:
            raise ValueError("anneal_factor must lie in (0, 1]")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs >= 0")
        if self.anneal_period_epochs is not None and self.anneal_period_epochs <= 0:
            raise ValueError("anneal_period_epochs must be positive")
        self.loss.validate()

    def epochs_for(self, stage: str) -> int:
        return int((self.stage_epochs or {}).get(stage, self.epochs))

    def lr_at(self, epoch_in_stage: int, stage_epochs: int) -> float:
        period = self.anneal_period_epochs or max(1, stage_epochs // 3)
        return self.lr0 * self.anneal_factor ** (epoch_in_stage // period)


@dataclass(frozen=True)
class Stage:
    name: str
    variant: Variant
    trainable: tuple[str, ...]

    def frozen(self, dims: ModelDims) -> list[str]:
        keep = set(branch_names(dims, self.trainable))
        return [n for n in branch_names(dims, {"trunk1", "trunk2", "reg", "att", "att_fuse",
                                                "cls", "cont", "head"}) if n not in keep]


@dataclass(frozen=True)
class TrainStagePlan:
    variant: Variant
    fusion: FusionMode
    stages: tuple[Stage, ...]

    def __post_init__(self):
        for st in self.stages:
            if st.name == "joint_finetune" and "cls" in st.trainable:
                raise ValueError("joint_finetune must keep the content classifier frozen")

    @property
    def final(self) -> Stage:
        return self.stages[-1]


def make_plan(variant, fusion=FusionMode.WEIGHTED_SUM_FT) -> TrainStagePlan:
    """Stage sequence for a model variant."""
    variant, fusion = Variant(variant), FusionMode(fusion)
    trunk = ("trunk1", "trunk2")
    stages = [Stage("pretrain_reg", Variant.REG, trunk + ("reg",))]
    if variant.uses_rank:
        stages.append(Stage("add_rank", Variant.REG_RANK, trunk + ("reg",)))
    if variant.uses_attributes:
        eff = Variant.REG_RANK_ATT if variant.uses_rank else Variant.REG_ATT
        stages.append(Stage("add_attributes", eff, trunk + ("att", "att_fuse")))
    if variant.head == "content":
        stages.append(Stage("pretrain_content", variant, ("cls",)))
        if fusion is FusionMode.WEIGHTED_SUM_FT:
            joint = trunk + ("att", "cont", "head")
        else:
            joint = ("cont", "head")
        stages.append(Stage("joint_finetune", variant, joint))
    return TrainStagePlan(variant, fusion, tuple(stages))


def sgd_step(p: ModelParams, grads: dict, velocity: dict, cfg: TrainConfig, lr: float | None = None):
    """Momentum SGD with L2 weight decay; frozen tensors are left untouched.

    ``v <- momentum * v - lr * (g + weight_decay * theta)``; ``theta <- theta + v``.
    Updates ``p`` and ``velocity`` in place and returns them.
    """
    lr = cfg.lr0 if lr is None else lr
    for name, theta in p.tensors.items():
        if p.frozen.get(name):
            continue
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != {theta.shape}")
        v = cfg.momentum * velocity.get(name, 0.0) - lr * (g + cfg.weight_decay * theta)
        if not np.all(np.isfinite(v)):
            raise NonFiniteError(f"update {name}")
        velocity[name] = v
        theta += v
    return p, velocity


@dataclass
class TrainState:
    params: ModelParams
    velocity: dict
    stage_index: int = 0
    epoch_in_stage: int = 0
    global_epoch: int = 0
    best: ModelParams | None = None
    best_rho: float | None = None
    log: list = field(default_factory=list)

    def save(self, path) -> None:
        arrays = {f"p/{k}": v for k, v in self.params.tensors.items()}
        arrays.update({f"v/{k}": np.asarray(v) for k, v in self.velocity.items()})
        if self.best is not None:
            arrays.update({f"b/{k}": v for k, v in self.best.tensors.items()})
        meta = {"dims": asdict(self.params.dims), "frozen": self.params.frozen,
                "stage_index": self.stage_index, "epoch_in_stage": self.epoch_in_stage,
                "global_epoch": self.global_epoch, "best_rho": self.best_rho, "log": self.log}
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "TrainState":
        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            dims = ModelDims(**meta["dims"])
            group = lambda pre: {k[len(pre):]: z[k].copy() for k in z.files if k.startswith(pre)}
            params = ModelParams(dims, group("p/"), meta["frozen"])
            best_t = group("b/")
            best = ModelParams(dims, best_t) if best_t else None
            return cls(params, group("v/"), meta["stage_index"], meta["epoch_in_stage"],
                       meta["global_epoch"], best, meta["best_rho"], meta["log"])


@dataclass
class TrainResult:
    model: ScoringModel
    best: ScoringModel
    log: list
    state: TrainState
    finished: bool = True


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good: ModelParams, log_entries):
        super().__init__(message)
        self.last_good = last_good
        self.log = log_entries


class _Arrays:
    """Dense per-record arrays used to assemble batches."""

    def __init__(self, ds: Dataset, plan: TrainStagePlan, dims: ModelDims,
                 cm: ContentModel | None, categories: tuple, gating: str):
        self.X = ds.features()
        self.y = ds.scores()
        self.train_idx = np.array([ds.position(r.id) for r in ds.subset("train")], dtype=np.int64)
        self.val_idx = np.array([ds.position(r.id) for r in ds.subset("val")], dtype=np.int64)
        n = len(ds)
        self.att = np.zeros((n, 11))
        self.att_mask = np.zeros(n, bool)
        for i, r in enumerate(ds.records):
            if r.attributes is not None:
                self.att[i] = r.attributes
                self.att_mask[i] = True
        self.gate = None
        self.cls_labels = None
        if plan.variant.head != "content":
            return
        if plan.fusion is FusionMode.CONCAT_GT:
            index = {c: k for k, c in enumerate(categories)}
            labels = [r.content_label for r in ds.records]
            if any(c not in index for c in labels):
                raise ValueError("concat_gt fusion needs a known content label on every image")
            self.cls_labels = np.array([index[c] for c in labels])
            self.gate = np.eye(dims.K)[self.cls_labels]
        else:
            if cm is None:
                raise ValueError("content variants need a fitted content model")
            self.cls_labels = cm.assign(self.X)
            if gating == "kmeans" and plan.fusion in (FusionMode.WEIGHTED_SUM,
                                                      FusionMode.WEIGHTED_SUM_FT):
                self.gate = content_weights(cm, self.X)

    def batch(self, rows: np.ndarray, pairs=None, labels=None) -> Batch:
        return Batch(
            X=self.X[rows], y=self.y[rows], pairs=pairs, labels=labels,
            attributes=self.att[rows], att_mask=self.att_mask[rows],
            content_weights=None if self.gate is None else self.gate[rows],
            content_labels=None if self.cls_labels is None else self.cls_labels[rows],
        )


def _val_rho(p, arrays: _Arrays, stage: Stage, fusion) -> float | None:
    if arrays.val_idx.size < 2:
        return None
    rows = arrays.val_idx
    gate = None if arrays.gate is None else arrays.gate[rows]
    variant = stage.variant if stage.name != "pretrain_content" else Variant.REG
    if stage.variant.head != "content":
        gate = None
    try:
        s = predict(p, arrays.X[rows], variant, fusion, gate)
        return spearman_rho(s, arrays.y[rows])
    except UndefinedStatistic:
        return None


def _attach_attribute_head(p: ModelParams) -> None:
    """Start the attribute-fused head from the regression head's weights."""
    h2 = p.dims.h2
    t = p.tensors
    t["att_fuse.W"][:h2] = t["reg.W"]
    t["att_fuse.W"][h2:] = 0.0
    t["att_fuse.b"][:] = t["reg.b"]


def train(ds: Dataset, pairs, plan: TrainStagePlan, cfg: TrainConfig, *,
          dims: ModelDims | None = None, params: ModelParams | None = None,
          content_model: ContentModel | None = None, sampler: SamplerConfig | None = None,
          state: TrainState | None = None, stop_after_epochs: int | None = None) -> TrainResult:
    """Run the staged plan and return final and best-on-validation scorers.

    ``pairs`` may be None for plans without a ranking term. Per-epoch pair
    resampling happens when ``sampler.resample_per_epoch`` is set. Passing a
    saved ``state`` resumes exactly where it stopped; ``stop_after_epochs``
    halts after that many epochs in this call.
    """
    cfg.validate()
    if state is None:
        if params is None:
            if dims is None:
                raise ValueError("need dims or initial params")
            params = init_params(dims, cfg.seed)
        state = TrainState(params.copy(), {})
    p = state.params
    dims = p.dims
    categories = tuple(ds.content_labels()) if plan.fusion is FusionMode.CONCAT_GT else ()
    if plan.variant.head == "content":
        K = len(categories) if categories else (content_model.K if content_model else None)
        if K is not None and K != dims.K:
            raise ValueError(f"model has K={dims.K} content branches but {K} content groups")
    arrays = _Arrays(ds, plan, dims, content_model, categories, cfg.gating)
    resample = sampler is not None and sampler.resample_per_epoch
    pair_idx = labels = None
    if pairs is not None and len(pairs):
        pair_idx, labels = pair_arrays(ds, pairs)
    needs_rank = any(st.variant.uses_rank and st.name != "pretrain_content" for st in plan.stages)
    if needs_rank and cfg.loss.omega_r > 0 and pair_idx is None and not resample:
        raise ValueError("ranking stages need a nonempty pair list")

    epochs_run = 0
    while state.stage_index < len(plan.stages):
        stage = plan.stages[state.stage_index]
        n_epochs = cfg.epochs_for(stage.name)
        if state.epoch_in_stage == 0:
            if stage.name == "add_attributes":
                _attach_attribute_head(p)
            p.freeze_only(stage.frozen(dims))
            state.velocity = {}
        spec = (LossSpec.content_pretraining() if stage.name == "pretrain_content"
                else LossSpec.for_variant(stage.variant, cfg.loss))
        is_final = state.stage_index == len(plan.stages) - 1
        while state.epoch_in_stage < n_epochs:
            if stop_after_epochs is not None and epochs_run >= stop_after_epochs:
                return _result(p, state, plan, content_model, categories, cfg, finished=False)
            e = state.epoch_in_stage
            lr = cfg.lr_at(e, n_epochs)
            rng = substream(cfg.seed, "train.shuffle", state.stage_index, e)
            if resample:
                pair_idx, labels = pair_arrays(ds, sample_pairs(ds, sampler, epoch=state.global_epoch))
            snapshot = p.copy()
            frozen_before = {n: p.tensors[n].copy() for n in p.names() if p.frozen[n]}
            sums: dict[str, float] = {}
            n_steps = 0
            try:
                for batch in _batches(arrays, stage, pair_idx, labels, cfg.batch_size, rng):
                    total, comps, grads = loss_and_grad(p, batch, stage.variant, plan.fusion, spec)
                    sgd_step(p, grads, state.velocity, cfg, lr)
                    n_steps += 1
                    sums["loss_total"] = sums.get("loss_total", 0.0) + total
                    for k, v in asdict(comps).items():
                        if v is not None:
                            sums[f"loss_{k}"] = sums.get(f"loss_{k}", 0.0) + v
            except NonFiniteError as exc:
                raise TrainingDiverged(f"training diverged in {stage.name} epoch {e}: {exc}",
                                       snapshot, state.log) from exc
            frozen_delta = max((float(np.max(np.abs(p.tensors[n] - v)))
                                for n, v in frozen_before.items()), default=0.0)
            rho = _val_rho(p, arrays, stage, plan.fusion)
            entry = {"epoch": state.global_epoch, "stage": stage.name}
            for key in ("loss_total", "loss_reg", "loss_rank", "loss_att", "loss_content"):
                entry[key] = sums[key] / n_steps if key in sums and n_steps else None
            entry.update({"val_rho": rho, "lr": lr, "frozen_max_update": frozen_delta})
            state.log.append(entry)
            log.debug("epoch %s", entry)
            if is_final and stage.name != "pretrain_content" and rho is not None and (
                    state.best_rho is None or rho > state.best_rho):
                state.best_rho, state.best = rho, p.copy()
            state.epoch_in_stage += 1
            state.global_epoch += 1
            epochs_run += 1
        state.stage_index += 1
        state.epoch_in_stage = 0
    return _result(p, state, plan, content_model, categories, cfg, finished=True)


def _result(p, state, plan, cm, categories, cfg, finished) -> TrainResult:
    final = ScoringModel(p.copy(), plan.variant, plan.fusion, cm, categories, cfg.gating)
    best_p = state.best.copy() if state.best is not None else p.copy()
    best = ScoringModel(best_p, plan.variant, plan.fusion, cm, categories, cfg.gating)
    return TrainResult(final, best, list(state.log), state, finished)


def _batches(arrays: _Arrays, stage: Stage, pair_idx, labels, batch_size: int, rng):
    use_pairs = stage.name != "pretrain_content" and pair_idx is not None
    if use_pairs:
        order = rng.permutation(len(pair_idx))
        for s in range(0, len(order), batch_size):
            chunk = pair_idx[order[s:s + batch_size]]
            rows, inv = np.unique(chunk.ravel(), return_inverse=True)
            yield arrays.batch(rows, inv.reshape(-1, 2), labels[order[s:s + batch_size]])
    else:
        order = arrays.train_idx[rng.permutation(arrays.train_idx.size)]
        step = 2 * batch_size
        for s in range(0, len(order), step):
            yield arrays.batch(order[s:s + step])
