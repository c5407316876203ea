"""Command-line entry point: ``aesrank <command> --config run.cfg ...``.

Every command reads a sectioned key=value config, validates it before doing
any work and writes a manifest next to its outputs. Exit codes: 0 success,
2 configuration or usage error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .checkpoint import ScoringModel, load_checkpoint, save_checkpoint
from .cluster import ContentModel, kmeans_fit
from .consistency import batches_from_dataset, consistency_report
from .data import Dataset, SyntheticConfig, generate_synthetic, load_dataset, save_dataset, split_dataset
from .losses import LossConfig
from .metrics import binary_labels, evaluate, select_threshold
from .model import FusionMode, ModelDims, Variant
from .pairs import SamplerConfig, read_pairs_csv, sample_pairs, write_pairs_csv
from .train import TrainConfig, make_plan, train

log = logging.getLogger("aesrank")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
REQUIRED = object()


class ConfigError(Exception):
    """Bad or missing configuration; maps to exit code 2."""


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (parser, default, help)
SCHEMA: dict[str, dict[str, tuple]] = {
    "global": {
        "seed": (int, REQUIRED, "global seed; every module draws a named substream from it"),
    },
    "synthetic": {
        "n_images": (int, 1000, "number of images"),
        "n_raters": (int, 20, "size of the rater pool"),
        "ratings_per_image": (int, 5, "distinct raters per image"),
        "n_content_clusters": (int, 4, "Gaussian-mixture components in feature space"),
        "feature_dim": (int, 16, "feature dimension d"),
        "rater_bias_sd": (float, 0.0, "sd of the persistent per-rater offset"),
        "rater_scale_sd": (float, 0.0, "sd of the log per-rater scale"),
        "rating_noise_sd": (float, 0.0, "sd of per-rating noise"),
        "images_per_batch": (int, 10, "images per annotation batch"),
        "quality_sd": (float, 0.18, "sd of latent quality around 0.5"),
        "cluster_separation": (float, 3.0, "distance scale of cluster means"),
        "signal_scale": (float, 4.0, "feature displacement per unit of quality"),
        "feature_noise_sd": (float, 0.05, "isotropic feature noise"),
        "content_direction_mix": (float, 0.0, "0 shares one quality direction, 1 gives each cluster its own"),
        "rating_levels": (int, 0, "0 for continuous ratings, else round onto this many levels"),
    },
    "split": {
        "train": (float, 0.85, "train fraction"),
        "val": (float, 0.05, "validation fraction"),
        "test": (float, 0.10, "test fraction"),
    },
    "sampler": {
        "strategy": (str, "mixed", "within | cross | mixed"),
        "budget": (int, 10000, "number of pairs"),
        "cross_min_gap": (float, 0.1, "minimum mean-score gap for cross-rater pairs"),
        "mixed_within_fraction": (float, 0.5, "share of within-rater pairs in mixed mode"),
        "resample_per_epoch": (_bool, False, "draw fresh pairs every epoch"),
    },
    "model": {
        "variant": (str, "reg_rank", "reg | reg_rank | reg_att | reg_rank_att | reg_rank_cont | full"),
        "fusion": (str, "weighted_sum_ft", "concat_gt | concat_pred | average | weighted_sum | weighted_sum_ft"),
        "h1": (int, 32, "first trunk width"),
        "h2": (int, 32, "second trunk width"),
        "hc": (int, 8, "content branch width"),
    },
    "loss": {
        "omega_r": (float, 1.0, "ranking loss weight"),
        "omega_a": (float, 0.1, "attribute loss weight"),
        "margin": (float, 0.02, "hinge margin"),
        "attribute_mode": (str, "euclidean_11dim", "euclidean_11dim | cross_entropy_binary"),
    },
    "train": {
        "lr0": (float, 1e-4, "initial learning rate"),
        "anneal_factor": (float, 0.1, "learning-rate multiplier per anneal period"),
        "anneal_period_epochs": (int, 0, "epochs per anneal period; 0 means a third of each stage"),
        "weight_decay": (float, 1e-5, "L2 weight decay"),
        "momentum": (float, 0.9, "SGD momentum"),
        "batch_size": (int, 32, "pairs per step (images per step is twice this without pairs)"),
        "epochs": (int, 10, "epochs per stage"),
        "gating": (str, "classifier", "classifier | kmeans source of content weights"),
        "checkpoint": (str, "final", "final | best (best validation rho in the last stage)"),
    },
    "cluster": {
        "K": (int, 10, "number of content clusters"),
        "beta": (float, 10.0, "softmax sharpness on centroid distances"),
        "max_iter": (int, 300, "Lloyd iteration cap"),
        "tol": (float, 1e-6, "relative inertia change that stops Lloyd"),
        "n_init": (int, 10, "k-means++ restarts; the lowest final inertia is kept"),
    },
    "eval": {
        "split": (str, "test", "split to report on"),
        "label_threshold": (float, 0.5, "score above which an image counts as good"),
    },
    "consistency": {
        "Q": (float, 0.05, "FDR level for Benjamini-Hochberg"),
        "n_perm": (int, 10000, "permutations for the W test"),
        "batch_size": (int, 10, "images per batch when grouping by rater set"),
        "exact_limit": (int, 10, "largest n using the exact Spearman null"),
    },
}


def schema_help() -> str:
    lines = ["config file (INI style, [section] then key = value); defaults:"]
    for section, keys in SCHEMA.items():
        lines.append(f"  [{section}]")
        for key, (_, default, text) in keys.items():
            shown = "REQUIRED" if default is REQUIRED else default
            lines.append(f"    {key} = {shown}    # {text}")
    return "\n".join(lines)


@dataclass
class RunConfig:
    values: dict[str, dict]

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def seed(self) -> int:
        return self.values["global"]["seed"]

    def snapshot(self) -> dict:
        return json.loads(json.dumps(self.values, sort_keys=True))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.values, sort_keys=True).encode()).hexdigest()

    def synthetic(self) -> SyntheticConfig:
        return SyntheticConfig(seed=self.seed, **self.values["synthetic"])

    def fractions(self) -> tuple[float, float, float]:
        s = self.values["split"]
        return s["train"], s["val"], s["test"]

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(seed=self.seed, **self.values["sampler"])

    def loss(self) -> LossConfig:
        return LossConfig(**self.values["loss"])

    def train(self) -> TrainConfig:
        t = dict(self.values["train"])
        t.pop("checkpoint")
        t["anneal_period_epochs"] = t["anneal_period_epochs"] or None
        return TrainConfig(loss=self.loss(), seed=self.seed, **t)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key in cp[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key '{key}' in section [{section}]")
    values: dict[str, dict] = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (conv, default, _) in keys.items():
            if cp.has_option(section, key):
                raw = cp.get(section, key)
                try:
                    values[section][key] = conv(raw)
                except ValueError:
                    raise ConfigError(f"{source}: bad value {raw!r} for key '{key}' "
                                      f"in section [{section}]") from None
            elif default is REQUIRED:
                raise ConfigError(f"{source}: missing required key '{key}' in section [{section}]")
            else:
                values[section][key] = default
    cfg = RunConfig(values)
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    try:
        cfg.synthetic().validate()
        cfg.sampler().validate()
        cfg.train().validate()
        Variant(cfg["model"]["variant"])
        FusionMode(cfg["model"]["fusion"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg["train"]["gating"] not in ("classifier", "kmeans"):
        raise ConfigError("[train] gating must be classifier or kmeans")
    if cfg["train"]["checkpoint"] not in ("final", "best"):
        raise ConfigError("[train] checkpoint must be final or best")
    cl = cfg["cluster"]
    if cl["K"] < 1 or cl["beta"] <= 0 or cl["n_init"] < 1:
        raise ConfigError("[cluster] K and n_init must be >= 1 and beta > 0")
    if cfg["eval"]["split"] not in ("train", "val", "test"):
        raise ConfigError("[eval] split must be train, val or test")
    c = cfg["consistency"]
    if not 0 < c["Q"] < 1 or c["n_perm"] < 1000 or c["batch_size"] < 2:
        raise ConfigError("[consistency] needs 0 < Q < 1, n_perm >= 1000, batch_size >= 2")
    if abs(sum(cfg.fractions()) - 1.0) > 1e-9 or min(cfg.fractions()) < 0:
        raise ConfigError("[split] fractions must be nonnegative and sum to 1")


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"), str(p))


def _override(cfg: RunConfig, section: str, key: str, value) -> None:
    if value is None:
        return
    conv = SCHEMA[section][key][0]
    try:
        cfg.values[section][key] = conv(value) if isinstance(value, str) else value
    except ValueError:
        raise ConfigError(f"bad value {value!r} for key '{key}' in section [{section}]") from None
    validate_config(cfg)


# outputs ---------------------------------------------------------------

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def write_manifest(path, command: str, cfg: RunConfig, inputs=(), outputs=(), extra=None) -> None:
    """Config snapshot, seed, versions and content hashes; no timestamps."""
    manifest = {
        "command": command,
        "seed": cfg.seed,
        "config": cfg.snapshot(),
        "config_hash": cfg.digest(),
        "versions": {"aesrank": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
    }
    if extra:
        manifest.update(extra)
    _write_json(manifest, path)


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _outdir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _manifest_for(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


# commands --------------------------------------------------------------

def cmd_generate(args, cfg: RunConfig) -> int:
    ds = split_dataset(generate_synthetic(cfg.synthetic()), cfg.fractions(), cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    write_manifest(_manifest_for(out), "generate", cfg, outputs=[out],
                   extra={"n_images": len(ds)})
    return EXIT_OK


def _load_data(args) -> tuple[Path, Dataset]:
    path = _existing(args.data, "dataset")
    return path, load_dataset(path)


def _fit_content(cfg: RunConfig, ds: Dataset, K: int | None = None) -> ContentModel:
    c = cfg["cluster"]
    return kmeans_fit(ds.features("train"), K or c["K"], seed=cfg.seed, max_iter=c["max_iter"],
                      tol=c["tol"], beta=c["beta"], n_init=c["n_init"])


def cmd_cluster(args, cfg: RunConfig) -> int:
    data_path, ds = _load_data(args)
    cm = _fit_content(cfg, ds)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cm.save(out)
    write_manifest(_manifest_for(out), "cluster", cfg, inputs=[data_path], outputs=[out],
                   extra={"n_iter": cm.n_iter, "inertia": cm.inertia_history[-1]})
    return EXIT_OK


def cmd_sample_pairs(args, cfg: RunConfig) -> int:
    _override(cfg, "sampler", "strategy", args.strategy)
    data_path, ds = _load_data(args)
    pairs = sample_pairs(ds, cfg.sampler())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pairs_csv(pairs, out)
    write_manifest(_manifest_for(out), "sample-pairs", cfg, inputs=[data_path], outputs=[out],
                   extra={"n_pairs": len(pairs)})
    return EXIT_OK


@dataclass
class TrainOutcome:
    model: ScoringModel
    log: list
    frozen_ok: bool | None


def run_training(cfg: RunConfig, ds: Dataset, pairs=None, content_model=None) -> TrainOutcome:
    """Sample pairs and fit clusters as needed, then train one model."""
    variant = Variant(cfg["model"]["variant"])
    fusion = FusionMode(cfg["model"]["fusion"])
    tc = cfg.train()
    if pairs is None and variant.uses_rank:
        pairs = sample_pairs(ds, cfg.sampler())
    K = cfg["cluster"]["K"]
    if variant.head == "content":
        if fusion is FusionMode.CONCAT_GT:
            K = len(ds.content_labels())
        else:
            if content_model is None:
                content_model = _fit_content(cfg, ds)
            K = content_model.K
    m = cfg["model"]
    dims = ModelDims(ds.feature_dim, m["h1"], m["h2"], m["hc"], K)
    res = train(ds, pairs, make_plan(variant, fusion), tc, dims=dims,
                content_model=content_model, sampler=cfg.sampler())
    model = res.best if cfg["train"]["checkpoint"] == "best" else res.model
    frozen_ok = None
    joint = [e for e in res.log if e["stage"] == "joint_finetune"]
    if joint:
        frozen_ok = all(e["frozen_max_update"] == 0.0 for e in joint)
    return TrainOutcome(model, res.log, frozen_ok)


def cmd_train(args, cfg: RunConfig) -> int:
    _override(cfg, "model", "variant", args.variant)
    _override(cfg, "model", "fusion", args.fusion)
    _override(cfg, "sampler", "strategy", args.sampler)
    data_path, ds = _load_data(args)
    inputs = [data_path]
    pairs = cm = None
    if args.pairs:
        inputs.append(_existing(args.pairs, "pair file"))
        pairs = read_pairs_csv(args.pairs)
    if args.clusters:
        inputs.append(_existing(args.clusters, "cluster model"))
        cm = ContentModel.load(args.clusters)
    out = _outdir(args.out_dir)
    outcome = run_training(cfg, ds, pairs, cm)
    ckpt, log_path, val_path = out / "model.ckpt", out / "train_log.jsonl", out / "val_report.json"
    save_checkpoint(outcome.model, ckpt)
    with open(log_path, "w", encoding="utf-8") as fh:
        for entry in outcome.log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    outputs = [ckpt, log_path]
    if ds.subset("val"):
        _write_json(evaluate(outcome.model, None, ds, "val").to_json(), val_path)
        outputs.append(val_path)
    write_manifest(out / "manifest.json", "train", cfg, inputs=inputs, outputs=outputs,
                   extra={"classifier_frozen_in_final_stage": outcome.frozen_ok})
    if outcome.frozen_ok is False:
        log.error("content classifier moved during joint fine-tuning")
        return EXIT_RUNTIME
    return EXIT_OK


class Ensemble:
    """Average of several scorers' outputs."""

    def __init__(self, models):
        self.models = list(models)

    def score_dataset(self, ds, split=None) -> np.ndarray:
        return np.mean([m.score_dataset(ds, split) for m in self.models], axis=0)


def cmd_eval(args, cfg: RunConfig) -> int:
    _override(cfg, "eval", "split", args.split)
    data_path, ds = _load_data(args)
    paths = [_existing(p, "checkpoint") for p in args.checkpoint]
    models = [load_checkpoint(p) for p in paths]
    scorer = models[0] if len(models) == 1 else Ensemble(models)
    e = cfg["eval"]
    tau = None
    val = ds.subset("val")
    if val:
        labels = binary_labels(ds.scores("val"), e["label_threshold"])
        if labels.min() != labels.max():
            tau = select_threshold(scorer.score_dataset(ds, "val"), labels)
    report = evaluate(scorer, None, ds, e["split"], tau, e["label_threshold"]).to_json()
    report["checkpoints"] = [str(p) for p in paths]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(report, out)
    write_manifest(_manifest_for(out), "eval", cfg, inputs=[data_path, *paths], outputs=[out])
    return EXIT_OK


def cmd_consistency(args, cfg: RunConfig) -> int:
    _override(cfg, "consistency", "Q", args.Q)
    data_path, ds = _load_data(args)
    c = cfg["consistency"]
    batches, invalid = batches_from_dataset(ds, c["batch_size"])
    if not batches:
        raise RuntimeError("no rater batches could be formed from the dataset")
    report = consistency_report(batches, c["Q"], c["n_perm"], cfg.seed, c["exact_limit"])
    report.n_skipped += invalid
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(report.to_json(), out)
    outputs = [out]
    if args.csv:
        report.write_csv(args.csv)
        outputs.append(Path(args.csv))
    write_manifest(_manifest_for(out), "consistency", cfg, inputs=[data_path], outputs=outputs)
    return EXIT_OK


SWEEP_KEYS = {"omega_r": ("loss", "omega_r"), "K": ("cluster", "K"),
              "margin": ("loss", "margin"), "budget": ("sampler", "budget")}


def cmd_sweep(args, cfg: RunConfig) -> int:
    section, key = SWEEP_KEYS[args.param]
    raw = [v.strip() for v in (args.values or "").split(",") if v.strip()]
    if not raw:
        raise ConfigError("sweep needs a nonempty --values list")
    conv = SCHEMA[section][key][0]
    try:
        values = [conv(v) for v in raw]
    except ValueError:
        raise ConfigError(f"bad --values for {args.param}: {args.values!r}") from None
    data_path, ds = _load_data(args)
    split = cfg["eval"]["split"]
    rows = []
    for v in values:
        run = RunConfig(cfg.snapshot())
        try:
            _override(run, section, key, v)
            rho = evaluate(run_training(run, ds).model, None, ds, split, per_rater=False).rho
            rows.append((v, rho, "ok" if rho is not None else "rho undefined"))
        except ConfigError as exc:
            rows.append((v, None, f"failed: {exc}"))
        except Exception as exc:  # one bad value must not end the sweep
            log.warning("sweep value %s failed: %s", v, exc)
            rows.append((v, None, f"failed: {type(exc).__name__}: {exc}"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["value", "rho", "status"])
        for v, rho, status in rows:
            w.writerow([v, "" if rho is None else repr(rho), status])
    write_manifest(_manifest_for(out), "sweep", cfg, inputs=[data_path], outputs=[out],
                   extra={"param": args.param, "values": values})
    return EXIT_OK if any(r[2] == "ok" for r in rows) else EXIT_RUNTIME


# argument parsing ------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="aesrank", description=__doc__, epilog=schema_help(), formatter_class=fmt)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=schema_help(),
                           formatter_class=fmt)
        p.add_argument("--config", required=True, help="run config file")
        p.set_defaults(func=func)
        return p

    p = add("generate", cmd_generate, "write a synthetic JSONL dataset with train/val/test splits")
    p.add_argument("--out", required=True)

    p = add("cluster", cmd_cluster, "fit k-means content clusters on training features")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = add("sample-pairs", cmd_sample_pairs, "dump ranking pairs as CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", choices=("within", "cross", "mixed"))

    p = add("train", cmd_train, "train one model; writes checkpoint, log and validation report")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--fusion", choices=[f.value for f in FusionMode])
    p.add_argument("--sampler", choices=("within", "cross", "mixed"))
    p.add_argument("--pairs", help="pair CSV to use instead of sampling")
    p.add_argument("--clusters", help="content model JSON to use instead of fitting one")

    p = add("eval", cmd_eval, "score a split; several checkpoints are averaged as an ensemble")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, nargs="+")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)

    p = add("consistency", cmd_consistency, "rater agreement report (Kendall's W, Spearman, BH)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", help="optional per-batch CSV")
    p.add_argument("--Q", type=float, help="FDR level (default from config, 0.05)")

    p = add("sweep", cmd_sweep, "train and evaluate once per value of one hyperparameter")
    p.add_argument("--data", required=True)
    p.add_argument("--param", required=True, choices=sorted(SWEEP_KEYS))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
