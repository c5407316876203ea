import csv
import hashlib
import json

import pytest

from aesrank.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main, parse_config

SMALL = """\
[global]
seed = 3

[synthetic]
n_images = 120
rater_bias_sd = 0.1
rating_noise_sd = 0.05

[split]
train = 0.7
val = 0.15
test = 0.15

[sampler]
budget = 300

[model]
h1 = 8
h2 = 8
hc = 4

[train]
lr0 = 0.01
epochs = 2

[cluster]
K = 3

[consistency]
n_perm = 1000
"""


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(SMALL)
    return path


@pytest.fixture
def data(tmp_path, cfg):
    out = tmp_path / "data.jsonl"
    assert main(["generate", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    return out


def test_generate_writes_lines_and_manifest(data, cfg):
    assert len(data.read_text().splitlines()) == 120
    manifest = json.loads(data.with_name("data.jsonl.manifest.json").read_text())
    assert manifest["seed"] == 3
    assert manifest["config_hash"] == parse_config(SMALL).digest()
    assert manifest["outputs"] == {str(data): sha(data)}


def test_generate_rerun_same_hash(data, cfg, tmp_path):
    again = tmp_path / "again.jsonl"
    main(["generate", "--config", str(cfg), "--out", str(again)])
    assert sha(again) == sha(data)


def test_missing_key_names_key_and_section(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text(SMALL.replace("seed = 3", ""))
    assert main(["generate", "--config", str(path), "--out", str(tmp_path / "x.jsonl")]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "seed" in err and "[global]" in err


@pytest.mark.parametrize("text, needle", [
    (SMALL + "\n[bogus]\nx = 1\n", "bogus"),
    (SMALL.replace("budget = 300", "budjet = 300"), "budjet"),
    (SMALL.replace("epochs = 2", "epochs = two"), "epochs"),
    (SMALL.replace("train = 0.7", "train = 0.9"), "fraction"),
])
def test_config_errors_exit_2(tmp_path, capsys, text, needle):
    path = tmp_path / "bad.cfg"
    path.write_text(text)
    assert main(["generate", "--config", str(path), "--out", str(tmp_path / "x.jsonl")]) == EXIT_CONFIG
    assert needle in capsys.readouterr().err


def test_missing_dataset_is_config_error(cfg, tmp_path):
    code = main(["cluster", "--config", str(cfg), "--data", str(tmp_path / "none.jsonl"),
                 "--out", str(tmp_path / "c.json")])
    assert code == EXIT_CONFIG


def test_bad_argument_exit_2(cfg):
    with pytest.raises(SystemExit) as info:
        main(["train", "--config", str(cfg), "--data", "x", "--out-dir", "y", "--variant", "nope"])
    assert info.value.code == EXIT_CONFIG


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit):
        main(["train", "--help"])
    out = capsys.readouterr().out
    assert "[global]" in out and "seed" in out and "REQUIRED" in out
    assert "omega_r = 1.0" in out


def test_train_reg_then_eval(data, cfg, tmp_path):
    run = tmp_path / "reg"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out-dir", str(run),
                 "--variant", "reg"]) == EXIT_OK
    for name in ("model.ckpt", "train_log.jsonl", "val_report.json", "manifest.json"):
        assert (run / name).exists()
    out = tmp_path / "eval.json"
    assert main(["eval", "--config", str(cfg), "--data", str(data), "--checkpoint",
                 str(run / "model.ckpt"), "--out", str(out)]) == EXIT_OK
    report = json.loads(out.read_text())
    assert isinstance(report["rho"], float)
    assert report["split"] == "test"


def test_eval_ensemble(data, cfg, tmp_path):
    paths = []
    for seed in (1, 2):
        c = tmp_path / f"s{seed}.cfg"
        c.write_text(SMALL.replace("seed = 3", f"seed = {seed}"))
        run = tmp_path / f"run{seed}"
        main(["train", "--config", str(c), "--data", str(data), "--out-dir", str(run), "--variant", "reg"])
        paths.append(str(run / "model.ckpt"))
    out = tmp_path / "ens.json"
    assert main(["eval", "--config", str(cfg), "--data", str(data), "--checkpoint", *paths,
                 "--out", str(out)]) == EXIT_OK
    assert json.loads(out.read_text())["checkpoints"] == paths


def test_full_variant_classifier_frozen(data, cfg, tmp_path):
    run = tmp_path / "full"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out-dir", str(run),
                 "--variant", "full", "--fusion", "weighted_sum_ft"]) == EXIT_OK
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["classifier_frozen_in_final_stage"] is True
    log = [json.loads(line) for line in (run / "train_log.jsonl").read_text().splitlines()]
    joint = [e for e in log if e["stage"] == "joint_finetune"]
    assert joint and all(e["frozen_max_update"] == 0.0 for e in joint)


def test_cluster_and_pairs_feed_train(data, cfg, tmp_path):
    cm, pairs = tmp_path / "cm.json", tmp_path / "pairs.csv"
    assert main(["cluster", "--config", str(cfg), "--data", str(data), "--out", str(cm)]) == EXIT_OK
    assert main(["sample-pairs", "--config", str(cfg), "--data", str(data), "--out", str(pairs),
                 "--strategy", "within"]) == EXIT_OK
    assert len(pairs.read_text().splitlines()) == 301
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out-dir", str(run),
                 "--variant", "reg_rank_cont", "--fusion", "weighted_sum", "--pairs", str(pairs),
                 "--clusters", str(cm)]) == EXIT_OK
    inputs = json.loads((run / "manifest.json").read_text())["inputs"]
    assert len(inputs) == 3


def test_sweep_omega_r_four_rows(data, cfg, tmp_path):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--config", str(cfg), "--data", str(data), "--param", "omega_r",
                 "--values", "0,0.1,1,2", "--out", str(out)]) == EXIT_OK
    rows = list(csv.DictReader(out.open()))
    assert [r["value"] for r in rows] == ["0.0", "0.1", "1.0", "2.0"]
    assert all(r["status"] == "ok" for r in rows)


def test_sweep_records_failures_and_continues(data, cfg, tmp_path):
    out = tmp_path / "sweep.csv"
    code = main(["sweep", "--config", str(cfg), "--data", str(data), "--param", "budget",
                 "--values=-5,200", "--out", str(out)])
    rows = list(csv.DictReader(out.open()))
    assert code == EXIT_OK and len(rows) == 2
    assert rows[0]["status"].startswith("failed") and rows[1]["status"] == "ok"


def test_sweep_empty_values(data, cfg, tmp_path):
    code = main(["sweep", "--config", str(cfg), "--data", str(data), "--param", "K",
                 "--values", " , ", "--out", str(tmp_path / "s.csv")])
    assert code == EXIT_CONFIG


def test_consistency_noise_free_and_q_echo(tmp_path):
    path = tmp_path / "nf.cfg"
    path.write_text("[global]\nseed = 0\n[synthetic]\nn_images = 100\n[consistency]\nn_perm = 1000\n")
    data = tmp_path / "nf.jsonl"
    main(["generate", "--config", str(path), "--out", str(data)])
    out = tmp_path / "cons.json"
    assert main(["consistency", "--config", str(path), "--data", str(data), "--out", str(out),
                 "--csv", str(tmp_path / "rows.csv")]) == EXIT_OK
    rep = json.loads(out.read_text())
    assert rep["Q"] == 0.05
    assert rep["fraction_significant_W"] == 1.0
    assert main(["consistency", "--config", str(path), "--data", str(data), "--out", str(out),
                 "--Q", "0.1"]) == EXIT_OK
    assert json.loads(out.read_text())["Q"] == 0.1


def test_runtime_failure_exit_3(data, tmp_path):
    path = tmp_path / "div.cfg"
    path.write_text(SMALL.replace("lr0 = 0.01", "lr0 = 1e6"))
    code = main(["train", "--config", str(path), "--data", str(data), "--out-dir", str(tmp_path / "r")])
    assert code == EXIT_RUNTIME
