import json

import numpy as np
import pytest

from aesrank.data import Dataset, SyntheticConfig, generate_synthetic, make_record, split_dataset


def tiny_dataset(spec, dim=2, split="train"):
    """Dataset from ``{id: {rater: score}}``; features are arbitrary but distinct."""
    recs = []
    for n, (image, scores) in enumerate(spec.items()):
        recs.append(make_record(image, np.full(dim, float(n)), ratings=list(scores.items()),
                                split=split))
    return Dataset(tuple(recs), dim)


def score_dataset(scores, dim=2, split="train"):
    """Dataset with explicit mean scores and no per-rater ratings."""
    recs = [make_record(i, np.full(dim, float(n)), score=s, split=split)
            for n, (i, s) in enumerate(scores.items())]
    return Dataset(tuple(recs), dim)


@pytest.fixture
def small_synth():
    cfg = SyntheticConfig(n_images=200, n_raters=10, rater_bias_sd=0.1, rating_noise_sd=0.05,
                          feature_dim=6, n_content_clusters=3, seed=1)
    return split_dataset(generate_synthetic(cfg), (0.7, 0.1, 0.2), seed=1)


@pytest.fixture
def write_jsonl(tmp_path):
    def _write(rows, name="d.jsonl"):
        path = tmp_path / name
        path.write_text("".join(r if isinstance(r, str) else json.dumps(r) + "\n" for r in rows))
        return path
    return _write


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
