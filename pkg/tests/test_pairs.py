import pytest

from aesrank.data import SyntheticConfig, generate_synthetic
from aesrank.pairs import (
    EmptyPoolError,
    SamplerConfig,
    pair_arrays,
    pool_sizes,
    read_pairs_csv,
    sample_pairs,
    write_pairs_csv,
)
from conftest import score_dataset, tiny_dataset


def _triples(pairs):
    return {(p.id_i, p.id_j, p.label) for p in pairs}


def _canon(pairs):
    """Orientation-free view: (higher, lower) image ids."""
    out = set()
    for p in pairs:
        out.add((p.id_i, p.id_j) if p.label == 1 else (p.id_j, p.id_i))
    return out


def test_within_tie_skip():
    ds = tiny_dataset({"a": {"r": 0.8}, "b": {"r": 0.8}, "c": {"r": 0.2}})
    pairs = sample_pairs(ds, SamplerConfig(strategy="within", budget=10))
    assert _canon(pairs) == {("a", "c"), ("b", "c")}
    assert all(p.provenance == "within:r" and p.rater == "r" for p in pairs)


def test_cross_gap_enumeration():
    ds = score_dataset({"a": 0.9, "b": 0.75, "c": 0.4})
    pairs = sample_pairs(ds, SamplerConfig(strategy="cross", budget=10, cross_min_gap=0.2))
    assert _canon(pairs) == {("a", "c"), ("b", "c")}
    assert all(p.provenance == "cross" and p.rater is None for p in pairs)


def test_cross_gap_is_inclusive():
    ds = score_dataset({"a": 0.5, "b": 0.25})
    pairs = sample_pairs(ds, SamplerConfig(strategy="cross", budget=5, cross_min_gap=0.25))
    assert _canon(pairs) == {("a", "b")}


def test_mixed_budget_split():
    ds = generate_synthetic(SyntheticConfig(n_images=300, rater_bias_sd=0.1,
                                            rating_noise_sd=0.1, seed=0))
    pairs = sample_pairs(ds, SamplerConfig(strategy="mixed", budget=100,
                                           mixed_within_fraction=0.5, seed=3))
    kinds = [p.provenance == "cross" for p in pairs]
    assert len(pairs) == 100 and sum(kinds) == 50


def test_exact_budget_and_no_duplicates():
    ds = generate_synthetic(SyntheticConfig(n_images=400, rater_bias_sd=0.1,
                                            rating_noise_sd=0.1, seed=2))
    for strategy in ("within", "cross", "mixed"):
        pairs = sample_pairs(ds, SamplerConfig(strategy=strategy, budget=3000, seed=1))
        assert len(pairs) == 3000
        keys = [frozenset((p.id_i, p.id_j)) for p in pairs]
        assert len(set(keys)) == len(keys)


def test_small_pool_returns_whole_pool():
    ds = score_dataset({"a": 0.9, "b": 0.5, "c": 0.1})
    pairs = sample_pairs(ds, SamplerConfig(strategy="cross", budget=50, cross_min_gap=0.0))
    assert len(pairs) == 3


def test_pair_invariants():
    ds = generate_synthetic(SyntheticConfig(n_images=300, rater_bias_sd=0.15,
                                            rating_noise_sd=0.1, seed=5))
    pairs = sample_pairs(ds, SamplerConfig(strategy="mixed", budget=2000, seed=7,
                                           cross_min_gap=0.1))
    scores = {r: dict(items) for r, items in ds.rater_index.items()}
    for p in pairs:
        assert p.id_i != p.id_j and p.label in (1, -1)
        hi, lo = (p.id_i, p.id_j) if p.label == 1 else (p.id_j, p.id_i)
        if p.provenance == "cross":
            assert abs(ds[hi].mean_score - ds[lo].mean_score) >= 0.1 - 1e-12
            assert ds[hi].mean_score >= ds[lo].mean_score
        else:
            own = scores[p.rater]
            assert own[hi] > own[lo]


def test_determinism_and_seed_dependence():
    ds = generate_synthetic(SyntheticConfig(n_images=200, rater_bias_sd=0.1, seed=1))
    cfg = SamplerConfig(strategy="mixed", budget=500, seed=4)
    assert sample_pairs(ds, cfg) == sample_pairs(ds, cfg)
    assert sample_pairs(ds, SamplerConfig(strategy="mixed", budget=500, seed=5)) != sample_pairs(ds, cfg)
    assert sample_pairs(ds, cfg, epoch=1) != sample_pairs(ds, cfg, epoch=2)


def test_only_train_split_is_used():
    ds = tiny_dataset({"a": {"r": 0.9}, "b": {"r": 0.1}})
    held = tiny_dataset({"c": {"r": 0.5}}, split="test")
    merged = ds.from_records(ds.records + held.records, feature_dim=2)
    pairs = sample_pairs(merged, SamplerConfig(strategy="within", budget=10))
    assert all("c" not in (p.id_i, p.id_j) for p in pairs)


def test_empty_pools():
    ds = score_dataset({"a": 0.5, "b": 0.55})
    with pytest.raises(EmptyPoolError, match="empty pool"):
        sample_pairs(ds, SamplerConfig(strategy="cross", budget=5, cross_min_gap=0.5))
    with pytest.raises(EmptyPoolError, match="empty pool"):
        sample_pairs(ds, SamplerConfig(strategy="within", budget=5))


@pytest.mark.parametrize("bad", [dict(budget=0), dict(strategy="triplet"),
                                 dict(cross_min_gap=1.5), dict(mixed_within_fraction=-0.1)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        SamplerConfig(**bad).validate()


def test_pool_sizes_counts():
    ds = tiny_dataset({"a": {"r": 0.8, "s": 0.1}, "b": {"r": 0.8, "s": 0.9}, "c": {"r": 0.2}})
    # r: (a,c),(b,c); s: (a,b). Means a=0.45 b=0.85 c=0.2 -> gaps .4 .25 .65
    assert pool_sizes(ds, 0.3) == {"within": 3, "cross": 2}


def test_csv_round_trip(tmp_path):
    ds = generate_synthetic(SyntheticConfig(n_images=60, rater_bias_sd=0.1, seed=0))
    pairs = sample_pairs(ds, SamplerConfig(budget=100))
    path = tmp_path / "p.csv"
    write_pairs_csv(pairs, path)
    assert path.read_text().splitlines()[0] == "id_i,id_j,label,provenance"
    assert read_pairs_csv(path) == pairs
    idx, labels = pair_arrays(ds, pairs)
    assert idx.shape == (100, 2) and set(labels) <= {1.0, -1.0}
    assert ds.records[idx[0, 0]].id == pairs[0].id_i
