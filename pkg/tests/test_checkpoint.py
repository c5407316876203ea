import struct

import numpy as np
import pytest

from aesrank.checkpoint import (
    CheckpointError,
    ScoringModel,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)
from aesrank.cluster import kmeans_fit
from aesrank.model import FusionMode, ModelDims, Variant, init_params

DIMS = ModelDims(6, 5, 4, 3, 2)


def _model(**kw):
    p = init_params(DIMS, seed=3)
    p.freeze_only(["cls.W", "cls.b"])
    cm = kmeans_fit(np.random.default_rng(0).normal(size=(20, 6)), K=2, seed=1)
    base = dict(params=p, variant=Variant.FULL, fusion=FusionMode.WEIGHTED_SUM,
                content_model=cm, categories=("dog", "café"), gating="kmeans")
    base.update(kw)
    return ScoringModel(**base)


def test_round_trip_is_byte_exact(tmp_path):
    m = _model()
    save_checkpoint(m, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert to_bytes(back) == to_bytes(m)
    assert back.params.equals(m.params)
    assert back.params.frozen["cls.W"] and not back.params.frozen["trunk1.W"]
    assert back.categories == ("dog", "café") and back.gating == "kmeans"
    np.testing.assert_array_equal(back.content_model.centroids, m.content_model.centroids)
    X = np.random.default_rng(1).normal(size=(7, 6))
    np.testing.assert_array_equal(back.score(X), m.score(X))


def test_round_trip_without_content_model():
    m = _model(variant=Variant.REG_RANK, content_model=None, categories=(), gating="classifier")
    back = from_bytes(to_bytes(m))
    assert back.content_model is None and back.variant is Variant.REG_RANK


def test_bad_magic():
    buf = bytearray(to_bytes(_model()))
    buf[0:1] = b"X"
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(bytes(buf))


def test_unsupported_version():
    buf = bytearray(to_bytes(_model()))
    buf[8:12] = struct.pack("<I", 99)
    with pytest.raises(CheckpointError, match="version 99"):
        from_bytes(bytes(buf))


@pytest.mark.parametrize("cut", [4, 20, 100, -1])
def test_truncated(cut):
    buf = to_bytes(_model())
    with pytest.raises(CheckpointError, match="truncated"):
        from_bytes(buf[:cut])


def test_trailing_bytes():
    with pytest.raises(CheckpointError, match="trailing"):
        from_bytes(to_bytes(_model()) + b"\x00")


def test_unknown_variant_code():
    buf = bytearray(to_bytes(_model()))
    buf[32:36] = struct.pack("<I", 77)
    with pytest.raises(CheckpointError, match="unknown"):
        from_bytes(bytes(buf))


def test_gating_requirements():
    with pytest.raises(ValueError, match="gating"):
        _model(gating="oracle")
    m = _model(content_model=None)
    with pytest.raises(ValueError, match="content model"):
        m.score(np.zeros((1, 6)))


def test_concat_gt_needs_known_labels():
    m = _model(fusion=FusionMode.CONCAT_GT, gating="classifier")
    X = np.zeros((2, 6))
    assert m.score(X, ["dog", "café"]).shape == (2,)
    with pytest.raises(ValueError, match="unknown content label"):
        m.score(X, ["dog", "cat"])
    with pytest.raises(ValueError, match="needs content labels"):
        m.score(X)
