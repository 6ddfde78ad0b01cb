import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from augpt.errors import DegenerateFeatureError, ParameterError, SchemaError
from augpt.imageops import Raster
from augpt.scoring import (
    ClassEmbeddings,
    Encoder,
    LogitVector,
    cosine_logits,
    ingest_logits,
    softmax_prob,
    write_logits_csv,
)

from conftest import random_raster


def test_patch_mean_on_gray():
    enc = Encoder("patch-mean", 48)
    feats = enc.encode(Raster.filled(16, 16, (128, 128, 128)))
    assert feats.shape == (48,)
    assert np.allclose(feats, 128 / 255, atol=0, rtol=0)


def test_patch_mean_locality(rng):
    enc = Encoder("patch-mean", 48)  # 4x4 grid, 3 channels
    img = random_raster(rng, 16, 16)
    arr = img.pixels.copy()
    arr[1, 2] = 255 - arr[1, 2]
    diff = np.nonzero(enc.encode(img) != enc.encode(Raster(arr)))[0]
    # Pixel (row 1, col 2) falls in patch 0 -> features 0..2 only.
    assert set(diff.tolist()) <= {0, 1, 2} and len(diff) > 0


def test_encoders_deterministic(img):
    for enc in (Encoder("patch-mean", 12), Encoder("random-projection", 32, seed=3, image_size=(16, 16))):
        a, b = enc.encode(img), enc.encode(img)
        assert a.shape == (enc.out_dim,) and np.array_equal(a, b)
        assert np.array_equal(enc.encode_many([img, img])[1], a)


def test_random_projection_seeded(img):
    a = Encoder("random-projection", 8, seed=1, image_size=(16, 16)).encode(img)
    b = Encoder("random-projection", 8, seed=1, image_size=(16, 16)).encode(img)
    c = Encoder("random-projection", 8, seed=2, image_size=(16, 16)).encode(img)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_external_encoder_cannot_encode(img):
    with pytest.raises(ParameterError):
        Encoder("external", 4).encode(img)


def test_class_embeddings_invariants():
    with pytest.raises(ParameterError):
        ClassEmbeddings(np.array([[1.0, 0.0]]), ("a",))
    with pytest.raises(ParameterError):
        ClassEmbeddings(np.array([[2.0, 0.0], [0.0, 1.0]]), ("a", "b"))
    emb = ClassEmbeddings.from_rows([[3.0, 4.0], [0.0, 2.0]])
    assert np.allclose(np.linalg.norm(emb.matrix, axis=1), 1.0, atol=1e-12)


def _emb(rng, c=5, d=8):
    return ClassEmbeddings.from_rows(rng.standard_normal((c, d)))


def test_cosine_self_similarity(rng):
    emb = _emb(rng)
    for k in range(emb.c):
        lv = cosine_logits(emb.matrix[k] * 2.5, emb)
        assert abs(lv.values[k] - 1.0) <= 1e-9


def test_cosine_orthogonal():
    emb = ClassEmbeddings.from_rows(np.eye(4)[:3])
    lv = cosine_logits(np.array([0.0, 0.0, 0.0, 7.0]), emb)
    assert np.all(np.abs(lv.values) <= 1e-9)


def test_cosine_zero_feature_rejected(rng):
    with pytest.raises(DegenerateFeatureError):
        cosine_logits(np.zeros(8), _emb(rng))


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.float64, 8, elements=st.floats(-10, 10)),
    st.floats(0.01, 100.0),
    st.integers(0, 2**32 - 1),
)
def test_cosine_scale_invariance_and_bounds(feat, scale, seed):
    if np.linalg.norm(feat) < 1e-6:
        return
    emb = _emb(np.random.default_rng(seed))
    a = cosine_logits(feat, emb).values
    b = cosine_logits(feat * scale, emb).values
    assert np.allclose(a, b, atol=1e-12)
    assert np.all(np.abs(a) <= 1 + 1e-9)


def test_softmax_examples():
    p = softmax_prob(LogitVector([0.3, 0.3, 0.3, 0.3]), 0.7)
    assert np.all(p == 0.25)
    p = softmax_prob(LogitVector([1.0, 0.0]), 1.0)
    assert p[0] == pytest.approx(0.7311, abs=1e-4) and p[1] == pytest.approx(0.2689, abs=1e-4)
    p = softmax_prob(LogitVector([0.2, 0.9, -0.4]), 0.01)
    assert p[1] >= 0.999
    with pytest.raises(ParameterError):
        softmax_prob(LogitVector([1.0, 2.0]), 0.0)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(2, 12), elements=st.floats(-50, 50)), st.floats(1e-3, 1e3))
def test_softmax_normalised_and_argmax_preserved(values, tau):
    p = softmax_prob(values, tau)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p >= 0)
    # Logits closer than rounding can resolve collapse to equal probabilities.
    assert values[int(np.argmax(p))] >= values.max() - 1e-9


def test_logits_csv_round_trip(tmp_path, rng):
    recs = [LogitVector(rng.standard_normal(4) * 10, j, f"img{j // 2}") for j in range(3)]
    path = tmp_path / "logits.csv"
    write_logits_csv(path, recs)
    back = ingest_logits(path)
    assert len(back) == 3 and all(len(r) == 4 for r in back)
    for a, b in zip(recs, back):
        assert a.image_key == b.image_key and a.view_index == b.view_index
        assert np.max(np.abs(a.values - b.values)) <= 1e-12
    assert path.read_text().splitlines()[0] == "image_key,view_index,c0,c1,c2,c3"


def test_logits_csv_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("image_key,view_index,c0,c1\na,0,0.1,0.2\na,1,0.3\n")
    with pytest.raises(SchemaError):
        ingest_logits(bad)
    nan = tmp_path / "nan.csv"
    nan.write_text("image_key,view_index,c0,c1\na,0,0.1,abc\n")
    with pytest.raises(SchemaError):
        ingest_logits(nan)
    hdr = tmp_path / "hdr.csv"
    hdr.write_text("key,view,c0,c1\n")
    with pytest.raises(SchemaError):
        ingest_logits(hdr)
