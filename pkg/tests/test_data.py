import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aesthadapt import data as D
from aesthadapt.evaluation import spearman
from aesthadapt.numerics import RandomSource


def write(path, text):
    path.write_text(text)
    return path


def test_manifest_roundtrip(tmp_path):
    recs = [D.RatingRecord("a.png", "u1", 3.0), D.RatingRecord("b.png", "u2", 4.5)]
    D.write_manifest(tmp_path / "m.csv", recs)
    assert D.load_manifest(tmp_path / "m.csv") == recs


@pytest.mark.parametrize(
    "text,needle",
    [
        ("img,user,rating\n", ":1:"),
        ("image,user,rating\na.png,u,3\nb.png,u,7\n", ":3:"),
        ("image,user,rating\na.png,u,x\n", "not a number"),
        ("image,user,rating\na.png,u\n", "3 fields"),
        ("image,user,rating\n,u,2\n", "empty"),
    ],
)
def test_manifest_errors_name_the_line(tmp_path, text, needle):
    with pytest.raises(D.ManifestError, match=needle):
        D.load_manifest(write(tmp_path / "m.csv", text))


def test_normalization_roundtrip():
    recs = [D.RatingRecord(str(i), "u", r) for i, r in enumerate([1, 2, 2, 5, 4])]
    stats = D.fit_normalization(recs)
    z = [r.rating for r in D.normalize_ratings(recs, stats)]
    assert abs(np.mean(z)) < 1e-12 and abs(np.std(z) - 1) < 1e-12
    np.testing.assert_allclose(D.denormalize(z, stats), [1, 2, 2, 5, 4])
    with pytest.raises(ValueError):
        D.fit_normalization([D.RatingRecord("a", "u", 3.0)] * 4)


def test_split_is_user_and_image_disjoint(small_corpus):
    split = D.split_by_users(small_corpus.records, 2, RandomSource(0))
    assert len(split.test_users) == 2
    assert not {r.user for r in split.train} & split.test_users
    assert not split.train_images & split.test_images
    again = D.split_by_users(small_corpus.records, 2, RandomSource(0))
    assert again == split
    with pytest.raises(ValueError):
        D.split_by_users(small_corpus.records, 6, RandomSource(0))


def test_png_and_ppm_roundtrip(tmp_path, small_corpus):
    img = next(iter(small_corpus.images.values()))
    for name in ("x.png", "x.ppm"):
        D.save_image(tmp_path / name, img)
        np.testing.assert_array_equal(D.load_image(tmp_path / name), img)


def test_image_store_missing_file(tmp_path):
    store = D.ImageStore(tmp_path)
    assert "nope.png" not in store
    with pytest.raises(FileNotFoundError):
        store["nope.png"]


def test_augment_eval_is_center_crop_and_normalized():
    img = np.random.default_rng(0).random((3, 10, 10)).astype(np.float32)
    cfg = D.AugmentationConfig(10, 6, 0.5, (0.1, 0.2, 0.3), (0.5, 0.5, 2.0))
    out = D.augment(img, cfg)
    expect = (img[:, 2:8, 2:8] - np.array([0.1, 0.2, 0.3])[:, None, None]) / np.array([0.5, 0.5, 2.0])[:, None, None]
    np.testing.assert_allclose(out, expect, atol=1e-6)


def test_augment_train_draws_are_crops_or_flipped_crops():
    img = np.random.default_rng(0).random((3, 10, 10)).astype(np.float32)
    cfg = D.AugmentationConfig(10, 6, 0.5, (0, 0, 0), (1, 1, 1))
    views = set()
    for i in range(40):
        out = D.augment(img, cfg, RandomSource(i), training=True)
        hit = None
        for src in (img, img[:, :, ::-1]):
            for t in range(5):
                for l in range(5):
                    if np.array_equal(out, src[:, t : t + 6, l : l + 6]):
                        hit = (src is img, t, l)
        assert hit is not None
        views.add(hit)
    assert len(views) > 5
    with pytest.raises(ValueError):
        D.augment(img, cfg, None, training=True)


def test_resize_changes_size_and_preserves_constants():
    img = np.full((3, 7, 13), 0.4, np.float32)
    out = D.resize(img, 9)
    assert out.shape == (3, 9, 9)
    np.testing.assert_allclose(out, 0.4, atol=1e-6)


def test_channel_stats():
    a = np.zeros((3, 2, 2))
    b = np.ones((3, 2, 2))
    mean, std = D.channel_stats([a, b])
    np.testing.assert_allclose(mean, 0.5)
    np.testing.assert_allclose(std, 0.5)


def test_synth_is_deterministic_and_valid(small_corpus):
    again = D.synth_generate(n_users=6, n_images=60, image_size=12, seed=3)
    assert again.records == small_corpus.records
    assert all(np.array_equal(again.images[k], small_corpus.images[k]) for k in small_corpus.images)
    assert all(1 <= r.rating <= 5 and float(r.rating).is_integer() for r in small_corpus.records)
    for img in small_corpus.images.values():
        assert img.shape == (3, 12, 12) and img.min() >= 0 and img.max() <= 1
    raters = D.records_by_user(small_corpus.records)
    assert set(raters) <= {u.user_id for u in small_corpus.users}


def test_synth_ratings_follow_oracle():
    corpus = D.synth_generate(n_users=4, n_images=300, image_size=12, seed=1, noise_sigma=0.0, quantize=False, mean_raters=4)
    for u, recs in D.records_by_user(corpus.records).items():
        truth = [corpus.oracle_score(u, r.image) for r in recs]
        assert spearman(truth, [r.rating for r in recs]) > 0.999


def test_write_corpus_layout(tmp_path, small_corpus):
    D.write_corpus(small_corpus, tmp_path)
    recs = D.load_manifest(tmp_path / "manifest.csv")
    assert recs == small_corpus.records
    assert (tmp_path / "hidden" / "users.json").exists()
    store = D.ImageStore(D.manifest_root(tmp_path / "manifest.csv"))
    np.testing.assert_array_equal(store[recs[0].image], small_corpus.images[recs[0].image])


@settings(max_examples=25, deadline=None)
@given(ratings=st.lists(st.floats(1, 5), min_size=2, max_size=30).filter(lambda r: np.std(r) > 1e-3))
def test_normalization_is_affine_and_rank_preserving(ratings):
    recs = [D.RatingRecord(str(i), "u", r) for i, r in enumerate(ratings)]
    z = [r.rating for r in D.normalize_ratings(recs, D.fit_normalization(recs))]
    assert np.array_equal(np.argsort(ratings, kind="stable"), np.argsort(z, kind="stable"))
