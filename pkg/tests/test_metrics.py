import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import brute_force_consistency
from procdiff.errors import NumericalError, UndefinedMetricError, ValidationError
from procdiff.metrics import (
    FeatureStats,
    StreamingStats,
    ToyFeatureExtractor,
    avg_pcon,
    consistency_from_embeddings,
    consistency_weights,
    feature_stats,
    fid_over_sets,
    frechet_distance,
    history_bucket,
    procedure_consistency,
)


def random_instance(rng, n, d=8):
    return rng.standard_normal((n, d)) + 0.5, rng.standard_normal((n, d)) + 0.5


@pytest.mark.parametrize("seed", range(20))
def test_consistency_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    t, im = random_instance(rng, int(rng.integers(2, 7)))
    p_i, p = consistency_from_embeddings(t, im)
    ref_i, ref = brute_force_consistency(t, im)
    assert np.allclose(p_i, ref_i, atol=1e-6) and abs(p - ref) <= 1e-6


def test_weights_rows_sum_to_one_and_zero_diagonal():
    rng = np.random.default_rng(0)
    w = consistency_weights(rng.standard_normal((6, 8)) + 0.3)
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(np.diag(w) == 0) and np.all(w >= 0)


def test_orthogonal_texts_fall_back_to_uniform():
    t = np.eye(3)
    with pytest.warns(RuntimeWarning):
        w = consistency_weights(t)
    assert np.allclose(w, (np.ones((3, 3)) - np.eye(3)) / 2)


def test_constant_scores_return_the_score():
    t = np.tile([1.0, 0.0, 0.0], (5, 1))
    im = np.tile([0.5, np.sqrt(3) / 2, 0.0], (5, 1))  # cosine 0.5 with every text
    p_i, p = consistency_from_embeddings(t, im)
    assert np.allclose(p_i, 50.0, atol=1e-12) and abs(p - 50.0) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 6))
def test_joint_permutation_invariance(seed, n):
    rng = np.random.default_rng(seed)
    t, im = random_instance(rng, n)
    perm = rng.permutation(n)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        p_i, p = consistency_from_embeddings(t, im)
        q_i, q = consistency_from_embeddings(t[perm], im[perm])
    assert abs(p - q) <= 1e-9
    assert np.allclose(np.asarray(p_i)[perm], q_i, atol=1e-9)


def test_single_step_undefined(toy_encoder):
    with pytest.raises(UndefinedMetricError):
        consistency_from_embeddings(np.ones((1, 4)), np.ones((1, 4)))
    with pytest.raises(UndefinedMetricError):
        procedure_consistency(["a"], [np.zeros((4, 4, 3), np.uint8)], toy_encoder)


def test_zero_embedding_is_numerical_error():
    with pytest.raises(NumericalError):
        consistency_from_embeddings(np.ones((2, 4)), np.array([[1.0, 0, 0, 0], [0, 0, 0, 0]]))


def test_avg_pcon_excludes_short_recipes(corpus, toy_encoder):
    _, recipes = corpus
    items = [(r.recipe_id, r.texts, [r.image_path(s) for s in r.steps]) for r in recipes]
    items.append(("single", ["only step"], [recipes[0].image_path(recipes[0].steps[0])]))
    rep = avg_pcon(items, toy_encoder)
    assert rep.n_recipes == len(recipes) and rep.n_excluded == 1 and rep.excluded == ["single"]
    assert rep.avg_pcon == pytest.approx(np.mean(list(rep.per_recipe.values())))
    shuffled = avg_pcon(list(reversed(items)), toy_encoder)
    assert shuffled.avg_pcon == rep.avg_pcon
    with pytest.raises(UndefinedMetricError):
        avg_pcon(items[-1:], toy_encoder)


def _stats(mean, cov, n=10):
    return FeatureStats(np.asarray(mean, float), np.asarray(cov, float), n)


def test_frechet_identical_is_zero():
    rng = np.random.default_rng(0)
    a = FeatureStats.from_features(rng.standard_normal((50, 6)))
    assert frechet_distance(a, a) == pytest.approx(0.0, abs=1e-9)


def test_frechet_unit_offset():
    d = 5
    a = _stats(np.zeros(d), np.eye(d))
    b = _stats(np.eye(d)[0], np.eye(d))
    assert abs(frechet_distance(a, b) - 1.0) <= 1e-9


@pytest.mark.parametrize("d", [1, 3, 16, 64])
def test_frechet_diagonal_closed_form(d):
    # 4d + d - 2 * tr(sqrt(4 I)) = d
    a = _stats(np.zeros(d), 4 * np.eye(d))
    b = _stats(np.zeros(d), np.eye(d))
    assert abs(frechet_distance(a, b) - d) <= 1e-6


def test_frechet_symmetric_and_nonnegative():
    rng = np.random.default_rng(1)
    a = FeatureStats.from_features(rng.standard_normal((40, 4)))
    b = FeatureStats.from_features(2 * rng.standard_normal((40, 4)) + 1)
    assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), rel=1e-9)
    assert frechet_distance(a, b) > 0


def test_frechet_rank_deficient_covariance():
    rng = np.random.default_rng(2)
    a = FeatureStats.from_features(rng.standard_normal((3, 10)))  # rank 2
    assert frechet_distance(a, a) == pytest.approx(0.0, abs=1e-6)


def test_frechet_dimension_mismatch():
    with pytest.raises(ValidationError):
        frechet_distance(_stats(np.zeros(2), np.eye(2)), _stats(np.zeros(3), np.eye(3)))


def test_streaming_matches_two_pass():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((257, 7)) * 3 + 1
    acc = StreamingStats()
    for chunk in np.array_split(x, [1, 5, 64, 200]):
        acc.update(chunk)
    s, ref = acc.finalize(), FeatureStats.from_features(x)
    assert np.allclose(s.mean, ref.mean, atol=1e-12) and np.allclose(s.cov, ref.cov, atol=1e-10)


def test_duplicating_every_image_leaves_fid_unchanged():
    rng = np.random.default_rng(4)
    real = [rng.integers(0, 256, (16, 16, 3), dtype=np.uint8) for _ in range(12)]
    gen = [rng.integers(0, 256, (16, 16, 3), dtype=np.uint8) for _ in range(12)]
    ext = ToyFeatureExtractor()
    assert fid_over_sets(real, gen, ext) == pytest.approx(fid_over_sets(real * 2, gen * 2, ext), rel=1e-9)


def test_identical_sets_through_full_path(corpus):
    _, recipes = corpus
    paths = [r.image_path(s) for r in recipes for s in r.steps]
    assert fid_over_sets(paths, list(paths), ToyFeatureExtractor()) <= 1e-6


def test_feature_stats_skip_budget():
    good = [np.full((8, 8, 3), i, np.uint8) for i in range(10)]
    with pytest.raises(NumericalError):
        feature_stats(good + ["/does/not/exist.png"], ToyFeatureExtractor())
    stats = feature_stats(good * 20 + ["/does/not/exist.png"], ToyFeatureExtractor())
    assert stats.count == 200


def test_history_buckets():
    assert [history_bucket(i) for i in (1, 2, 9, 10, 30)] == ["0", "1", "8", "more than 8", "more than 8"]
