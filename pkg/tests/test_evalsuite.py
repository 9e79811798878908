import math
import statistics

import numpy as np
import pytest
import scipy.linalg
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from clue import evalsuite as ev
from clue.errors import ConfigurationError, DimensionError, NumericError


def stats1d(mu, var):
    return ev.FeatureStats(np.array([float(mu)]), np.array([[float(var)]]))


def test_fid_unit_gaussians_shifted_by_one():
    assert abs(ev.fid(stats1d(0, 1), stats1d(1, 1)) - 1.0) <= 1e-6


@pytest.mark.parametrize("m1,s1,m2,s2", [(0, 1, 0, 4), (2, 0.5, -1, 3), (0, 0, 0, 1)])
def test_fid_1d_closed_form(m1, s1, m2, s2):
    expected = (m1 - m2) ** 2 + (s1 - s2) ** 2
    assert ev.fid(stats1d(m1, s1**2), stats1d(m2, s2**2)) == pytest.approx(expected, abs=1e-9)


def random_spd(d, rng, rank=None):
    a = rng.standard_normal((d, rank or d))
    return a @ a.T / d


def scipy_fid(s1, s2):
    """Reference FID through the general matrix square root."""
    covmean = scipy.linalg.sqrtm(s1.cov @ s2.cov)
    covmean = np.real(covmean)
    diff = s1.mu - s2.mu
    return diff @ diff + np.trace(s1.cov) + np.trace(s2.cov) - 2 * np.trace(covmean)


@pytest.mark.parametrize("d,seed", [(2, 0), (5, 1), (16, 2), (32, 3)])
def test_fid_matches_sqrtm_oracle(d, seed):
    rng = np.random.default_rng(seed)
    a = ev.FeatureStats(rng.standard_normal(d), random_spd(d, rng))
    b = ev.FeatureStats(rng.standard_normal(d), random_spd(d, rng))
    assert ev.fid(a, b) == pytest.approx(scipy_fid(a, b), rel=1e-7, abs=1e-9)


def test_fid_rank_deficient_covariance_is_finite():
    rng = np.random.default_rng(4)
    a = ev.FeatureStats(np.zeros(8), random_spd(8, rng, rank=3))
    b = ev.FeatureStats(np.ones(8), random_spd(8, rng, rank=5))
    assert ev.fid(a, b) == pytest.approx(scipy_fid(a, b), rel=1e-5, abs=1e-6)


def test_fid_self_is_zero_and_symmetric():
    rng = np.random.default_rng(5)
    x, y = rng.standard_normal((200, 6)), rng.standard_normal((150, 6)) * 1.5 + 0.3
    assert abs(ev.fid_from_features(x, x)) < 1e-9
    assert ev.fid_from_features(x, y) == pytest.approx(ev.fid_from_features(y, x), rel=1e-9)
    assert ev.fid_from_features(x, y) > 0


def test_fid_isometry_invariant():
    rng = np.random.default_rng(6)
    x, y = rng.standard_normal((100, 5)), rng.standard_normal((100, 5)) + 1
    q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    shift = rng.standard_normal(5)
    assert ev.fid_from_features(x @ q + shift, y @ q + shift) == pytest.approx(
        ev.fid_from_features(x, y), rel=1e-8)


def test_fid_rejects_indefinite_covariance():
    bad = ev.FeatureStats(np.zeros(2), np.diag([1.0, -0.5]))
    with pytest.raises(NumericError):
        ev.fid(bad, ev.FeatureStats(np.zeros(2), np.eye(2)))


def test_fid_dimension_mismatch():
    with pytest.raises(DimensionError):
        ev.fid(stats1d(0, 1), ev.FeatureStats(np.zeros(2), np.eye(2)))


def test_feature_stats_use_unbiased_covariance():
    x = np.array([[0.0], [2.0]])
    s = ev.FeatureStats.from_features(x)
    assert s.mu.tolist() == [1.0] and s.cov.tolist() == [[2.0]]


# ---------------------------------------------------------------- recall


def recall_oracle(real, gen, k, policy):
    """Plain-Python k-NN recall."""
    real = [tuple(map(float, r)) for r in real]
    gen = [tuple(map(float, g)) for g in gen]

    def dist(a, b):
        return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))

    gen_kth = [sorted(dist(r, g) for g in gen)[k - 1] for r in real]
    if policy == "median_pooled":
        tau = statistics.median(gen_kth)
    else:
        tau = statistics.median(
            sorted(dist(r, o) for j, o in enumerate(real) if j != i)[k - 1]
            for i, r in enumerate(real)
        )
    return sum(d <= tau for d in gen_kth) / len(real)


points = st.lists(st.lists(st.integers(-4, 4), min_size=3, max_size=3), min_size=1, max_size=50)


@settings(max_examples=150, deadline=None)
@given(real=points, gen=points, k=st.integers(1, 10),
       policy=st.sampled_from(["median_real_to_real", "median_pooled"]))
def test_recall_matches_brute_force_oracle(real, gen, k, policy):
    if len(gen) <= k or len(real) < 2 or (policy == "median_real_to_real" and len(real) <= k):
        return
    cfg = ev.RecallConfig(k, policy)
    assert ev.knn_recall(np.array(real), np.array(gen), cfg) == recall_oracle(real, gen, k, policy)


@pytest.mark.parametrize("seed", range(5))
def test_recall_matches_oracle_on_continuous_data(seed):
    rng = np.random.default_rng(seed)
    real, gen = rng.standard_normal((50, 4)), rng.standard_normal((50, 4)) * 0.7 + 0.2
    for policy in ("median_real_to_real", "median_pooled"):
        assert ev.knn_recall(real, gen, ev.RecallConfig(10, policy)) == recall_oracle(real, gen, 10, policy)


def test_recall_isometry_invariant():
    rng = np.random.default_rng(9)
    real, gen = rng.standard_normal((40, 3)), rng.standard_normal((40, 3))
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    # integer-valued grid keeps distances exact under a permutation isometry
    real_i, gen_i = np.rint(real * 3), np.rint(gen * 3)
    perm = np.eye(3)[[2, 0, 1]]
    assert ev.knn_recall(real_i @ perm + 5, gen_i @ perm + 5) == ev.knn_recall(real_i, gen_i)
    a, b = ev.knn_recall(real @ q, gen @ q), ev.knn_recall(real, gen)
    assert abs(a - b) <= 1 / 40


def test_recall_identical_sets_is_high_and_collapse_is_low():
    rng = np.random.default_rng(10)
    real = rng.standard_normal((60, 4))
    assert ev.knn_recall(real, real.copy()) >= 0.5
    collapsed = np.repeat(real[:1], 60, axis=0) + 1e-3 * rng.standard_normal((60, 4))
    assert ev.knn_recall(real, collapsed) < ev.knn_recall(real, real.copy())


def test_recall_validation():
    with pytest.raises(ConfigurationError):
        ev.RecallConfig(k=0)
    with pytest.raises(ConfigurationError):
        ev.RecallConfig(tau_policy="mean")
    with pytest.raises(ConfigurationError):
        ev.knn_recall(np.zeros((20, 2)), np.zeros((10, 2)), ev.RecallConfig(10))


# ---------------------------------------------------------------- PCA


def test_pca_collinear_points():
    t = np.linspace(-1, 1, 11)
    x = np.stack([t, 2 * t, -t], axis=1)
    res = ev.pca_project(x, 2)
    assert res.explained_ratio[0] == pytest.approx(1.0)
    assert res.explained_ratio[1] == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(res.components[0], np.array([1, 2, -1]) / math.sqrt(6), atol=1e-12)


def test_pca_matches_sklearn_up_to_sign():
    from sklearn.decomposition import PCA

    rng = np.random.default_rng(11)
    x = rng.standard_normal((80, 6)) @ rng.standard_normal((6, 6))
    res = ev.pca_project(x, 2)
    ref = PCA(2).fit(x)
    for i in range(2):
        sign = np.sign(res.components[i] @ ref.components_[i])
        np.testing.assert_allclose(res.components[i], sign * ref.components_[i], atol=1e-8)
    np.testing.assert_allclose(res.explained_variance, ref.explained_variance_, rtol=1e-8)
    np.testing.assert_allclose(res.transform(x), res.coords, atol=1e-10)


def test_pca_sign_convention_is_stable():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((30, 4))
    a, b = ev.pca_project(x), ev.pca_project(-x)
    for row in (*a.components, *b.components):
        assert row[np.flatnonzero(np.abs(row) > 1e-12)[0]] > 0


def test_pca_zero_variance_raises():
    with pytest.raises(NumericError):
        ev.pca_project(np.ones((5, 3)))


class LinearFeatures(torch.nn.Module):
    resolution = 4
    feature_dim = 2

    def features(self, x):
        return torch.stack([x.mean(dim=(1, 2, 3)), x[:, 0].amax(dim=(1, 2))], dim=1)


def test_extract_features_batches_consistently():
    x = torch.rand(10, 3, 4, 4) * 2 - 1
    ext = LinearFeatures()
    full = ev.extract_features(x, ext, batch_size=256)
    small = ev.extract_features(x, ext, batch_size=3)
    assert full.dtype == np.float64 and full.shape == (10, 2)
    np.testing.assert_array_equal(full, small)
    with pytest.raises(DimensionError):
        ev.extract_features(torch.zeros(2, 3, 8, 8), ext)


def test_metric_rows_csv(tmp_path):
    path = tmp_path / "m.csv"
    ev.write_metric_rows(path, [dict(model_variant="clue", sigma=0.5, split="dataset2",
                                     **{"class": "all"}, metric="fid", value=1.23456789)])
    lines = path.read_text().splitlines()
    assert lines[0] == "model_variant,sigma,split,class,metric,value"
    assert lines[1] == "clue,0.500000,dataset2,all,fid,1.234568"
