import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

from faceanon.evaluation import (
    GaussianStats,
    PairProtocol,
    detection_rate,
    feature_stats,
    fid,
    pair_scores,
    recall_at_1,
    tar_at_far,
    tar_at_threshold_far,
    write_report,
    write_table_csv,
)


def recall_oracle(x, labels):
    m = len(x)
    hits = 0
    for i in range(m):
        best, best_d = None, None
        for j in range(m):
            if i == j:
                continue
            d = sum((a - b) ** 2 for a, b in zip(x[i], x[j]))
            if best_d is None or d < best_d:
                best, best_d = j, d
        hits += labels[best] == labels[i]
    return 100.0 * hits / m


def test_recall_perfect_clusters():
    x = np.array([[0, 0], [0, 0.1], [10, 10], [10, 10.1]])
    assert recall_at_1(x, [0, 0, 1, 1]) == 100.0


def test_recall_matches_bruteforce_six_points():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 3))
    y = rng.integers(0, 2, 6)
    assert recall_at_1(x, y) == recall_oracle(x.tolist(), y.tolist())


def test_recall_ties_take_lowest_index():
    # sample 0 is equidistant from 1 (label 1) and 2 (label 0)
    x = np.array([[0.0], [1.0], [-1.0]])
    assert recall_at_1(x, [0, 1, 0]) == pytest.approx(100 * 1 / 3)


def test_recall_needs_two_samples():
    with pytest.raises(ValueError):
        recall_at_1(np.zeros((1, 2)), [0])


def test_recall_isometry_invariant():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(40, 5))
    y = rng.integers(0, 4, 40)
    q = ortho_group.rvs(5, random_state=2)
    assert recall_at_1(x, y) == recall_at_1(x @ q + 3.0, y)


def test_fid_identical_is_zero():
    s = GaussianStats(np.array([1.0, 2.0]), np.array([[2.0, 0.3], [0.3, 1.0]]))
    assert fid(s, s) == 0.0


def test_fid_scalar_closed_form():
    assert fid(GaussianStats([0.0], [[1.0]]), GaussianStats([1.0], [[1.0]])) == pytest.approx(1.0, rel=1e-12)


def test_fid_diagonal_closed_form():
    rng = np.random.default_rng(4)
    mx, mg = rng.normal(size=4), rng.normal(size=4)
    vx, vg = rng.uniform(0.1, 3, 4), rng.uniform(0.1, 3, 4)
    want = np.sum((mx - mg) ** 2 + (np.sqrt(vx) - np.sqrt(vg)) ** 2)
    got = fid(GaussianStats(mx, np.diag(vx)), GaussianStats(mg, np.diag(vg)))
    assert got == pytest.approx(want, rel=1e-8)


def test_fid_rejects_non_psd():
    bad = GaussianStats([0.0, 0.0], [[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(ValueError):
        fid(bad, GaussianStats([0.0, 0.0], np.eye(2)))


def test_fid_dimension_mismatch():
    with pytest.raises(ValueError):
        fid(GaussianStats([0.0], [[1.0]]), GaussianStats([0.0, 0.0], np.eye(2)))


def test_feature_stats_values():
    s = feature_stats(np.array([[0.0], [2.0]]))
    assert s.mu[0] == 1.0 and s.sigma[0, 0] == 2.0


def test_feature_stats_repeated_sample_has_zero_covariance():
    s = feature_stats(np.tile([[0.3, -1.0, 2.0]], (5, 1)))
    assert np.all(s.sigma == 0)


def test_feature_stats_uses_feature_fn_and_is_order_invariant():
    items = np.arange(12.0).reshape(6, 2) ** 1.5
    fn = lambda arr: np.asarray(arr) * 2.0  # noqa: E731
    a = feature_stats(items, fn)
    b = feature_stats(items[::-1], fn)
    np.testing.assert_allclose(a.mu, b.mu, rtol=1e-12)
    np.testing.assert_allclose(a.sigma, b.sigma, rtol=1e-12)


def test_detection_rate_counts():
    imgs = list(range(4))
    assert detection_rate(imgs, lambda im: [1]) == 100.0
    assert detection_rate(imgs, lambda im: []) == 0.0
    assert detection_rate(imgs, lambda im: [1] if im < 3 else []) == 75.0


def test_tar_separable():
    p = PairProtocol.lfw_style(1, 600)
    scores = np.where(p.same, 1.0, 0.0)
    assert tar_at_far(scores, p)["mean"] == 1.0


def test_tar_degenerate_all_equal_scores():
    p = PairProtocol.lfw_style(1, 600)
    assert tar_at_far(np.full(600, 0.5), p)["mean"] == 0.0


def test_tar_random_scores_monte_carlo():
    """With 300 negatives at FAR 1e-3 no false accept is allowed, so a random
    positive passes with probability 1/301; at FAR 1e-2 three are allowed (4/301)."""
    p = PairProtocol.lfw_style(10, 600)
    rng = np.random.default_rng(7)
    for far, expected in ((1e-3, 1 / 301), (1e-2, 4 / 301)):
        runs = [tar_at_far(rng.random(6000), p, far)["mean"] for _ in range(200)]
        assert np.mean(runs) == pytest.approx(expected, abs=0.0015)


def test_tar_needs_negatives():
    with pytest.raises(ValueError):
        tar_at_threshold_far(np.ones(4), np.ones(4, bool))


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_tar_monotone_in_far(seed):
    rng = np.random.default_rng(seed)
    p = PairProtocol.lfw_style(2, 600)
    scores = rng.normal(size=1200) + p.same * 1.5
    values = [tar_at_far(scores, p, far)["mean"] for far in (0.5, 0.1, 0.01, 0.001)]
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_lfw_protocol_structure():
    p = PairProtocol.lfw_style()
    assert len(p.folds) == 10 and all(len(f) == 600 for f in p.folds)
    assert p.same[p.folds[3][:300]].all() and not p.same[p.folds[3][300:]].any()


def test_pair_scores_negative_distance():
    np.testing.assert_allclose(pair_scores([[0, 0]], [[3, 4]]), [-5.0])


def test_report_and_csv(tmp_path):
    path = write_report(tmp_path / "r.json", {"recall_at_1": 12.5}, {"seed": 0}, {"recall_at_1": [10, 15]})
    data = json.loads(path.read_text())
    assert data[0]["metric"] == "recall_at_1" and data[0]["ci"] == [10, 15] and len(data[0]["config_hash"]) == 16
    csv = write_table_csv(tmp_path / "t.csv", [{"method": "blur-9", "recall_at_1": 3.0}])
    assert csv.read_text().splitlines()[0] == "method,detection,recall_at_1,fid"
