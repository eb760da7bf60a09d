"""Distances, retrieval, calibration statistics, selection."""

import json
import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import (brute_force_ece, brute_force_quantile_bins,
                      brute_force_recall, gaussian_kl_full, gaussian_w2_full)
from grove.errors import (DegenerateInput, EmptyGallery, IndexOutOfRange,
                          KTooLarge, ShapeMismatch)
from grove.metrics import (CalibrationReport, DiagGaussian,
                           calibration_report, confidence_from_uncertainty,
                           ece, js_diag, kl_diag, recall_at_1, retrieval_hits,
                           r_squared, select_uncertain, spearman,
                           wasserstein2_diag)


def gauss(mean, variance):
    return DiagGaussian(np.asarray(mean, float), np.asarray(variance, float))


def random_gauss(rng, d):
    return gauss(rng.standard_normal(d), rng.uniform(0.2, 3.0, d))


# Integer-valued floats: affine transforms with modest scale provably keep
# the rank order in float64, which pure tiny floats do not (1.0 + 1e-38 == 1.0).
finite_vec = st.lists(
    st.integers(min_value=-50, max_value=50).map(float),
    min_size=2, max_size=12,
)


# ------------------------------------------------------------------ distances

def test_w2_identical_zero():
    p = gauss([1.0, -2.0], [0.5, 2.0])
    assert wasserstein2_diag(p, p) == 0.0


def test_w2_unit_mean_shift():
    assert wasserstein2_diag(gauss([0.0], [1.0]), gauss([1.0], [1.0])) == 1.0


def test_w2_matches_full_matrix_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10):
        p, q = random_gauss(rng, 4), random_gauss(rng, 4)
        want = gaussian_w2_full(p.mean, np.diag(p.variance),
                                q.mean, np.diag(q.variance))
        assert wasserstein2_diag(p, q) == pytest.approx(want, abs=1e-8)


def test_kl_identical_zero():
    p = gauss([0.3, 0.7, -1.0], [1.0, 0.2, 5.0])
    assert kl_diag(p, p) == 0.0


def test_kl_standard_unit_shift():
    assert kl_diag(gauss([0.0], [1.0]), gauss([1.0], [1.0])) == pytest.approx(0.5)


def test_kl_matches_full_matrix_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        p, q = random_gauss(rng, 5), random_gauss(rng, 5)
        want = gaussian_kl_full(p.mean, np.diag(p.variance),
                                q.mean, np.diag(q.variance))
        assert kl_diag(p, q) == pytest.approx(want, rel=1e-10)


def test_kl_asymmetric_witness():
    p = gauss([0.0], [1.0])
    q = gauss([0.0], [4.0])
    assert kl_diag(p, q) != pytest.approx(kl_diag(q, p))


def test_js_identical_zero():
    p = gauss([2.0, 3.0], [0.1, 0.9])
    assert js_diag(p, p) == 0.0


def test_js_moment_matched_midpoint():
    # Hand-built midpoint: the JS value must equal averaging the two KLs
    # against the moment-matched mixture Gaussian.
    p = gauss([0.0, 1.0], [1.0, 2.0])
    q = gauss([2.0, -1.0], [0.5, 1.5])
    m = gauss(0.5 * (p.mean + q.mean),
              0.5 * (p.variance + q.variance) + 0.25 * (p.mean - q.mean) ** 2)
    want = 0.5 * (kl_diag(p, m) + kl_diag(q, m))
    assert js_diag(p, q) == pytest.approx(want, rel=1e-12)


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=30, deadline=None)
def test_distance_properties_random_pairs(seed):
    rng = np.random.default_rng(seed)
    p, q = random_gauss(rng, 3), random_gauss(rng, 3)
    w = wasserstein2_diag(p, q)
    assert w >= 0
    assert w == pytest.approx(wasserstein2_diag(q, p), rel=1e-12)
    assert kl_diag(p, q) >= -1e-12
    j = js_diag(p, q)
    assert j >= -1e-12
    assert j == pytest.approx(js_diag(q, p), rel=1e-9, abs=1e-12)


def test_distance_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        wasserstein2_diag(gauss([0.0], [1.0]), gauss([0.0, 1.0], [1.0, 1.0]))
    with pytest.raises(ShapeMismatch):
        kl_diag(gauss([0.0], [1.0]), gauss([0.0, 1.0], [1.0, 1.0]))


def test_diag_gaussian_validation():
    with pytest.raises(ShapeMismatch):
        DiagGaussian(np.zeros(3), np.ones(2))
    with pytest.raises(ValueError):
        DiagGaussian(np.zeros(2), np.array([1.0, 0.0]))


# ------------------------------------------------------------------ retrieval

def test_recall_self_retrieval():
    rng = np.random.default_rng(2)
    items = [random_gauss(rng, 3) for _ in range(6)]
    truth = [{i} for i in range(6)]
    assert recall_at_1(items, items, truth, "w2") == 1.0


def test_recall_adversarial_zero():
    # Each query's truth is deliberately the second-closest item.
    q0, q1 = gauss([0.0], [1.0]), gauss([10.0], [1.0])
    gallery = [gauss([0.1], [1.0]), gauss([10.1], [1.0])]
    truth = [{1}, {0}]
    assert recall_at_1([q0, q1], gallery, truth, "w2") == 0.0


def test_recall_multi_caption_sets():
    # 3 images, 5 captions each: a hit if any of the image's captions ranks
    # first.  Verified against full enumeration.
    rng = np.random.default_rng(3)
    centers = rng.standard_normal((3, 4)) * 3
    gallery = []
    for c in centers:
        for _ in range(5):
            gallery.append(gauss(c + 0.1 * rng.standard_normal(4),
                                 rng.uniform(0.5, 1.5, 4)))
    queries = [gauss(c + 0.05 * rng.standard_normal(4),
                     rng.uniform(0.5, 1.5, 4)) for c in centers]
    truth = [set(range(5 * i, 5 * i + 5)) for i in range(3)]
    got = recall_at_1(queries, gallery, truth, "w2")
    want = brute_force_recall(queries, gallery, truth, wasserstein2_diag)
    assert got == want


@pytest.mark.parametrize("distance", ["w2", "kl", "cosine"])
def test_recall_matches_brute_force(distance):
    rng = np.random.default_rng(4)
    gallery = [random_gauss(rng, 3) for _ in range(8)]
    queries = [random_gauss(rng, 3) for _ in range(5)]
    truth = [set(rng.choice(8, size=2, replace=False).tolist()) for _ in range(5)]
    if distance == "w2":
        dist_fn = wasserstein2_diag
    elif distance == "kl":
        dist_fn = kl_diag
    else:
        def dist_fn(p, q):
            return 1.0 - (p.mean @ q.mean) / (np.linalg.norm(p.mean)
                                              * np.linalg.norm(q.mean))
    got = recall_at_1(queries, gallery, truth, distance)
    assert got == brute_force_recall(queries, gallery, truth, dist_fn)


def test_recall_tie_breaks_lower_index():
    q = gauss([0.0], [1.0])
    twin = gauss([1.0], [1.0])
    gallery = [twin, twin]   # identical distances
    assert recall_at_1([q], gallery, [{0}], "w2") == 1.0
    assert recall_at_1([q], gallery, [{1}], "w2") == 0.0


def test_recall_equal_variances_is_euclidean_ranking():
    rng = np.random.default_rng(5)
    means_g = rng.standard_normal((7, 3))
    gallery = [gauss(m, np.full(3, 0.7)) for m in means_g]
    queries = [gauss(rng.standard_normal(3), np.full(3, 0.7)) for _ in range(4)]
    truth = []
    for q in queries:
        d = np.linalg.norm(means_g - q.mean, axis=1)
        truth.append({int(np.argmin(d))})
    assert recall_at_1(queries, gallery, truth, "w2") == 1.0


def test_retrieval_hits_vector():
    rng = np.random.default_rng(6)
    gallery = [random_gauss(rng, 2) for _ in range(4)]
    queries = gallery[:2]
    hits = retrieval_hits(queries, gallery, [{0}, {3}], "w2")
    assert hits.tolist() == [1.0, 0.0]


def test_recall_empty_gallery():
    with pytest.raises(EmptyGallery):
        recall_at_1([gauss([0.0], [1.0])], [], [{0}])


def test_recall_bad_truth_index():
    g = [gauss([0.0], [1.0])]
    with pytest.raises(IndexOutOfRange):
        recall_at_1(g, g, [{5}])


# ---------------------------------------------------------------- rank stats

def test_spearman_perfect_anticorrelation():
    value, degenerate = spearman([1, 2, 3], [3, 2, 1])
    assert value == -1.0 and not degenerate


def test_spearman_self_correlation():
    value, _ = spearman([4.0, 1.0, 7.0, 2.0], [4.0, 1.0, 7.0, 2.0])
    assert value == 1.0


def test_spearman_tied_ranks_hand_value():
    # ranks a = [1, 2.5, 2.5, 4], b = [1, 3, 2, 4] -> r = 3/sqrt(10)
    value, degenerate = spearman([1, 2, 2, 3], [1, 3, 2, 4])
    assert value == pytest.approx(3.0 / math.sqrt(10.0), rel=1e-12)
    assert not degenerate


def test_spearman_matches_scipy():
    rng = np.random.default_rng(7)
    for _ in range(10):
        a = rng.integers(0, 6, size=15).astype(float)   # plenty of ties
        b = rng.standard_normal(15)
        want = scipy.stats.spearmanr(a, b).statistic
        got, degenerate = spearman(a, b)
        if np.all(a == a[0]):
            assert degenerate
        else:
            assert got == pytest.approx(want, rel=1e-10)


def test_spearman_constant_flagged():
    value, degenerate = spearman([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    assert value == 0.0 and degenerate


@given(finite_vec, st.floats(min_value=0.1, max_value=5.0))
@settings(max_examples=40, deadline=None)
def test_spearman_monotone_invariance(values, scale):
    a = np.asarray(values)
    b = np.arange(len(a), dtype=float)
    base, deg = spearman(a, b)
    # strictly increasing transform of a: ranks unchanged
    transformed, deg2 = spearman(scale * a + 1.0, b)
    assert deg == deg2
    assert transformed == pytest.approx(base, abs=1e-12)
    assert -1.0 <= base <= 1.0


def test_r_squared_exact_line():
    x = np.array([0.0, 1.0, 2.0, 3.0])
    value, degenerate = r_squared(x, 2 * x + 1)
    assert value == pytest.approx(1.0, abs=1e-12)
    assert not degenerate


def test_r_squared_constant_y_convention():
    value, degenerate = r_squared([1.0, 2.0, 3.0], [5.0, 5.0, 5.0])
    assert value == 0.0 and not degenerate


def test_r_squared_constant_x_flagged():
    value, degenerate = r_squared([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])
    assert value == 0.0 and degenerate


def test_r_squared_matches_scipy():
    rng = np.random.default_rng(8)
    x = rng.standard_normal(10)
    y = 0.7 * x + 0.3 * rng.standard_normal(10)
    want = scipy.stats.linregress(x, y).rvalue ** 2
    got, _ = r_squared(x, y)
    assert got == pytest.approx(want, abs=1e-10)


def test_rank_stats_short_input():
    with pytest.raises(DegenerateInput):
        spearman([1.0], [2.0])
    with pytest.raises(DegenerateInput):
        r_squared([1.0], [2.0])


# --------------------------------------------------------------- calibration

def test_calibration_ideal_decay():
    # 10 bins of 10 queries; recall decays linearly with uncertainty.
    u, h = [], []
    for b in range(10):
        for i in range(10):
            u.append(b + i / 20.0)
            h.append(1.0 if i < 10 - b else 0.0)
    report = calibration_report(u, h, n_bins=10)
    assert report.spearman == pytest.approx(-1.0)
    assert report.r_squared == pytest.approx(1.0, abs=1e-12)
    assert report.neg_sr2 == pytest.approx(1.0, abs=1e-12)


def test_calibration_constant_hits_flagged_zero():
    rng = np.random.default_rng(9)
    u = rng.uniform(0, 1, 40)
    report = calibration_report(u, np.ones(40), n_bins=4)
    assert report.spearman == 0.0
    assert report.neg_sr2 == 0.0


def test_calibration_matches_brute_force():
    rng = np.random.default_rng(10)
    u = rng.uniform(0, 5, 100)
    h = (rng.uniform(0, 1, 100) < 0.5).astype(float)
    report = calibration_report(u, h, n_bins=7)
    want = brute_force_quantile_bins(u.tolist(), h.tolist(), 7)
    assert len(report.bins) == 7
    for got, exp in zip(report.bins, want):
        assert got[0] == pytest.approx(exp[0], rel=1e-12)
        assert got[1] == pytest.approx(exp[1], rel=1e-12)
        assert got[2] == exp[2]
    assert sum(b[2] for b in report.bins) == 100
    assert [b[0] for b in report.bins] == sorted(b[0] for b in report.bins)


def test_calibration_one_query_per_bin():
    u = np.array([3.0, 1.0, 2.0, 0.5])
    h = np.array([0.0, 1.0, 1.0, 1.0])
    report = calibration_report(u, h, n_bins=4)
    assert [b[2] for b in report.bins] == [1, 1, 1, 1]
    assert [b[0] for b in report.bins] == [0.5, 1.0, 2.0, 3.0]


def test_calibration_too_few_queries():
    with pytest.raises(DegenerateInput):
        calibration_report([1.0, 2.0], [1.0, 0.0], n_bins=3)


def test_calibration_csv_and_json():
    report = calibration_report([0.1, 0.2, 0.3, 0.4], [1, 1, 0, 0], n_bins=2)
    csv_text = report.to_csv()
    lines = csv_text.strip().split("\n")
    assert lines[0] == "bin,mean_uncertainty,recall_at_1,count"
    assert len(lines) == 4          # header + 2 bins + summary
    assert lines[-1].startswith("summary,")
    parsed = json.loads(report.to_json())
    assert parsed["neg_sr2"] == report.neg_sr2
    assert len(parsed["bins"]) == 2
    assert parsed["bins"][0]["count"] == 2


# ---------------------------------------------------------------- confidence

def test_confidence_uniform():
    conf = confidence_from_uncertainty(np.full(4, 2.5))
    np.testing.assert_allclose(conf, 1.0 - 0.25, rtol=1e-15)


def test_confidence_extreme_gap():
    conf = confidence_from_uncertainty(np.array([0.0, 500.0]))
    assert conf[0] == pytest.approx(1.0, abs=1e-12)
    assert conf[1] == pytest.approx(0.0, abs=1e-12)


@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=10))
@settings(max_examples=50, deadline=None)
def test_confidence_sums_to_k_minus_1(u):
    conf = confidence_from_uncertainty(np.asarray(u))
    assert conf.sum() == pytest.approx(len(u) - 1, rel=1e-9, abs=1e-9)


def test_confidence_empty():
    with pytest.raises(DegenerateInput):
        confidence_from_uncertainty([])


# ----------------------------------------------------------------------- ece

def test_ece_perfect_calibration():
    rng = np.random.default_rng(11)
    conf = rng.uniform(0, 1, 50)
    assert ece(conf, conf) == pytest.approx(0.0, abs=1e-15)


def test_ece_single_bin_bias():
    conf = np.full(5, 0.8)
    acc = np.full(5, 0.6)
    assert ece(conf, acc, n_bins=1) == pytest.approx(0.2)


def test_ece_matches_brute_force():
    rng = np.random.default_rng(12)
    for _ in range(10):
        conf = rng.uniform(0, 1, 30)
        acc = rng.uniform(0, 1, 30)
        want = brute_force_ece(conf, acc, 10)
        assert ece(conf, acc, 10) == pytest.approx(want, abs=1e-12)


def test_ece_boundary_values():
    # exact 0 and 1 must land in the first and last bin respectively
    assert ece([0.0, 1.0], [0.0, 1.0], n_bins=10) == 0.0
    assert ece([1.0], [0.0], n_bins=10) == pytest.approx(1.0)


def test_ece_validation():
    with pytest.raises(DegenerateInput):
        ece([], [])
    with pytest.raises(ValueError):
        ece([1.5], [0.5])


# ------------------------------------------------------------------ selection

def test_select_all_sorted_desc():
    u = [0.3, 0.9, 0.1, 0.5]
    assert select_uncertain(u, 4) == [1, 3, 0, 2]


def test_select_argmax():
    assert select_uncertain([0.3, 0.9, 0.1], 1) == [1]


def test_select_tie_lower_index():
    u = [0.5, 0.9, 0.5, 0.9]
    assert select_uncertain(u, 3) == [1, 3, 0]


def test_select_k_too_large():
    with pytest.raises(KTooLarge):
        select_uncertain([1.0, 2.0], 3)


def test_select_k_zero():
    assert select_uncertain([1.0, 2.0], 0) == []


# ---------------------------------------------------------------- rank detail

def test_first_correct_ranks_adversarial():
    from grove.metrics import first_correct_ranks
    q0, q1 = gauss([0.0], [1.0]), gauss([10.0], [1.0])
    gallery = [gauss([0.1], [1.0]), gauss([10.1], [1.0])]
    ranks = first_correct_ranks([q0, q1], gallery, [{1}, {0}], "w2")
    assert ranks.tolist() == [2, 2]


def test_first_correct_ranks_self():
    from grove.metrics import first_correct_ranks
    rng = np.random.default_rng(13)
    items = [random_gauss(rng, 3) for _ in range(5)]
    ranks = first_correct_ranks(items, items, [{i} for i in range(5)], "w2")
    assert ranks.tolist() == [1, 1, 1, 1, 1]


def test_first_correct_ranks_empty_truth():
    from grove.metrics import first_correct_ranks
    q = gauss([0.0], [1.0])
    ranks = first_correct_ranks([q], [q], [set()], "w2")
    assert ranks.tolist() == [0]


def test_hits_consistent_with_ranks():
    from grove.metrics import first_correct_ranks
    rng = np.random.default_rng(14)
    gallery = [random_gauss(rng, 3) for _ in range(6)]
    queries = [random_gauss(rng, 3) for _ in range(4)]
    truth = [set(rng.choice(6, 2, replace=False).tolist()) for _ in range(4)]
    ranks = first_correct_ranks(queries, gallery, truth, "kl")
    hits = retrieval_hits(queries, gallery, truth, "kl")
    np.testing.assert_array_equal(hits, (ranks == 1).astype(float))
