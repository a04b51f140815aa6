import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from btnet.metrics import (MetricError, median_iqr, rejection_at_efficiency, roc_auc, roc_points, roc_summary,
                           write_roc_curve)

from oracles import auc_pairs, rejection_scan, type7_quantile
from strategies import seeds


def sample(seed, n_max=50, discrete=False):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, n_max + 1))
    labels = rng.integers(0, 2, n)
    labels[:2] = [0, 1]
    scores = rng.integers(0, 6, n).astype(float) if discrete else rng.normal(size=n) + labels
    return scores, labels


def test_auc_examples():
    assert roc_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert roc_auc([0.3] * 6, [1, 0, 1, 0, 1, 0]) == 0.5
    scores, labels = [0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0]
    assert auc_pairs([0.9, 0.4], [0.6, 0.1]) == 0.75
    assert roc_auc(scores, labels) == 0.75


def test_single_class_is_an_error():
    with pytest.raises(MetricError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(MetricError):
        rejection_at_efficiency([0.1, 0.2], [0, 0], 0.5)


@pytest.mark.parametrize("bad", [dict(scores=[np.nan, 1.0]), dict(labels=[0, 2]), dict(scores=[1.0])])
def test_bad_inputs(bad):
    kw = dict(scores=[0.0, 1.0], labels=[0, 1])
    kw.update(bad)
    with pytest.raises(MetricError):
        roc_auc(kw["scores"], kw["labels"])


def test_rejection_examples():
    assert rejection_at_efficiency([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0], 0.7) == math.inf
    rng = np.random.default_rng(0)
    x = rng.random(20_000)
    labels = np.arange(20_000) % 2
    assert rejection_at_efficiency(x, labels, 0.7) == pytest.approx(1 / 0.7, rel=0.03)


def test_rejection_hand_listed_ten_by_ten():
    sig = [0.95, 0.9, 0.85, 0.7, 0.66, 0.6, 0.5, 0.45, 0.3, 0.2]
    bkg = [0.8, 0.65, 0.55, 0.4, 0.35, 0.25, 0.15, 0.1, 0.05, 0.01]
    scores, labels = sig + bkg, [1] * 10 + [0] * 10
    # 70%: the cut at 0.5 keeps 7 signal and bkg {0.8, 0.65, 0.55} -> 10/3
    assert rejection_scan(sig, bkg, 0.7) == pytest.approx(10 / 3)
    for eff in (0.1, 0.35, 0.7, 0.85, 0.95):
        assert rejection_at_efficiency(scores, labels, eff) == rejection_scan(sig, bkg, eff)


@pytest.mark.parametrize("eff", [0.0, 1.0, -0.1])
def test_efficiency_bounds(eff):
    with pytest.raises(MetricError):
        rejection_at_efficiency([0, 1], [0, 1], eff)


def test_median_iqr_examples():
    assert median_iqr([1, 2, 3]) == (2.0, 1.0)
    assert median_iqr([4.5]) == (4.5, 0.0)
    expected = (type7_quantile([1, 2, 3, 4], 0.5),
                type7_quantile([1, 2, 3, 4], 0.75) - type7_quantile([1, 2, 3, 4], 0.25))
    assert expected == (2.5, 1.5)
    assert median_iqr([4, 1, 3, 2]) == expected
    with pytest.raises(MetricError):
        median_iqr([])


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30))
def test_median_iqr_matches_type7(values):
    med, iqr = median_iqr(values)
    assert med == pytest.approx(type7_quantile(values, 0.5), abs=1e-6)
    assert iqr == pytest.approx(type7_quantile(values, 0.75) - type7_quantile(values, 0.25), abs=1e-6)


@given(seeds, st.booleans())
def test_brute_force_agreement(seed, discrete):
    scores, labels = sample(seed, discrete=discrete)
    sig, bkg = list(scores[labels == 1]), list(scores[labels == 0])
    assert roc_auc(scores, labels) == pytest.approx(auc_pairs(sig, bkg), abs=1e-12)
    for eff in (0.3, 0.7, 0.85):
        assert rejection_at_efficiency(scores, labels, eff) == rejection_scan(sig, bkg, eff)


@given(seeds, st.sampled_from([np.exp, np.arctan, lambda x: 3 * x - 7, lambda x: x ** 3]))
def test_auc_invariant_under_monotone_maps(seed, f):
    scores, labels = sample(seed, discrete=True)
    assert roc_auc(f(scores), labels) == pytest.approx(roc_auc(scores, labels), abs=1e-12)


@given(seeds)
def test_auc_of_negated_scores(seed):
    scores, labels = sample(seed)
    assert roc_auc(scores, labels) + roc_auc(-scores, labels) == pytest.approx(1.0, abs=1e-12)


@given(seeds)
def test_rejection_nonincreasing_in_efficiency(seed):
    scores, labels = sample(seed)
    rej = [rejection_at_efficiency(scores, labels, e) for e in np.linspace(0.05, 0.95, 19)]
    assert all(a >= b for a, b in zip(rej, rej[1:]))
    assert all(r >= 1 for r in rej)


def test_roc_points_monotone_and_complete(rng):
    scores, labels = sample(3)
    thr, tpr, fpr = roc_points(scores, labels)
    assert np.all(np.diff(thr) < 0) and np.all(np.diff(tpr) >= 0) and np.all(np.diff(fpr) >= 0)
    assert tpr[-1] == 1 and fpr[-1] == 1


def test_summary_and_curve_file(tmp_path):
    scores, labels = sample(11)
    summ = roc_summary(scores, labels, (0.7, 0.85))
    assert 0 <= summ.auc <= 1
    assert set(summ.to_dict()) == {"auc", "R70", "R85"}
    write_roc_curve(tmp_path / "roc.txt", summ)
    rows = np.loadtxt(tmp_path / "roc.txt")
    assert rows.shape[1] == 2 and np.all(rows[:, 1] >= 1)
    assert np.all(np.diff(rows[:, 0]) >= 0)


def test_median_iqr_with_infinite_rejections():
    assert median_iqr([math.inf]) == (math.inf, 0.0)
    assert median_iqr([5.0, 5.0, math.inf, math.inf]) == (math.inf, math.inf)
    assert median_iqr([1.0, 2.0, 3.0, 4.0]) == (2.5, 1.5)
