import itertools
import warnings

import numpy as np
import pytest

from pulsar_pd.stats import (UndefinedMetricError, auroc, bootstrap_draws, bootstrap_eval,
                             chi2_critical, chi2_sf, compute_metrics, friedman_test, fuse_streams,
                             gammaincc, holm_adjust, rank_rows)


def brute_auroc(s, y):
    pos = [a for a, t in zip(s, y) if t]
    neg = [a for a, t in zip(s, y) if not t]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


@pytest.mark.parametrize("seed", range(5))
def test_auroc_equals_pair_counting(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 201))
    y = rng.random(n) < 0.4
    y[0], y[1] = True, False
    s = np.round(rng.normal(size=n), 1)  # plenty of ties
    assert auroc(s, y) == brute_auroc(s, y)


def test_auroc_single_class():
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.warns(UserWarning):
        assert compute_metrics([0.1, 0.2], [1, 1]).auroc is None


def test_metrics_against_sklearn():
    from sklearn.metrics import accuracy_score, f1_score, precision_score, recall_score, roc_auc_score

    rng = np.random.default_rng(1)
    y = rng.random(80) < 0.5
    s = rng.normal(size=80) + y
    s[:5] = 0.0  # zero logits count as positive
    m = compute_metrics(s, y)
    pred = s >= 0
    assert m.accuracy == pytest.approx(accuracy_score(y, pred))
    assert m.precision == pytest.approx(precision_score(y, pred))
    assert m.recall == pytest.approx(recall_score(y, pred))
    assert m.f1_macro == pytest.approx(f1_score(y, pred, average="macro"))
    assert m.f1_weighted == pytest.approx(f1_score(y, pred, average="weighted"))
    assert m.auroc == pytest.approx(roc_auc_score(y, s))


def test_fusion():
    np.testing.assert_allclose(fuse_streams([[1.0, -2.0], [3.0, 2.0]]), [2.0, 0.0])
    with pytest.warns(UserWarning):
        assert compute_metrics(fuse_streams([[1.0], [-1.0]]), [1]).accuracy == 1.0
    with pytest.raises(ValueError):
        fuse_streams([[1.0], [1.0, 2.0]])
    with pytest.raises(ValueError):
        fuse_streams([])


def test_holm_example():
    np.testing.assert_allclose(holm_adjust([0.01, 0.04, 0.03]), [0.03, 0.06, 0.06])
    assert holm_adjust([0.5, 0.9]) == [1.0, 1.0]
    with pytest.raises(ValueError):
        holm_adjust([1.2])


def test_friedman_hand_example():
    rep = friedman_test([[0.9, 0.8, 0.7], [0.6, 0.5, 0.4]], ["a", "b", "c"])
    assert rep.statistic == 4.0
    assert rep.df == 2
    assert rep.average_ranks == {"a": 1.0, "b": 2.0, "c": 3.0}


def test_friedman_against_scipy():
    from scipy.stats import friedmanchisquare

    m = np.random.default_rng(2).random((20, 5))
    rep = friedman_test(m)
    ref = friedmanchisquare(*m.T)
    assert rep.df == 4
    assert rep.statistic == pytest.approx(ref.statistic, rel=1e-12)
    assert rep.p_value == pytest.approx(ref.pvalue, rel=1e-9)
    assert rep.critical_value == pytest.approx(9.488, abs=5e-4)
    assert len(rep.pairwise) == 10
    assert rep.reject == (rep.statistic > rep.critical_value)


def test_chi2_against_scipy():
    from scipy.stats import chi2

    for df in (1, 2, 4, 7, 30):
        for x in (0.01, 0.5, 3.0, 9.488, 40.0):
            assert chi2_sf(x, df) == pytest.approx(chi2.sf(x, df), rel=1e-10, abs=1e-300)
        assert chi2_critical(df) == pytest.approx(chi2.ppf(0.95, df), rel=1e-10)
    assert gammaincc(1.0, 0.0) == 1.0


def test_rank_rows_ties():
    np.testing.assert_array_equal(rank_rows([[0.5, 0.7, 0.5]]), [[2.5, 1.0, 2.5]])


def test_friedman_shape_errors():
    with pytest.raises(ValueError):
        friedman_test([[1.0, 2.0]])
    with pytest.raises(ValueError):
        friedman_test(np.zeros((3, 2)), ["only"])


def test_bootstrap_deterministic_and_paired():
    rng = np.random.default_rng(3)
    groups = np.repeat([f"p{i}" for i in range(15)], 3)
    y = np.repeat(rng.random(15) < 0.5, 3).astype(int)
    sa, sb = rng.normal(size=45), rng.normal(size=45)
    r1 = bootstrap_eval({"a": sa, "b": sb}, y, groups, 30, 20, seed=4)
    r2 = bootstrap_eval({"a": sa, "b": sb}, y, groups, 30, 20, seed=4)
    assert r1["a"].to_dict() == r2["a"].to_dict()
    assert len(r1["a"].replicates) == 20
    alone = bootstrap_eval(sa, y, groups, 30, 20, seed=4)["model"]
    np.testing.assert_array_equal(alone.column("accuracy"), r1["a"].column("accuracy"))
    assert bootstrap_draws(groups, 30, 20, 4) == bootstrap_draws(groups, 30, 20, 4)
    assert bootstrap_draws(groups, 30, 20, 4) != bootstrap_draws(groups, 30, 20, 5)


def test_bootstrap_means_stabilize():
    rng = np.random.default_rng(5)
    groups = np.repeat([f"p{i}" for i in range(40)], 2)
    y = np.repeat(rng.random(40) < 0.5, 2).astype(int)
    s = rng.normal(size=80) + y
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = bootstrap_eval(s, y, groups, 120, 200, seed=0)["model"]
    acc = rep.column("accuracy")
    assert abs(acc[:100].mean() - acc[100:].mean()) < 0.01
