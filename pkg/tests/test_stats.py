import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from statsmodels.stats.multitest import multipletests

from cmlf.errors import ContractViolation
from cmlf.stats import holm, paired_tests, paired_ttest, stars


def test_holm_worked_example():
    assert holm([0.01, 0.02, 0.04]).tolist() == [0.03, 0.04, 0.04]
    assert holm([0.04, 0.01, 0.02]).tolist() == [0.04, 0.03, 0.04]
    assert holm([0.5, 0.9]).tolist() == [1.0, 1.0]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=12))
def test_holm_matches_statsmodels_and_dominates_raw(p):
    ours = holm(p)
    ref = multipletests(p, method="holm")[1]
    np.testing.assert_allclose(ours, ref, rtol=1e-12, atol=1e-15)
    assert np.all(ours >= np.asarray(p) - 1e-15) and np.all(ours <= 1.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=10))
def test_holm_preserves_order(p):
    adj = holm(p)
    order = np.argsort(p, kind="stable")
    assert np.all(np.diff(adj[order]) >= -1e-15)


def test_holm_rejects_invalid():
    with pytest.raises(ContractViolation):
        holm([0.1, 1.5])
    with pytest.raises(ContractViolation):
        holm([[0.1]])


def test_paired_ttest_degenerate_cases():
    a = np.array([1.0, 2.0, 3.0, 4.0])
    assert paired_ttest(a, a) == 1.0
    assert paired_ttest(a - 1.0, a) == 0.0
    assert paired_ttest(a - 1.0, a, alternative="less") == 0.0
    assert paired_ttest(a - 1.0, a, alternative="greater") == 1.0


def test_paired_ttest_detects_shift():
    rng = np.random.default_rng(0)
    a = rng.normal(size=30)
    b = a + 0.5 + 0.1 * rng.normal(size=30)
    assert paired_ttest(a, b, alternative="less") < 1e-6
    assert paired_ttest(a, b, alternative="greater") > 0.99


def test_paired_tests_family():
    rng = np.random.default_rng(1)
    base = rng.normal(size=20)
    table = {"w_cm": base, "wo_cm": base + 0.3 + 0.05 * rng.normal(size=20), "joint": base + rng.normal(size=20)}
    res = paired_tests(table, alternative="two-sided", family="aligned")
    assert len(res) == 3
    np.testing.assert_allclose([r["p_holm"] for r in res], holm([r["p_raw"] for r in res]))
    top = next(r for r in res if (r["a"], r["b"]) == ("w_cm", "wo_cm"))
    assert top["stars"] == "***" and top["mean_diff"] < 0
    with pytest.raises(ContractViolation):
        paired_tests({"a": [1, 2, 3], "b": [1, 2]})


def test_stars_thresholds():
    assert [stars(p) for p in (0.0005, 0.005, 0.03, 0.2)] == ["***", "**", "*", "ns"]
