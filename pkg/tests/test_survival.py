import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmadherence.errors import ContractError, HorizonError, RankDeficiencyError
from lmadherence.survival import (
    SurvivalSample,
    chi2_sf,
    cox_fit,
    format_p,
    km_estimate,
    logrank_test,
    partial_loglik,
    rmst,
    rmst_difference,
    rmst_variance,
    write_curves_csv,
)
from lmadherence.survival.cox import _RiskSets

from oracles import cox_partial_loglik

sm_survfunc = pytest.importorskip("statsmodels.duration.survfunc")
sm_hazard = pytest.importorskip("statsmodels.duration.hazard_regression")


def random_survival(rng, n, ties=True):
    t = rng.exponential(2.0, n)
    if ties:
        t = np.ceil(t * 4) / 4
    return t, rng.random(n) < 0.7


# -- Kaplan-Meier -----------------------------------------------------------------


def test_km_hand_example():
    # deaths at 1 and 3, a censoring at 2
    c = km_estimate([1.0, 2.0, 3.0], [True, False, True])
    npt.assert_allclose(c.survival, [2 / 3, 0.0])
    assert c(1.0) == pytest.approx(2 / 3) and c(0.5) == 1.0 and c(3.0) == 0.0
    assert c.at_risk.tolist() == [3, 1]


def test_km_censoring_at_event_time_stays_at_risk():
    c = km_estimate([1.0, 1.0, 2.0], [True, False, True])
    assert c.at_risk.tolist() == [3, 1]
    npt.assert_allclose(c.survival, [2 / 3, 0.0])


def test_km_greenwood_hand():
    c = km_estimate([1, 2, 3, 4], [True, True, False, True])
    # S(1)=3/4, S(2)=1/2, var = S^2 * sum d/(n(n-d))
    npt.assert_allclose(c.greenwood_var[:2], [(3 / 4) ** 2 * (1 / 12), (1 / 2) ** 2 * (1 / 12 + 1 / 6)])


def test_km_matches_statsmodels():
    rng = np.random.default_rng(1)
    t, e = random_survival(rng, 300)
    ours = km_estimate(t, e)
    ref = sm_survfunc.SurvfuncRight(t, e.astype(int))
    npt.assert_allclose(ours.event_times, ref.surv_times)
    npt.assert_allclose(ours.survival, ref.surv_prob, rtol=1e-12)
    npt.assert_allclose(np.sqrt(ours.greenwood_var), ref.surv_prob_se, rtol=1e-10)


@given(st.lists(st.tuples(st.floats(0.01, 10), st.booleans()), min_size=1, max_size=40))
def test_km_is_nonincreasing_probability(data):
    t, e = map(np.array, zip(*data))
    c = km_estimate(t, e)
    assert np.all(np.diff(np.concatenate([[1.0], c.survival])) <= 1e-15)
    assert np.all((c.survival >= 0) & (c.survival <= 1))


def test_km_requires_data():
    with pytest.raises(ContractError):
        km_estimate([], [])


def test_survival_sample_validation():
    with pytest.raises(ContractError):
        SurvivalSample([1.0, 0.0], [True, False])
    s = SurvivalSample([1.0, 2.0, 3.0], [1, 0, 1], group=["a", "b", "a"], ids=["x", "y", "z"])
    sub = s.subset(s.group == "a")
    assert len(sub) == 2 and sub.ids == ["x", "z"]


def test_curve_file(tmp_path):
    write_curves_csv({"A": km_estimate([1, 2], [1, 1])}, tmp_path / "km.csv")
    lines = (tmp_path / "km.csv").read_text().splitlines()
    assert lines[0] == "group,time,survival,at_risk,events,greenwood_var"
    assert lines[1].startswith("A,0.0,1.0,2") and len(lines) == 4


# -- log-rank ----------------------------------------------------------------------


def test_logrank_identical_groups_is_zero():
    rng = np.random.default_rng(2)
    t, e = random_survival(rng, 100)
    res = logrank_test(np.concatenate([t, t]), np.concatenate([e, e]), np.repeat(["a", "b"], 100))
    assert res.statistic == pytest.approx(0.0, abs=1e-10)
    assert res.p_value == pytest.approx(1.0)


def test_two_group_statistic_is_z_squared():
    rng = np.random.default_rng(3)
    for _ in range(20):
        t, e = random_survival(rng, 80)
        g = rng.random(80) < 0.5
        res = logrank_test(t, e, g)
        # Z from the hypergeometric variance of group 1 deaths
        O = E = V = 0.0
        for s in np.unique(t[e]):
            at = t >= s
            n, n1 = at.sum(), (at & g).sum()
            d = ((t == s) & e).sum()
            d1 = ((t == s) & e & g).sum()
            O += d1
            E += d * n1 / n
            if n > 1:
                V += d * (n1 / n) * (1 - n1 / n) * (n - d) / (n - 1)
        assert res.statistic == pytest.approx((O - E) ** 2 / V, rel=1e-10)


def test_logrank_matches_statsmodels_three_groups():
    rng = np.random.default_rng(4)
    t, e = random_survival(rng, 400)
    g = rng.integers(0, 3, 400)
    t = t * (1 + 0.3 * g)
    res = logrank_test(t, e, g)
    chisq, p = sm_survfunc.survdiff(t, e.astype(int), g)
    assert res.df == 2
    assert res.statistic == pytest.approx(chisq, rel=1e-10)
    assert res.p_value == pytest.approx(p, rel=1e-8)


def test_chi2_sf_values():
    assert chi2_sf(3.841458820694124, 1) == pytest.approx(0.05, rel=1e-12)
    assert chi2_sf(0.0, 3) == 1.0
    assert chi2_sf(2000.0, 2) < 1e-300
    assert format_p(0.0) == "< 1e-300" and format_p(0.5) == "0.5"


def test_logrank_errors():
    with pytest.raises(ContractError):
        logrank_test([1, 2], [1, 1], ["a", "a"])
    with pytest.raises(ContractError):
        logrank_test([1, 2], [1, 1], ["a", "b"], groups=["a", "b", "c"])


# -- Cox ----------------------------------------------------------------------------


@pytest.mark.parametrize("ties", ["efron", "breslow"])
def test_partial_likelihood_matches_loops(ties):
    rng = np.random.default_rng(5)
    t, e = random_survival(rng, 40)
    X = rng.normal(size=(40, 2))
    beta = np.array([0.3, -0.5])
    rs = _RiskSets(t, e, X)
    assert partial_loglik(beta, rs, ties, derivatives=False) == pytest.approx(
        cox_partial_loglik(t, e, X, beta, ties), rel=1e-12)


def test_cox_brute_force_small_sample():
    t = np.array([1.0, 2.0, 2.0, 3.0, 4.0, 5.0])
    e = np.array([1, 1, 1, 0, 1, 1], bool)
    x = np.array([[0.5], [1.0], [-0.2], [0.3], [-1.0], [0.1]])
    fit = cox_fit(t, e, x)
    grid = np.linspace(-5, 5, 20001)
    ll = [cox_partial_loglik(t, e, x, np.array([b])) for b in grid]
    assert fit.coef[0] == pytest.approx(grid[int(np.argmax(ll))], abs=1e-3)
    assert fit.loglik == pytest.approx(max(ll), abs=1e-6)


@pytest.mark.parametrize("ties", ["efron", "breslow"])
def test_cox_matches_statsmodels(ties):
    rng = np.random.default_rng(6)
    n = 300
    X = np.column_stack([rng.normal(size=n), rng.random(n) < 0.5])
    t = np.ceil(rng.exponential(1 / np.exp(X @ [0.5, -0.7])) * 10) / 10
    e = rng.random(n) < 0.8
    ours = cox_fit(t, e, X, ties=ties)
    ref = sm_hazard.PHReg(t, X, status=e.astype(int), ties=ties).fit()
    npt.assert_allclose(ours.coef, ref.params, rtol=1e-6)
    npt.assert_allclose(ours.se, ref.bse, rtol=1e-5)


def test_cox_recovers_log_hr():
    rng = np.random.default_rng(7)
    n = 2000
    x = rng.random(n) < 0.5
    t = rng.exponential(1 / np.where(x, 2.0, 1.0))
    c = rng.exponential(2.0, n)
    fit = cox_fit(np.minimum(t, c), t <= c, x[:, None].astype(float), ["x"])
    assert abs(fit.coef[0] - math.log(2)) < 0.1
    lo, hi = fit.ci
    assert lo[0] < 2 < hi[0]
    assert np.all(np.diff(fit.trace) >= -1e-12)


def test_cox_rank_deficiency_names_column():
    rng = np.random.default_rng(8)
    t, e = random_survival(rng, 50)
    a = rng.normal(size=50)
    with pytest.raises(RankDeficiencyError, match="'b'"):
        cox_fit(t, e, np.column_stack([a, 2 * a]), ["a", "b"])
    with pytest.raises(RankDeficiencyError, match="'c'"):
        cox_fit(t, e, np.column_stack([a, np.ones(50)]), ["a", "c"])


def test_cox_contract_errors():
    with pytest.raises(ContractError):
        cox_fit([1, 2], [0, 0], [[1.0], [2.0]])
    with pytest.raises(ContractError):
        cox_fit([1, 2], [1, 0], [[1.0], [2.0]], ties="exact")


def test_cox_table_and_csv(tmp_path):
    rng = np.random.default_rng(9)
    t, e = random_survival(rng, 100)
    fit = cox_fit(t, e, rng.normal(size=(100, 1)), ["z"])
    row = fit.table()[0]
    assert row["hr"] == pytest.approx(math.exp(row["coef"]))
    assert row["ci_lower"] < row["hr"] < row["ci_upper"]
    fit.to_csv(tmp_path / "cox.csv")
    assert (tmp_path / "cox.csv").read_text().startswith("term,coef,se,hr,ci_lower,ci_upper,p\nz,")


# -- RMST ----------------------------------------------------------------------------


def test_rmst_hand_example():
    c = km_estimate([1.0, 2.0, 3.0], [True, False, True])
    # area: 1*1 + (2/3)*(3-1) = 7/3 up to tau 3; up to 2.5: 1 + (2/3)*1.5 = 2
    assert rmst(c, 3.0) == pytest.approx(7 / 3)
    assert rmst(c, 2.5) == pytest.approx(2.0)
    assert rmst(c, 0.5) == pytest.approx(0.5)


def test_rmst_variance_hand_example():
    c = km_estimate([1.0, 2.0], [True, True])
    # S = 1/2 on [1, 2); A(1) = 0.5; the second event has n = d, no contribution
    assert rmst_variance(c, 2.0) == pytest.approx(0.25 * 1 / (2 * 1))


def test_rmst_matches_exponential_mean():
    rng = np.random.default_rng(10)
    n, lam, tau = 5000, 0.2, 7.0
    t = rng.exponential(1 / lam, n)
    cens = rng.uniform(0, 30, n)
    res = rmst_difference(np.minimum(t, cens), t <= cens, np.minimum(t, cens), t <= cens, tau)
    assert abs(res.rmst_a - (1 - math.exp(-lam * tau)) / lam) < 0.1
    assert res.difference == 0.0


def test_rmst_horizon_errors():
    with pytest.raises(HorizonError, match="tau"):
        rmst_difference([1, 2], [1, 0], [1, 3], [1, 1], 7.0)
    res = rmst_difference([1, 2], [1, 0], [1, 3], [1, 1], 7.0, truncate=True)
    assert res.tau == 3.0
    with pytest.raises(ContractError):
        rmst(km_estimate([1.0], [True]), 0.0)


def test_rmst_shorter_curve_is_carried_flat():
    res = rmst_difference([1.0, 2.0], [True, False], [1.0, 5.0], [False, False], 4.0)
    assert res.rmst_a == pytest.approx(1 + 0.5 * 3)
    assert res.rmst_b == pytest.approx(4.0)


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(0.01, 10), st.booleans()), min_size=2, max_size=40), st.floats(0.1, 10))
def test_rmst_bounded_by_tau(data, tau):
    t, e = map(np.array, zip(*data))
    c = km_estimate(t, e)
    assert -1e-12 <= rmst(c, tau) <= tau + 1e-12
    assert rmst_variance(c, tau) >= 0
