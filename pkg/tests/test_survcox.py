import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize
from sklearn.exceptions import ConvergenceWarning

from jointhaz import CoxPH, CoxSpec, breslow_baseline, fit_cox, fit_tvc_model
from jointhaz.survcox import RiskSets
from conftest import make_dataset
from oracles import brute_partial_loglik, central_grad, complex_step_grad, rel_err

# Small fixtures (at most five subjects), each with a finite maximum.
# Records: id, tstart, tstop, event, y, x
SMALL = {
    "delayed_entry": [(1, 0.0, 1.0, 1, 0.0, 0.0), (2, 0.0, 3.0, 1, 0.0, 1.0), (3, 1.5, 4.0, 0, 0.0, 0.5)],
    "four": [(1, 0.0, 1.0, 1, 0.0, 1.0), (2, 0.0, 2.0, 1, 0.0, 0.0), (3, 0.5, 3.0, 1, 0.0, 1.0),
             (4, 0.0, 2.5, 0, 0.0, 0.5)],
    "ties_tvc": [(1, 0.0, 1.0, 0, 0.0, 0.2), (1, 1.0, 2.0, 1, 0.0, 1.4), (2, 0.0, 2.0, 1, 0.0, 0.9),
                 (3, 0.0, 1.5, 0, 0.0, 0.1), (3, 1.5, 3.0, 1, 0.0, -0.3), (4, 0.3, 3.5, 0, 0.0, 0.6),
                 (5, 0.0, 1.0, 1, 0.0, -0.5)],
}
TWO_COV_SCHEMA = {"id": "id", "tstart": "time", "tstop": "time", "event": "event", "x": "numeric", "z": "numeric"}
TWO_COV = [(1, 0.0, 1.0, 1, 0.3, 1.0), (2, 0.0, 2.0, 1, -0.2, 0.0), (3, 0.2, 3.0, 1, 0.8, 1.0),
           (4, 0.0, 2.5, 0, 0.1, 0.0), (5, 0.0, 1.7, 1, -0.6, 1.0)]


def _arrays(ds, cols):
    f = ds.frame
    return (f["tstart"].to_numpy(), f["tstop"].to_numpy(), f["event"].to_numpy(),
            f[cols].to_numpy(dtype=float))


def _brute_mle(ds, cols):
    t0, t1, ev, X = _arrays(ds, cols)

    def ll(g):
        return brute_partial_loglik(t0, t1, ev, X, g)

    def score(g):
        return complex_step_grad(ll, g)

    if len(cols) == 1:
        return np.array([optimize.brentq(lambda g: score([g])[0], -20, 20, xtol=1e-15, rtol=1e-15)])
    sol = optimize.root(score, np.zeros(len(cols)), method="hybr", tol=1e-14)
    assert np.max(np.abs(score(sol.x))) < 1e-13
    return sol.x


@pytest.mark.parametrize("name", sorted(SMALL))
def test_matches_brute_force_maximum(name):
    ds = make_dataset(SMALL[name])
    fit = CoxPH(["x"]).fit(ds)
    assert fit.converged_
    assert np.max(np.abs(fit.coef_ - _brute_mle(ds, ["x"]))) < 1e-8


def test_matches_brute_force_two_covariates():
    ds = make_dataset(TWO_COV, TWO_COV_SCHEMA)
    fit = CoxPH(["x", "z"]).fit(ds)
    assert np.max(np.abs(fit.coef_ - _brute_mle(ds, ["x", "z"]))) < 1e-8


def test_delayed_entry_risk_sets():
    ds = make_dataset(SMALL["delayed_entry"])
    fit = CoxPH(["x"]).fit(ds)
    rs = fit.risk_sets_
    assert rs.times.tolist() == [1.0, 3.0]
    members = np.split(ds.frame["id"].to_numpy()[rs.entry_row], rs.offsets[1:])
    assert sorted(members[0]) == [1, 2]  # subject 3 enters at 1.5, after the first event
    assert sorted(members[1]) == [2, 3]
    g = fit.coef_[0]
    hand = -math.log1p(math.exp(g)) - math.log1p(math.exp(-0.5 * g))
    assert fit.loglik_ == pytest.approx(hand, abs=1e-14)


def test_two_subject_example_is_flagged_monotone():
    # subject 2 (x = 1) fails first: the partial likelihood e^g / (1 + e^g) has no finite maximum
    ds = make_dataset([(1, 0.0, 2.0, 1, 0.0, 0.0), (2, 0.0, 1.0, 1, 0.0, 1.0)])
    t0, t1, ev, X = _arrays(ds, ["x"])
    grid = np.linspace(-10, 10, 41)
    scores = [complex_step_grad(lambda g: brute_partial_loglik(t0, t1, ev, X, g), [g])[0] for g in grid]
    assert np.all(np.array(scores) > 0)
    with pytest.warns(ConvergenceWarning, match="monotone"):
        fit = CoxPH(["x"]).fit(ds)
    assert fit.monotone_ == ["x"]
    assert fit.coef_[0] > 20


def test_null_model_closed_form():
    ds = make_dataset(SMALL["four"])
    fit = CoxPH([]).fit(ds)
    sizes = fit.risk_sets_.sizes
    assert fit.loglik_ == pytest.approx(-sum(math.log(n) for n in sizes), abs=1e-14)


def test_nelson_aalen_by_hand():
    ds = make_dataset([(1, 0.0, 1.0, 1, 0.0, 0.0), (2, 0.0, 2.0, 1, 0.0, 0.0), (3, 0.0, 3.0, 0, 0.0, 0.0)])
    fit = CoxPH([]).fit(ds)
    H = breslow_baseline(fit)
    assert H.x.tolist() == [1.0, 2.0]
    assert H.jumps.tolist() == [1 / 3, 1 / 2]
    assert H.y.tolist() == [1 / 3, 1 / 3 + 1 / 2]
    assert H(0.5) == 0.0 and H(1.0) == 1 / 3 and H(5.0) == 1 / 3 + 1 / 2


def test_zero_coefficient_baseline_is_nelson_aalen():
    ds = make_dataset(SMALL["ties_tvc"])
    fit = CoxPH(["x"]).fit(ds)
    fit.coef_ = np.zeros(1)
    H = breslow_baseline(fit, ds)
    rs = fit.risk_sets_
    assert np.array_equal(H.jumps, rs.deaths / rs.sizes)


def test_single_subject_single_event():
    ds = make_dataset([(1, 0.0, 0.7, 1, 0.0, 0.0)])
    H = breslow_baseline(CoxPH([]).fit(ds))
    assert H.x.tolist() == [0.7] and H.jumps.tolist() == [1.0]


def test_fixture_baseline_non_decreasing(fixture6):
    fit = CoxPH(["x", "w"]).fit(fixture6)
    H = fit.baseline_
    assert np.all(np.diff(H.y) >= 0) and H(0.0) == 0.0 and np.all(H.jumps > 0)


@pytest.fixture(scope="module")
def sim_data():
    from jointhaz import simulate
    from jointhaz.sim import desk_scenario

    ds = simulate(desk_scenario(7, n_subjects=150))
    return ds.with_column("z", np.sin(np.arange(len(ds))))


def test_score_vanishes_and_information_pd(sim_data):
    fit = CoxPH(["x", "z"], outcome_tvc="y").fit(sim_data)
    _, score, info = fit.partial_loglik(fit.coef_, order=2)
    assert np.max(np.abs(score)) < 1e-8
    np.linalg.cholesky(info)


def test_score_and_information_match_finite_differences(sim_data):
    fit = CoxPH(["x", "z"], outcome_tvc="y").fit(sim_data)
    rng = np.random.default_rng(2)
    for _ in range(5):
        g = fit.coef_ + 0.5 * rng.standard_normal(fit.coef_.size)
        _, score, info = fit.partial_loglik(g, order=2)
        fd_score = central_grad(lambda v: fit.partial_loglik(v), g, 1e-6)
        assert rel_err(score, fd_score) < 1e-5
        fd_info = -np.column_stack([central_grad(lambda v, k=k: fit.partial_loglik(v, order=1)[1][k], g, 1e-6)
                                    for k in range(g.size)]).T
        assert rel_err(info, fd_info) < 1e-5


def test_shift_invariance(sim_data):
    a = CoxPH(["x", "z"]).fit(sim_data)
    b = CoxPH(["x", "z"]).fit(sim_data.replace(x=sim_data.frame["x"] + 5.0))
    assert np.max(np.abs(a.coef_ - b.coef_)) < 1e-8


def test_time_scale_invariance(sim_data):
    a = CoxPH(["x", "z"], outcome_tvc="y").fit(sim_data)
    f = sim_data.frame
    b = CoxPH(["x", "z"], outcome_tvc="y").fit(sim_data.replace(tstart=f["tstart"] * 2, tstop=f["tstop"] * 2))
    assert np.max(np.abs(a.coef_ - b.coef_)) < 1e-12


def test_tvc_with_constant_outcome_equals_time_constant_covariate():
    rows = [(1, 0.0, 0.4, 0, 0.5, 0.0), (1, 0.4, 0.8, 1, 0.5, 0.0), (2, 0.0, 0.5, 0, -0.2, 0.0),
            (2, 0.5, 1.0, 0, -0.2, 0.0), (3, 0.0, 0.6, 1, 1.1, 0.0), (4, 0.1, 0.9, 1, 0.0, 0.0),
            (5, 0.0, 0.3, 0, 0.7, 0.0), (5, 0.3, 0.95, 1, 0.7, 0.0)]
    ds = make_dataset(rows)
    tvc = fit_tvc_model(ds, CoxSpec((), outcome_tvc="y"))
    const = fit_cox(ds.with_column("c", ds.frame["y"].to_numpy()), CoxSpec(("c",)))
    assert tvc.coef_[0] == pytest.approx(const.coef_[0], abs=1e-12)


def test_tvc_spec_requires_outcome():
    with pytest.raises(ValueError):
        fit_tvc_model(make_dataset(SMALL["four"]), CoxSpec(("x",)))


def test_no_events_rejected():
    from jointhaz import DataError

    with pytest.raises(DataError):
        CoxPH(["x"]).fit(make_dataset([(1, 0.0, 1.0, 0, 0.0, 0.0), (2, 0.0, 1.0, 0, 0.0, 1.0)]))


def test_conditional_survival(sim_data):
    fit = CoxPH(["x"], outcome_tvc="y").fit(sim_data)
    h = sim_data.history(sim_data.ids[0])
    s = float(h.times[-1])
    u = np.linspace(s, 1.0, 11)
    p = fit.predict_conditional_survival(h.truncate(s), u, s=s)
    assert p[0] == 1.0
    assert np.all(np.diff(p) <= 0)


records = st.lists(
    st.tuples(st.floats(0.0, 0.5), st.floats(0.05, 1.0), st.booleans(), st.floats(-2.0, 2.0)),
    min_size=2, max_size=5)


@settings(max_examples=60, deadline=None)
@given(records, st.floats(-3.0, 3.0))
def test_partial_loglik_matches_enumeration(recs, gamma):
    rows = [(i + 1, a, a + d, int(e), 0.0, x) for i, (a, d, e, x) in enumerate(recs)]
    if not any(r[3] for r in rows):
        return
    ds = make_dataset(rows)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = CoxPH(["x"]).fit(ds)
    t0, t1, ev, X = _arrays(ds, ["x"])
    assert fit.partial_loglik([gamma]) == pytest.approx(brute_partial_loglik(t0, t1, ev, X, [gamma]),
                                                        rel=1e-12, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(records)
def test_risk_sets_respect_intervals(recs):
    t0 = np.array([a for a, _, _, _ in recs])
    t1 = t0 + np.array([d for _, d, _, _ in recs])
    ev = np.array([int(e) for _, _, e, _ in recs])
    rs = RiskSets(t0, t1, ev)
    for k, t in enumerate(rs.times):
        members = set(rs.entry_row[rs.entry_block == k].tolist())
        assert members == {j for j in range(len(t0)) if t0[j] < t <= t1[j]}
