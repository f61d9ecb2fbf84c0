import math
import warnings

import numpy as np
import pytest

from jointhaz import (
    AssociationSpec,
    BaselineSpec,
    DataError,
    JointModel,
    JointSpec,
    LmmSpec,
    decompose,
    mse_harness,
    predict_survival,
    simulate,
    update_prediction,
)
from jointhaz.predict import mse_table
from jointhaz.sim import desk_scenario
from conftest import build_joint
from oracles import SubjectOracle

KNOTS = [0, 0, 0, 0, 0.25, 0.5, 0.75, 1, 1, 1, 1]
PARAMS = {"beta": np.array([1.5, -1.0, 0.3, -0.2]), "sigma2": 0.1, "Q": np.array([[0.3, 0.05], [0.05, 0.2]]),
          "gamma": np.array([0.2]), "alpha": np.array([-1.5]), "omega": np.linspace(0.5, 2.0, 7)}


def _spec(kind="value", surv=("x",)):
    return JointSpec(LmmSpec("y", ("x",), 2, "slope"), surv, AssociationSpec(kind), BaselineSpec(3, knots=(0.25, 0.5, 0.75)))


@pytest.fixture(scope="module")
def model(fixture6):
    return build_joint(fixture6.schema, _spec(), PARAMS, KNOTS)


@pytest.fixture(scope="module")
def sim_fit():
    ds = simulate(desk_scenario(1, n_subjects=150))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return JointModel("y", ["x"], ["x"], compute_se=False).fit(ds), ds


def _hand_fit(schema, alpha, beta, gamma, kind="value"):
    p = dict(PARAMS, alpha=np.atleast_1d(alpha), gamma=np.array([gamma]))
    p["beta"] = np.array([1.0, 0.0, 0.0, beta])
    if kind == "value_and_slope":
        p["alpha"] = np.array([alpha, 0.1])
    return build_joint(schema, _spec(kind), p, KNOTS)


@pytest.mark.parametrize("alpha, beta, gamma, rounded", [(-0.5552, -0.1369, 0.1089, 0.1849),
                                                         (-0.4534, -0.0603, 0.2413, 0.2686)])
def test_decomposition_examples(fixture6, alpha, beta, gamma, rounded):
    d = decompose(_hand_fit(fixture6.schema, alpha, beta, gamma), "x")
    assert d.total == pytest.approx(alpha * beta + gamma, abs=1e-12)
    assert d.direct + d.indirect == pytest.approx(d.total, abs=1e-12)
    assert round(d.total, 4) == rounded


def test_decomposition_without_mediation(fixture6):
    d = decompose(_hand_fit(fixture6.schema, 0.0, -0.3, 0.25), "x")
    assert d.total == 0.25 and d.indirect == 0.0


def test_decomposition_refusals(fixture6):
    with pytest.raises(ValueError, match="current-value"):
        decompose(_hand_fit(fixture6.schema, -0.5, 0.1, 0.1, kind="value_and_slope"), "x")
    with pytest.raises(KeyError):
        decompose(_hand_fit(fixture6.schema, -0.5, 0.1, 0.1), "w")
    m = build_joint(fixture6.schema, _spec(surv=()), dict(PARAMS, gamma=np.zeros(0)), KNOTS)
    with pytest.raises(KeyError, match="survival"):
        decompose(m, "x")


def _history(fixture6, sid=2):
    h = fixture6.history(sid)
    s = float(h.times[-1])
    return h.truncate(s), s


def test_prediction_starts_at_one_and_decreases(model, fixture6):
    for sid in fixture6.ids:
        h = fixture6.history(sid)
        s = float(h.times[~np.isnan(h.values)][-1])
        u = np.linspace(s, s + 0.5, 11)
        p = predict_survival(model, h.truncate(s), u, n_draws=200)
        assert p.mean[0] == 1.0 and p.lo[0] == 1.0 and p.hi[0] == 1.0
        assert np.all(np.diff(p.mean) <= 0)
        assert np.all(p.lo <= p.mean) and np.all(p.mean <= p.hi)


def test_horizon_before_conditioning_time_rejected(model, fixture6):
    h, s = _history(fixture6)
    with pytest.raises(ValueError):
        predict_survival(model, h, [s - 0.1, s + 0.1])


def test_exponential_prediction(fixture6):
    w = -0.4
    p = dict(PARAMS, alpha=np.zeros(1), gamma=np.zeros(1), omega=np.full(7, w))
    m = build_joint(fixture6.schema, _spec(), p, KNOTS)
    u = np.array([0.8, 0.9, 1.0])
    for sid in (2, 5):
        h, s = _history(fixture6, sid)
        got = predict_survival(m, h, u[u >= s], n_draws=50).mean
        assert np.allclose(got, np.exp(-math.exp(w) * (u[u >= s] - s)), rtol=0, atol=1e-12)


def _oracle_survival(fixture6, sid, s, u):
    h = fixture6.history(sid).truncate(s)
    x = [float(h.rows["x"].iloc[0])]

    def make(exit_):
        return SubjectOracle(h.times, h.values, x, h.entry, exit_, 0, PARAMS["beta"], PARAMS["sigma2"],
                             PARAMS["Q"], PARAMS["gamma"], PARAMS["alpha"], PARAMS["omega"],
                             np.asarray(KNOTS, dtype=float))

    den = make(s).loglik()
    return np.array([math.exp(make(v).loglik() - den) for v in u])


@pytest.mark.parametrize("sid", [2, 5, 6])
def test_monte_carlo_matches_quadrature_oracle(model, fixture6, sid):
    h, s = _history(fixture6, sid)
    u = np.array([s + 0.05, s + 0.15, min(s + 0.25, 1.0)])
    p = predict_survival(model, h, u, n_draws=500, seed=3)
    ref = _oracle_survival(fixture6, sid, s, u)
    assert np.all(np.abs(p.mean - ref) <= 3 * p.mc_se)
    assert np.all(p.mc_se > 0)


def test_repeated_measurement_leaves_prediction_unchanged(model, fixture6):
    h, s = _history(fixture6)
    u = [s + 0.1, s + 0.2]
    base = predict_survival(model, h, u, seed=1)
    upd, _ = update_prediction(model, h, s, float(h.values[-1]), u, seed=1)
    assert np.allclose(upd.mean, base.mean, rtol=0, atol=3 * np.max(base.mc_se))


def test_expected_measurement_moves_mode_less_than_extreme(model, fixture6):
    h, s = _history(fixture6)
    t = s + 0.1
    b0 = model.posterior_nodes([h], [s])[1]["bhat"][0]
    x = float(h.rows["x"].iloc[0])
    expected = float(PARAMS["beta"] @ [1.0, t, t * t, x] + b0[0] + b0[1] * t)
    sd = math.sqrt(PARAMS["sigma2"] + np.array([1.0, t]) @ PARAMS["Q"] @ np.array([1.0, t]))

    def mode_after(value):
        new = h.append(t, value)
        return model.posterior_nodes([new], [t])[1]["bhat"][0]

    near = np.linalg.norm(mode_after(expected) - b0)
    far = np.linalg.norm(mode_after(expected + 4 * sd) - b0)
    assert near < far


def test_sequence_of_updates(sim_fit):
    fit, ds = sim_fit
    h = ds.history(ds.ids[0])
    s = float(h.times[2])
    cur = h.truncate(s)
    rng = np.random.default_rng(0)
    curves = []
    for k in range(4):
        t = s + 0.1 * (k + 1)
        u = np.linspace(t, t + 0.5, 6)
        pred, cur = update_prediction(fit, cur, t, float(rng.normal(1.0, 1.0)), u, n_draws=200)
        curves.append(pred)
    assert [c.s for c in curves] == pytest.approx([s + 0.1, s + 0.2, s + 0.3, s + 0.4])
    for c in curves:
        assert c.mean[0] == 1.0 and np.all(np.diff(c.mean) <= 0)
    assert cur.n_measurements == 3 + 4


def test_predictions_reproducible(model, fixture6):
    h, s = _history(fixture6)
    a = predict_survival(model, h, [s + 0.1], seed=9)
    b = predict_survival(model, h, [s + 0.1], seed=9)
    c = predict_survival(model, h, [s + 0.1], seed=10)
    assert np.array_equal(a.mean, b.mean) and not np.array_equal(a.mean, c.mean)


def test_band_width_error_shrinks_with_draws(model, fixture6):
    h, s = _history(fixture6, 5)
    u = [s + 0.3]

    def widths(n, seeds):
        preds = (predict_survival(model, h, u, n_draws=n, seed=k) for k in seeds)
        return np.array([p.hi[0] - p.lo[0] for p in preds])

    ratios = []
    for r in range(10):
        seeds = range(1000 * r, 1000 * r + 40)
        ratios.append(np.std(widths(400, seeds), ddof=1) / np.std(widths(200, seeds), ddof=1))
    assert 0.6 <= np.mean(ratios) <= 0.82


class _Known:
    """Predicts the realised outcome (or a constant)."""

    def __init__(self, ds, const=None):
        self.exits = {h.id: (h.exit, h.event) for h in ds.histories()}
        self.const = const

    def predict_conditional_survival(self, history, times, s=None):
        if self.const is not None:
            return np.full(len(times), self.const)
        exit_, event = self.exits[history.id]
        return np.where(event & (exit_ <= np.asarray(times)), 0.0, 1.0)


def test_mse_harness_trivial_cases():
    ds = simulate(desk_scenario(5, n_subjects=120))
    out = mse_harness({"perfect": _Known(ds), "half": _Known(ds, 0.5)}, ds, [0.1, 0.3])
    perfect = out[out.model == "perfect"]
    half = out[out.model == "half"]
    assert np.all(perfect.mse == 0.0)
    assert np.allclose(half.mse, 0.25, rtol=0, atol=1e-15)
    assert list(out.columns) == ["model", "horizon", "mse", "n"]
    assert np.all(out.n > 0)
    assert mse_table([1, 0, 0.5, 0.5], [1, 0, 1, 0]) == 0.125


def test_mse_harness_excludes_censored_before_horizon():
    ds = simulate(desk_scenario(5, n_subjects=120))
    out = mse_harness({"half": _Known(ds, 0.5)}, ds, [0.05, 0.5])
    n_short, n_long = out.n.tolist()
    assert n_long < n_short


def test_history_without_measurement_rejected(model):
    from conftest import make_dataset

    ds = make_dataset([(1, 0.0, 0.3, 0, float("nan"), 0.5), (1, 0.3, 0.6, 0, float("nan"), 0.5)])
    with pytest.raises(DataError, match="no measurement"):
        predict_survival(model, ds.history(1), [0.9])
