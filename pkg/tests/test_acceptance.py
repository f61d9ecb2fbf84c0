"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line
in the terminal summary (see ``conftest.py``)."""

import time
import warnings
from fractions import Fraction

import numpy as np

from jointhaz import (
    CoxPH,
    JointModel,
    LinearMixedModel,
    breslow_baseline,
    decompose,
    predict_survival,
    simulate,
    subject_loglik,
    update_prediction,
)
from jointhaz._jointlik import JointLikelihood
from jointhaz.sim import desk_scenario
from _clirun import SUBCOMMANDS, _commands
from _study import TRUE_ALPHA, longest_horizon_mse
from conftest import build_joint, make_dataset
from oracles import central_grad, rel_err


def note(request, text):
    request.node.user_properties.append(("detail", text))
    print(text)


# -- 1 -------------------------------------------------------------------------------
def test_criterion_01_decomposition_arithmetic(request, fixture6):
    from test_predict import _hand_fit

    cases = [("-0.5552", "-0.1369", "0.1089", 0.1849), ("-0.4534", "-0.0603", "0.2413", 0.2686)]
    fits = [_hand_fit(fixture6.schema, float(a), float(b), float(g)) for a, b, g, _ in cases]
    lines = []
    ok = True
    for (a, b, g, shown), fit in zip(cases, fits):
        t0 = time.perf_counter()
        d = decompose(fit, "x")
        elapsed = time.perf_counter() - t0
        exact = float(Fraction(a) * Fraction(b) + Fraction(g))
        ok &= abs(d.total - exact) <= 1e-12 and round(d.total, 4) == shown and elapsed < 1e-3
        lines.append(f"{d.total:.8f} ~ {shown} in {elapsed * 1e6:.0f}us")
    note(request, "; ".join(lines))
    assert ok


# -- 2 - 4, 11: the 20 desk-scale replicates ---------------------------------------------
def test_criterion_02_parameter_recovery(request, replicates):
    a = np.array([r.alpha for r in replicates])
    se = np.array([r.alpha_se for r in replicates])
    cover = np.mean(np.abs(a - TRUE_ALPHA) <= 1.959963984540054 * se)
    seconds = sum(r.seconds for r in replicates)
    note(request, f"mean alpha {a.mean():.4f} (truth {TRUE_ALPHA}), coverage {cover:.2f}, {seconds:.0f}s total")
    assert len(replicates) == 20
    assert abs(a.mean() - TRUE_ALPHA) <= 0.15
    assert 0.80 <= cover <= 1.0
    assert seconds < 600


def test_criterion_03_tvc_attenuation(request, replicates):
    tvc = np.mean([abs(r.tvc_coef) for r in replicates])
    joint = np.mean([abs(r.alpha) for r in replicates])
    note(request, f"mean |alpha_tvc| {tvc:.4f} < mean |alpha_joint| {joint:.4f}; truth |alpha| {abs(TRUE_ALPHA)}")
    assert tvc < joint
    assert tvc < abs(TRUE_ALPHA)


def test_criterion_04_twostage_se_understated(request, replicates):
    hits = sum(r.twostage_se <= r.alpha_se for r in replicates)
    note(request, f"stage-2 SE <= joint SE in {hits}/20 replicates")
    assert hits >= 12


# -- 5 -------------------------------------------------------------------------------
def test_criterion_05_em_monotone(request, replicates, fixture6):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fix = JointModel("y", ["x"], ["x"], time_degree=1, n_knots=1, max_em=60, compute_se=False).fit(fixture6)
    traces = [("fixture6", fix.em_trace_)] + [(f"replicate {r.seed}", r.em_trace) for r in replicates]
    worst = min(float(np.min(np.diff(t))) if len(t) > 1 else 0.0 for _, t in traces)
    note(request, f"{len(traces)} traces, smallest step {worst:.2e}")
    assert worst >= -1e-8


# -- 6 -------------------------------------------------------------------------------
def test_criterion_06_likelihood_oracle(request):
    from test_joint import KINDS, KNOTS, _oracle, _random_params, _spec

    ds = simulate(desk_scenario(21, n_subjects=150))
    hs = ds.histories()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for k in range(25):
        kind = KINDS[k % 5]
        lag = 0.15 if kind == "lagged" else 0.0
        h = hs[int(rng.integers(len(hs)))]
        params = _random_params(rng, kind)
        got = subject_loglik(params, h, _spec(kind, lag), KNOTS)
        ref = _oracle(h, params, kind, lag).loglik()
        worst = max(worst, abs(got - ref) / abs(ref))
    note(request, f"25 combinations, all five associations, worst relative error {worst:.1e} "
                  "(600^2 trapezoid over +-10 prior sd)")
    assert worst < 1e-6


# -- 7 -------------------------------------------------------------------------------
def test_criterion_07_gradients(request):
    rng = np.random.default_rng(1)
    ds = simulate(desk_scenario(1, n_subjects=150))
    lmm = LinearMixedModel("y", ["x"]).fit(ds)
    th = lmm.params_vector()
    e_lmm = max(rel_err(lmm.score(t), central_grad(lmm.loglik, t, 1e-6))
                for t in (th + 0.2 * rng.standard_normal(th.size) for _ in range(5)))
    cox = CoxPH(["x"], outcome_tvc="y").fit(ds)
    e_cox = max(rel_err(cox.partial_loglik(g, order=1)[1], central_grad(cox.partial_loglik, g, 1e-6))
                for g in (cox.coef_ + 0.5 * rng.standard_normal(cox.coef_.size) for _ in range(5)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        joint = JointModel("y", ["x"], ["x"], compute_se=False).fit(ds)
    e_joint = max(rel_err(joint.score(t), central_grad(joint.loglik, t, 1e-5))
                  for t in (joint.theta_ + 0.05 * rng.standard_normal(joint.theta_.size) for _ in range(5)))
    note(request, f"LMM {e_lmm:.1e}, Cox {e_cox:.1e}, joint {e_joint:.1e}")
    assert e_lmm < 1e-5 and e_cox < 1e-5 and e_joint < 1e-4


# -- 8 -------------------------------------------------------------------------------
def test_criterion_08_quadrature_convergence(request, fixture6):
    from test_joint import _fixture_model

    worst = 0.0
    for kind in ("value", "slope", "value_and_slope", "cumulative", "lagged"):
        m = _fixture_model(fixture6, kind)
        lay = m.layout_for(fixture6.frame)
        d = (JointLikelihood(lay, 9).evaluate(m.theta_)["per_subject"]
             - JointLikelihood(lay, 15).evaluate(m.theta_)["per_subject"])
        worst = max(worst, float(np.max(np.abs(d))))
    note(request, f"fixture6, five associations, largest per-subject change {worst:.1e}")
    assert worst < 1e-4


# -- 9 -------------------------------------------------------------------------------
def test_criterion_09_cox_brute_force(request):
    from test_survcox import SMALL, TWO_COV, TWO_COV_SCHEMA, _brute_mle

    worst = 0.0
    for rows in SMALL.values():
        ds = make_dataset(rows)
        worst = max(worst, float(np.max(np.abs(CoxPH(["x"]).fit(ds).coef_ - _brute_mle(ds, ["x"])))))
    ds = make_dataset(TWO_COV, TWO_COV_SCHEMA)
    worst = max(worst, float(np.max(np.abs(CoxPH(["x", "z"]).fit(ds).coef_ - _brute_mle(ds, ["x", "z"])))))
    na = breslow_baseline(CoxPH([]).fit(make_dataset([(1, 0.0, 1.0, 1, 0.0, 0.0), (2, 0.0, 2.0, 1, 0.0, 0.0),
                                                      (3, 0.0, 3.0, 0, 0.0, 0.0)])))
    exact = na.jumps.tolist() == [1 / 3, 1 / 2]
    note(request, f"{len(SMALL) + 1} fixtures, largest |gamma - brute| {worst:.1e}; Nelson-Aalen exact: {exact}")
    assert worst < 1e-8 and exact


# -- 10 ------------------------------------------------------------------------------
def test_criterion_10_dynamic_prediction(request, fixture6):
    from test_predict import KNOTS, PARAMS, _history, _oracle_survival, _spec

    model = build_joint(fixture6.schema, _spec(), PARAMS, KNOTS)
    starts, monotone, within, dup = True, True, True, True
    z = []
    for sid in (2, 5, 6):
        h, s = _history(fixture6, sid)
        u = np.array([s, s + 0.05, s + 0.15, min(s + 0.25, 1.0)])
        p = predict_survival(model, h, u, n_draws=500, seed=3)
        starts &= p.mean[0] == 1.0
        monotone &= bool(np.all(np.diff(p.mean) <= 0))
        ref = _oracle_survival(fixture6, sid, s, u[1:])
        z.append(np.max(np.abs(p.mean[1:] - ref) / p.mc_se[1:]))
        within &= z[-1] <= 3
        upd, _ = update_prediction(model, h, s, float(h.values[-1]), u, n_draws=500, seed=3)
        dup &= bool(np.allclose(upd.mean, p.mean, rtol=0, atol=3 * np.max(p.mc_se)))
    note(request, f"P(u=s)=1: {starts}; monotone: {monotone}; max |MC - oracle| / MC-SE {max(z):.2f}; "
                  f"duplicate update unchanged: {dup}")
    assert starts and monotone and within and dup


# -- 11 ------------------------------------------------------------------------------
def test_criterion_11_predictive_mse(request, replicates):
    wins = sum(longest_horizon_mse(r, "joint") <= longest_horizon_mse(r, "tvc") for r in replicates)
    note(request, f"joint MSE <= TVC MSE at the longest horizon in {wins}/20 replicates")
    assert wins >= 15


# -- 12 ------------------------------------------------------------------------------
def test_criterion_12_determinism(request, cli_runs, cli_work, cli_joint_dir):
    ref_dir, ref_codes = cli_runs["t1"]
    same = 0
    for name in SUBCOMMANDS:
        files = _commands(cli_work, cli_joint_dir, cli_work)[name][1]
        ok = ref_codes[name] == 0
        for label in ("t8", "env"):
            d, codes = cli_runs[label]
            ok &= codes[name] == ref_codes[name]
            ok &= all((d / f).read_bytes() == (ref_dir / f).read_bytes() for f in files)
        same += ok
    note(request, f"{same}/{len(SUBCOMMANDS)} subcommands byte-identical across --threads 1, --threads 8 "
                  "and JOINTHAZ_THREADS=8")
    assert same == len(SUBCOMMANDS)


# -- 13 ------------------------------------------------------------------------------
def test_criterion_13_association_structures(request):
    ds = simulate(desk_scenario(1))
    fits = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for kind, lag in [("value", 0.0), ("slope", 0.0), ("value_and_slope", 0.0), ("cumulative", 0.0),
                          ("lagged", 0.1), ("lagged", 1e-4)]:
            fits[(kind, lag)] = JointModel("y", ["x"], ["x"], association=kind, lag=lag, compute_se=False).fit(ds)
    finite = all(np.isfinite(f.loglik_) and np.all(np.isfinite(f.alpha_)) for f in fits.values())
    gap = abs(fits[("lagged", 1e-4)].alpha_[0] - fits[("value", 0.0)].alpha_[0])
    # beta (intercept, t, t^2, x) + sigma2 + Q (3) + gamma (x) + alpha + spline (degree 3 + 5 knots + 1)
    counts_ok = all(f.n_params_ == 4 + 1 + 3 + 1 + len(f.alpha_) + 9 and
                    f.aic_ == -2 * f.loglik_ + 2 * f.n_params_ for f in fits.values())
    aics = ", ".join(f"{k[0]}{'' if not k[1] else f':{k[1]:g}'} {f.aic_:.2f}" for k, f in fits.items())
    note(request, f"all fitted: {finite}; |alpha_lag(1e-4) - alpha_value| {gap:.1e}; AIC counts ok: {counts_ok}; "
                  f"AIC {aics}")
    assert finite and gap < 1e-3 and counts_ok
