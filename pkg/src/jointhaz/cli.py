"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 convergence failure
(outputs are still written, carrying their convergence flags).  Errors are
reported on stderr as one line starting with ``ERROR <code>:``.
"""

import argparse
import contextlib
import io
import json
import logging
import math
import os
import sys
import tempfile
import warnings

import numpy as np
import pandas as pd
from scipy.stats import norm
from threadpoolctl import threadpool_limits

from .data import DataError, Dataset, Schema, StandardizationReport, load_csv, rescale_time, standardize
from .joint import JointModel, JointSpec
from .lmm import LinearMixedModel, LmmSpec
from .predict import Decomposition, mse_harness, predict_survival, update_prediction
from .sim import SimTruth, simulate
from .survcox import CoxPH
from .twostage import TRAJECTORY, TwoStageModel

log = logging.getLogger("jointhaz")

OK, USAGE, DATA, CONVERGENCE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- output helpers --------------------------------------------------------------
def _atomic_write(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return "" if math.isnan(value) else "%.17g" % value
    return str(value)


def write_table(path, frame):
    lines = [",".join(frame.columns)]
    for row in zip(*(frame[c].tolist() for c in frame.columns)):
        lines.append(",".join(_fmt(v) for v in row))
    _atomic_write(path, "\n".join(lines) + "\n")


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, obj):
    _atomic_write(path, json.dumps(_clean(obj), indent=2, sort_keys=False) + "\n")


def write_dataset(path, ds):
    buf = io.StringIO()
    frame = ds.frame
    buf.write(",".join(frame.columns) + "\n")
    for row in zip(*(frame[c].tolist() for c in frame.columns)):
        buf.write(",".join(_fmt(v) for v in row) + "\n")
    _atomic_write(path, buf.getvalue())


# -- inputs ------------------------------------------------------------------------
def _require(*paths):
    for p in paths:
        if p is not None and not os.path.exists(p):
            raise DataError(f"file not found: {p}")


def _read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def load_inputs(args, need_spec=True):
    """Dataset (after the preprocessing requested in the spec file), raw spec dict and the transform report."""
    _require(args.data, args.schema, getattr(args, "spec", None))
    schema = Schema.from_json(args.schema)
    ds = load_csv(args.data, schema)
    spec = _read_json(args.spec) if need_spec and getattr(args, "spec", None) else {}
    ds, report = preprocess(ds, spec)
    return ds, spec, report


def preprocess(ds, spec):
    report = StandardizationReport()
    cols = spec.get("standardize", [])
    if cols:
        ds, report = standardize(ds, cols)
    scale = 1.0
    if spec.get("rescale_time", False):
        ds, scale = rescale_time(ds)
    return ds, StandardizationReport(report.means, report.sds, scale)


def apply_report(ds, report):
    """Bring raw prediction-time data onto the scale used for fitting."""
    frame = ds.frame.copy()
    for col in report.means:
        frame[col] = report.apply(col, frame[col].to_numpy(dtype=float))
    if report.time_scale != 1.0:
        frame["tstart"] = frame["tstart"] / report.time_scale
        frame["tstop"] = frame["tstop"] / report.time_scale
    return Dataset(frame, ds.schema)


def joint_spec(spec, report, association=None):
    d = dict(spec)
    if association is not None:
        d["association"] = association
    return JointSpec.from_dict(d, report.time_scale)


def _floats(text):
    try:
        return np.array([float(v) for v in text.split(",") if v.strip()], dtype=float)
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc


# -- subcommands ---------------------------------------------------------------
def cmd_simulate(args):
    _require(args.truth)
    truth = SimTruth.from_json(args.truth)
    if args.seed is not None:
        truth = truth.with_(seed=args.seed)
    ds = simulate(truth)
    write_dataset(args.out, ds)
    schema_out = args.schema_out or os.path.splitext(args.out)[0] + ".schema.json"
    write_json(schema_out, ds.schema.to_dict())
    log.info("simulated %d subjects, %d events", ds.n_subjects, ds.n_events)
    return OK


def _lmm_from_spec(spec):
    s = LmmSpec.from_dict(spec["longitudinal"])
    return LinearMixedModel(s.outcome, s.covariates, s.time_degree, s.random)


def _status(converged):
    return OK if converged else CONVERGENCE


def _with_report(d, report):
    d = dict(d)
    d["standardization"] = report.to_dict()
    return d


def cmd_fit_lmm(args):
    ds, spec, report = load_inputs(args)
    fit = _lmm_from_spec(spec).fit(ds)
    out = args.out
    write_json(os.path.join(out, "fit.json"), _with_report(fit.to_dict(), report))
    write_table(os.path.join(out, "trace.csv"),
                pd.DataFrame({"phase": "quasi-newton", "iteration": np.arange(len(fit.trace_)),
                              "loglik": np.asarray(fit.trace_, dtype=float)}))
    re = pd.DataFrame(fit.random_effects_, columns=[f"b{j}" for j in range(fit.random_effects_.shape[1])])
    re.insert(0, "id", fit.ids_)
    write_table(os.path.join(out, "random_effects.csv"), re)
    return _status(fit.converged_)


def _cox(spec, tvc):
    covs = tuple(spec.get("survival", {}).get("covariates", ()))
    outcome = spec["longitudinal"]["outcome"] if tvc else None
    return CoxPH(covs, outcome_tvc=outcome)


def _fit_cox_common(args, tvc):
    ds, spec, report = load_inputs(args)
    fit = _cox(spec, tvc).fit(ds)
    write_json(os.path.join(args.out, "fit.json"), _with_report(fit.to_dict(), report))
    base = fit.baseline_
    write_table(os.path.join(args.out, "baseline.csv"), pd.DataFrame({"t": base.x, "H0": base.y}))
    return _status(fit.converged_ and not fit.monotone_)


def cmd_fit_cox(args):
    return _fit_cox_common(args, tvc=False)


def cmd_fit_tvc(args):
    return _fit_cox_common(args, tvc=True)


def _twostage(spec):
    s = LmmSpec.from_dict(spec["longitudinal"])
    return TwoStageModel(s.outcome, s.covariates, tuple(spec.get("survival", {}).get("covariates", ())),
                         s.time_degree, s.random)


def cmd_fit_twostage(args):
    ds, spec, report = load_inputs(args)
    fit = _twostage(spec).fit(ds)
    write_json(os.path.join(args.out, "fit.json"), _with_report(fit.to_dict(), report))
    return _status(fit.stage1_.converged_ and fit.stage2_.converged_)


def _joint(spec, report, args):
    js = joint_spec(spec, report, getattr(args, "association", None))
    return JointModel.from_spec(js, max_em=spec.get("max_em", 200), max_direct=spec.get("max_direct", 100))


def _trace_frame(fit):
    em = np.asarray(fit.em_trace_, dtype=float)
    direct = np.asarray(fit.direct_trace_, dtype=float)
    return pd.DataFrame({
        "phase": ["em"] * em.size + ["direct"] * direct.size,
        "iteration": np.concatenate([np.arange(em.size), np.arange(1, direct.size + 1)]).astype(int),
        "loglik": np.concatenate([em, direct]),
    })


def cmd_fit_joint(args):
    ds, spec, report = load_inputs(args)
    fit = _joint(spec, report, args).fit(ds)
    write_json(os.path.join(args.out, "fit.json"), _with_report(fit.to_dict(), report))
    write_table(os.path.join(args.out, "trace.csv"), _trace_frame(fit))
    return _status(fit.converged_ and fit.identified_)


def cmd_decompose(args):
    _require(args.fit)
    d = _read_json(args.fit)
    if d.get("model") != "joint":
        raise DataError("decomposition needs a joint-model fit")
    kind = d["spec"]["association"]["kind"]
    if kind != "value":
        raise DataError(f"decomposition needs the current-value association, not {kind!r}")
    long = {p["name"]: p["estimate"] for p in d["longitudinal"]}
    surv = {p["name"]: p["estimate"] for p in d["survival"]}
    if args.covariate not in long or args.covariate not in surv:
        raise DataError(f"{args.covariate!r} must appear in both submodels")
    dec = Decomposition(args.covariate, d["association"][0]["estimate"], long[args.covariate], surv[args.covariate])
    text = json.dumps(_clean(dec.to_dict()), indent=2) + "\n"
    if args.out:
        _atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    return OK


def _load_fit_and_history(args):
    _require(args.fit, args.data, args.schema)
    d = _read_json(args.fit)
    schema = Schema.from_json(args.schema)
    report = StandardizationReport.from_dict(d.get("standardization", {}))
    fit = JointModel.from_dict(d, schema)
    ds = apply_report(load_csv(args.data, schema), report)
    subject = _subject_id(ds, args.subject)
    return fit, ds.history(subject), report


def _subject_id(ds, text):
    for i in ds.ids:
        if str(i) == str(text):
            return i
    raise DataError(f"subject {text!r} not found")


def _prediction_frame(pred, scale):
    f = pred.to_frame()
    f["u"] = f["u"] * scale
    f["s"] = f["s"] * scale
    return f


def cmd_predict(args):
    fit, history, report = _load_fit_and_history(args)
    scale = report.time_scale
    s = None if args.s is None else args.s / scale
    pred = predict_survival(fit, history, _floats(args.horizon) / scale, args.draws, args.seed or 0, s)
    write_table(args.out, _prediction_frame(pred, scale))
    return OK


def cmd_update(args):
    fit, history, report = _load_fit_and_history(args)
    scale = report.time_scale
    value = args.value
    outcome = fit.spec.lmm.outcome
    if outcome in report.means:
        value = float(report.apply(outcome, [value])[0])
    pred, _ = update_prediction(fit, history, args.time / scale, value, _floats(args.horizon) / scale,
                                args.draws, args.seed or 0)
    write_table(args.out, _prediction_frame(pred, scale))
    return OK


def _wald(est, se):
    est, se = float(est), float(se)
    if not (se > 0 and math.isfinite(se)):
        return math.nan
    return float(2.0 * norm.sf(abs(est / se)))


def comparison_table(joint, twostage, tvc, outcome):
    rows = []

    def add(variable, model, est, se):
        rows.append({"variable": variable, "model": model, "estimate": float(est), "se": float(se),
                     "p": _wald(est, se)})

    jse = joint.standard_errors()
    for name, est in zip(joint.surv_names_, joint.gamma_):
        add(name, "joint", est, jse["survival"][name])
    for name, est in zip(joint.alpha_names_, joint.alpha_):
        label = outcome if len(joint.alpha_names_) == 1 else f"{outcome}:{name}"
        add(label, "joint", est, jse["association"][name])
    for name, est, se in zip(twostage.feature_names_, twostage.coef_, twostage.se_):
        add(outcome if name == TRAJECTORY else name, "twostage", est, se)
    for name, est, se in zip(tvc.feature_names_, tvc.coef_, tvc.se_):
        add(name, "tvc", est, se)
    for name, est in zip(joint.feature_names_, joint.coef_):
        add(f"{name} (longitudinal)", "joint", est, jse["longitudinal"][name])
    st1 = twostage.stage1_
    for name, est, se in zip(st1.feature_names_, st1.coef_, st1.se_):
        add(f"{name} (longitudinal)", "twostage", est, se)
    return pd.DataFrame(rows, columns=["variable", "model", "estimate", "se", "p"])


def _fit_three(ds, spec, report, args):
    joint = _joint(spec, report, args).fit(ds)
    twostage = _twostage(spec).fit(ds)
    tvc = _cox(spec, tvc=True).fit(ds)
    return joint, twostage, tvc


def cmd_compare(args):
    ds, spec, report = load_inputs(args)
    joint, twostage, tvc = _fit_three(ds, spec, report, args)
    table = comparison_table(joint, twostage, tvc, spec["longitudinal"]["outcome"])
    write_table(os.path.join(args.out, "comparison.csv"), table)
    write_json(os.path.join(args.out, "fits.json"), {
        "joint": joint.to_dict(), "twostage": twostage.to_dict(), "tvc": tvc.to_dict(),
        "standardization": report.to_dict()})
    if args.verbose:
        sys.stdout.write(table.to_string(index=False, float_format=lambda v: f"{v:.6g}") + "\n")
    return _status(joint.converged_)


def cmd_mse_harness(args):
    ds, spec, report = load_inputs(args)
    _require(args.heldout)
    held = load_csv(args.heldout, ds.schema)
    held = apply_report(held, report)
    joint, twostage, tvc = _fit_three(ds, spec, report, args)
    table = mse_harness({"joint": joint, "twostage": twostage, "tvc": tvc}, held,
                        _floats(args.horizons) / report.time_scale)
    table["horizon"] = table["horizon"] * report.time_scale
    write_table(os.path.join(args.out, "mse.csv"), table)
    return _status(joint.converged_)


def binned_means(ds, outcome, width=0.05):
    """Mean outcome in time bins of ``width``, split by whether the subject had the event."""
    f = ds.frame
    y = f[outcome].to_numpy(dtype=float)
    t = f["tstart"].to_numpy(dtype=float)
    ev = f.groupby("id", sort=False)["event"].transform("max").to_numpy()
    keep = ~np.isnan(y)
    k = np.floor(t[keep] / width + 1e-12).astype(int)
    tab = pd.DataFrame({"group": np.where(ev[keep] == 1, "event", "no_event"), "k": k, "y": y[keep]})
    agg = tab.groupby(["group", "k"], sort=True)["y"].agg(["mean", "size"]).reset_index()
    return pd.DataFrame({"group": agg["group"], "t_bin": agg["k"] * width, "mean_y": agg["mean"],
                         "n": agg["size"].astype(int)})


def cmd_emit_plot_data(args):
    _require(args.input)
    kind = args.kind
    out = args.out
    if kind == "prediction":
        f = pd.read_csv(args.input, float_precision="round_trip")
        write_table(os.path.join(out, "prediction_panel.csv"), f[["u", "mean", "lo", "hi", "s"]])
    elif kind == "mse":
        f = pd.read_csv(args.input, float_precision="round_trip")
        write_table(os.path.join(out, "mse_curves.csv"), f[["model", "horizon", "mse"]])
    elif kind == "trajectory":
        d = _read_json(args.input)
        params = d["longitudinal"] if d.get("model") == "joint" else d["parameters"]
        coef = {p["name"]: p["estimate"] for p in params}
        spec = d["spec"]["longitudinal"] if d.get("model") == "joint" else d["spec"]
        degree = int(spec["time_degree"])
        grid = np.round(np.linspace(0.0, 1.0, 101), 12)
        names = ["(Intercept)", "time"] + [f"time^{k}" for k in range(2, degree + 1)]
        mean = sum(coef.get(n, 0.0) * grid ** k for k, n in enumerate(names))
        scale = d.get("standardization", {}).get("time_scale", 1.0)
        write_table(os.path.join(out, "trajectory.csv"), pd.DataFrame({"t": grid * scale, "mean": mean}))
    elif kind == "binned":
        _require(args.schema)
        ds = load_csv(args.input, Schema.from_json(args.schema))
        outcome = args.outcome or next(c for c, k in ds.schema.kinds.items() if k == "outcome")
        write_table(os.path.join(out, "binned.csv"), binned_means(ds, outcome, args.bin_width))
    return OK


# -- parser ----------------------------------------------------------------------
def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $JOINTHAZ_THREADS or 1); results do not depend on it")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("-v", "--verbose", action="count", default=0)

    def data_args(p, spec=True):
        p.add_argument("--data", required=True)
        p.add_argument("--schema", required=True)
        if spec:
            p.add_argument("--spec", required=True)

    parser = _Parser(prog="jointhaz", description="Joint models for longitudinal and time-to-event data.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="simulate a dataset from a truth file")
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--schema-out")
    p.set_defaults(func=cmd_simulate)

    for name, func, helptext in [("fit-lmm", cmd_fit_lmm, "linear mixed model"),
                                 ("fit-cox", cmd_fit_cox, "Cox model"),
                                 ("fit-tvc", cmd_fit_tvc, "Cox model with the outcome carried forward"),
                                 ("fit-twostage", cmd_fit_twostage, "two-stage model"),
                                 ("fit-joint", cmd_fit_joint, "joint model")]:
        p = sub.add_parser(name, parents=[common], help=helptext)
        data_args(p)
        p.add_argument("--out", required=True, help="output directory")
        if name == "fit-joint":
            p.add_argument("--association", type=_association_arg)
        p.set_defaults(func=func)

    p = sub.add_parser("decompose", parents=[common], help="direct / mediated / total effect")
    p.add_argument("--fit", required=True)
    p.add_argument("--covariate", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_decompose)

    for name, func, text in [("predict", cmd_predict, "dynamic survival prediction"),
                             ("update", cmd_update, "prediction after one new measurement")]:
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--fit", required=True)
        data_args(p, spec=False)
        p.add_argument("--subject", required=True)
        p.add_argument("--horizon", required=True, help="comma-separated prediction times")
        p.add_argument("--draws", type=int, default=500)
        p.add_argument("--out", required=True, help="output CSV")
        if name == "predict":
            p.add_argument("--s", type=float, help="conditioning time (default: last measurement)")
        else:
            p.add_argument("--time", type=float, required=True)
            p.add_argument("--value", type=float, required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("compare", parents=[common], help="joint vs two-stage vs carried-forward Cox")
    data_args(p)
    p.add_argument("--association", type=_association_arg)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("mse-harness", parents=[common], help="predictive MSE on held-out data")
    data_args(p)
    p.add_argument("--heldout", required=True)
    p.add_argument("--horizons", required=True)
    p.add_argument("--association", type=_association_arg)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mse_harness)

    p = sub.add_parser("emit-plot-data", parents=[common], help="tidy CSVs behind the standard figures")
    p.add_argument("--kind", required=True, choices=["trajectory", "binned", "prediction", "mse"])
    p.add_argument("--input", required=True)
    p.add_argument("--schema")
    p.add_argument("--outcome")
    p.add_argument("--bin-width", type=float, default=0.05)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_emit_plot_data)
    return parser


def _association_arg(text):
    kind = text.split(":")[0]
    if kind not in ("value", "slope", "both", "cumulative", "lagged"):
        raise argparse.ArgumentTypeError(f"unknown association {text!r}")
    if kind == "lagged":
        try:
            float(text.split(":", 1)[1])
        except (IndexError, ValueError) as exc:
            raise argparse.ArgumentTypeError("lagged association needs a lag, e.g. lagged:0.1") from exc
    return text


def _threads(args):
    n = args.threads
    if n is None:
        env = os.environ.get("JOINTHAZ_THREADS")
        try:
            n = int(env) if env else 1
        except ValueError as exc:
            raise UsageError(f"JOINTHAZ_THREADS must be an integer, got {env!r}") from exc
    if n < 1:
        raise UsageError("thread count must be at least 1")
    return n


def run(argv=None):
    """Run the CLI and return its exit code."""
    try:
        args = build_parser().parse_args(argv)
        _threads(args)
    except UsageError as exc:
        sys.stderr.write(f"ERROR {USAGE}: {exc}\n")
        return USAGE
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        # single-threaded BLAS keeps every reduction in a fixed order, so the
        # output never depends on the requested thread count
        with threadpool_limits(limits=1), warnings.catch_warnings():
            if not args.verbose:
                warnings.simplefilter("ignore")
            code = args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"ERROR {USAGE}: {exc}\n")
        return USAGE
    except (DataError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        sys.stderr.write(f"ERROR {DATA}: {exc}\n")
        return DATA
    except ValueError as exc:
        sys.stderr.write(f"ERROR {DATA}: {exc}\n")
        return DATA
    except Exception as exc:  # keep the one-line contract even for unexpected failures
        sys.stderr.write(f"ERROR {USAGE}: {type(exc).__name__}: {exc}\n")
        return USAGE
    if code == CONVERGENCE:
        sys.stderr.write(f"ERROR {CONVERGENCE}: fit did not converge; outputs written with flags\n")
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
