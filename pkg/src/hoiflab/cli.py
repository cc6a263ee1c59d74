"""Command-line entry point.

Subcommands: run-experiment, test-bias, universal-ci, condvar-rate,
check-basis.  Every run prints a one-line JSON summary; outputs are written
atomically (temp file + rename).  Exit codes: 0 success / no rejection,
3 test rejection, 2 configuration error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import datetime
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DomainError
from .experiments import (
    aggregates_to_csv,
    atomic_write_text,
    run_experiment,
    save_results,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_REJECT = 3


def _echo(payload: dict):
    print(json.dumps(payload, sort_keys=True))


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _load_table(path: str, d_expected=None):
    """Plain numeric table with header columns A[,Y],X1..Xd (csv or whitespace)."""
    delimiter = "," if Path(path).suffix.lower() == ".csv" else None
    arr = np.genfromtxt(path, names=True, delimiter=delimiter)
    names = list(arr.dtype.names or ())
    if "A" not in names:
        raise ConfigError(f"data file {path} has no column 'A' (found {names})")
    x_cols = sorted(
        (n for n in names if n.startswith("X")), key=lambda s: int(s[1:] or 1)
    )
    if not x_cols:
        raise ConfigError(f"data file {path} has no covariate columns X1..Xd")
    A = np.asarray(arr["A"], dtype=float)
    Y = np.asarray(arr["Y"], dtype=float) if "Y" in names else A.copy()
    X = np.column_stack([np.asarray(arr[c], dtype=float) for c in x_cols])
    if d_expected is not None and X.shape[1] != d_expected:
        raise ConfigError(f"expected {d_expected} covariates, found {X.shape[1]}")
    if np.any((X < 0) | (X > 1)):
        raise DomainError("covariates must lie in the unit cube")
    return A, Y, X


def _load_toml(path: str, overrides):
    from .config import apply_overrides

    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    if overrides:
        raw = apply_overrides(raw, overrides)
    return raw


def cmd_run_experiment(args) -> int:
    from .config import load_config

    config = load_config(args.config, overrides=args.set or [])
    if args.threads is not None and args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    if args.dry_run:
        _echo({"dry_run": True, "resolved_config": config.resolved_dict(),
               "config_hash": config.config_hash()})
        return EXIT_OK
    started = _now()
    t0 = time.perf_counter()
    result = run_experiment(config, threads=args.threads or 1)
    outputs = save_results(result, args.out_dir)
    record = {
        "command": "run-experiment",
        "experiment_id": config.id,
        "config_hash": config.config_hash(),
        "seed": config.master_seed,
        "started": started,
        "finished": _now(),
        "elapsed_s": round(time.perf_counter() - t0, 3),
        "version": __version__,
        "n_failures": result.n_failures,
        "outputs": outputs,
    }
    atomic_write_text(
        Path(args.out_dir) / f"{config.id}_run.json",
        json.dumps(record, sort_keys=True, indent=2) + "\n",
    )
    _echo(record)
    return EXIT_OK


def cmd_condvar_rate(args) -> int:
    from .config import load_config

    config = load_config(args.config, overrides=args.set or [])
    if config.kind != "condvar_rate":
        raise ConfigError("condvar-rate needs an experiment of kind condvar_rate")
    if args.dry_run:
        _echo({"dry_run": True, "resolved_config": config.resolved_dict()})
        return EXIT_OK
    result = run_experiment(config, threads=args.threads or 1)
    slope = result.aggregate_value("rmse_loglog_slope")
    lines = ["n,k,rmse,slope_fit"]
    for row in result.aggregates:
        if row["statistic_name"] == "rmse":
            lines.append(f'{row["n"]},{row["k"]},{row["value"]!r},{slope!r}')
    out_path = Path(args.out_dir) / f"{config.id}_rate.csv"
    atomic_write_text(out_path, "\n".join(lines) + "\n")
    _echo({
        "command": "condvar-rate",
        "experiment_id": config.id,
        "config_hash": config.config_hash(),
        "slope_fit": slope,
        "outputs": {"rate_csv": str(out_path)},
    })
    return EXIT_OK


def _split_indices(n: int, fractions: dict, seed: int):
    from .data import assign_splits

    rng = np.random.default_rng(seed)
    return assign_splits(n, fractions, rng)


def cmd_test_bias(args) -> int:
    from .basis import make_basis
    from .bias_test import surrogate_bias_test
    from .data import Dataset
    from .gram import empirical_gram, exact_gram
    from .hoif import (
        aggregate_gram,
        fit_fhat,
        if22,
        if22_aggregate,
        if33_empirical,
        psi1_from_residuals,
    )
    from .simlab import fit_nuisance

    raw = _load_toml(args.config, args.set or [])
    tb = raw.get("test_bias")
    if tb is None:
        raise ConfigError("config needs a [test_bias] table")
    kernel = tb.get("kernel", "oracle")
    if kernel not in ("oracle", "empirical", "aggregate"):
        raise ConfigError(f"test_bias.kernel invalid: {kernel!r}")
    variant = tb.get("variant", "cond_variance")
    family = tb.get("family", "fourier")
    k = int(tb["k"]) if "k" in tb else None
    if k is None:
        raise ConfigError("missing key test_bias.k")
    kstar = int(tb.get("kstar", max(2, k // 2)))
    alpha = float(tb.get("alpha", 0.05))
    delta = float(tb.get("delta", 0.0))
    seed = int(tb.get("seed", 0))
    default_split = (
        {"tr": 0.5, "sel": 0.25, "est": 0.25}
        if kernel == "aggregate"
        else {"tr": 0.5, "est": 0.5}
    )
    split = dict(tb.get("split", default_split))

    A, Y, X = _load_table(args.data)
    ds = Dataset(A=A, Y=Y, X=X, splits=_split_indices(len(A), split, seed))
    d = X.shape[1]
    nuis = fit_nuisance(ds.split("tr"), family, kstar, variant, d=d)
    est = ds.split("est")
    resid_a = est.A - np.asarray(nuis.p_hat(est.X), dtype=float)
    resid_y = est.Y - np.asarray(nuis.b_hat(est.X), dtype=float)
    psi1 = psi1_from_residuals(resid_a, resid_y)

    basis = make_basis(family, k=k, d=d)
    from .basis import eval_basis

    Z_est = eval_basis(basis, est.X)
    if kernel == "oracle":
        u = if22(resid_a, resid_y, Z_est, exact_gram(basis))
    elif kernel == "empirical":
        tr = ds.split("tr")
        u = if33_empirical(resid_a, resid_y, Z_est, empirical_gram(eval_basis(basis, tr.X)))
    else:
        sel = ds.split("sel")
        Z_sel = eval_basis(basis, sel.X)
        resid_sel = sel.A - np.asarray(nuis.p_hat(sel.X), dtype=float)
        fitted = fit_fhat(resid_sel, Z_sel, exact_gram(basis), basis=basis)
        omega_f = aggregate_gram([fitted.beta], basis)
        u = if22_aggregate(resid_a, fitted.values(Z_est)[:, None], omega_f)
    outcome = surrogate_bias_test(u, psi1, alpha, delta)
    payload = outcome.to_dict()
    payload.update(
        command="test-bias", kernel=kernel, k=k, n=len(A),
        psi1=psi1.estimate, if_result=u.to_dict(),
    )
    _echo(payload)
    return EXIT_REJECT if outcome.reject else EXIT_OK


def cmd_universal_ci(args) -> int:
    from .basis import make_basis
    from .data import Dataset
    from .gram import exact_gram
    from .hoif import UStatResult, if22, psi1_from_residuals
    from .simlab import SeriesFunction, TruthSpec, fit_nuisance, gen_truth
    from .universal import (
        SieveModel,
        confidence_set,
        default_quad_points,
        hoif_wald_interval,
        kl_projection_oracle,
        length_lower_bound,
        plugin_interval,
        profile_interval,
        split_mle,
        squared_functional,
    )

    raw = _load_toml(args.config, args.set or [])
    uc = raw.get("universal_ci")
    if uc is None:
        raise ConfigError("config needs a [universal_ci] table")
    family = uc.get("family", "fourier")
    k = int(uc["k"]) if "k" in uc else None
    if k is None:
        raise ConfigError("missing key universal_ci.k")
    alpha = float(uc.get("alpha", 0.1))
    seed = int(uc.get("seed", 0))
    want_profile = bool(uc.get("profile", True))
    split = dict(uc.get("split", {"tr": 0.2, "d1": 0.4, "d2": 0.4}))

    A, Y, X = _load_table(args.data)
    d = X.shape[1]
    ds = Dataset(A=A, Y=Y, X=X, splits=_split_indices(len(A), split, seed))
    if "tr" in split:
        kstar = int(uc.get("kstar", max(2, k // 2)))
        pair = fit_nuisance(ds.split("tr"), family, kstar, "cond_variance", d=d)
        p_hat = pair.p_hat
        extra = p_hat.max_frequency()
    else:
        basis0 = make_basis(family, k=1, d=d)
        p_hat = SeriesFunction(basis=basis0, coef=np.zeros(1))
        extra = 0

    basis = make_basis(family, k=k, d=d)
    model = SieveModel(basis=basis, p_hat=p_hat, gram=exact_gram(basis))
    qp = default_quad_points(basis, extra_frequency=extra)
    qf = squared_functional(model, quad_points=qp)
    D1, D2 = ds.split("d1"), ds.split("d2")
    theta1 = split_mle(D1, model)
    ell = confidence_set(D2, model, theta1, alpha)
    plo, phi = plugin_interval(ell, qf)
    payload = {
        "command": "universal-ci",
        "k": k,
        "alpha": alpha,
        "plugin": [plo, phi],
        "profile": None,
        "hoif_wald": None,
        "lower_bound": None,
    }
    if want_profile:
        prof = profile_interval(D2, model, theta1, qf, alpha)
        payload["profile"] = [prof.lo, prof.hi]
        payload["profile_connected"] = prof.connected

    resid = np.concatenate([
        D1.A - np.asarray(p_hat(D1.X), dtype=float),
        D2.A - np.asarray(p_hat(D2.X), dtype=float),
    ])
    Xall = np.vstack([D1.X, D2.X])
    summands = 2.0 * np.asarray(p_hat(Xall), dtype=float) * resid
    base = psi1_from_residuals(np.ones(len(resid)), summands)
    psi1_sq = UStatResult(qf.c0 + base.estimate, base.se, order=1,
                          kernel_kind="sample_mean", n_used=len(resid))
    from .basis import eval_basis

    corr = if22(resid, -resid, eval_basis(basis, Xall), model.gram)
    payload["hoif_wald"] = list(hoif_wald_interval(psi1_sq, corr, alpha))

    if "truth" in uc:
        t = uc["truth"]
        spec = TruthSpec(
            s=float(t["s"]), J=int(t["J"]), amplitude=float(t["amplitude"]),
            offset=float(t.get("offset", 0.0)), family=family,
        )
        true_p = gen_truth(spec)
        qp_oracle = default_quad_points(basis, extra_frequency=max(extra, true_p.max_frequency()))
        theta_tilde = kl_projection_oracle(true_p, model, quad_points=qp_oracle)
        payload["lower_bound"] = length_lower_bound(theta1, theta_tilde, qf, alpha)
        payload["psi_tilde"] = qf(theta_tilde)
    _echo(payload)
    return EXIT_OK


def cmd_check_basis(args) -> int:
    from .basis import check_basis_regularity, make_basis
    from .gram import exact_gram

    basis = make_basis(args.family, k=args.k, d=args.d, order=args.order)
    gram = exact_gram(basis, quad_points=args.quad_points, method=args.method)
    report = check_basis_regularity(basis, gram, scan_points=args.scan_points)
    payload = {"command": "check-basis", "family": args.family, "k": args.k,
               "d": args.d, "gram": gram.to_diag(), "report": report.to_dict()}
    _echo(payload)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hoiflab",
        description="U-statistic bias tests and universal confidence intervals",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run-experiment", help="run a Monte Carlo experiment config")
    run.add_argument("config")
    run.add_argument("--threads", type=int, default=None)
    run.add_argument("--out-dir", default="results")
    run.add_argument("--set", action="append", metavar="KEY=VALUE")
    run.add_argument("--dry-run", action="store_true")
    run.set_defaults(func=cmd_run_experiment)

    cv = sub.add_parser("condvar-rate", help="sub-cube variance rate grid; emits CSV")
    cv.add_argument("config")
    cv.add_argument("--threads", type=int, default=None)
    cv.add_argument("--out-dir", default="results")
    cv.add_argument("--set", action="append", metavar="KEY=VALUE")
    cv.add_argument("--dry-run", action="store_true")
    cv.set_defaults(func=cmd_condvar_rate)

    tb = sub.add_parser("test-bias", help="run one bias test on a data table")
    tb.add_argument("--data", required=True)
    tb.add_argument("--config", required=True)
    tb.add_argument("--set", action="append", metavar="KEY=VALUE")
    tb.set_defaults(func=cmd_test_bias)

    uci = sub.add_parser("universal-ci", help="universal intervals for the squared functional")
    uci.add_argument("--data", required=True)
    uci.add_argument("--config", required=True)
    uci.add_argument("--set", action="append", metavar="KEY=VALUE")
    uci.set_defaults(func=cmd_universal_ci)

    cb = sub.add_parser("check-basis", help="basis regularity / Gram diagnostics")
    cb.add_argument("--family", required=True)
    cb.add_argument("--k", type=int, required=True)
    cb.add_argument("--d", type=int, default=1)
    cb.add_argument("--order", type=int, default=None)
    cb.add_argument("--quad-points", type=int, default=200)
    cb.add_argument("--method", default="auto", choices=["auto", "quadrature"])
    cb.add_argument("--scan-points", type=int, default=100_000)
    cb.set_defaults(func=cmd_check_basis)
    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, matching the config-error code
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, DomainError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(dispatch())
