"""Monte Carlo experiment engine: replication loops, aggregation, persistence.

Replications are independent tasks; every random draw comes from a
counter-based stream keyed by (master_seed, rep, purpose), so results are
identical whatever the worker count, and records are folded in replication
order.
"""

from __future__ import annotations

import csv
import json
import multiprocessing as mp
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .basis import make_basis
from .bias_test import surrogate_bias_test
from .condvar import subcube_variance
from .config import ExperimentConfig, resolve_k
from .errors import ConfigError
from .gram import empirical_gram, exact_gram
from .hoif import (
    aggregate_diagnostics,
    aggregate_gram,
    fit_fhat,
    if22,
    if22_aggregate,
    if33_empirical,
    psi1_from_residuals,
)
from .rngstream import stream
from .simlab import (
    SeriesFunction,
    TruthSpec,
    fit_nuisance,
    gen_data,
    gen_truth,
    oracle_bias,
    oracle_nuisance,
)
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

MAX_FAILURE_FRACTION = 0.01


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list
    aggregates: list  # rows: (n, k, statistic_name, value, mc_se, n_reps)
    n_failures: int

    def aggregate_value(self, statistic_name: str) -> float:
        for row in self.aggregates:
            if row["statistic_name"] == statistic_name:
                return row["value"]
        raise KeyError(statistic_name)


def _truth_spec(tc) -> TruthSpec:
    return TruthSpec(
        s=tc.s, J=tc.J, amplitude=tc.amplitude, offset=tc.offset, family=tc.family
    )


class _BiasTestContext:
    def __init__(self, config: ExperimentConfig):
        self.config = config
        data, nuis = config.data, config.nuisance
        self.variant = nuis.variant
        self.p = gen_truth(_truth_spec(config.truth), model=data.model)
        if self.variant == "cond_covariance":
            if config.truth_outcome is None:
                raise ConfigError("cond_covariance experiments need [truth.outcome]")
            self.b = gen_truth(_truth_spec(config.truth_outcome), model=data.model)
        else:
            self.b = self.p
        self.k_star = resolve_k(nuis.kstar_rule, data.n)
        self.tests = []
        family, d = config.truth.family, data.d
        for t in config.tests:
            k = resolve_k(t.k_rule, data.n, self.k_star)
            basis = make_basis(family, k=k, d=d)
            gram = exact_gram(basis)
            self.tests.append((t, k, basis, gram))
        if nuis.rule == "series_fixed":
            rng = stream(config.master_seed, 0, "nuisance_shared")
            n_tr = max(int(round(data.split.get("tr", 0.5) * data.n)), self.k_star + 1)
            ds = gen_data(n_tr, d, data.model, self.p, rng,
                          b=self.b, variant=self.variant)
            from .data import SplitData

            tr = SplitData(A=ds.A, Y=ds.Y, X=ds.X)
            self.fixed_nuisance = fit_nuisance(tr, family, self.k_star, self.variant, d=d)
        else:
            self.fixed_nuisance = None

    def nuisance_for(self, ds):
        rule = self.config.nuisance.rule
        if rule == "oracle":
            return oracle_nuisance(self.p, self.b, self.variant)
        if rule == "series_fixed":
            return self.fixed_nuisance
        return fit_nuisance(
            ds.split("tr"), self.config.truth.family, self.k_star, self.variant,
            d=self.config.data.d,
        )


def _bias_test_rep(ctx: _BiasTestContext, rep: int) -> dict:
    config = ctx.config
    data = config.data
    rng = stream(config.master_seed, rep, "data")
    ds = gen_data(
        data.n, data.d, data.model, ctx.p, rng,
        split_fractions=data.split, b=ctx.b, variant=ctx.variant,
    )
    nuis = ctx.nuisance_for(ds)
    oracle_rule = config.nuisance.rule == "oracle"

    def nuisance_values(split):
        if oracle_rule:
            return split.p_values, split.b_values
        p_vals = np.asarray(nuis.p_hat(split.X), dtype=float)
        b_vals = p_vals if nuis.b_hat is nuis.p_hat else np.asarray(
            nuis.b_hat(split.X), dtype=float
        )
        return p_vals, b_vals

    est = ds.split("est")
    p_est, b_est = nuisance_values(est)
    resid_a = est.A - p_est
    resid_y = est.Y - b_est
    psi1 = psi1_from_residuals(resid_a, resid_y)

    record = {
        "rep": rep,
        "psi1": psi1.estimate,
        "psi1_se": psi1.se,
        "tests": {},
    }
    eval_cache = {}

    def basis_values(basis, X, tag):
        key = (basis.k, tag)
        if key not in eval_cache:
            from .basis import eval_basis

            eval_cache[key] = eval_basis(basis, X)
        return eval_cache[key]

    for t, k, basis, gram in ctx.tests:
        orc = oracle_bias(ctx.p, nuis.p_hat, ctx.b, nuis.b_hat, basis, gram)
        entry = {
            "k": k,
            "bias_k": orc.bias_k,
            "bias_inf": orc.bias_inf,
            "tb_k": orc.tb_k,
            "power_ratio": orc.power_ratio(k, est.n, ctx.variant),
        }
        if t.kernel == "oracle":
            Z_est = basis_values(basis, est.X, "est")
            u = if22(resid_a, resid_y, Z_est, gram)
        elif t.kernel == "empirical":
            tr = ds.split("tr")
            Z_tr = basis_values(basis, tr.X, "tr")
            emp = empirical_gram(Z_tr, sample_id="tr")
            Z_est = basis_values(basis, est.X, "est")
            u = if33_empirical(resid_a, resid_y, Z_est, emp)
        else:  # aggregate
            sel = ds.split("sel")
            Z_sel = basis_values(basis, sel.X, "sel")
            resid_sel = sel.A - nuisance_values(sel)[0]
            fitted = fit_fhat(resid_sel, Z_sel, gram, basis=basis)
            omega_f = aggregate_gram([fitted.beta], basis)
            Z_est = basis_values(basis, est.X, "est")
            F_est = fitted.values(Z_est)[:, None]
            u = if22_aggregate(resid_a, F_est, omega_f)
            diag = aggregate_diagnostics(
                resid_sel, Z_sel, gram,
                f_true_sel=orc.residual_projection_values(sel.X),
                bias_k=orc.bias_k,
            )
            entry.update(diag)
        outcome = surrogate_bias_test(u, psi1, t.alpha, t.delta)
        entry.update(
            estimate=u.estimate, se=u.se,
            statistic=outcome.statistic, reject=outcome.reject,
        )
        record["tests"][t.id] = entry
    return record


def _aggregate_bias_test(config: ExperimentConfig, records: list) -> list:
    rows = []
    n = config.data.n
    good = [r for r in records if "error" not in r]
    R = len(good)

    def add(k, name, values, kind="mean"):
        values = np.asarray(values, dtype=float)
        if kind == "rate":
            v = float(np.mean(values))
            se = float(np.sqrt(max(v * (1 - v), 0.0) / R))
        else:
            v = float(np.mean(values))
            se = float(np.std(values, ddof=1) / np.sqrt(R)) if R > 1 else 0.0
        rows.append(
            {"n": n, "k": k, "statistic_name": name, "value": v, "mc_se": se, "n_reps": R}
        )

    add("", "psi1_mean", [r["psi1"] for r in good])
    add("", "psi1_se_mean", [r["psi1_se"] for r in good])
    for t in config.tests:
        sub = [r["tests"][t.id] for r in good]
        k = sub[0]["k"] if sub else ""
        add(k, f"reject_rate/{t.id}", [s["reject"] for s in sub], kind="rate")
        add(k, f"mean_estimate/{t.id}", [s["estimate"] for s in sub])
        add(k, f"mean_se/{t.id}", [s["se"] for s in sub])
        add(k, f"mean_bias_k/{t.id}", [s["bias_k"] for s in sub])
        add(k, f"mean_tb_k/{t.id}", [s["tb_k"] for s in sub])
        add(k, f"mean_power_ratio/{t.id}", [s["power_ratio"] for s in sub])
        if t.kernel == "aggregate":
            add(k, f"mean_delta_num/{t.id}", [s["delta_num"] for s in sub])
            add(k, f"mean_delta_denom/{t.id}", [s["delta_denom"] for s in sub])
    return rows


class _UniversalContext:
    def __init__(self, config: ExperimentConfig):
        self.config = config
        data, nuis, uni = config.data, config.nuisance, config.universal
        self.p = gen_truth(_truth_spec(config.truth), model=data.model)
        trainer_n = nuis.trainer_n or data.n
        k_star = resolve_k(nuis.kstar_rule, trainer_n)
        rng = stream(config.master_seed, 0, "universal_training")
        train = gen_data(trainer_n, data.d, data.model, self.p, rng)
        from .data import SplitData

        tr = SplitData(A=train.A, Y=train.Y, X=train.X)
        pair = fit_nuisance(tr, config.truth.family, k_star, "cond_variance", d=data.d)
        self.p_hat: SeriesFunction = pair.p_hat
        basis = make_basis(config.truth.family, k=uni.k, d=data.d)
        noise = "gaussian_unit_variance" if data.model == "gaussian" else "bernoulli"
        self.model = SieveModel(basis=basis, p_hat=self.p_hat, gram=exact_gram(basis), noise=noise)
        extra = (max(self.p_hat.max_frequency(), self.p.max_frequency()))
        qp = default_quad_points(basis, extra_frequency=extra)
        self.qf = squared_functional(self.model, quad_points=qp)
        self.theta_tilde = kl_projection_oracle(self.p, self.model, quad_points=qp)
        self.psi_tilde = self.qf(self.theta_tilde)
        self.k_star = k_star


def _universal_rep(ctx: _UniversalContext, rep: int) -> dict:
    config = ctx.config
    data, uni = config.data, config.universal
    rng = stream(config.master_seed, rep, "data")
    ds = gen_data(
        data.n, data.d, data.model, ctx.p, rng, split_fractions=data.split,
    )
    D1, D2 = ds.split("d1"), ds.split("d2")
    theta1 = split_mle(D1, ctx.model)
    ell = confidence_set(D2, ctx.model, theta1, uni.alpha)
    plo, phi = plugin_interval(ell, ctx.qf)
    lower = length_lower_bound(theta1, ctx.theta_tilde, ctx.qf, uni.alpha)
    psi_hat1_val = ctx.qf(theta1)
    record = {
        "rep": rep,
        "plugin": [plo, phi],
        "plugin_length": phi - plo,
        "theta_covered": ell.membership(ctx.theta_tilde, tol=1e-12),
        "psi_covered_plugin": bool(plo - 1e-12 <= ctx.psi_tilde <= phi + 1e-12),
        "psi_at_theta1_in_plugin": bool(plo - 1e-9 <= psi_hat1_val <= phi + 1e-9),
        "length_lower_bound": lower,
        "radius2": ell.radius2,
    }
    if uni.profile:
        prof = profile_interval(D2, ctx.model, theta1, ctx.qf, uni.alpha)
        record["profile"] = [prof.lo, prof.hi]
        record["profile_connected"] = prof.connected
        record["plugin_subset_profile"] = bool(
            prof.lo <= plo + 1e-9 and prof.hi >= phi - 1e-9
        )
    if uni.wald:
        from .basis import eval_basis

        resid = ds.A - np.asarray(ctx.p_hat(ds.X), dtype=float)
        summands = 2.0 * np.asarray(ctx.p_hat(ds.X), dtype=float) * resid
        psi1_sq = psi1_from_residuals(np.ones(ds.n), summands)
        # shift by the exactly known square of the pilot
        from .hoif import UStatResult

        psi1_sq = UStatResult(
            ctx.qf.c0 + psi1_sq.estimate, psi1_sq.se, order=1,
            kernel_kind="sample_mean", n_used=ds.n,
        )
        Z = eval_basis(ctx.model.basis, ds.X)
        corr = if22(resid, -resid, Z, ctx.model.gram)
        wlo, whi = hoif_wald_interval(psi1_sq, corr, uni.alpha)
        record["wald"] = [wlo, whi]
        record["wald_length"] = whi - wlo
        record["psi_covered_wald"] = bool(wlo <= ctx.psi_tilde <= whi)
    return record


def _aggregate_universal(config: ExperimentConfig, records: list) -> list:
    good = [r for r in records if "error" not in r]
    R = len(good)
    n, k = config.data.n, config.universal.k
    rows = []

    def add(name, values, kind="mean"):
        values = np.asarray(values, dtype=float)
        v = float(np.mean(values))
        if kind == "rate":
            se = float(np.sqrt(max(v * (1 - v), 0.0) / R))
        else:
            se = float(np.std(values, ddof=1) / np.sqrt(R)) if R > 1 else 0.0
        rows.append(
            {"n": n, "k": k, "statistic_name": name, "value": v, "mc_se": se, "n_reps": R}
        )

    add("coverage/plugin", [r["psi_covered_plugin"] for r in good], kind="rate")
    add("coverage/theta_set", [r["theta_covered"] for r in good], kind="rate")
    add("mean_length/plugin", [r["plugin_length"] for r in good])
    add("mean_lower_bound", [r["length_lower_bound"] for r in good])
    covering = [r for r in good if r["psi_covered_plugin"]]
    if covering:
        add(
            "lower_bound_violations_on_covering",
            [r["plugin_length"] < r["length_lower_bound"] - 1e-12 for r in covering],
            kind="rate",
        )
    if config.universal.profile:
        add("mean_length/profile", [r["profile"][1] - r["profile"][0] for r in good])
        add("subset_violations", [not r["plugin_subset_profile"] for r in good], kind="rate")
    if config.universal.wald:
        add("coverage/wald", [r["psi_covered_wald"] for r in good], kind="rate")
        add("mean_length/wald", [r["wald_length"] for r in good])
    return rows


class _CondvarContext:
    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.b = gen_truth(_truth_spec(config.truth))


def _condvar_rep(ctx: _CondvarContext, rep: int) -> dict:
    config = ctx.config
    cv = config.condvar
    out = {"rep": rep}
    for n in cv.n_grid:
        rng = stream(config.master_seed, rep, f"condvar_n{n}")
        X = rng.uniform(0.0, 1.0, size=(n, cv.d))
        Y = np.asarray(ctx.b(X), dtype=float) + cv.sigma * rng.standard_normal(n)
        kwargs = {"s": cv.s} if cv.mode == "optimal" else {"gamma": cv.gamma}
        res = subcube_variance(X, Y, rng=rng, **kwargs)
        out[f"n{n}"] = {
            "sigma2_hat": res["sigma2_hat"],
            "bins_used": res["bins_used"],
            "k_bins": res["plan"].k_bins,
        }
    return out


def _aggregate_condvar(config: ExperimentConfig, records: list) -> list:
    good = [r for r in records if "error" not in r]
    R = len(good)
    cv = config.condvar
    sigma2 = cv.sigma**2
    rows = []
    log_n, log_rmse = [], []
    for n in cv.n_grid:
        ests = np.array([r[f"n{n}"]["sigma2_hat"] for r in good])
        k_bins = good[0][f"n{n}"]["k_bins"]
        err2 = (ests - sigma2) ** 2
        rmse = float(np.sqrt(np.mean(err2)))
        rmse_se = float(np.std(err2, ddof=1) / np.sqrt(R) / (2 * rmse)) if rmse > 0 else 0.0
        rows.append(
            {"n": n, "k": k_bins, "statistic_name": "rmse", "value": rmse,
             "mc_se": rmse_se, "n_reps": R}
        )
        rows.append(
            {"n": n, "k": k_bins, "statistic_name": "mean_estimate",
             "value": float(ests.mean()),
             "mc_se": float(ests.std(ddof=1) / np.sqrt(R)), "n_reps": R}
        )
        log_n.append(np.log(n))
        log_rmse.append(np.log(rmse))
    slope = float(np.polyfit(log_n, log_rmse, 1)[0])
    rows.append(
        {"n": "", "k": "", "statistic_name": "rmse_loglog_slope", "value": slope,
         "mc_se": 0.0, "n_reps": R}
    )
    return rows


_KIND_TABLE = {
    "bias_test": (_BiasTestContext, _bias_test_rep, _aggregate_bias_test),
    "universal": (_UniversalContext, _universal_rep, _aggregate_universal),
    "condvar_rate": (_CondvarContext, _condvar_rep, _aggregate_condvar),
}

_WORKER_CTX = None


def _init_worker(config: ExperimentConfig):
    global _WORKER_CTX
    ctx_cls = _KIND_TABLE[config.kind][0]
    _WORKER_CTX = ctx_cls(config)


def _worker_rep(rep: int) -> dict:
    rep_fn = _KIND_TABLE[_WORKER_CTX.config.kind][1]
    try:
        return rep_fn(_WORKER_CTX, rep)
    except Exception as exc:  # recorded, counted against the failure budget
        return {"rep": rep, "error": f"{type(exc).__name__}: {exc}"}


def run_experiment(config: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    """Run all replications and aggregate; deterministic given (config, seed)."""
    if config.kind not in _KIND_TABLE:
        raise ConfigError(f"unknown experiment kind {config.kind!r}")
    ctx_cls, rep_fn, agg_fn = _KIND_TABLE[config.kind]
    R = config.replications
    if threads <= 1:
        ctx = ctx_cls(config)
        records = []
        for rep in range(R):
            try:
                records.append(rep_fn(ctx, rep))
            except Exception as exc:
                records.append({"rep": rep, "error": f"{type(exc).__name__}: {exc}"})
    else:
        mp_ctx = mp.get_context("fork")
        with mp_ctx.Pool(threads, initializer=_init_worker, initargs=(config,)) as pool:
            records = pool.map(_worker_rep, range(R), chunksize=max(1, R // (threads * 16)))
    records.sort(key=lambda r: r["rep"])
    n_failures = sum(1 for r in records if "error" in r)
    if n_failures > MAX_FAILURE_FRACTION * R:
        examples = [r["error"] for r in records if "error" in r][:3]
        raise RuntimeError(
            f"{n_failures}/{R} replications failed (> {MAX_FAILURE_FRACTION:.0%}); "
            f"first errors: {examples}"
        )
    aggregates = agg_fn(config, records)
    return ExperimentResult(
        config=config, records=records, aggregates=aggregates, n_failures=n_failures
    )


# -- persistence ---------------------------------------------------------------


def atomic_write_text(path: Path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def records_to_jsonl(result: ExperimentResult) -> str:
    header = {
        "schema_version": 1,
        "experiment_id": result.config.id,
        "config_hash": result.config.config_hash(),
        "master_seed": result.config.master_seed,
    }
    lines = [json.dumps(header, sort_keys=True, default=_json_default)]
    for record in result.records:
        lines.append(json.dumps(record, sort_keys=True, default=_json_default))
    return "\n".join(lines) + "\n"


def aggregates_to_csv(result: ExperimentResult) -> str:
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["experiment_id", "n", "k", "statistic_name", "value", "mc_se", "n_reps"]
    )
    for row in result.aggregates:
        writer.writerow(
            [
                result.config.id,
                row["n"],
                row["k"],
                row["statistic_name"],
                repr(float(row["value"])),
                repr(float(row["mc_se"])),
                row["n_reps"],
            ]
        )
    return buf.getvalue()


def save_results(result: ExperimentResult, out_dir) -> dict:
    out_dir = Path(out_dir)
    base = result.config.id
    jsonl_path = out_dir / f"{base}_records.jsonl"
    csv_path = out_dir / f"{base}_aggregate.csv"
    atomic_write_text(jsonl_path, records_to_jsonl(result))
    atomic_write_text(csv_path, aggregates_to_csv(result))
    return {"records": str(jsonl_path), "aggregate": str(csv_path)}
