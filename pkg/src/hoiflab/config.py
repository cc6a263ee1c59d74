"""Declarative experiment configs: TOML ingestion, validation, hashing."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA_VERSION = 1

EXPERIMENT_KINDS = ("bias_test", "universal", "condvar_rate")
NUISANCE_RULES = ("series", "series_fixed", "oracle")
TEST_KERNELS = ("oracle", "empirical", "aggregate")
K_RULES = (
    "fixed",
    "power",
    "n_over_c",
    "n_over_log_cubed",
    "n_over_log10_cubed",
    "window_geomean",
    "window_multiple",
)


def resolve_k(rule: dict, n: int, k_star: Optional[int] = None) -> int:
    """Dictionary-size rules used across experiments.

    fixed(k); power(exponent): ceil(n^e); n_over_c(c): ceil(n/c);
    n_over_log_cubed / n_over_log10_cubed: ceil(n / log(n)^3) in the stated
    base; window_geomean: geometric mean of (k*, k*^2/sqrt(n)), the center of
    the aggregation power window; window_multiple(c): round(c * k*^2/sqrt(n)).
    """
    name = rule.get("name")
    if name == "fixed":
        k = int(rule["k"])
    elif name == "power":
        k = int(np.ceil(float(n) ** float(rule["exponent"])))
    elif name == "n_over_c":
        k = int(np.ceil(n / float(rule["c"])))
    elif name == "n_over_log_cubed":
        k = int(np.ceil(n / np.log(n) ** 3))
    elif name == "n_over_log10_cubed":
        k = int(np.ceil(n / np.log10(n) ** 3))
    elif name == "window_geomean":
        if k_star is None:
            raise ConfigError("window_geomean needs k*")
        upper = k_star**2 / np.sqrt(n)
        weight = float(rule.get("weight", 0.5))  # 1 -> k*, 0 -> upper edge
        if not 0.0 <= weight <= 1.0:
            raise ConfigError("window_geomean weight must lie in [0,1]")
        k = int(round(k_star**weight * upper ** (1.0 - weight)))
    elif name == "window_multiple":
        if k_star is None:
            raise ConfigError("window_multiple needs k*")
        k = int(round(float(rule["c"]) * k_star**2 / np.sqrt(n)))
    else:
        raise ConfigError(f"unknown k rule {name!r}; choose from {K_RULES}")
    if k < 1:
        raise ConfigError(f"k rule {name!r} produced k={k} at n={n}")
    return k


@dataclass(frozen=True)
class TruthConfig:
    s: float
    J: int
    amplitude: float
    offset: float = 0.0
    family: str = "fourier"


@dataclass(frozen=True)
class DataConfig:
    model: str
    n: int
    d: int = 1
    split: dict = field(default_factory=dict)


@dataclass(frozen=True)
class NuisanceConfig:
    variant: str = "cond_variance"
    rule: str = "series"
    kstar_rule: dict = field(default_factory=lambda: {"name": "power", "exponent": 2 / 3})
    trainer_n: Optional[int] = None  # universal kind: independent training draw


@dataclass(frozen=True)
class TestConfig:
    id: str
    kernel: str
    k_rule: dict
    alpha: float = 0.05
    delta: float = 0.0


@dataclass(frozen=True)
class UniversalConfig:
    k: int
    alpha: float = 0.1
    profile: bool = False
    wald: bool = True


@dataclass(frozen=True)
class CondvarConfig:
    s: float
    d: int = 1
    n_grid: tuple = ()
    mode: str = "optimal"  # optimal | gamma
    gamma: Optional[float] = None
    sigma: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    id: str
    replications: int
    master_seed: int
    data: Optional[DataConfig] = None
    truth: Optional[TruthConfig] = None
    truth_outcome: Optional[TruthConfig] = None
    nuisance: Optional[NuisanceConfig] = None
    tests: tuple = ()
    universal: Optional[UniversalConfig] = None
    condvar: Optional[CondvarConfig] = None

    def resolved_dict(self) -> dict:
        out = asdict(self)
        out["schema_version"] = SCHEMA_VERSION
        return out

    def config_hash(self) -> str:
        payload = json.dumps(self.resolved_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _require(table: dict, key: str, context: str):
    if key not in table:
        raise ConfigError(f"missing key {context}.{key}")
    return table[key]


def _truth_from(table: dict, context: str) -> TruthConfig:
    return TruthConfig(
        s=float(_require(table, "s", context)),
        J=int(_require(table, "J", context)),
        amplitude=float(_require(table, "amplitude", context)),
        offset=float(table.get("offset", 0.0)),
        family=str(table.get("family", "fourier")),
    )


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a nested table into a frozen config; names the offending key."""
    exp = _require(raw, "experiment", "<root>")
    kind = _require(exp, "kind", "experiment")
    if kind not in EXPERIMENT_KINDS:
        raise ConfigError(f"experiment.kind must be one of {EXPERIMENT_KINDS}, got {kind!r}")
    replications = int(_require(exp, "replications", "experiment"))
    if replications < 1:
        raise ConfigError("experiment.replications must be >= 1")
    cfg = dict(
        kind=kind,
        id=str(_require(exp, "id", "experiment")),
        replications=replications,
        master_seed=int(_require(exp, "master_seed", "experiment")),
    )

    if kind in ("bias_test", "universal"):
        data = _require(raw, "data", "<root>")
        model = _require(data, "model", "data")
        if model not in ("gaussian", "bernoulli"):
            raise ConfigError(f"data.model must be gaussian or bernoulli, got {model!r}")
        split = dict(_require(data, "split", "data"))
        total = sum(split.values())
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"data.split fractions sum to {total}, not 1")
        cfg["data"] = DataConfig(
            model=model, n=int(_require(data, "n", "data")), d=int(data.get("d", 1)),
            split=split,
        )
        truth = dict(_require(raw, "truth", "<root>"))
        outcome = truth.pop("outcome", None)
        cfg["truth"] = _truth_from(truth, "truth")
        if outcome is not None:
            cfg["truth_outcome"] = _truth_from(outcome, "truth.outcome")
        nuis = raw.get("nuisance", {})
        rule = nuis.get("rule", "series")
        if rule not in NUISANCE_RULES:
            raise ConfigError(f"nuisance.rule must be one of {NUISANCE_RULES}, got {rule!r}")
        cfg["nuisance"] = NuisanceConfig(
            variant=nuis.get("variant", "cond_variance"),
            rule=rule,
            kstar_rule=dict(nuis.get("kstar_rule", {"name": "power", "exponent": 2 / 3})),
            trainer_n=nuis.get("trainer_n"),
        )

    if kind == "bias_test":
        tests_raw = _require(raw, "tests", "<root>")
        if not tests_raw:
            raise ConfigError("bias_test experiments need at least one [[tests]] entry")
        tests = []
        seen = set()
        for i, t in enumerate(tests_raw):
            tid = str(_require(t, "id", f"tests[{i}]"))
            if tid in seen:
                raise ConfigError(f"duplicate test id {tid!r}")
            seen.add(tid)
            kernel = _require(t, "kernel", f"tests[{i}]")
            if kernel not in TEST_KERNELS:
                raise ConfigError(
                    f"tests[{i}].kernel must be one of {TEST_KERNELS}, got {kernel!r}"
                )
            k_rule = dict(_require(t, "k_rule", f"tests[{i}]"))
            if k_rule.get("name") not in K_RULES:
                raise ConfigError(f"tests[{i}].k_rule.name must be one of {K_RULES}")
            alpha = float(t.get("alpha", 0.05))
            if not 0 < alpha < 1:
                raise ConfigError(f"tests[{i}].alpha out of (0,1)")
            delta = float(t.get("delta", 0.0))
            if delta < 0:
                raise ConfigError(f"tests[{i}].delta must be >= 0")
            tests.append(TestConfig(id=tid, kernel=kernel, k_rule=k_rule, alpha=alpha, delta=delta))
        cfg["tests"] = tuple(tests)
        required = {"oracle": ("tr", "est"), "empirical": ("tr", "est"),
                    "aggregate": ("tr", "sel", "est")}
        for t in tests:
            for split_name in required[t.kernel]:
                if split_name not in cfg["data"].split:
                    raise ConfigError(
                        f"test {t.id!r} ({t.kernel}) needs data.split.{split_name}"
                    )

    if kind == "universal":
        uni = _require(raw, "universal", "<root>")
        alpha = float(uni.get("alpha", 0.1))
        if not 0 < alpha < 1:
            raise ConfigError("universal.alpha out of (0,1)")
        cfg["universal"] = UniversalConfig(
            k=int(_require(uni, "k", "universal")),
            alpha=alpha,
            profile=bool(uni.get("profile", False)),
            wald=bool(uni.get("wald", True)),
        )
        for split_name in ("d1", "d2"):
            if split_name not in cfg["data"].split:
                raise ConfigError(f"universal experiments need data.split.{split_name}")

    if kind == "condvar_rate":
        cv = _require(raw, "condvar", "<root>")
        mode = cv.get("mode", "optimal")
        if mode not in ("optimal", "gamma"):
            raise ConfigError("condvar.mode must be optimal or gamma")
        if mode == "gamma" and cv.get("gamma") is None:
            raise ConfigError("condvar.mode=gamma needs condvar.gamma")
        n_grid = tuple(int(v) for v in _require(cv, "n_grid", "condvar"))
        if not n_grid:
            raise ConfigError("condvar.n_grid must be nonempty")
        cfg["condvar"] = CondvarConfig(
            s=float(_require(cv, "s", "condvar")),
            d=int(cv.get("d", 1)),
            n_grid=n_grid,
            mode=mode,
            gamma=cv.get("gamma"),
            sigma=float(cv.get("sigma", 1.0)),
        )
        cfg["truth"] = _truth_from(dict(_require(raw, "truth", "<root>")), "truth")

    return ExperimentConfig(**cfg)


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """--set section.key=value pairs; values parsed as TOML literals."""
    out = json.loads(json.dumps(raw))  # deep copy
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        path, value = item.split("=", 1)
        try:
            parsed = tomllib.loads(f"v = {value}")["v"]
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse override value {value!r}: {exc}") from exc
        keys = path.strip().split(".")
        node = out
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {path!r} crosses a non-table")
        node[keys[-1]] = parsed
    return out


def load_config(path, overrides: Optional[list[str]] = None) -> ExperimentConfig:
    with open(Path(path), "rb") as fh:
        raw = tomllib.load(fh)
    if overrides:
        raw = apply_overrides(raw, overrides)
    return parse_config(raw)
