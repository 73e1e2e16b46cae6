"""TOML run configuration for the CLI.

Analysis configs use sections [data], [models.censoring], [models.sampling],
[diagnostic], [bootstrap], [restrict], and optionally [weights]; scenario
configs use [scenario] with a [scenario.dgp] override table. Every covariate
a formula or restriction names must exist in the data schema.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import DatasetSchema
from .design import parse_formula
from .errors import ConfigError
from .simulation import DgpParams, ScenarioConfig


def config_hash(raw: dict) -> str:
    """Stable short digest of a config mapping."""
    text = json.dumps(raw, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def _load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None


@dataclass
class RunConfig:
    """Everything cmd_estimate / cmd_diagnose need besides CLI overrides."""

    schema: DatasetSchema
    input_path: str | None = None
    censoring_formula: tuple = ()
    censoring_strata: str | None = "arm"
    sampling_formula: tuple | None = None
    restriction: tuple | None = None  # (covariate, lo, hi)
    bootstrap_b: int = 500
    t_grid: tuple | None = None
    dump_replicates: bool = False
    permutations: int = 10_000
    add_one: bool = False
    refit_weights: bool = True
    weight_flag_cap: float = 50.0
    truncate_weights: bool = False
    seed: int | None = None
    raw: dict = dataclasses.field(default_factory=dict)

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def validate(self):
        known = set(self.schema.covariate_names)
        referenced = []
        for formula in (self.censoring_formula, self.sampling_formula or ()):
            for term in parse_formula(list(formula)):
                referenced.append(term.name)
        if self.restriction:
            referenced.append(self.restriction[0])
        unknown = sorted(set(referenced) - known)
        if unknown:
            raise ConfigError(f"covariates {unknown} are not in the data schema {sorted(known)}")
        if self.censoring_strata not in (None, "arm"):
            if self.censoring_strata not in known:
                raise ConfigError(f"strata variable {self.censoring_strata!r} not in schema")
        return self


def load_run_config(path) -> RunConfig:
    raw = _load_toml(path)
    data = raw.get("data", {})
    if "covariates" not in data:
        raise ConfigError("[data.covariates] section is required")
    schema = DatasetSchema.from_mapping(
        data["covariates"], data.get("admin_censor_time", 365.0)
    )

    models = raw.get("models", {})
    censoring = models.get("censoring", {})
    sampling = models.get("sampling", None)
    diagnostic = raw.get("diagnostic", {})
    bootstrap = raw.get("bootstrap", {})
    weights = raw.get("weights", {})

    restriction = None
    if "restrict" in raw:
        r = raw["restrict"]
        for key in ("covariate", "lo", "hi"):
            if key not in r:
                raise ConfigError(f"[restrict] needs {key!r}")
        restriction = (str(r["covariate"]), float(r["lo"]), float(r["hi"]))

    cfg = RunConfig(
        schema=schema,
        input_path=data.get("input"),
        censoring_formula=tuple(censoring.get("formula", ())),
        censoring_strata=censoring.get("strata", "arm"),
        sampling_formula=(tuple(sampling["formula"]) if sampling and "formula" in sampling else None),
        restriction=restriction,
        bootstrap_b=int(bootstrap.get("replicates", 500)),
        t_grid=tuple(bootstrap["t_grid"]) if bootstrap.get("t_grid") else None,
        dump_replicates=bool(bootstrap.get("dump_replicates", False)),
        permutations=int(diagnostic.get("permutations", 10_000)),
        add_one=bool(diagnostic.get("add_one", False)),
        refit_weights=bool(diagnostic.get("refit_weights", True)),
        weight_flag_cap=float(weights.get("flag_cap", 50.0)),
        truncate_weights=bool(weights.get("truncate", False)),
        seed=int(raw["seed"]) if "seed" in raw else None,
        raw=raw,
    )
    return cfg.validate()


def load_scenario_config(path) -> tuple[ScenarioConfig, dict]:
    raw = _load_toml(path)
    if "scenario" not in raw:
        raise ConfigError("[scenario] section is required")
    sc = dict(raw["scenario"])
    dgp_overrides = sc.pop("dgp", {})
    valid_dgp = {f.name for f in dataclasses.fields(DgpParams)}
    unknown = sorted(set(dgp_overrides) - valid_dgp)
    if unknown:
        raise ConfigError(f"unknown [scenario.dgp] keys {unknown}")
    dgp = DgpParams(**{k: float(v) for k, v in dgp_overrides.items()})

    rename = {"bootstrap": "bootstrap_b"}
    kwargs = {}
    valid = {f.name for f in dataclasses.fields(ScenarioConfig)}
    for key, val in sc.items():
        key = rename.get(key, key)
        if key not in valid:
            raise ConfigError(f"unknown [scenario] key {key!r}")
        kwargs[key] = val
    for tuple_key in ("alpha_levels", "t_eval"):
        if tuple_key in kwargs:
            kwargs[tuple_key] = tuple(float(v) for v in kwargs[tuple_key])
    try:
        cfg = ScenarioConfig(dgp=dgp, **kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad [scenario] config: {exc}") from None
    return cfg, raw
