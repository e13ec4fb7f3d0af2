"""TOML run configurations: schema, loading and conversion to domain objects."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from .correlation import IccSet
from .design import DesignSchedule, build_standard_schedule, read_schedule_csv
from .errors import ValidationError
from .power import PowerQuery

SCHEMA_VERSION = 1

_num = {"type": "number"}
_vec = {"type": "array", "items": _num, "minItems": 1}
_mat_or_num = {"oneOf": [_num, {"type": "array", "items": _vec, "minItems": 1}]}
_vec_or_num = {"oneOf": [_num, _vec]}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer", "minimum": 0},
        "meta": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"description": {"type": "string"}, "reference_power": _num},
        },
        "design": {
            "type": "object",
            "additionalProperties": False,
            "required": ["periods", "cluster_period_size"],
            "properties": {
                "mode": {"enum": ["cs", "cc", "cross-sectional", "closed-cohort"]},
                "periods": {"type": "integer", "minimum": 2},
                "sequences": {"type": "integer", "minimum": 1},
                "clusters": {"type": "integer", "minimum": 1},
                "cluster_period_size": {"type": "integer", "minimum": 1},
                "schedule_csv": {"type": "string"},
            },
        },
        "icc": {
            "type": "object",
            "additionalProperties": False,
            "required": ["rho0"],
            "properties": {
                "rho0": _vec,
                "rho1": _vec,
                "rho0_between": _mat_or_num,
                "rho1_between": _mat_or_num,
                "rho2_between": _mat_or_num,
                "cac": {"type": "number", "minimum": 0, "maximum": 1},
                "rho2": _vec,
                "rho21_between": _mat_or_num,
            },
        },
        "effects": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "standardized": _vec,
                "raw": _vec,
                "marginal_sd": _vec_or_num,
                "common": _num,
                "margins": _vec,
            },
        },
        "test": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["iu", "omnibus", "common-effect", "common"]},
                "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "df_rule": {"enum": ["paper-default", "normal", "custom"]},
                "df": {"type": "number", "exclusiveMinimum": 0},
                "two_sided": {"type": "boolean"},
                "noncentrality": {"enum": ["fgls", "per-cluster"]},
                "t_form": {"enum": ["noncentral", "shifted"]},
                "accuracy": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "search": {
            "type": "object",
            "additionalProperties": False,
            "required": ["target"],
            "properties": {
                "target": _num,
                "I_max": {"type": "integer", "minimum": 1},
                "I_min": {"type": "integer", "minimum": 1},
                "N_max": {"type": "integer", "minimum": 1},
                "N_min": {"type": "integer", "minimum": 1},
                "order": {"enum": ["I-first", "N-first"]},
            },
        },
        "sensitivity": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "grid": {"type": "object", "additionalProperties": _vec},
                "points": {"type": "array", "items": {"type": "object", "additionalProperties": _num}},
            },
        },
        "simulation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "replicates": {"type": "integer"},
                "null": {"enum": ["none", "first-zero", "second-zero", "all-zero"]},
                "variances": _vec_or_num,
                "trend": {"oneOf": [{"enum": ["geometric", "none"]}, _vec]},
                "se_method": {"enum": ["fgls", "hessian"]},
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "max_iter": {"type": "integer", "minimum": 1},
            },
        },
    },
}


class ConfigError(ValidationError):
    """Schema or content problem in a run configuration."""


@dataclass
class RunConfig:
    data: dict
    source: Path | None = None

    def section(self, name: str, required: bool = True) -> dict:
        if name not in self.data:
            if required:
                raise ConfigError(f"config key {name}: required table [{name}] is missing")
            return {}
        return self.data[name]

    @property
    def seed(self) -> int:
        return int(self.data.get("seed", 20240101))

    @property
    def base_dir(self) -> Path:
        return self.source.parent if self.source is not None else Path.cwd()


def _path_str(err) -> str:
    parts = [str(p) for p in err.absolute_path]
    return ".".join(parts) if parts else "<root>"


def validate_config(data: dict) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        e = errors[0]
        msg = e.message
        if e.validator == "required":
            missing = msg.split("'")[1] if "'" in msg else msg
            path = _path_str(e)
            key = missing if path == "<root>" else f"{path}.{missing}"
            raise ConfigError(f"config key {key}: required key is missing")
        if e.validator == "additionalProperties":
            raise ConfigError(f"config key {_path_str(e)}: {msg}")
        raise ConfigError(f"config key {_path_str(e)}: {msg}")


def bundled_configs() -> list[str]:
    root = resources.files("swpower") / "configs"
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".toml"))


def resolve_config_path(name) -> Path:
    """A filesystem path, or the name of a bundled example config."""
    p = Path(name)
    if p.exists():
        return p
    cand = resources.files("swpower") / "configs" / p.name
    if cand.is_file():
        return Path(str(cand))
    raise ConfigError(f"config file {name!s} not found (bundled: {', '.join(bundled_configs())})")


def load_config(path) -> RunConfig:
    p = resolve_config_path(path)
    try:
        with open(p, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from None
    validate_config(data)
    return RunConfig(data, p)


def config_from_dict(data: dict) -> RunConfig:
    validate_config(data)
    return RunConfig(data, None)


# ---------------------------------------------------------------------------
# builders


def _mode(cfg: RunConfig, override: str | None = None) -> str:
    if override:
        return override
    return cfg.section("design").get("mode", "cs")


def build_schedule(cfg: RunConfig, N: int | None = None) -> DesignSchedule:
    d = cfg.section("design")
    N = int(N if N is not None else d["cluster_period_size"])
    if "schedule_csv" in d:
        path = Path(d["schedule_csv"])
        if not path.is_absolute():
            path = cfg.base_dir / path
        sched = read_schedule_csv(path, N)
        if sched.T != d["periods"]:
            raise ConfigError(f"config key design.periods: schedule has {sched.T} periods, config says {d['periods']}")
        return sched
    for key in ("sequences", "clusters"):
        if key not in d:
            raise ConfigError(f"config key design.{key}: required key is missing (or give design.schedule_csv)")
    S, I, T = d["sequences"], d["clusters"], d["periods"]
    if I % S:
        raise ConfigError(f"config key design.clusters: {I} is not a multiple of design.sequences={S}")
    return build_standard_schedule(S, I // S, T, N)


def _between(v):
    return np.asarray(v, dtype=float) if isinstance(v, list) else float(v)


def build_icc(cfg: RunConfig, mode: str | None = None) -> IccSet:
    c = cfg.section("icc")
    m = _mode(cfg, mode)
    L = len(c["rho0"])
    if "rho1" not in c and "cac" not in c:
        raise ConfigError("config key icc.rho1: give rho1 or cac")
    if "rho1" in c and len(c["rho1"]) != L:
        raise ConfigError(f"config key icc.rho1: expected {L} values")
    kw = {}
    if m in ("cc", "closed-cohort"):
        if "rho2" not in c:
            raise ConfigError("config key icc.rho2: required for closed-cohort designs")
        kw["rho2"] = c["rho2"]
        kw["rho21_between"] = _between(c.get("rho21_between", 0.0))
    elif "rho2" in c or "rho21_between" in c:
        raise ConfigError("config key icc.rho2: only valid for closed-cohort designs")
    icc = IccSet.from_params(
        c["rho0"],
        c.get("rho1", np.zeros(L)),
        _between(c.get("rho0_between", 0.0)),
        _between(c.get("rho1_between", 0.0)),
        _between(c.get("rho2_between", 0.0)),
        design=m,
        cac=c.get("cac"),
        **kw,
    )
    return icc


def _test_kind(cfg: RunConfig, override: str | None) -> str:
    k = override or cfg.section("test", required=False).get("kind", "iu")
    return "common-effect" if k == "common" else k


def build_query(cfg: RunConfig, *, test: str | None = None, mode: str | None = None, seed: int | None = None) -> PowerQuery:
    sched = build_schedule(cfg)
    icc = build_icc(cfg, mode)
    kind = _test_kind(cfg, test)
    e = cfg.section("effects")
    t = cfg.section("test", required=False)
    sd = e.get("marginal_sd", 1.0)
    if kind == "common-effect":
        if "common" not in e:
            raise ConfigError("config key effects.common: required for the common-effect test")
        effects = [e["common"]]
        sd = 1.0
    elif "raw" in e:
        effects = e["raw"]
    elif "standardized" in e:
        effects = list(np.asarray(e["standardized"]) * np.broadcast_to(np.asarray(sd, dtype=float), (icc.L,)))
    else:
        raise ConfigError("config key effects.standardized: give standardized or raw effects")
    if kind != "common-effect" and len(effects) != icc.L:
        raise ConfigError(f"config key effects: expected {icc.L} effects, got {len(effects)}")
    return PowerQuery(
        design=sched,
        icc=icc,
        effects=effects,
        marginal_sd=sd,
        alpha=t.get("alpha", 0.05),
        test=kind,
        margins=e.get("margins"),
        df_rule=t.get("df_rule", "paper-default"),
        df=t.get("df"),
        two_sided=t.get("two_sided", False),
        noncentrality=t.get("noncentrality", "fgls"),
        t_form=t.get("t_form", "noncentral"),
        accuracy=t.get("accuracy", 1e-4),
        seed=cfg.seed if seed is None else seed,
    )


def build_scenario(cfg: RunConfig, *, reps: int | None = None, null: str | None = None, seed: int | None = None,
                   mode: str | None = None):
    from .simulate import SimScenario

    d = cfg.section("design")
    if "schedule_csv" in d:
        raise ConfigError("config key design.schedule_csv: simulations use standard schedules (sequences, clusters)")
    sched = build_schedule(cfg)
    S = d["sequences"]
    icc = build_icc(cfg, mode)
    e = cfg.section("effects")
    if "standardized" not in e:
        raise ConfigError("config key effects.standardized: simulations need standardized effects")
    s = cfg.section("simulation", required=False)
    t = cfg.section("test", required=False)
    R = reps if reps is not None else s.get("replicates", 500)
    if R < 1:
        raise ConfigError(f"config key simulation.replicates: must be >= 1, got {R}")
    trend = s.get("trend", "geometric")
    return SimScenario(
        num_sequences=S,
        clusters_per_sequence=sched.I // S,
        T=sched.T,
        N=sched.N,
        icc=icc,
        effects=tuple(e["standardized"]),
        variances=s.get("variances", 4.0),
        trend=trend if isinstance(trend, str) else tuple(trend),
        alpha=t.get("alpha", 0.05),
        replicates=R,
        base_seed=cfg.seed if seed is None else seed,
        null=null or s.get("null", "none"),
        se_method=s.get("se_method", "fgls"),
        tol=s.get("tol", 1e-5),
        max_iter=s.get("max_iter", 5000),
    )


__all__ = [
    "ConfigError",
    "RunConfig",
    "SCHEMA",
    "build_icc",
    "build_query",
    "build_scenario",
    "build_schedule",
    "bundled_configs",
    "config_from_dict",
    "load_config",
    "validate_config",
]
