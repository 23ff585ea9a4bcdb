"""Experiment configuration: TOML grammar, validation and round-trip.

A config is a TOML document. Top-level keys::

    name, description, experiment, horizon, stride, threads, output, metrics

and the tables ``[seeds]``, ``[problem]``, ``[topology]``, ``[[algorithms]]``
(each with an inline ``schedule`` table), ``[transient]``, ``[td]`` and
``[lemmas]``. Unknown keys anywhere are rejected. ``problem.n`` and
``problem.alpha`` may be lists, in which case the experiment runs on their
Cartesian grid.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from ..algorithms import KINDS, StepSchedule
from ..errors import ConfigError

EXPERIMENTS = ("transient", "scaling", "td", "lemmas")
FAMILIES = ("quadratic", "logistic", "gridworld")
TOPOLOGIES = ("ring", "erdos_renyi", "complete")
SCHEDULES = ("inverse-time", "constant", "horizon", "td-default")
METRICS = ("transient", "rate", "bound")
FIELDS = ("worst_gap", "avg_gap")
MAX_HORIZON = 1_000_000


@dataclass(frozen=True)
class ScheduleSpec:
    """Step-size rule as written in a config; resolved against the problem at run time.

    ``horizon`` is the fixed-horizon constant step and ``td-default`` the
    inverse-time TD rule scaled by ``scale``; both need measured constants.
    """

    kind: str = "inverse-time"
    a0: float = 1.0
    a1: float = 1.0
    value: float = 0.0
    scale: float = 0.6

    def resolve(self, **consts) -> StepSchedule:
        if self.kind == "inverse-time":
            return StepSchedule.inverse_time(self.a0, self.a1)
        if self.kind == "constant":
            return StepSchedule.constant(self.value)
        if self.kind == "horizon":
            return StepSchedule.horizon_rule(consts["T"], consts["D"], consts["n"], consts["L"],
                                             consts["sigma_sq"])
        from ..tdlearning import default_td_schedule
        return default_td_schedule(consts["fixed_point"], self.scale)

    def to_dict(self) -> dict:
        if self.kind == "inverse-time":
            return {"kind": self.kind, "a0": self.a0, "a1": self.a1}
        if self.kind == "constant":
            return {"kind": self.kind, "value": self.value}
        if self.kind == "td-default":
            return {"kind": self.kind, "scale": self.scale}
        return {"kind": self.kind}


@dataclass(frozen=True)
class AlgorithmEntry:
    kind: str = "DSGD"
    batch_size: int = 1
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "batch_size": self.batch_size, "schedule": self.schedule.to_dict()}


@dataclass(frozen=True)
class ProblemSpec:
    family: str = "quadratic"
    d: int = 10
    n: tuple = (20,)
    samples: int = 500
    alpha: tuple = (0.0,)
    r: float = 1.0
    seed: int = 0
    curvature_shift: float = 1.0
    offset_scale: float = 0.0
    partition: str = "random"
    init: float = 1.0
    discount: float = 0.9
    reward_mean: float = 1.0
    reward_var: float = 10.0
    shared_reward: bool = False


@dataclass(frozen=True)
class TopologySpec:
    kind: str = "ring"
    self_weight: float = 0.3
    p: float = 0.15
    seed: int = 0
    n: int | None = None


@dataclass(frozen=True)
class TransientSpec:
    """``window_fraction`` of the recorded points; omitted means the library default window."""

    threshold: float = 2.0
    window_fraction: float | None = None
    field: str = "worst_gap"
    reference: str = "CSGD"
    target: str = "DSGD"
    rate_tail_fraction: float = 0.1
    min_r2: float = 0.9


@dataclass(frozen=True)
class TdSpec:
    burn_in_fraction: float = 0.05
    ratio_bound: float = 4.0
    rate_tail_fraction: float = 0.9
    rate_range: tuple = (-1.3, -0.7)


@dataclass(frozen=True)
class LemmaSpec:
    slack: float = 0.1
    required_fraction: float = 0.99
    step_fraction: float = 1.0
    consensus_horizon: int = 3000
    td_seeds: int = 200
    td_horizon: int = 2000
    td_agents: int = 10
    td_self_weight: float = 0.8
    td_seed: int = 0
    td_schedule_scale: float = 0.6


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    experiment: str
    horizon: int
    problem: ProblemSpec
    topology: TopologySpec
    algorithms: tuple = ()
    description: str = ""
    stride: int = 1
    seed_count: int = 1
    seed_base: int = 0
    threads: int = 1
    output: str = "results"
    metrics: tuple = METRICS
    transient: TransientSpec = field(default_factory=TransientSpec)
    td: TdSpec = field(default_factory=TdSpec)
    lemmas: LemmaSpec = field(default_factory=LemmaSpec)

    @property
    def seeds(self) -> list[int]:
        return list(range(self.seed_base, self.seed_base + self.seed_count))

    def grid(self) -> list[tuple[int, float]]:
        return [(n, a) for n in self.problem.n for a in self.problem.alpha]

    def with_overrides(self, seeds=None, threads=None, stride=None, output=None) -> "ExperimentConfig":
        changes = {}
        if seeds is not None:
            changes["seed_count"] = seeds
        if threads is not None:
            changes["threads"] = threads
        if stride is not None:
            changes["stride"] = stride
        if output is not None:
            changes["output"] = str(output)
        cfg = dataclasses.replace(self, **changes)
        validate(cfg)
        return cfg

    def to_dict(self) -> dict:
        """Plain-TOML form; :func:`parse_text` of its dump gives back an equal config."""
        prob = dataclasses.asdict(self.problem)
        prob["n"] = list(self.problem.n)
        prob["alpha"] = list(self.problem.alpha)
        topo = {k: v for k, v in dataclasses.asdict(self.topology).items() if v is not None}
        trans = {k: v for k, v in dataclasses.asdict(self.transient).items() if v is not None}
        td = dataclasses.asdict(self.td)
        td["rate_range"] = list(self.td.rate_range)
        return {
            "name": self.name, "description": self.description, "experiment": self.experiment,
            "horizon": self.horizon, "stride": self.stride, "threads": self.threads,
            "output": self.output, "metrics": list(self.metrics),
            "seeds": {"count": self.seed_count, "base": self.seed_base},
            "problem": prob, "topology": topo,
            "algorithms": [a.to_dict() for a in self.algorithms],
            "transient": trans, "td": td, "lemmas": dataclasses.asdict(self.lemmas),
        }

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def hash(self) -> str:
        """Digest of everything that affects results (not threads or the output directory)."""
        data = self.to_dict()
        data.pop("threads")
        data.pop("output")
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_TOP = {"name", "description", "experiment", "horizon", "stride", "threads", "output", "metrics",
        "seeds", "problem", "topology", "algorithms", "transient", "td", "lemmas"}
_TABLES = {"seeds", "problem", "topology", "transient", "td", "lemmas"}


def _check_keys(table, allowed, path: str) -> None:
    if not isinstance(table, dict):
        raise ConfigError(f"{path}: expected a table, got {type(table).__name__}")
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key {where}{unknown[0]}; allowed: {', '.join(sorted(allowed))}")


def _typed(value, kind, path: str):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise AssertionError(kind)


def _scalar_or_list(value, kind, path: str) -> tuple:
    items = value if isinstance(value, list) else [value]
    if not items:
        raise ConfigError(f"{path}: list must not be empty")
    return tuple(_typed(v, kind, f"{path}[{k}]") for k, v in enumerate(items))


def _dataclass_from(cls, table: dict, path: str, special=None):
    """Fill ``cls`` from ``table`` using field annotations for scalar types."""
    special = special or {}
    names = {f.name for f in dataclasses.fields(cls)}
    _check_keys(table, names, path)
    kwargs = {}
    types = {"int": int, "float": float, "str": str, "bool": bool,
             "int | None": int, "float | None": float}
    for f in dataclasses.fields(cls):
        if f.name not in table:
            continue
        key = f"{path}.{f.name}"
        if f.name in special:
            kwargs[f.name] = special[f.name](table[f.name], key)
        else:
            kwargs[f.name] = _typed(table[f.name], types[f.type], key)
    return cls(**kwargs)


def _schedule(table, path: str) -> ScheduleSpec:
    spec = _dataclass_from(ScheduleSpec, table, path)
    if spec.kind not in SCHEDULES:
        raise ConfigError(f"{path}.kind: unknown schedule {spec.kind!r}; choose from {', '.join(SCHEDULES)}")
    if spec.kind in ("inverse-time", "constant"):
        try:
            spec.resolve()
        except ConfigError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    if spec.kind == "td-default" and not spec.scale > 0:
        raise ConfigError(f"{path}.scale: must be positive")
    return spec


def _algorithms(value, path: str) -> tuple:
    if not isinstance(value, list):
        raise ConfigError(f"{path}: expected an array of tables")
    out = []
    for k, table in enumerate(value):
        out.append(_dataclass_from(AlgorithmEntry, table, f"{path}[{k}]", {"schedule": _schedule}))
    return tuple(out)


def parse_text(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: parse error: {exc}") from None
    return from_dict(raw)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_text(path.read_text(), str(path))


def from_dict(raw: dict) -> ExperimentConfig:
    _check_keys(raw, _TOP, "")
    for key in _TABLES & set(raw):
        if not isinstance(raw[key], dict):
            raise ConfigError(f"{key}: expected a table")
    for req in ("name", "experiment", "horizon", "problem", "topology"):
        if req not in raw:
            raise ConfigError(f"{req}: required key is missing")
    seeds = raw.get("seeds", {})
    _check_keys(seeds, {"count", "base"}, "seeds")
    listy = {"n": lambda v, p: _scalar_or_list(v, int, p), "alpha": lambda v, p: _scalar_or_list(v, float, p)}
    rng2 = {"rate_range": lambda v, p: _scalar_or_list(v, float, p)}
    cfg = ExperimentConfig(
        name=_typed(raw["name"], str, "name"),
        description=_typed(raw.get("description", ""), str, "description"),
        experiment=_typed(raw["experiment"], str, "experiment"),
        horizon=_typed(raw["horizon"], int, "horizon"),
        stride=_typed(raw.get("stride", 1), int, "stride"),
        threads=_typed(raw.get("threads", 1), int, "threads"),
        output=_typed(raw.get("output", "results"), str, "output"),
        metrics=_scalar_or_list(raw.get("metrics", list(METRICS)), str, "metrics"),
        seed_count=_typed(seeds.get("count", 1), int, "seeds.count"),
        seed_base=_typed(seeds.get("base", 0), int, "seeds.base"),
        problem=_dataclass_from(ProblemSpec, raw["problem"], "problem", listy),
        topology=_dataclass_from(TopologySpec, raw["topology"], "topology"),
        algorithms=_algorithms(raw.get("algorithms", []), "algorithms"),
        transient=_dataclass_from(TransientSpec, raw.get("transient", {}), "transient"),
        td=_dataclass_from(TdSpec, raw.get("td", {}), "td", rng2),
        lemmas=_dataclass_from(LemmaSpec, raw.get("lemmas", {}), "lemmas"),
    )
    validate(cfg)
    return cfg


def _positive(value, path: str) -> None:
    if not value > 0:
        raise ConfigError(f"{path}: must be positive, got {value}")


def validate(cfg: ExperimentConfig) -> None:
    """Cross-field checks; raises :class:`ConfigError` naming the offending field."""
    if not cfg.name:
        raise ConfigError("name: must not be empty")
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment: unknown kind {cfg.experiment!r}; choose from {', '.join(EXPERIMENTS)}")
    _positive(cfg.horizon, "horizon")
    _positive(cfg.stride, "stride")
    _positive(cfg.seed_count, "seeds.count")
    _positive(cfg.threads, "threads")
    if cfg.horizon > MAX_HORIZON:
        raise ConfigError(f"horizon: at most {MAX_HORIZON}, got {cfg.horizon}")
    if cfg.stride > cfg.horizon:
        raise ConfigError(f"stride: {cfg.stride} exceeds horizon {cfg.horizon}")
    if cfg.seed_base < 0:
        raise ConfigError("seeds.base: must be nonnegative")
    for m in cfg.metrics:
        if m not in METRICS:
            raise ConfigError(f"metrics: unknown entry {m!r}; choose from {', '.join(METRICS)}")

    p = cfg.problem
    if p.family not in FAMILIES:
        raise ConfigError(f"problem.family: unknown family {p.family!r}; choose from {', '.join(FAMILIES)}")
    for n in p.n:
        if n < 1:
            raise ConfigError(f"problem.n: must be positive, got {n}")
    for a in p.alpha:
        if not 0.0 <= a <= 1.0:
            raise ConfigError(f"problem.alpha: must lie in [0, 1], got {a}")
    _positive(p.d, "problem.d")
    _positive(p.samples, "problem.samples")
    if p.family == "logistic":
        _positive(p.r, "problem.r")
    if p.partition not in ("random", "sorted"):
        raise ConfigError(f"problem.partition: must be 'random' or 'sorted', got {p.partition!r}")

    t = cfg.topology
    if t.kind not in TOPOLOGIES:
        raise ConfigError(f"topology.kind: unknown kind {t.kind!r}; choose from {', '.join(TOPOLOGIES)}")
    if t.n is not None and any(n != t.n for n in p.n):
        raise ConfigError(f"topology.n: {t.n} does not match problem.n {list(p.n)}")
    if t.kind == "ring" and not 0.0 < t.self_weight < 1.0:
        raise ConfigError(f"topology.self_weight: must lie in (0, 1), got {t.self_weight}")
    if t.kind == "erdos_renyi" and not 0.0 < t.p <= 1.0:
        raise ConfigError(f"topology.p: must lie in (0, 1], got {t.p}")

    if cfg.experiment in ("transient", "scaling"):
        if p.family == "gridworld":
            raise ConfigError("problem.family: gridworld is only valid for td experiments")
        if not cfg.algorithms:
            raise ConfigError("algorithms: at least one algorithm is required")
        kinds = [a.kind for a in cfg.algorithms]
        if cfg.transient.reference not in kinds and "transient" in cfg.metrics:
            raise ConfigError(f"transient.reference: {cfg.transient.reference!r} is not among the algorithms")
        if len(set(kinds)) != len(kinds):
            raise ConfigError("algorithms: each kind may appear only once")
    if cfg.experiment == "scaling":
        if len(p.n) < 3:
            raise ConfigError("problem.n: a scaling experiment needs at least 3 values")
        if cfg.transient.target not in [a.kind for a in cfg.algorithms]:
            raise ConfigError(f"transient.target: {cfg.transient.target!r} is not among the algorithms")
    if cfg.experiment == "td":
        if p.family != "gridworld":
            raise ConfigError("problem.family: td experiments need the gridworld family")
        if len(p.n) != 1:
            raise ConfigError("problem.n: td experiments take a single n")
        if len(cfg.algorithms) > 1:
            raise ConfigError("algorithms: td experiments take at most one (schedule only)")
    if cfg.experiment == "lemmas" and p.family != "quadratic":
        raise ConfigError("problem.family: lemma checks run on the quadratic family")
    for k, a in enumerate(cfg.algorithms):
        if a.kind not in KINDS and not (cfg.experiment == "td" and a.kind == "TD0"):
            raise ConfigError(f"algorithms[{k}].kind: unknown algorithm {a.kind!r}; choose from {', '.join(KINDS)}")
        _positive(a.batch_size, f"algorithms[{k}].batch_size")
        if a.schedule.kind == "td-default" and cfg.experiment != "td":
            raise ConfigError(f"algorithms[{k}].schedule.kind: td-default is only valid for td experiments")

    tr = cfg.transient
    _positive(tr.threshold, "transient.threshold")
    if tr.window_fraction is not None and not 0.0 < tr.window_fraction <= 1.0:
        raise ConfigError(f"transient.window_fraction: must lie in (0, 1], got {tr.window_fraction}")
    if tr.field not in FIELDS:
        raise ConfigError(f"transient.field: must be one of {', '.join(FIELDS)}")
    if not 0.0 < tr.rate_tail_fraction <= 1.0:
        raise ConfigError("transient.rate_tail_fraction: must lie in (0, 1]")
    if not 0.0 <= cfg.td.burn_in_fraction < 1.0:
        raise ConfigError("td.burn_in_fraction: must lie in [0, 1)")
    if len(cfg.td.rate_range) != 2 or cfg.td.rate_range[0] > cfg.td.rate_range[1]:
        raise ConfigError("td.rate_range: must be an increasing pair")
    lm = cfg.lemmas
    if lm.slack < 0:
        raise ConfigError("lemmas.slack: must be nonnegative")
    for name in ("step_fraction", "consensus_horizon", "td_seeds", "td_horizon", "td_agents",
                 "td_schedule_scale"):
        _positive(getattr(lm, name), f"lemmas.{name}")
    if not 0.0 < lm.required_fraction <= 1.0:
        raise ConfigError("lemmas.required_fraction: must lie in (0, 1]")
