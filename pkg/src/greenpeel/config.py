"""Run configuration: JSON in, validated dataclasses out, JSON back."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .grid_pde import DENSE_CAP, MAX_NODES, CoefficientField
from .gp_sampling import KernelSpec
from .peeling import NEAR_POLICIES, PeelConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass
class Problem:
    d: int = 1
    n: int = 128
    coefficient: str = "identity"


@dataclass
class Hierarchy:
    L: int = 4
    W: int = 7


@dataclass
class Sampling:
    kernel: str = "squared_exponential"
    length_scale: float = 0.2
    seed: int = 0


@dataclass
class Algorithm:
    eps: float | None = 1e-2
    rank: int | None = None
    oversampling: int = 10
    posterior_probes: int | None = None
    k_max: int = 16
    k_step: int = 2
    near_field: str = "neglect"
    mode: str = "active"


@dataclass
class Evaluation:
    dense_oracle: bool = True
    test_size: int = 10
    dense_cap: int = DENSE_CAP


@dataclass
class Sweep:
    budgets: list = field(default_factory=lambda: [1, 2, 3, 4])
    seeds: list = field(default_factory=lambda: [0])
    workers: int = 1
    quality_modes: int = 4


@dataclass
class Output:
    dir: str = "out"
    dataset: str | None = None


SECTIONS = {
    "problem": Problem, "hierarchy": Hierarchy, "sampling": Sampling, "algorithm": Algorithm,
    "evaluation": Evaluation, "sweep": Sweep, "output": Output,
}


@dataclass
class RunConfig:
    problem: Problem = field(default_factory=Problem)
    hierarchy: Hierarchy = field(default_factory=Hierarchy)
    sampling: Sampling = field(default_factory=Sampling)
    algorithm: Algorithm = field(default_factory=Algorithm)
    evaluation: Evaluation = field(default_factory=Evaluation)
    sweep: Sweep = field(default_factory=Sweep)
    output: Output = field(default_factory=Output)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        parts = {}
        for name, value in raw.items():
            if name not in SECTIONS:
                raise ConfigError(f"unknown config key {name!r}")
            parts[name] = _section(name, SECTIONS[name], value)
        cfg = cls(**parts)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self):
        p, h, a, s, e = self.problem, self.hierarchy, self.algorithm, self.sampling, self.evaluation
        _check(p.d in (1, 2, 3), "problem.d", f"must be 1, 2 or 3 (got {p.d})")
        _check(p.n >= 2, "problem.n", f"must be at least 2 (got {p.n})")
        _check(p.n**p.d <= MAX_NODES, "problem.n", f"n^d = {p.n ** p.d} exceeds the node cap {MAX_NODES}")
        _check(p.coefficient in CoefficientField.PRESETS, "problem.coefficient",
               f"must be one of {CoefficientField.PRESETS}")
        _check(h.L >= 0, "hierarchy.L", "must be nonnegative")
        _check(2**h.L <= p.n and p.n % 2**h.L == 0, "hierarchy.L",
               f"n={p.n} must be divisible by 2^L={2 ** h.L}")
        _check(h.W >= 1, "hierarchy.W", "must be positive")
        _check(s.kernel in ("squared_exponential", "white"), "sampling.kernel", "must be squared_exponential or white")
        _check(s.length_scale > 0, "sampling.length_scale", "must be positive")
        _check(a.rank is not None or a.eps is not None, "algorithm.eps", "give eps or a fixed rank")
        _check(a.eps is None or 0 < a.eps < 1, "algorithm.eps", "must lie in (0, 1)")
        _check(a.rank is None or a.rank >= 0, "algorithm.rank", "must be nonnegative")
        _check(a.oversampling >= 0, "algorithm.oversampling", "must be nonnegative")
        _check(a.k_max >= 1 and a.k_step >= 1, "algorithm.k_max", "k_max and k_step must be positive")
        _check(a.near_field in NEAR_POLICIES, "algorithm.near_field", f"must be one of {NEAR_POLICIES}")
        _check(a.mode in ("active", "dataset"), "algorithm.mode", "must be active or dataset")
        _check(not e.dense_oracle or p.n**p.d <= e.dense_cap, "evaluation.dense_oracle",
               f"n^d = {p.n ** p.d} exceeds the dense cap {e.dense_cap}")
        _check(e.test_size >= 0, "evaluation.test_size", "must be nonnegative")
        _check(len(self.sweep.seeds) >= 1, "sweep.seeds", "need at least one seed")
        _check(self.sweep.workers >= 1, "sweep.workers", "must be positive")

    def kernel(self) -> KernelSpec:
        return KernelSpec(self.sampling.kernel, self.sampling.length_scale)

    def peel_config(self, seed: int | None = None, rank: int | None = None, eps: float | None = None) -> PeelConfig:
        a = self.algorithm
        if rank is not None:
            eps = None
        elif eps is not None:
            rank = None
        else:
            rank, eps = a.rank, a.eps
        return PeelConfig(
            L=self.hierarchy.L, W=self.hierarchy.W, eps=eps, rank=rank, oversampling=a.oversampling,
            posterior_probes=a.posterior_probes, k_max=a.k_max, k_step=a.k_step, near_field=a.near_field,
            kernel=self.kernel(), seed=self.sampling.seed if seed is None else seed)


def _check(ok, key, message):
    if not ok:
        raise ConfigError(f"{key}: {message}")


_ALLOWED_TYPES = {int: (int,), float: (int, float), bool: (bool,), str: (str,), list: (list,)}


def _section(name, cls, value):
    if not isinstance(value, dict):
        raise ConfigError(f"{name}: must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, v in value.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {name}.{key!r}")
        kwargs[key] = _coerce(f"{name}.{key}", fields[key].type, v)
    return cls(**kwargs)


def _coerce(key, annotation, v):
    ann = str(annotation).replace(" ", "")
    optional = ann.endswith("|None")
    base = ann.split("|")[0]
    if v is None:
        if optional:
            return None
        raise ConfigError(f"{key}: may not be null")
    py = {"int": int, "float": float, "bool": bool, "str": str, "list": list}[base]
    if py in (int, float) and isinstance(v, bool):
        raise ConfigError(f"{key}: expected {base}, got bool")
    if not isinstance(v, _ALLOWED_TYPES[py]):
        raise ConfigError(f"{key}: expected {base}, got {type(v).__name__}")
    return py(v)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".")
        raw.setdefault(section, {})[key] = value
    return RunConfig.from_dict(raw)


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
