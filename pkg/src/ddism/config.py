"""YAML configuration: network description plus per-stage settings.

Top-level sections are ``network``, ``experiment``, ``synthesis``, ``ism``, ``sim``,
``verify`` and ``pipeline``. Every section is optional except ``network``; unknown
keys anywhere are rejected.

Example network section::

    network:
      topology: ring          # fully_connected | ring | binary_tree | star | line | custom
      N: 10
      weight: 0.01            # coupling weight (default depends on the topology)
      edges: []               # custom only: [[src, dst], ...], zero-based
      n: 2
      terms: [x1^2, x1*x2, x2^2, sin(x1*x2), cos(x1*x2), ln(1+x1^2), ln(1+x2^2)]
      A: [[1, 1, 0, 0, 0, 0, 0, 0, 0], [0, 0, 1, 1, 0, 0, 1, 0, 1]]
      B: [[0], [1]]
      perturbation: {amplitude: [20], frequency: [100], phase: [0], gamma_sup: 20}
"""
from __future__ import annotations

import copy
import hashlib
import json
import warnings
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import yaml

from .model import (Dictionary, NetworkModel, NormalizationWarning, SinusoidalPerturbation,
                    SubsystemModel, build_topology, custom_topology)


class ConfigError(ValueError):
    pass


@dataclass
class NetworkSpec:
    topology: str
    N: int
    n: int
    terms: list
    A: list
    B: list
    perturbation: dict
    weight: float | None = None
    edges: list = field(default_factory=list)


@dataclass
class ExperimentSpec:
    T: int = 10
    tau: float = 0.1
    amplitude: float = 1.0
    x0_box: float = 0.5
    derivative_mode: str = "exact_oracle"
    substeps: int = 10
    scheme: str = "rk4"


@dataclass
class SynthesisSpec:
    kappa: float = 1.0
    mu: float = 1.0
    objective: str = "bounded_condition"
    eps_pd: float = 1e-6
    condition_relax: float = 1.5
    lmi_margin: float = 1e-6
    kappa_grid: list = field(default_factory=list)
    mu_grid: list = field(default_factory=list)
    n_mc: int = 1000
    radius: float = 10.0
    strict_dense: bool = False


@dataclass
class IsmSpec:
    C: list | None = None
    margin: float = 0.1
    eps_bl: float = 1e-3
    mode: str = "boundary_layer"


@dataclass
class SimSpec:
    horizon: float = 10.0
    h: float = 1e-4
    scheme: str = "rk4"
    perturbation: bool = True
    controllers: str = "iss_plus_ism"
    x0_box: float = 100.0
    log_every: int = 1
    csv_downsample: int = 100
    backend: str = "auto"


@dataclass
class VerifySpec:
    shrink_factor: float = 1e-2
    sliding_band: float | None = None
    n_mc: int = 10000
    radius: float = 10.0
    decay_slack: float = 1e-6
    decay_fraction: float = 0.999
    nominal_run: bool = True


@dataclass
class PipelineSpec:
    retries: int = 3
    reuse: bool = True
    parallel: int = 1
    T_growth: int = 2


@dataclass
class Config:
    network: NetworkSpec
    experiment: ExperimentSpec = field(default_factory=ExperimentSpec)
    synthesis: SynthesisSpec = field(default_factory=SynthesisSpec)
    ism: IsmSpec = field(default_factory=IsmSpec)
    sim: SimSpec = field(default_factory=SimSpec)
    verify: VerifySpec = field(default_factory=VerifySpec)
    pipeline: PipelineSpec = field(default_factory=PipelineSpec)
    seed: int = 0
    name: str = "run"

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.__dict__.copy() if hasattr(v, "__dataclass_fields__") else v
        return out

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


_SECTIONS = {"network": NetworkSpec, "experiment": ExperimentSpec, "synthesis": SynthesisSpec,
             "ism": IsmSpec, "sim": SimSpec, "verify": VerifySpec, "pipeline": PipelineSpec}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown field(s) in {where}: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(data: dict) -> Config:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping")
    data = copy.deepcopy(data)
    unknown = set(data) - set(_SECTIONS) - {"seed", "name"}
    if unknown:
        raise ConfigError(f"unknown top-level field(s): {sorted(unknown)}")
    if "network" not in data:
        raise ConfigError("missing 'network' section")
    kw = {k: _build(cls, data[k], k) for k, cls in _SECTIONS.items() if k in data}
    cfg = Config(**kw, seed=int(data.get("seed", 0)), name=str(data.get("name", "run")))
    pert = cfg.network.perturbation
    if not isinstance(pert, dict):
        raise ConfigError("network.perturbation must be a mapping")
    bad = set(pert) - {"amplitude", "frequency", "phase", "gamma_sup"}
    if bad:
        raise ConfigError(f"unknown field(s) in network.perturbation: {sorted(bad)}")
    return cfg


def load_config(path) -> Config:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return config_from_dict(data)


def builtin_config_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("ddism.configs").iterdir() if p.name.endswith(".yaml"))


def load_builtin(name: str) -> Config:
    ref = resources.files("ddism.configs") / f"{name}.yaml"
    if not ref.is_file():
        raise ConfigError(f"no built-in config {name!r}; available: {builtin_config_names()}")
    return config_from_dict(yaml.safe_load(ref.read_text()))


def resolve_config(spec: str) -> Config:
    """Path to a YAML file, or the name of a built-in config."""
    if Path(spec).exists():
        return load_config(spec)
    return load_builtin(spec)


def build_subsystem(spec: NetworkSpec) -> SubsystemModel:
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NormalizationWarning)
            dictionary = Dictionary.from_terms(int(spec.n), spec.terms)
        p = spec.perturbation
        m = len(spec.B[0]) if spec.B and isinstance(spec.B[0], list) else 1
        pert = SinusoidalPerturbation(p.get("amplitude", [0.0] * m), p.get("frequency", [0.0] * m),
                                      p.get("phase", [0.0] * m), float(p.get("gamma_sup", 0.0)))
        return SubsystemModel(spec.A, spec.B, dictionary, pert, kind="configured")
    except ValueError as exc:
        raise ConfigError(f"network: {exc}") from None


def build_network(spec: NetworkSpec) -> NetworkModel:
    sub = build_subsystem(spec)
    try:
        if spec.topology == "custom":
            top = custom_topology(spec.N, [tuple(e) for e in spec.edges],
                                  1e-2 if spec.weight is None else spec.weight, sub.n)
        else:
            if spec.edges:
                raise ConfigError("edges are only allowed for custom topologies")
            top = build_topology(spec.topology, spec.N, spec.weight, sub.n)
        return NetworkModel([sub] * spec.N, top)
    except ValueError as exc:
        raise ConfigError(f"network: {exc}") from None


def desk_scale(cfg: Config, max_N: int = 10, max_horizon: float = 10.0) -> Config:
    """Cap the network size (largest admissible N for the kind) and the horizon."""
    cfg = copy.deepcopy(cfg)
    N = min(cfg.network.N, max_N)
    if cfg.network.topology == "binary_tree":
        N = 2 ** (max(N + 1, 4).bit_length() - 1) - 1
        N = min(N, cfg.network.N)
    cfg.network.N = N
    if cfg.network.topology == "custom":
        cfg.network.edges = [e for e in cfg.network.edges if max(e) < N]
    cfg.sim.horizon = min(cfg.sim.horizon, max_horizon)
    return cfg
