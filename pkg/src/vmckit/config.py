"""Experiment configuration: INI-style sections of ``key = value`` pairs.

Annotated example::

    [system]
    kind = finite              ; finite | ho1d | hatom | pretrain_toy
    size = 4                   ; finite: number of states
    hamiltonian = path         ; finite: path (Laplacian + diagonal) | random
    diagonal = 0, 0.1, 0.2, 0.3
    box_half_width = 10.0      ; continuous systems: box is [-w, w]^D
    n_orbitals = 2             ; pretrain_toy: number of Hermite orbitals

    [ansatz]
    kind = table               ; table | expfamily | mlp | matrix_mlp
    features = gaussian        ; expfamily: gaussian, radial
    init = 0.2, 0.4, 0.6, 0.8  ; initial parameters (empty: random for networks)
    hidden = 16, 16
    activation = tanh          ; tanh | sigmoid

    [sampler]
    kind = exact               ; exact | metropolis
    step_size = 0              ; 0 tunes to 50% acceptance before training
    burn_in = 500              ; engineering defaults, not derived values
    thinning = 10

    [optim]
    n = 16                     ; batch size (= number of walkers)
    schedule = inverse_sqrt    ; constant | inverse_sqrt | h4
    eta0 = 0.005
    m0 = 10000
    steps = 20000
    optimizer = sgd            ; sgd | adam (orbital pre-training only)

    [pretrain]
    strategy = same            ; same | independent | periodic
    period = 100
    rho = lebesgue             ; lebesgue | target
    target = ground            ; finite systems: ground | random
    loss = si                  ; orbital loss: si | mse
    repeats = 5                ; compare-pretrain: seeds seed .. seed+repeats-1

    [run]
    seed = 0
    output = out
    threads = 1
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints


class ConfigError(ValueError):
    pass


@dataclass
class SystemConfig:
    kind: str = "finite"
    size: int = 4
    hamiltonian: str = "path"
    diagonal: tuple = (0.0, 0.1, 0.2, 0.3)
    box_half_width: float = 10.0
    n_orbitals: int = 2


@dataclass
class AnsatzConfig:
    kind: str = "table"
    features: tuple = ("gaussian",)
    init: tuple = ()
    hidden: tuple = (16, 16)
    activation: str = "tanh"


@dataclass
class SamplerConfig:
    kind: str = "exact"
    step_size: float = 0.0
    burn_in: int = 500
    thinning: int = 10


@dataclass
class OptimConfig:
    n: int = 16
    schedule: str = "inverse_sqrt"
    eta0: float = 0.005
    m0: float = 10000.0
    steps: int = 1000
    optimizer: str = "sgd"


@dataclass
class PretrainConfig:
    strategy: str = "same"
    period: int = 100
    rho: str = "lebesgue"
    target: str = "ground"
    loss: str = "si"
    repeats: int = 5


@dataclass
class RunConfig:
    seed: int = 0
    output: str = "out"
    threads: int = 1


# element types of tuple-valued fields
_TUPLE_ITEMS = {"diagonal": float, "features": str, "init": float, "hidden": int}

_CHOICES = {
    ("system", "kind"): ("finite", "ho1d", "hatom", "pretrain_toy"),
    ("system", "hamiltonian"): ("path", "random"),
    ("ansatz", "kind"): ("table", "expfamily", "mlp", "matrix_mlp"),
    ("ansatz", "activation"): ("tanh", "sigmoid"),
    ("sampler", "kind"): ("exact", "metropolis"),
    ("optim", "schedule"): ("constant", "inverse_sqrt", "h4"),
    ("optim", "optimizer"): ("sgd", "adam"),
    ("pretrain", "strategy"): ("same", "independent", "periodic"),
    ("pretrain", "rho"): ("lebesgue", "target"),
    ("pretrain", "target"): ("ground", "random"),
    ("pretrain", "loss"): ("si", "mse"),
}


@dataclass
class ExperimentConfig:
    system: SystemConfig = field(default_factory=SystemConfig)
    ansatz: AnsatzConfig = field(default_factory=AnsatzConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self) -> "ExperimentConfig":
        for (section, key), allowed in _CHOICES.items():
            value = getattr(getattr(self, section), key)
            if value not in allowed:
                raise ConfigError(f"[{section}] {key} = {value!r}; expected one of {', '.join(allowed)}")
        if self.optim.n < 2:
            raise ConfigError("[optim] n must be >= 2")
        if self.optim.steps < 1:
            raise ConfigError("[optim] steps must be >= 1")
        if self.optim.eta0 <= 0:
            raise ConfigError("[optim] eta0 must be positive")
        if self.system.kind == "finite":
            if self.system.size < 2:
                raise ConfigError("[system] size must be >= 2")
            if self.system.hamiltonian == "path" and len(self.system.diagonal) != self.system.size:
                raise ConfigError("[system] diagonal needs one entry per state")
        if self.system.box_half_width <= 0:
            raise ConfigError("[system] box_half_width must be positive")
        if self.sampler.burn_in < 0 or self.sampler.thinning < 1:
            raise ConfigError("[sampler] needs burn_in >= 0 and thinning >= 1")
        if self.pretrain.period < 1 or self.pretrain.repeats < 1:
            raise ConfigError("[pretrain] period and repeats must be >= 1")
        if self.run.threads < 1:
            raise ConfigError("[run] threads must be >= 1")
        return self


def _parse_value(section: str, key: str, typ, raw: str):
    raw = raw.strip()
    try:
        if typ is tuple:
            item = _TUPLE_ITEMS[key]
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(item(p) for p in parts)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = ExperimentConfig()
    sections = {f.name: f for f in dataclasses.fields(cfg)}
    for name in parser.sections():
        if name not in sections:
            raise ConfigError(f"unknown section [{name}]")
        sub = getattr(cfg, name)
        hints = get_type_hints(type(sub))
        for key, raw in parser.items(name):
            if key not in hints:
                raise ConfigError(f"[{name}] unknown key {key!r}")
            setattr(sub, key, _parse_value(name, key, hints[key], raw))
    return cfg.validate()


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for sec in dataclasses.fields(cfg):
        sub = getattr(cfg, sec.name)
        lines.append(f"[{sec.name}]")
        for f in dataclasses.fields(sub):
            lines.append(f"{f.name} = {_format_value(getattr(sub, f.name))}")
        lines.append("")
    return "\n".join(lines)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)
