"""INI experiment configuration: parsing, validation and defaults."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields

from .dynamics import AlphaBounds, NominalGains, QuadParams
from .lmi import SearchSchedule
from .rl import PpoConfig
from .sector import GridSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CertifySection:
    system: str = "quadcopter"        # or "gate" for the scalar synthetic system
    gate_a: float = -1.0
    L0: float = 1.0
    S0: tuple = (1.5, 0.2, 1.5, 0.2)
    growth: float = 1.05
    tol: float = 1e-3
    max_checks: int = 400
    grid_points: int = 7
    fd_step: float = 1e-5
    inflation: float = 1.10

    def schedule(self) -> SearchSchedule:
        grow = (0,) if self.system == "gate" else None
        return SearchSchedule(self.growth, self.tol, self.max_checks, grow)

    def grid(self) -> GridSpec:
        return GridSpec(points=self.grid_points, fd_step=self.fd_step, inflation=self.inflation)


@dataclass(frozen=True)
class EvalSection:
    target: tuple = (1.4, 0.0, 0.0)
    psi_target: float = 0.0
    duration: float = 60.0
    trajectory_duration: float = 18.0
    dt: float = 0.01
    seeds: int = 10
    safety_box: float = 20.0


@dataclass(frozen=True)
class ExperimentConfig:
    quad: QuadParams = field(default_factory=QuadParams)
    gains: NominalGains = field(default_factory=NominalGains)
    alpha: AlphaBounds = field(default_factory=AlphaBounds)
    certify: CertifySection = field(default_factory=CertifySection)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    eval: EvalSection = field(default_factory=EvalSection)


SECTIONS = {"quadcopter": "quad", "gains": "gains", "alpha": "alpha",
            "certify": "certify", "ppo": "ppo", "eval": "eval"}


def _convert(default, text: str, where: str):
    try:
        if isinstance(default, bool):
            return text.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            conv = int if default and all(isinstance(v, int) for v in default) else float
            return tuple(conv(v) for v in text.replace(",", " ").split())
        if default is None:
            return None if text.strip().lower() in ("", "none") else text.strip()
        return text.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {text!r}") from exc


def _build(cls, section, name):
    known = {f.name: f for f in fields(cls)}
    defaults = cls()
    kw = {}
    for key, text in section.items():
        if key not in known:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        kw[key] = _convert(getattr(defaults, key), text, f"[{name}] {key}")
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str          # keys are case-sensitive field names
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    parts = {}
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        attr = SECTIONS[name]
        cls = type(getattr(ExperimentConfig(), attr))
        parts[attr] = _build(cls, cp[name], name)
    cfg = ExperimentConfig(**parts)
    if cfg.certify.system not in ("quadcopter", "gate"):
        raise ConfigError(f"[certify] system must be 'quadcopter' or 'gate', got {cfg.certify.system!r}")
    if len(cfg.certify.S0) != 4 and cfg.certify.system == "quadcopter":
        raise ConfigError("[certify] S0 needs four group radii")
    if len(cfg.eval.target) != 3:
        raise ConfigError("[eval] target needs three coordinates")
    return cfg


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    with open(path) as fh:
        return parse_config(fh.read())


def dump_config(cfg: ExperimentConfig) -> str:
    """INI text that round-trips through :func:`parse_config`."""
    out = []
    for name, attr in SECTIONS.items():
        out.append(f"[{name}]")
        for k, v in dataclasses.asdict(getattr(cfg, attr)).items():
            if v is None:
                v = "none"
            elif isinstance(v, (tuple, list)):
                v = " ".join(repr(x) for x in v)
            out.append(f"{k} = {v}")
        out.append("")
    return "\n".join(out)
