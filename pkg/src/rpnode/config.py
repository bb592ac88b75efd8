"""Run configuration and its flat ``key = value`` file format (one section per module)."""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field

from .encoder import EncoderConfig
from .episodes import SynthConfig
from .errors import ConfigurationError
from .losses import LossWeights
from .ode import SolverConfig
from .perturb import NoiseConfig

VARIANTS = ("rpnode", "rpnode_no_losses", "vanilla_cnn", "identity_ode", "sat")


@dataclass
class OptimConfig:
    scheme: str = "sgd_momentum_step"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_every: int = 10_000
    decay_gamma: float = 0.1


@dataclass
class EpisodeConfig:
    n_way: int = 1
    k_shot: int = 1
    n_query: int = 1
    e_train: int = 20_000
    e_test: int = 200


@dataclass
class RunConfig:
    model_variant: str = "rpnode"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    episodes: EpisodeConfig = field(default_factory=EpisodeConfig)
    data: SynthConfig = field(default_factory=SynthConfig)
    data_root: str = ""
    sat_epsilon: float = 0.025
    sat_separate_steps: bool = True
    seeds: list = field(default_factory=lambda: [0, 1])
    temperature: float = 20.0
    time_conditioning: bool = True
    dynamics_hidden: int = 0
    dtype: str = "float32"
    eval_seed: int = 1234

    def __post_init__(self):
        if self.model_variant not in VARIANTS:
            raise ConfigurationError(f"unknown model_variant {self.model_variant!r}; one of {VARIANTS}")
        if self.model_variant == "sat" and not self.sat_epsilon >= 0:
            raise ConfigurationError("sat variant needs sat_epsilon >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")

    @property
    def block(self):
        return {"vanilla_cnn": "cnn", "sat": "cnn", "identity_ode": "identity"}.get(self.model_variant, "ode")

    @property
    def regularized(self):
        """Whether the Gaussian companions and the two extra losses are used."""
        return self.model_variant in ("rpnode", "identity_ode") and (
            self.weights.alpha > 0 or self.weights.beta > 0)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


_SECTIONS = ("encoder", "solver", "noise", "weights", "optimizer", "episodes", "data")


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ", ".join(_fmt(x) for x in v)
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _atom(s):
    s = s.strip()
    low = s.lower()
    if low in ("true", "false"):
        return low == "true"
    if low == "none":
        return None
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def _parse(text, default):
    try:
        if isinstance(default, bool):
            v = _atom(text)
            if not isinstance(v, bool):
                raise ValueError(f"expected true/false, got {text!r}")
            return v
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, (list, tuple)):
            items = [_atom(x) for x in text.split(",") if x.strip()]
            return type(default)(items)
        if default is None:
            return _atom(text)
        return text.strip()
    except ValueError as exc:
        raise ConfigurationError(f"cannot parse {text!r}: {exc}") from None


def _flat_fields(obj):
    return [(f.name, getattr(obj, f.name)) for f in dataclasses.fields(obj)
            if not dataclasses.is_dataclass(getattr(obj, f.name))]


def to_text(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["run"] = {k: _fmt(v) for k, v in _flat_fields(cfg)}
    for sec in _SECTIONS:
        cp[sec] = {k: _fmt(v) for k, v in _flat_fields(getattr(cfg, sec))}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _build(cls, values, section):
    base = cls()
    kwargs = {}
    known = {f.name for f in dataclasses.fields(cls)}
    for key, text in values.items():
        if key not in known:
            raise ConfigurationError(f"[{section}] unknown key {key!r}")
        kwargs[key] = _parse(text, getattr(base, key))
    return kwargs


def from_text(text: str, overrides: dict = None) -> RunConfig:
    """Parse a config file body; ``overrides`` maps ``section.key`` (or ``key``
    for the run section) to raw string values."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    raw = {sec: dict(cp[sec]) for sec in cp.sections()}
    for dotted, val in (overrides or {}).items():
        sec, _, key = dotted.rpartition(".")
        raw.setdefault(sec or "run", {})[key] = str(val)
    unknown = set(raw) - {"run", *_SECTIONS}
    if unknown:
        raise ConfigurationError(f"unknown config sections {sorted(unknown)}")
    subs = {}
    for sec in _SECTIONS:
        cls = type(getattr(RunConfig(), sec))
        subs[sec] = cls(**_build(cls, raw.get(sec, {}), sec))
    top = _build(RunConfig, raw.get("run", {}), "run")
    return RunConfig(**top, **subs)


def save(cfg: RunConfig, path):
    with open(path, "w") as fh:
        fh.write(to_text(cfg))


def load(path, overrides=None) -> RunConfig:
    with open(path) as fh:
        return from_text(fh.read(), overrides)
