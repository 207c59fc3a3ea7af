"""Experiment configuration: JSON schema validation, defaults and the config hash.

A configuration file is a JSON object with the sections below; every section
is optional and unknown keys are rejected with the line they appear on::

    {
      "seed": 0,
      "output_dir": "runs/example",
      "task": {"name": "inpainting", "size": 16, "keep": 0.5},
      "data": {"source": "generate", "n": 100},
      "denoiser": {"hidden_channels": 16, "depth": 3},
      "pretrain": {"epochs": 0, "sigma": 0.1},
      "model": {"kind": "deq", "template": "de-prox", "backprop": "implicit", "eta": 0.5},
      "solver": {"forward": {"tol": 1e-5}, "backward": {"tol": 1e-7}},
      "loss": {"mode": "supervised"},
      "train": {"epochs": 100, "batch_size": 8, "learning_rate": 1e-3},
      "gradcheck": {"instances": 4}
    }
"""

from __future__ import annotations

import json
import re
import types
import typing
from dataclasses import MISSING, asdict, dataclass, fields, is_dataclass, replace
from pathlib import Path

from .losses import LossConfig
from .models import DenoiserArch
from .rng import fnv1a64
from .solvers import SolverConfig
from .training import PretrainConfig

__all__ = [
    "ConfigError",
    "TaskSpec",
    "DataSpec",
    "ModelSpec",
    "SolverSpec",
    "TrainSpec",
    "GradcheckSpec",
    "ExperimentConfig",
    "parse_config",
    "load_config",
    "canonical_json",
    "config_hash",
]


class ConfigError(ValueError):
    def __init__(self, message, line=None, path=None):
        where = f"{path}:" if path else ""
        where += f"{line}: " if line is not None else (" " if path else "")
        super().__init__(f"{where}{message}")
        self.line = line


@dataclass(frozen=True)
class TaskSpec:
    name: str = "inpainting"
    size: int = 16
    keep: float = 0.5
    angles: int = 13
    acceleration: float = 4.0
    center_fraction: float = 0.04
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.name not in ("inpainting", "tomography", "masked-fourier"):
            raise ValueError(f"unknown task {self.name!r}")
        if self.size < 4:
            raise ValueError("size must be >= 4")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    @property
    def channels(self):
        return 2 if self.name == "masked-fourier" else 1

    def operator_spec(self):
        return {"task": self.name, "size": self.size, "keep": self.keep, "angles": self.angles,
                "acceleration": self.acceleration, "center_fraction": self.center_fraction}


@dataclass(frozen=True)
class DataSpec:
    source: str = "generate"
    n: int = 100
    path: str = ""

    def __post_init__(self):
        if self.source not in ("generate", "load"):
            raise ValueError(f"unknown data source {self.source!r}")
        if self.source == "load" and not self.path:
            raise ValueError("data.path is required when source is 'load'")
        if self.n < 0:
            raise ValueError("n must be non-negative")


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "deq"
    template: str = "de-prox"
    backprop: str = "implicit"
    unrolled_steps: int = 200
    eta: float = 0.5
    steps: int = 5
    unrolled_template: str = "pgm"
    iters: int = 50
    red_lambda: float = 1.0
    iterative_eta: float | None = None

    def __post_init__(self):
        if self.kind not in ("deq", "unrolled", "refine", "pnp", "red"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.template not in ("de-prox", "de-grad"):
            raise ValueError(f"unknown template {self.template!r}")
        if self.backprop not in ("implicit", "jacobian-free", "unrolled"):
            raise ValueError(f"unknown backprop mode {self.backprop!r}")
        if self.unrolled_template not in ("pgm", "red"):
            raise ValueError(f"unknown unrolled template {self.unrolled_template!r}")
        if not self.eta > 0 or self.steps < 1 or self.iters < 0:
            raise ValueError("eta must be positive, steps >= 1 and iters >= 0")


@dataclass(frozen=True)
class SolverSpec:
    forward: SolverConfig = SolverConfig(tol=1e-5, max_iter=100)
    backward: SolverConfig = SolverConfig(tol=1e-7, max_iter=200)


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 1
    selection: str = "best"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.checkpoint_every < 0:
            raise ValueError("epochs, checkpoint_every must be >= 0 and batch_size >= 1")
        if self.selection not in ("best", "last"):
            raise ValueError(f"unknown selection rule {self.selection!r}")


@dataclass(frozen=True)
class GradcheckSpec:
    instances: int = 4
    size: int = 8
    hidden_channels: int = 3
    fd_step: float = 1e-6
    tol: float = 1e-4
    unrolled_steps: int = 200


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    task: TaskSpec = TaskSpec()
    data: DataSpec = DataSpec()
    denoiser: DenoiserArch = DenoiserArch()
    pretrain: PretrainConfig = PretrainConfig()
    model: ModelSpec = ModelSpec()
    solver: SolverSpec = SolverSpec()
    loss: LossConfig = LossConfig()
    train: TrainSpec = TrainSpec()
    gradcheck: GradcheckSpec = GradcheckSpec()

    def to_dict(self):
        d = asdict(self)
        d["loss"].pop("seed")
        return d

    def with_seed(self, seed):
        return replace(self, seed=int(seed), loss=replace(self.loss, seed=int(seed)))

    def hash(self):
        return config_hash(self)

    def canonical(self):
        return canonical_json(self)


# fields that are filled in from elsewhere and may not be set in a file
_EXCLUDED = {(LossConfig, "seed")}


def canonical_json(cfg):
    """Key-sorted minified JSON of the resolved configuration (``output_dir`` excluded)."""
    d = cfg.to_dict()
    d.pop("output_dir")
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def config_hash(cfg):
    return f"{fnv1a64(canonical_json(cfg).encode('utf-8')):016x}"


class _Locator:
    """Maps a key path to the line it appears on in the source text (best effort)."""

    def __init__(self, text):
        self.text = text

    def line(self, path):
        pos = 0
        for key in path:
            m = re.compile(r'"%s"\s*:' % re.escape(str(key))).search(self.text, pos)
            if m is None:
                return None
            pos = m.start()
        return self.text.count("\n", 0, pos) + 1


def _type_ok(value, tp):
    origin = typing.get_origin(tp)
    if origin is typing.Union or origin is types.UnionType:
        return any(_type_ok(value, a) for a in typing.get_args(tp))
    if tp is type(None):
        return value is None
    if tp is bool:
        return isinstance(value, bool)
    if tp is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if tp is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if tp is str:
        return isinstance(value, str)
    return False


def _type_name(tp):
    if typing.get_args(tp):
        return " or ".join(_type_name(a) for a in typing.get_args(tp))
    return "null" if tp is type(None) else {bool: "boolean", int: "integer", float: "number",
                                             str: "string"}.get(tp, getattr(tp, "__name__", str(tp)))


def _build(cls, data, path, loc, src):
    if not isinstance(data, dict):
        raise ConfigError(f"'{'.'.join(path) or 'config'}' must be an object", loc.line(path), src)
    hints = typing.get_type_hints(cls)
    allowed = {f.name: f for f in fields(cls) if (cls, f.name) not in _EXCLUDED}
    kwargs = {}
    for key, value in data.items():
        kp = path + [key]
        if key not in allowed:
            raise ConfigError(f"unknown key '{'.'.join(kp)}'", loc.line(kp), src)
        tp = hints[key]
        if is_dataclass(tp):
            kwargs[key] = _build(tp, value, kp, loc, src)
        elif not _type_ok(value, tp):
            raise ConfigError(f"'{'.'.join(kp)}' must be {_type_name(tp)}, got {json.dumps(value)}",
                              loc.line(kp), src)
        else:
            kwargs[key] = float(value) if tp is float and isinstance(value, int) else value
    for name, f in allowed.items():
        if name not in kwargs and f.default is MISSING and f.default_factory is MISSING:
            raise ConfigError(f"missing key '{'.'.join(path + [name])}'", loc.line(path), src)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{'.'.join(path) or 'config'}': {exc}", loc.line(path), src) from None


def parse_config(text, source=None):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", exc.lineno, source) from None
    cfg = _build(ExperimentConfig, data, [], _Locator(text), source)
    return cfg.with_seed(cfg.seed)


def load_config(path):
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config file {p}: {exc}") from None
    return parse_config(text, str(p))
