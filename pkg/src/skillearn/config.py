"""Run configuration: a flat ``key = value`` text file with a fixed schema.

Precedence, lowest first: dataclass defaults, config file, command-line
overrides, then the ``SKILLEARN_SEED`` environment variable for the seed.
"""
from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, fields, replace

from .data import KINDS, DataSpec, GeneratorSpec
from .errors import ConfigError
from .lpt import ABLATIONS

MODES = ("lpt", "il", "jl", "baseline", "gradcheck")
DEFAULT_ITERATIONS = {"lpt": 300, "il": 200, "jl": 200, "baseline": 300, "gradcheck": 1}

HELP = {
    "mode": "lpt | il | jl | baseline | gradcheck",
    "task": "synthetic task: blobs | moons | xor",
    "classes": "number of classes (blobs only; moons and xor are binary)",
    "dim": "input dimension",
    "separation": "distance between blob centres",
    "noise": "gaussian noise std",
    "task_rotation": "rotation (radians) between consecutive learners' label functions",
    "n_train": "training examples per task",
    "n_val": "validation examples per task (also the test bank)",
    "n_test": "test examples per task",
    "bank_corruption": "fraction of bank labels moved to a wrong class",
    "width": "hidden width of the searched model",
    "n_layers": "number of mixed layers",
    "hidden": "tester encoder width",
    "lr_arch": "architecture step size (lpt, baseline)",
    "lr_weights": "testee weight step size (lpt, baseline)",
    "lr_encoder": "tester encoder step size",
    "lr_executor": "tester executor step size",
    "lr_creator": "test creator step size (selection scalars in difficulty-only)",
    "lam": "lpt: weight of the tester's validation loss in the creator objective",
    "gamma": "lpt: weight of the tester's loss on the created test",
    "ablation": "full | difficulty-only | test-only",
    "include_direct_creator_path": "differentiate the weighted test loss w.r.t. C directly as well",
    "il_lr_arch": "architecture step size (il, jl)",
    "il_lr_weights": "encoder step size (il, jl)",
    "il_lr_heads": "head step size (il, jl)",
    "il_lam": "proximal tradeoff between consecutive stages (il)",
    "K": "number of learners (il, jl)",
    "M": "number of rounds (il)",
    "hvp_radius": "probe distance of finite-difference second-order products",
    "iterations": "search iterations; 0 selects the mode default (300 lpt/baseline, 200 il/jl)",
    "batch_size": "minibatch size per dataset per iteration",
    "eval_epochs": "full-batch epochs when training the derived architecture",
    "eval_lr": "step size when training the derived architecture",
    "seed": "random seed",
    "out": "output directory",
}


@dataclass(frozen=True)
class RunConfig:
    mode: str = "lpt"
    task: str = "blobs"
    classes: int = 2
    dim: int = 2
    separation: float = 4.0
    noise: float = 0.3
    task_rotation: float = 1.5707963267948966
    n_train: int = 200
    n_val: int = 100
    n_test: int = 200
    bank_corruption: float = 0.1
    width: int = 4
    n_layers: int = 2
    hidden: int = 4
    lr_arch: float = 0.05
    lr_weights: float = 0.1
    lr_encoder: float = 0.1
    lr_executor: float = 0.1
    lr_creator: float = 0.05
    lam: float = 1.0
    gamma: float = 1.0
    ablation: str = "full"
    include_direct_creator_path: bool = True
    il_lr_arch: float = 0.05
    il_lr_weights: float = 0.004
    il_lr_heads: float = 0.1
    il_lam: float = 100.0
    K: int = 2
    M: int = 2
    hvp_radius: float = 0.01
    iterations: int = 0
    batch_size: int = 32
    eval_epochs: int = 500
    eval_lr: float = 0.1
    seed: int = 0
    out: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.task not in KINDS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {', '.join(KINDS)}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                raise ConfigError(f"{f.name} must be finite")
            if f.name.startswith(("lr_", "il_lr_")) or f.name in ("lam", "gamma", "il_lam", "eval_lr",
                                                                   "noise", "task_rotation"):
                if v < 0:
                    raise ConfigError(f"{f.name} must be >= 0")
        for k in ("classes", "dim", "n_train", "n_val", "n_test", "width", "n_layers", "hidden",
                  "K", "M", "batch_size"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be >= 1")
        if self.iterations < 0 or self.eval_epochs < 0:
            raise ConfigError("iterations and eval_epochs must be >= 0")
        if not 0.0 <= self.bank_corruption <= 1.0:
            raise ConfigError("bank_corruption must lie in [0, 1]")
        if self.hvp_radius <= 0:
            raise ConfigError("hvp_radius must be > 0")

    @property
    def budget(self) -> int:
        return self.iterations or DEFAULT_ITERATIONS[self.mode]

    @property
    def n_learners(self) -> int:
        return self.K if self.mode in ("il", "jl") else 1

    def data_spec(self) -> DataSpec:
        tasks = tuple(GeneratorSpec(self.task, self.classes, self.dim, self.separation, self.noise,
                                    k * self.task_rotation) for k in range(self.n_learners))
        return DataSpec(tasks, self.n_train, self.n_val, self.n_test, self.bank_corruption)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"# {HELP[f.name]}")
            lines.append(f"{f.name} = {format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _field_types():
    defaults = RunConfig()
    return {f.name: type(getattr(defaults, f.name)) for f in fields(RunConfig)}


def coerce(key: str, raw):
    types = _field_types()
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    t = types[key]
    if isinstance(raw, t) and not (t is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if t is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if t is int:
            return int(text)
        if t is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {t.__name__}") from None
    return text


def parse_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = coerce(key, value)
    return out


def load_config(path=None, overrides=None, environ=None) -> RunConfig:
    values = {}
    if path:
        try:
            with open(path) as fh:
                values.update(parse_text(fh.read()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = coerce(k, v)
    env = os.environ if environ is None else environ
    if env.get("SKILLEARN_SEED"):
        values["seed"] = coerce("seed", env["SKILLEARN_SEED"])
    return RunConfig(**values)


def with_values(cfg: RunConfig, **changes) -> RunConfig:
    return replace(cfg, **{k: coerce(k, v) for k, v in changes.items()})


def as_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)
