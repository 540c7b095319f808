"""Run configuration: plain ``key = value`` files.

Blank lines and ``#`` comments are ignored. Keys are the fields of
:class:`RunConfig`, which covers every model field plus the run protocol.
Unknown keys are errors. Relative paths resolve against the config file's
directory.

Key table (defaults in parentheses)::

    model        every ModelConfig field, e.g. d_model (64), p (8), delta (4), mask_mode (causal)
    seed         master seed (0)
    dataset      .wamd path (data.wamd)
    checkpoint   .wamc path (model.wamc)
    metrics      output prefix for JSON-lines/CSV metrics (metrics)
    n_demos      demonstrations written by gen-data (200)
    demo_t_max   expert timeout per demo (200)
    steps        optimizer steps (5000)
    batch_size   windows per step (16)
    lr_init      cosine schedule start (1e-4)
    lr_final     cosine schedule end (1e-6)
    beta1, beta2, adam_eps, weight_decay   Adam settings (0.9, 0.999, 1e-8, 0)
    mode         joint | pretrain-video | action-only (joint)
    eval_episodes  closed-loop episodes per evaluation (20)
    eval_seed    base seed of the evaluation episodes (10000)
    max_episode_steps  rollout timeout (200)
    horizon      actions executed per chunk, 0 means p // 2 (0)
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from ..flowmatch import MODES, OptimConfig
from ..model import ModelConfig

PATH_KEYS = ("dataset", "checkpoint", "metrics")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    seed: int = 0
    dataset: Path = Path("data.wamd")
    checkpoint: Path = Path("model.wamc")
    metrics: Path = Path("metrics")
    n_demos: int = 200
    demo_t_max: int = 200
    steps: int = 5000
    batch_size: int = 16
    lr_init: float = 1e-4
    lr_final: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    mode: str = "joint"
    eval_episodes: int = 20
    eval_seed: int = 10_000
    max_episode_steps: int = 200
    horizon: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if min(self.steps, self.batch_size, self.n_demos, self.eval_episodes) < 0 or self.batch_size == 0:
            raise ValueError("counts must be non-negative and batch_size positive")
        if not 0 <= self.horizon <= self.model.p:
            raise ValueError(f"horizon must be in [0, p={self.model.p}]")

    @property
    def execute_horizon(self) -> int:
        return self.horizon or max(1, self.model.p // 2)

    def optim(self) -> OptimConfig:
        return OptimConfig(self.lr_init, self.lr_final, self.beta1, self.beta2, self.adam_eps, self.weight_decay, self.steps)

    def with_model(self, **changes) -> "RunConfig":
        return replace(self, model=replace(self.model, **changes))

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "model"}
        d.update(self.model.to_dict())
        return {k: str(v) if isinstance(v, Path) else v for k, v in d.items()}


_MODEL_FIELDS = {f.name: f for f in fields(ModelConfig)}
_RUN_FIELDS = {f.name: f for f in fields(RunConfig) if f.name != "model"}


def _convert(kind, raw: str, key: str):
    kind = kind if isinstance(kind, type) else {"int": int, "float": float, "bool": bool, "str": str, "Path": Path}[kind]
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw, 0)
        return kind(raw)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}") from None


def from_mapping(values: dict, base: Path | None = None) -> RunConfig:
    """Build a config from string (or typed) values, rejecting unknown keys."""
    model_kw, run_kw = {}, {}
    for key, raw in values.items():
        if key in _MODEL_FIELDS:
            target, f = model_kw, _MODEL_FIELDS[key]
        elif key in _RUN_FIELDS:
            target, f = run_kw, _RUN_FIELDS[key]
        else:
            raise ValueError(f"unknown config key {key!r}")
        val = _convert(f.type, raw, key) if isinstance(raw, str) else raw
        if key in PATH_KEYS:
            val = Path(val)
            if base is not None and not val.is_absolute():
                val = base / val
        target[key] = val
    return RunConfig(model=ModelConfig(**model_kw), **run_kw)


def parse_config(text: str, base: Path | None = None) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ValueError(f"config line {lineno}: duplicate key {key!r}")
        values[key] = raw
    return from_mapping(values, base)


def load_config(path) -> RunConfig:
    path = Path(path)
    cfg = parse_config(path.read_text(encoding="utf-8"), base=path.resolve().parent)
    for key in PATH_KEYS:
        parent = getattr(cfg, key).parent
        if not parent.is_dir():
            raise ValueError(f"config key {key!r}: directory {parent} does not exist")
    return cfg


def format_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
