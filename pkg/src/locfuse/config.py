"""Run configuration: one INI file mapped onto typed dataclasses.

Sections ``[run]``, ``[data]``, ``[model]``, ``[train]``, ``[degrade]``,
``[bench]`` and ``[annotate]`` are all optional; omitted keys keep their
defaults. Unknown sections or keys are errors. Tuples are comma-separated.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from . import degrade
from .accounting import FULL_PRESET
from .annotate.remote import DEFAULT_TOKEN_ENV
from .harness.experiment import TEST_SCENES, TRAIN_SCENES
from .harness.model import ModelConfig
from .harness.train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    train_scenes: int = TRAIN_SCENES
    test_scenes: int = TEST_SCENES
    grid: int = 4
    cell: int = 8
    binary: bool = False


@dataclass
class DegradeConfig:
    fog_gray: float = degrade.FOG_GRAY
    p_d: float = degrade.AUGMENT_PROB


@dataclass
class BenchConfig:
    image: int = FULL_PRESET["image"]
    patch: int = FULL_PRESET["patch"]
    d: int = FULL_PRESET["d"]
    d_k: int | None = None
    d_v: int | None = None
    radii: tuple[float, ...] = FULL_PRESET["radii"]
    ffn_mult: int = FULL_PRESET["ffn_mult"]
    projection: tuple[int, ...] = FULL_PRESET["projection"]
    text_len: int = FULL_PRESET["text_len"]
    llm_layers: int = FULL_PRESET["llm_layers"]
    llm_dim: int = FULL_PRESET["llm_dim"]
    llm_ffn: int = FULL_PRESET["llm_ffn"]
    llm_vocab: int = FULL_PRESET["llm_vocab"]


@dataclass
class AnnotateConfig:
    backend: str = "mock"
    rounds: int = 9
    fanout: int = 3
    base_url: str = ""
    model: str = ""
    scorer_url: str = ""
    token_env: str = DEFAULT_TOKEN_ENV
    timeout: float = 60.0
    prompts: str = ""


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "out"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    degrade: DegradeConfig = field(default_factory=DegradeConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    annotate: AnnotateConfig = field(default_factory=AnnotateConfig)
    model_given: bool = False  # whether the file had a [model] section

    def with_seed(self, seed: int) -> "RunConfig":
        self.seed = seed
        self.model.seed = seed
        self.train.seed = seed
        return self


SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig, "degrade": DegradeConfig,
            "bench": BenchConfig, "annotate": AnnotateConfig}
RUN_KEYS = {"seed": "int", "out": "str"}


def _convert(raw: str, kind: str):
    kind = kind.replace(" ", "")
    raw = raw.strip()
    if kind.endswith("|None"):
        return None if raw.lower() in ("none", "") else _convert(raw, kind[: -len("|None")])
    if kind == "bool":
        low = raw.lower()
        if low not in configparser.ConfigParser.BOOLEAN_STATES:
            raise ValueError(f"not a boolean: {raw!r}")
        return configparser.ConfigParser.BOOLEAN_STATES[low]
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "str":
        return raw
    if kind.startswith("tuple["):
        inner = kind[len("tuple["): -1].split(",")[0]
        parts = [p for p in (s.strip() for s in raw.split(",")) if p]
        return tuple(_convert(p, inner) for p in parts)
    raise ValueError(f"unsupported field type {kind}")


def _build(cls, section: str, items: dict[str, str]):
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in items.items():
        if key not in types:
            raise ConfigError(f"[{section}] unknown key {key!r}; expected one of {sorted(types)}")
        try:
            kwargs[key] = _convert(raw, types[key])
        except ValueError as e:
            raise ConfigError(f"[{section}] {key} = {raw!r}: {e}") from None
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"[{section}] {e}") from None


def load_config(path=None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__",
                                   inline_comment_prefixes=(";",))
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            cp.read(path)
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from None
    cfg = RunConfig()
    for section in cp.sections():
        items = dict(cp[section])
        if section == "run":
            for key, raw in items.items():
                if key not in RUN_KEYS:
                    raise ConfigError(f"[run] unknown key {key!r}; expected one of {sorted(RUN_KEYS)}")
                try:
                    setattr(cfg, key, _convert(raw, RUN_KEYS[key]))
                except ValueError as e:
                    raise ConfigError(f"[run] {key} = {raw!r}: {e}") from None
        elif section in SECTIONS:
            setattr(cfg, section, _build(SECTIONS[section], section, items))
        else:
            raise ConfigError(f"unknown section [{section}]; expected run, {', '.join(SECTIONS)}")
    cfg.model_given = cp.has_section("model")
    # [degrade] overrides feed training and evaluation; without it, [train] values stand
    if cp.has_section("degrade"):
        cfg.train.fog_gray, cfg.train.p_d = cfg.degrade.fog_gray, cfg.degrade.p_d
    else:
        cfg.degrade = DegradeConfig(cfg.train.fog_gray, cfg.train.p_d)
    _validate(cfg)
    return cfg.with_seed(cfg.seed)


def _validate(cfg: RunConfig) -> None:
    checks = [
        (cfg.data.train_scenes >= 1, "[data] train_scenes must be >= 1"),
        (cfg.data.test_scenes >= 1, "[data] test_scenes must be >= 1"),
        (cfg.model.image == cfg.data.grid * cfg.data.cell,
         f"[model] image {cfg.model.image} must equal [data] grid*cell = {cfg.data.grid * cfg.data.cell}"),
        (cfg.train.steps >= 1, "[train] steps must be >= 1"),
        (cfg.train.batch >= 1, "[train] batch must be >= 1"),
        (0.0 <= cfg.degrade.p_d <= 1.0, "[degrade] p_d must lie in [0, 1]"),
        (0.0 <= cfg.degrade.fog_gray <= 1.0, "[degrade] fog_gray must lie in [0, 1]"),
        (cfg.annotate.backend in ("mock", "remote"), "[annotate] backend must be mock or remote"),
        (cfg.annotate.rounds >= 1 and cfg.annotate.fanout >= 1, "[annotate] rounds and fanout must be >= 1"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)
    for name in ("lr_fusion", "lr_projection", "lr_adapters"):
        if getattr(cfg.train, name) < 0:
            raise ConfigError(f"[train] {name} must be non-negative")
