"""Mode ablations and the desk-scale trend experiment."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace

from .evaluate import ConditionReport, evaluate
from .model import MODES, ModelConfig, ToyModel
from .scenes import Example, SceneConfig, make_dataset
from .train import TrainConfig, train

log = logging.getLogger(__name__)

ALIASES = {"dualvision": "local", "fused": "local"}
# 1200 scenes x 5 questions for training, 100 x 5 = 500 held-out samples
TRAIN_SCENES = 1200
TEST_SCENES = 100


def canonical_mode(mode: str) -> str:
    mode = ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES + tuple(ALIASES)}")
    return mode


def desk_data(seed: int = 0, scene: SceneConfig | None = None, train_scenes: int = TRAIN_SCENES,
              test_scenes: int = TEST_SCENES) -> tuple[list[Example], list[Example]]:
    scene = scene or SceneConfig()
    return (make_dataset(seed, train_scenes, scene, "train"),
            make_dataset(seed, test_scenes, scene, "test"))


@dataclass
class ModeResult:
    mode: str
    report: ConditionReport
    trace: list[float]
    n_visual: int
    seconds: float


def run_ablation(modes, model_cfg: ModelConfig, train_cfg: TrainConfig, train_set: list[Example],
                 test_set: list[Example], conditions=None) -> dict[str, ModeResult]:
    """Trains and evaluates one model per mode on identical seed, data and schedule."""
    out = {}
    for name in modes:
        t0 = time.perf_counter()
        model = ToyModel(replace(model_cfg, mode=canonical_mode(name)))
        trace = train(model, train_set, train_cfg)
        report = evaluate(model, test_set, conditions)
        dt = time.perf_counter() - t0
        log.info("%s: clean %.3f in %.1fs", name, report.accuracy("clean"), dt)
        out[name] = ModeResult(name, report, trace, model.n_visual, dt)
    return out
