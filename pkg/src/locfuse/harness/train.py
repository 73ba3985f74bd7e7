"""Next-token training on answer spans with RGB-only degradation augmentation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .. import core, degrade
from ..core import AdamW, WarmupCosine, make_rng
from .model import ToyModel
from .scenes import Example, QASample, Vocab

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 32
    warmup: int = 100
    lr_fusion: float = 1e-4
    lr_projection: float = 1e-5
    lr_adapters: float = 3e-3
    augment: bool = True
    grad_clip: float | None = 1.0
    p_d: float = degrade.AUGMENT_PROB
    fog_gray: float = degrade.FOG_GRAY
    seed: int = 0

    def lr_map(self) -> dict[str, float]:
        return {"fusion": self.lr_fusion, "projection": self.lr_projection, "adapters": self.lr_adapters}

    def to_dict(self) -> dict:
        return asdict(self)


def encode_text(vocab: Vocab, qas: list[QASample], with_answer: bool = True):
    """Token ids, next-token targets and loss mask, right-padded.

    Layout per row: ``question answer`` with targets ``answer <eos>`` on the
    last ``len(answer) + 1`` positions, so the final question token predicts
    the first answer token. Padding sits after the answer, so
    causal attention keeps it from touching any scored position.
    """
    rows, tgts = [], []
    for qa in qas:
        q = vocab.encode(qa.question)
        a = vocab.encode(qa.answer) if with_answer else []
        rows.append(q + a)
        tgts.append([-1] * (len(q) - 1) + a + [vocab.eos])
    width = max(len(r) for r in rows)
    text = np.full((len(rows), width), vocab.pad, dtype=np.intp)
    targets = np.zeros((len(rows), width), dtype=np.intp)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, (r, t) in enumerate(zip(rows, tgts)):
        text[i, : len(r)] = r
        t = np.asarray(t[: len(r)])
        live = t >= 0
        targets[i, : len(t)][live] = t[live]
        mask[i, : len(t)] = live
    return text, targets, mask


def rgb_only_degrade(spec, rgb: np.ndarray, fog_gray: float = degrade.FOG_GRAY) -> np.ndarray:
    """Degrade an RGB image; IR inputs are rejected at this boundary."""
    if rgb.shape[-1] != 3:
        raise ValueError("degradations apply to 3-channel RGB images only")
    return rgb if spec is None else degrade.apply(spec, rgb, fog_gray)


def loss_and_backward(model: ToyModel, rgb, ir, qas, backward: bool = True) -> float:
    text, targets, mask = encode_text(model.vocab, qas)
    logits, cache = model.forward(rgb, ir, text)
    loss, c_loss = core.cross_entropy(logits, targets, mask)
    if backward:
        model.backward(core.cross_entropy_backward(c_loss), cache)
    return loss


def train(model: ToyModel, dataset: list[Example], cfg: TrainConfig) -> list[float]:
    """Returns the per-step loss trace. Only the model's trainable params move."""
    rng = make_rng(cfg.seed, "train")
    aug_rng = make_rng(cfg.seed, "augment")
    opt = AdamW(model.param_groups(), cfg.lr_map(), WarmupCosine(cfg.warmup, cfg.steps))
    params = model.trainable()
    rgb_all = np.stack([ex.rgb for ex in dataset])
    ir_all = np.stack([ex.ir for ex in dataset])
    trace = []
    for step in range(cfg.steps):
        idx = rng.integers(0, len(dataset), size=cfg.batch)
        rgb = rgb_all[idx].copy()
        if cfg.augment:
            for i in range(len(idx)):
                spec = degrade.sample_spec(aug_rng, cfg.p_d)
                rgb[i] = rgb_only_degrade(spec, rgb[i], cfg.fog_gray)
        core.zero_grads(params)
        loss = loss_and_backward(model, rgb, ir_all[idx], [dataset[i].qa for i in idx])
        if not math.isfinite(loss):
            bad = [p.name for p in params if not np.all(np.isfinite(p.value))]
            raise TrainingDiverged(f"non-finite loss {loss} at step {step}; non-finite params: {bad}")
        if cfg.grad_clip is not None:
            core.clip_grad_norm(params, cfg.grad_clip)
        opt.step(step)
        trace.append(loss)
        if step % 200 == 0:
            log.info("step %d loss %.4f", step, loss)
    return trace
