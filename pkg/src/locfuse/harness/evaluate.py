"""Greedy decoding and accuracy stratified over the 13 degradation conditions."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .. import degrade
from .model import ToyModel
from .scenes import Example, QASample
from .train import encode_text, rgb_only_degrade

CSV_COLUMNS = ("condition", "kind", "severity", "n", "correct", "accuracy")


def greedy_answers(model: ToyModel, rgb, ir, qas: list[QASample], max_len: int = 3) -> list[str]:
    """Decode each answer greedily until ``<eos>`` (at most ``max_len`` tokens)."""
    vocab = model.vocab
    text, _, _ = encode_text(vocab, qas, with_answer=False)
    lengths = np.array([len(vocab.encode(q.question)) for q in qas])
    text = np.concatenate([text, np.full((len(qas), max_len + 1), vocab.pad)], axis=1)
    z_rgb, z_ir = model.encode(rgb), model.encode(ir)
    vis, _ = model.proj.forward(model.fuse(z_rgb, z_ir)[0])
    rows = np.arange(len(qas))
    out = [[] for _ in qas]
    done = np.zeros(len(qas), dtype=bool)
    for step in range(max_len + 1):
        width = int(lengths.max())
        logits, _ = model.decoder.forward(vis, text[:, :width])
        nxt = logits[rows, lengths - 1].argmax(axis=-1)
        for i in np.flatnonzero(~done):
            if nxt[i] == vocab.eos:
                done[i] = True
            else:
                out[i].append(int(nxt[i]))
        if done.all():
            break
        text[rows, lengths] = nxt
        lengths = lengths + 1
    # never terminated -> marked with a trailing pad so it cannot match
    return [vocab.decode(o) if d else vocab.decode(o) + " <pad>" for o, d in zip(out, done)]


@dataclass
class ConditionRow:
    condition: str
    kind: str
    severity: str
    n: int
    correct: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.n if self.n else 0.0


@dataclass
class ConditionReport:
    rows: list[ConditionRow]

    def __getitem__(self, condition: str) -> ConditionRow:
        for r in self.rows:
            if r.condition == condition:
                return r
        raise KeyError(condition)

    def accuracy(self, condition: str) -> float:
        return self[condition].accuracy

    def accuracies(self) -> dict[str, float]:
        return {r.condition: r.accuracy for r in self.rows}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.condition, r.kind, r.severity, r.n, r.correct, f"{r.accuracy:.6f}"])
        return buf.getvalue()


def evaluate(model, dataset: list[Example], conditions=None, batch: int = 500,
             fog_gray: float = degrade.FOG_GRAY) -> ConditionReport:
    """Exact-match accuracy per condition; degradations touch RGB only.

    ``model`` is a :class:`ToyModel` or any object with an
    ``answer(rgb, ir, qas) -> list[str]`` method.
    """
    conditions = degrade.conditions() if conditions is None else conditions
    answer = getattr(model, "answer", None)
    if answer is None:
        def answer(rgb, ir, qas):
            return greedy_answers(model, rgb, ir, qas)
    ir_all = np.stack([ex.ir for ex in dataset])
    rows = []
    for spec in conditions:
        correct = 0
        for lo in range(0, len(dataset), batch):
            chunk = dataset[lo:lo + batch]
            rgb = np.stack([rgb_only_degrade(spec, ex.rgb, fog_gray) for ex in chunk])
            preds = answer(rgb, ir_all[lo:lo + batch], [ex.qa for ex in chunk])
            correct += sum(p == ex.qa.answer for p, ex in zip(preds, chunk))
        kind, sev = ("none", "clean") if spec is None else (spec.kind, spec.severity)
        rows.append(ConditionRow(degrade.condition_name(spec), kind, sev, len(dataset), int(correct)))
    return ConditionReport(rows)
