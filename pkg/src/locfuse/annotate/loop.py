"""Score-guided caption refinement with hard-negative retention.

Backends are plain callables:

- generator ``(context: dict) -> list[str]`` where ``context`` carries the
  image id, round index, fanout, every prior ``(text, score)`` pair and the
  hard-negative texts;
- scorer ``(text, image) -> float`` (higher is better aligned);
- selector ``(state) -> str``;
- judge ``(ir_caption, rgb_reference) -> {"accuracy": level, "detail": level}``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

from ..harness.scenes import MODALITIES, QASample

LEVELS = ("Very Good", "Good", "Fair", "Poor")
DIMENSIONS = ("accuracy", "detail")


class BackendError(RuntimeError):
    """A backend call failed after its retry budget."""


class AnnotationAborted(RuntimeError):
    def __init__(self, msg: str, state: "AnnotationState"):
        super().__init__(msg)
        self.state = state


class QAFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Candidate:
    text: str
    score: float
    round: int


@dataclass
class AnnotationState:
    image_id: str
    candidates: list[Candidate] = field(default_factory=list)
    hard_negatives: list[Candidate] = field(default_factory=list)
    best_so_far: list[float] = field(default_factory=list)

    @property
    def rounds_done(self) -> int:
        return len(self.best_so_far)

    def context(self, round_idx: int, fanout: int) -> dict:
        return {
            "image_id": self.image_id,
            "round": round_idx,
            "fanout": fanout,
            "candidates": [(c.text, c.score) for c in self.candidates],
            "hard_negatives": [c.text for c in self.hard_negatives],
        }

    def validate(self) -> None:
        ids = {id(c) for c in self.candidates}
        if any(id(h) not in ids for h in self.hard_negatives):
            raise AssertionError("hard negative outside the candidate history")
        seen = set()
        for c in self.candidates:
            if (c.text, c.round) in seen:
                raise AssertionError(f"candidate scored twice in round {c.round}: {c.text!r}")
            seen.add((c.text, c.round))
        if any(b < a for a, b in zip(self.best_so_far, self.best_so_far[1:])):
            raise AssertionError("best-so-far score decreased")
        if self.best_so_far and self.best_so_far[-1] != max(c.score for c in self.candidates):
            raise AssertionError("best-so-far does not match the candidate history")

    def records(self, round_idx: int | None = None) -> list[dict]:
        hard = {id(h) for h in self.hard_negatives}
        return [
            {"image_id": self.image_id, "round": c.round, "text": c.text, "score": c.score,
             "is_hard_negative": id(c) in hard}
            for c in self.candidates if round_idx is None or c.round == round_idx
        ]


def hard_negative_picks(scores: list[float]) -> list[int]:
    """Bottom quartile of a round: the ``ceil(n/4)`` lowest scores, excluding any tie with the round max."""
    if not scores:
        return []
    k = math.ceil(len(scores) / 4)
    top = max(scores)
    order = sorted(range(len(scores)), key=lambda i: (scores[i], i))
    return sorted(i for i in order[:k] if scores[i] < top)


def refine_loop(gen: Callable, scorer: Callable, image, rounds: int = 9, fanout: int = 3,
                image_id: str = "", on_round: Callable | None = None) -> AnnotationState:
    if rounds < 1 or fanout < 1:
        raise ValueError(f"rounds and fanout must be >= 1, got {rounds}, {fanout}")
    state = AnnotationState(image_id)
    for r in range(rounds):
        try:
            texts = list(gen(state.context(r, fanout)))
            if len(texts) != fanout:
                raise BackendError(f"generator returned {len(texts)} candidates, expected {fanout}")
            if len(set(texts)) != len(texts):
                raise BackendError("generator returned duplicate candidates within a round")
            scores = [float(scorer(t, image)) for t in texts]
        except BackendError as e:
            raise AnnotationAborted(f"round {r} of {image_id or 'image'}: {e}", state) from e
        # state changes only at the round boundary, after every backend call succeeded
        new = [Candidate(t, s, r) for t, s in zip(texts, scores)]
        state.candidates.extend(new)
        state.hard_negatives.extend(new[i] for i in hard_negative_picks(scores))
        prev = state.best_so_far[-1] if state.best_so_far else -math.inf
        state.best_so_far.append(max(prev, max(scores)))
        if on_round is not None:
            on_round(state, r)
    return state


def argmax_selector(state: AnnotationState) -> str:
    """Highest score; ties go to the earliest round, then the earliest candidate."""
    best = max(enumerate(state.candidates), key=lambda ic: (ic[1].score, -ic[1].round, -ic[0]))
    return best[1].text


def final_select(selector: Callable, state: AnnotationState) -> str:
    if not state.candidates:
        raise ValueError("cannot select a caption from an empty state")
    text = selector(state)
    if not isinstance(text, str) or not text.strip():
        raise BackendError("selector returned an empty caption")
    return text


# -- caption -> QA


def _parse_pairs(raw) -> list[QASample]:
    if isinstance(raw, str):
        try:
            raw = json.loads(raw)
        except json.JSONDecodeError as e:
            raise QAFormatError(f"QA output is not valid JSON: {e.msg}") from None
    if not isinstance(raw, list):
        raise QAFormatError(f"QA output must be a list of pairs, got {type(raw).__name__}")
    out = []
    for i, pair in enumerate(raw):
        if not isinstance(pair, dict):
            raise QAFormatError(f"pair {i} is not an object")
        for key in ("question", "answer", "modality"):
            if not isinstance(pair.get(key), str) or not pair[key].strip():
                raise QAFormatError(f"pair {i} is missing field {key!r}")
        if pair["modality"] not in MODALITIES:
            raise QAFormatError(f"pair {i} has modality {pair['modality']!r}; expected one of {MODALITIES}")
        answer = pair["answer"].strip()
        out.append(QASample(pair["question"].strip(), answer, pair["modality"],
                            answer.lower() in ("yes", "no")))
    if not 2 <= len(out) <= 4:
        raise QAFormatError(f"expected 2-4 QA pairs, got {len(out)}")
    return out


def qa_from_caption(gen: Callable, caption: str) -> list[QASample]:
    """One retry on malformed output, then the second error propagates."""
    if not caption or not caption.strip():
        raise ValueError("caption must be non-empty")
    try:
        return _parse_pairs(gen(caption))
    except QAFormatError:
        return _parse_pairs(gen(caption))


# -- judging


@dataclass
class JudgeTable:
    counts: dict[str, dict[str, int]]
    n: int

    def percent(self, dim: str, level: str) -> float:
        return 100.0 * self.counts[dim][level] / self.n

    def format(self) -> str:
        width = max(len(d) for d in DIMENSIONS) + 1
        lines = [" " * width + " | " + " | ".join(f"{lvl:>12}" for lvl in LEVELS)]
        for dim in DIMENSIONS:
            cells = [f"{self.counts[dim][lvl]:>4} ({self.percent(dim, lvl):5.1f}%)" for lvl in LEVELS]
            lines.append(f"{dim.capitalize():<{width}} | " + " | ".join(f"{c:>12}" for c in cells))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return asdict(self)


def judge_captions(judge: Callable, pairs: list[tuple[str, str]]) -> JudgeTable:
    if not pairs:
        raise ValueError("judge batch is empty")
    counts = {d: {lvl: 0 for lvl in LEVELS} for d in DIMENSIONS}
    for i, (ir_caption, rgb_reference) in enumerate(pairs):
        rating = judge(ir_caption, rgb_reference)
        for dim in DIMENSIONS:
            level = rating.get(dim) if isinstance(rating, dict) else None
            if level not in LEVELS:
                raise ValueError(f"pair {i}: {dim} rating {level!r} is not one of {LEVELS}")
            counts[dim][level] += 1
    return JudgeTable(counts, len(pairs))
