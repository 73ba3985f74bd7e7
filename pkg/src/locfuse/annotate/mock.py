"""Deterministic offline backends for tests and dry runs."""

from __future__ import annotations

import zlib

from ..core import make_rng

SUBJECTS = ("a person", "two people", "a car", "a parked van", "a dog", "a cyclist", "a bench")
PLACES = ("near a wall", "on a road", "beside a tree", "in an open field", "under a street lamp")
DETAILS = ("", " with a warm engine", " partly occluded", " walking left", " in low light")


def edit_distance(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


class MockGenerator:
    """Template captions drawn from a per-(image, round) seeded stream.

    If ``target`` is given it is emitted as the first candidate of round
    ``reveal_round`` and never before.
    """

    def __init__(self, seed: int = 0, target: str | None = None, reveal_round: int | None = None):
        self.seed = seed
        self.target = target
        self.reveal_round = reveal_round

    def __call__(self, context: dict) -> list[str]:
        rng = make_rng(self.seed, f"mockgen/{context['image_id']}/{context['round']}")
        banned = {t for t, _ in context["candidates"]} | {self.target}
        out = []
        if self.target is not None and context["round"] == self.reveal_round:
            out.append(self.target)
        while len(out) < context["fanout"]:
            text = (f"{SUBJECTS[rng.integers(len(SUBJECTS))]} {PLACES[rng.integers(len(PLACES))]}"
                    f"{DETAILS[rng.integers(len(DETAILS))]} #{context['round']}.{len(out)}")
            if text not in banned and text not in out:
                out.append(text)
        return out


class EditDistanceScorer:
    """Negative edit distance to a hidden target caption."""

    def __init__(self, target: str):
        self.target = target

    def __call__(self, text: str, image=None) -> float:
        return -float(edit_distance(text, self.target))


class HashScorer:
    """Stable pseudo-similarity in [0, 1) from a checksum of (text, image id)."""

    def __call__(self, text: str, image=None) -> float:
        return zlib.crc32(f"{image}\x00{text}".encode()) / 2**32


class MockQAGenerator:
    def __init__(self, outputs):
        self.outputs = list(outputs)
        self.calls = 0

    def __call__(self, caption: str):
        out = self.outputs[min(self.calls, len(self.outputs) - 1)]
        self.calls += 1
        return out


def caption_qa(caption: str) -> list[dict]:
    """Two fixed-template QA pairs about any caption."""
    return [
        {"question": f"Is this described: {caption}?", "answer": "yes", "modality": "IR"},
        {"question": "Is the scene in color?", "answer": "yes", "modality": "RGB"},
    ]


class ConstantJudge:
    def __init__(self, accuracy: str = "Good", detail: str | None = None):
        self.rating = {"accuracy": accuracy, "detail": detail or accuracy}

    def __call__(self, ir_caption: str, rgb_reference: str) -> dict:
        return dict(self.rating)
