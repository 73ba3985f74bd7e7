"""Synthetic paired RGB/IR scenes with modality-tagged questions.

Objects sit on a coarse cell grid. Every object is drawn in RGB with its color,
but only warm objects show up in IR, as brightness proportional to heat.
Color questions therefore need RGB and warm-object counts need IR.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import make_rng

PALETTE = {
    "red": (0.9, 0.15, 0.1),
    "green": (0.15, 0.75, 0.2),
    "blue": (0.1, 0.25, 0.9),
    "yellow": (0.9, 0.85, 0.15),
}
RGB_BACKGROUND = 0.0
IR_BACKGROUND = 0.1
MODALITIES = ("RGB", "IR")

SPECIAL = ("<pad>", "<eos>")
# templates end on the word the answer hinges on, so the predicting position can query for it
WORDS = ("is", "any", "object", "objects", "how", "many", "are", "warm", "the", "count", "yes", "no")


class Vocab:
    def __init__(self, colors=tuple(PALETTE), max_count: int = 16):
        words = list(SPECIAL) + list(WORDS) + list(colors) + [str(i) for i in range(max_count + 1)]
        if len(words) > 64:
            raise ValueError(f"vocabulary of {len(words)} tokens exceeds 64")
        self.words = words
        self.ids = {w: i for i, w in enumerate(words)}

    def __len__(self):
        return len(self.words)

    @property
    def pad(self) -> int:
        return self.ids["<pad>"]

    @property
    def eos(self) -> int:
        return self.ids["<eos>"]

    def encode(self, text: str) -> list[int]:
        try:
            return [self.ids[w] for w in text.split()]
        except KeyError as e:
            raise ValueError(f"unknown token {e.args[0]!r}") from None

    def decode(self, ids) -> str:
        return " ".join(self.words[i] for i in ids)


@dataclass(frozen=True)
class QASample:
    question: str
    answer: str
    modality: str
    binary: bool = False

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")


@dataclass
class SceneConfig:
    grid: int = 4
    cell: int = 8
    colors: tuple[str, ...] = tuple(PALETTE)
    min_objects: int = 3
    max_objects: int = 3
    binary: bool = False
    size_range: tuple[int, int] = (4, 7)
    rgb_background: float = RGB_BACKGROUND

    def __post_init__(self):
        if self.grid < 2:
            raise ValueError("scene grid must be at least 2x2")
        if len(self.colors) < 2:
            raise ValueError("palette needs at least two colors")
        unknown = set(self.colors) - set(PALETTE)
        if unknown:
            raise ValueError(f"colors without a palette entry: {sorted(unknown)}")
        if not 0 <= self.min_objects <= self.max_objects <= self.grid * self.grid:
            raise ValueError("need 0 <= min_objects <= max_objects <= grid cells")
        if not 1 <= self.size_range[0] <= self.size_range[1] <= self.cell:
            raise ValueError("object size range must fit inside a cell")

    @property
    def image_size(self) -> int:
        return self.grid * self.cell


@dataclass
class SyntheticScene:
    occupancy: np.ndarray
    color: np.ndarray  # palette index, -1 for empty cells
    heat: np.ndarray
    rgb: np.ndarray = field(repr=False)
    ir: np.ndarray = field(repr=False)

    @property
    def count(self) -> int:
        return int(self.occupancy.sum())

    @property
    def warm_count(self) -> int:
        return int((self.heat > 0).sum())

    def colors_present(self, colors) -> set[str]:
        return {colors[c] for c in self.color[self.occupancy]}


def render(occupancy, color, heat, cfg: SceneConfig, rng: np.random.Generator):
    size = cfg.image_size
    rgb = np.full((size, size, 3), cfg.rgb_background)
    ir = np.full((size, size, 1), IR_BACKGROUND)
    lo, hi = cfg.size_range
    for r, c in zip(*np.nonzero(occupancy)):
        s = int(rng.integers(lo, hi + 1))
        y = r * cfg.cell + int(rng.integers(0, cfg.cell - s + 1))
        x = c * cfg.cell + int(rng.integers(0, cfg.cell - s + 1))
        rgb[y:y + s, x:x + s] = PALETTE[cfg.colors[color[r, c]]]
        if heat[r, c] > 0:
            ir[y:y + s, x:x + s] = heat[r, c]
    return rgb, ir


def _count_questions(k: int, cfg: SceneConfig, rng) -> list[QASample]:
    """Two warm-count questions: open and yes/no, or one yes and one no when ``cfg.binary``."""
    other = [j for j in range(cfg.max_objects + 1) if j != k]
    wrong = other[int(rng.integers(len(other)))] if other else k
    if cfg.binary:
        return [QASample(f"is the warm count {k}", "yes", "IR", True),
                QASample(f"is the warm count {wrong}", "no", "IR", True)]
    j = k if rng.random() < 0.5 or not other else wrong
    return [QASample("how many objects are warm", str(k), "IR"),
            QASample(f"is the warm count {j}", "yes" if j == k else "no", "IR", True)]


def _color_questions(scene: SyntheticScene, cfg: SceneConfig, rng) -> list[QASample]:
    """A present color, an absent color, then one more color not yet asked about.

    The first two always exist when ``0 < objects < palette size``; otherwise
    both draw from the non-empty side.
    """
    present = sorted(scene.colors_present(cfg.colors), key=cfg.colors.index)
    absent = [c for c in cfg.colors if c not in present]
    out, asked = [], []
    for pool, answer in ((present or absent, "yes" if present else "no"),
                         (absent or present, "no" if absent else "yes")):
        c = pool[int(rng.integers(len(pool)))]
        asked.append(c)
        out.append(QASample(f"is any object {c}", answer, "RGB", True))
    rest = [c for c in cfg.colors if c not in asked] or list(cfg.colors)
    c = rest[int(rng.integers(len(rest)))]
    out.append(QASample(f"is any object {c}", "yes" if c in present else "no", "RGB", True))
    return out


def gen_scene(rng: np.random.Generator, cfg: SceneConfig, n_objects: int | None = None,
              n_warm: int | None = None):
    """One scene plus three color (RGB) questions and two warm-count (IR) questions.

    The number of warm objects is uniform over ``0..n_objects`` so that the
    RGB image carries no information about the count.
    """
    g = cfg.grid
    k = int(rng.integers(cfg.min_objects, cfg.max_objects + 1)) if n_objects is None else n_objects
    if not 0 <= k <= g * g:
        raise ValueError(f"cannot place {k} objects on a {g}x{g} grid")
    w = int(rng.integers(0, k + 1)) if n_warm is None else n_warm
    if not 0 <= w <= k:
        raise ValueError(f"cannot make {w} of {k} objects warm")
    cells = rng.choice(g * g, size=k, replace=False)
    occupancy = np.zeros((g, g), dtype=bool)
    occupancy.flat[cells] = True
    color = np.where(occupancy, rng.integers(0, len(cfg.colors), size=(g, g)), -1)
    heat = np.zeros((g, g))
    heat.flat[cells[:w]] = rng.uniform(0.75, 1.0, size=w)
    rgb, ir = render(occupancy, color, heat, cfg, rng)
    scene = SyntheticScene(occupancy, color, heat, rgb, ir)
    qas = _color_questions(scene, cfg, rng) + _count_questions(w, cfg, rng)
    return scene, qas


@dataclass
class Example:
    rgb: np.ndarray
    ir: np.ndarray
    qa: QASample


def make_dataset(seed: int, n_scenes: int, cfg: SceneConfig, stream: str = "data") -> list[Example]:
    rng = make_rng(seed, stream)
    out = []
    for _ in range(n_scenes):
        scene, qas = gen_scene(rng, cfg)
        out.extend(Example(scene.rgb, scene.ir, qa) for qa in qas)
    return out
