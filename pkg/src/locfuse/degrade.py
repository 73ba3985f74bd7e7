"""RGB degradations (blur, darkness, fog) at fixed severities, and the
stochastic augmentation sampler used during training.

Images are float64 arrays of shape ``(H, W, C)`` with ``C in {1, 3}`` and
values in ``[0, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

KINDS = ("blur", "darkness", "fog")
SEVERITIES = ("clean", "low", "moderate", "high", "highest")

BLUR_RADII = (0, 5, 10, 15, 20)
DARKNESS_FACTORS = (1.0, 0.45, 0.3, 0.2, 0.1)
FOG_ALPHAS = (0.0, 0.7, 0.85, 0.92, 0.97)

PARAM_TABLES = {"blur": BLUR_RADII, "darkness": DARKNESS_FACTORS, "fog": FOG_ALPHAS}

FOG_GRAY = 0.8
AUGMENT_PROB = 0.25


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    severity: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown degradation kind {self.kind!r}; expected one of {KINDS}")
        if self.severity not in SEVERITIES:
            raise ValueError(f"unknown severity {self.severity!r}; expected one of {SEVERITIES}")

    @property
    def param(self) -> float:
        return PARAM_TABLES[self.kind][SEVERITIES.index(self.severity)]

    @property
    def is_clean(self) -> bool:
        return self.severity == "clean"

    def __str__(self):
        return f"{self.kind}/{self.severity}"


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, 1|3) image, got shape {img.shape}")
    return img


def _blur_matrix(n: int, sigma: float) -> np.ndarray:
    half = int(math.ceil(3 * sigma))
    offs = np.arange(-half, half + 1)
    w = np.exp(-0.5 * (offs / sigma) ** 2)
    w /= w.sum()
    m = np.zeros((n, n))
    rows = np.arange(n)[:, None]
    cols = np.clip(rows + offs[None, :], 0, n - 1)  # clamp-to-edge
    np.add.at(m, (np.broadcast_to(rows, cols.shape), cols), np.broadcast_to(w, cols.shape))
    return m


_BLUR_CACHE: dict[tuple[int, float], np.ndarray] = {}


def blur_matrix(n: int, sigma: float) -> np.ndarray:
    key = (n, float(sigma))
    if key not in _BLUR_CACHE:
        _BLUR_CACHE[key] = _blur_matrix(n, sigma)
    return _BLUR_CACHE[key]


def gaussian_blur(img: np.ndarray, radius: float) -> np.ndarray:
    """Separable Gaussian with ``sigma = radius`` and half-width ``ceil(3 sigma)``."""
    if radius < 0:
        raise ValueError(f"blur radius must be non-negative, got {radius}")
    img = check_image(img)
    if radius == 0:
        return img.copy()
    h, w, _ = img.shape
    out = np.tensordot(blur_matrix(h, radius), img, axes=(1, 0))
    out = np.tensordot(blur_matrix(w, radius), out, axes=(1, 1)).transpose(1, 0, 2)
    return np.clip(out, 0.0, 1.0)


def darken(img: np.ndarray, factor: float) -> np.ndarray:
    if not 0.0 <= factor <= 1.0:
        raise ValueError(f"darkness factor must lie in [0, 1], got {factor}")
    return np.clip(check_image(img) * factor, 0.0, 1.0)


def fog(img: np.ndarray, alpha: float, gray: float = FOG_GRAY) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"fog intensity must lie in [0, 1], got {alpha}")
    img = check_image(img)
    if alpha == 0:
        return img.copy()
    return np.clip((1.0 - alpha) * img + alpha * gray, 0.0, 1.0)


def apply(spec: DegradationSpec, img: np.ndarray, fog_gray: float = FOG_GRAY) -> np.ndarray:
    if spec.kind == "blur":
        return gaussian_blur(img, spec.param)
    if spec.kind == "darkness":
        return darken(img, spec.param)
    return fog(img, spec.param, fog_gray)


def conditions() -> list[DegradationSpec | None]:
    """Evaluation conditions: clean (``None``) then every kind at four severities."""
    return [None] + [DegradationSpec(k, s) for k in KINDS for s in SEVERITIES[1:]]


def condition_name(spec: DegradationSpec | None) -> str:
    return "clean" if spec is None else str(spec)


def sample_spec(rng: np.random.Generator, p: float = AUGMENT_PROB) -> DegradationSpec | None:
    """With probability ``p`` a uniformly drawn (kind, non-clean severity)."""
    if rng.random() >= p:
        return None
    kind = KINDS[rng.integers(len(KINDS))]
    severity = SEVERITIES[1 + rng.integers(len(SEVERITIES) - 1)]
    return DegradationSpec(kind, severity)


def augment_sample(rng: np.random.Generator, rgb: np.ndarray, p: float = AUGMENT_PROB,
                   fog_gray: float = FOG_GRAY):
    spec = sample_spec(rng, p)
    if spec is None:
        return rgb, None
    return apply(spec, rgb, fog_gray), spec
