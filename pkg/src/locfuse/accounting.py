"""Closed-form parameter and FLOP accounting for the fusion module.

FLOPs count ``2*m*k*n`` per ``(m x k) @ (k x n)`` product. Softmax, LayerNorm,
activations and residual adds are ignored.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .fusion import FusionConfig
from .grid import PatchGrid, build_neighborhood

# LLaVA-1.5-7B scale: CLIP ViT-L/14 at 336px feeding a LLaMA-7B decoder.
FULL_PRESET = dict(
    image=336,
    patch=14,
    d=1024,
    radii=(1.0, 2.0, 3.0),
    ffn_mult=4,
    projection=(1024, 4096, 4096),
    text_len=100,
    llm_layers=32,
    llm_dim=4096,
    llm_ffn=11008,
    llm_vocab=32000,
)


def mm_flops(m: int, k: int, n: int) -> int:
    return 2 * m * k * n


def projection_params(widths) -> int:
    """Weights plus biases of a chain of linear layers ``widths[0] -> ... -> widths[-1]``."""
    widths = tuple(widths or ())
    return sum(a * b + b for a, b in zip(widths, widths[1:]))


def block_params(cfg: FusionConfig) -> int:
    d, dk, dv, h = cfg.d, cfg.d_k, cfg.d_v, cfg.hidden
    attn = 2 * d * dk + d * dv + dv * d
    ln = 2 * 2 * d
    ffn = d * h + h + h * d + d
    return attn + ln + ffn


def count_params(cfg: FusionConfig, projection=None) -> int:
    """Parameters added by the fusion stack plus the optional projection chain."""
    return cfg.n_layers * block_params(cfg) + projection_params(projection)


def attention_cost(seq_len: int, dim: int) -> int:
    """Score (``Q K^T``) plus mix (``A V``) FLOPs of one self-attention layer."""
    return mm_flops(seq_len, dim, seq_len) + mm_flops(seq_len, seq_len, dim)


@dataclass
class FlopReport:
    fused_path: int
    concat_path: int
    fusion_overhead: int
    ratio: float
    base_path: int
    overhead_fraction: float

    def as_dict(self) -> dict:
        return asdict(self)


def window_sizes(cfg: FusionConfig, grid: PatchGrid, global_window: bool = False) -> list[int]:
    """Total attended keys per layer, summed over queries (borders truncate)."""
    if global_window:
        return [grid.n * grid.n] * cfg.n_layers
    return [int(build_neighborhood(grid, grid, r).counts().sum()) for r in cfg.radii]


def fusion_flops(cfg: FusionConfig, grid: PatchGrid, projection=None, global_window=False) -> int:
    n, d, dk, dv, h = grid.n, cfg.d, cfg.d_k, cfg.d_v, cfg.hidden
    total = 0
    for w in window_sizes(cfg, grid, global_window):
        total += w * (2 * dk + 2 * dv)  # scores and value mix over each window
        total += mm_flops(n, d, dk) * 2 + mm_flops(n, d, dv) + mm_flops(n, dv, d)
        total += mm_flops(n, d, h) + mm_flops(n, h, d)
    widths = tuple(projection or ())
    total += sum(mm_flops(n, a, b) for a, b in zip(widths, widths[1:]))
    return total


def llm_forward_flops(seq_len: int, layers: int, dim: int, ffn: int, vocab: int) -> int:
    """Dense decoder forward: attention, gated FFN (three ``dim x ffn`` matrices), LM head."""
    dense = mm_flops(seq_len, dim, dim) * 4 + mm_flops(seq_len, dim, ffn) * 3
    return layers * (attention_cost(seq_len, dim) + dense) + mm_flops(seq_len, dim, vocab)


def attention_flops(cfg: FusionConfig, n: int, text_len: int, llm_layers: int, llm_dim: int,
                    grid: PatchGrid | None = None, projection=None, llm_ffn: int | None = None,
                    llm_vocab: int = 0, global_window: bool = False) -> FlopReport:
    """Attention cost of concatenated (2N) vs fused (N) visual tokens.

    ``ratio`` compares visual-token attention only, so it is independent of
    ``text_len``. ``overhead_fraction`` is the fusion cost relative to the full
    modeled decoder forward over the fused sequence.
    """
    if min(n, llm_layers, llm_dim) < 1 or text_len < 0:
        raise ValueError("extents must be positive")
    if grid is None:
        side = int(round(n**0.5))
        grid = PatchGrid(side, n // side)
    if grid.n != n:
        raise ValueError(f"grid {grid.rows}x{grid.cols} does not hold {n} tokens")
    fused = llm_layers * attention_cost(n + text_len, llm_dim)
    concat = llm_layers * attention_cost(2 * n + text_len, llm_dim)
    ratio = attention_cost(2 * n, llm_dim) / attention_cost(n, llm_dim)
    overhead = fusion_flops(cfg, grid, projection, global_window)
    ffn = 4 * llm_dim if llm_ffn is None else llm_ffn
    base = llm_forward_flops(n + text_len, llm_layers, llm_dim, ffn, llm_vocab)
    return FlopReport(fused, concat, overhead, ratio, base, overhead / base)


def full_scale_report() -> tuple[int, FlopReport]:
    p = FULL_PRESET
    cfg = FusionConfig(d=p["d"], radii=p["radii"], ffn_mult=p["ffn_mult"])
    side = p["image"] // p["patch"]
    grid = PatchGrid(side, side)
    params = count_params(cfg, p["projection"])
    report = attention_flops(cfg, grid.n, p["text_len"], p["llm_layers"], p["llm_dim"], grid=grid,
                             projection=p["projection"], llm_ffn=p["llm_ffn"],
                             llm_vocab=p["llm_vocab"])
    return params, report
