"""Localized RGB->IR cross-attention, the multi-scale residual stack, and
the simple fusion baselines (addition, adaptive addition, interleaving).

Token tensors are ``(N, d)`` or batched ``(B, N, d)``. RGB tokens are queries;
IR tokens supply keys and values at every layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import core
from .core import DTYPE, FeedForward, LayerNorm, Param
from .grid import NeighborhoodTable, PatchGrid, build_neighborhood

BASELINE_MODES = ("add", "adaptive", "concat")


# --------------------------------------------------------------------------
# single local cross-attention


def local_xattn_branch(zq, zkv, table: NeighborhoodTable, wq, wk, wv, wo):
    """Attention branch ``(alpha_u V_u) W_O`` without the residual.

    Queries with empty neighborhoods get a zero branch.
    """
    if zq.shape[-2] != table.query.n or zkv.shape[-2] != table.key.n:
        raise ValueError(
            f"token counts ({zq.shape[-2]}, {zkv.shape[-2]}) do not match table grids "
            f"({table.query.n}, {table.key.n})"
        )
    batched = zq.ndim == 3
    if not batched:
        zq, zkv = zq[None], zkv[None]
    idx, valid = table.padded
    dk = wq.shape[1]
    q = zq @ wq
    k = zkv @ wk
    v = zkv @ wv
    kg = k[:, idx]  # (B, N, M, dk)
    vg = v[:, idx]
    s = (kg @ q[..., None])[..., 0] / math.sqrt(dk)
    s = np.where(valid, s, -np.inf)
    alpha = core.softmax_rows(s)
    o = (alpha[:, :, None, :] @ vg)[:, :, 0]
    out = o @ wo
    cache = (zq, zkv, q, k, v, kg, vg, alpha, o, table, (wq, wk, wv, wo), batched)
    return (out if batched else out[0]), cache


def local_xattn_branch_backward(dout, cache):
    zq, zkv, q, k, v, kg, vg, alpha, o, table, (wq, wk, wv, wo), batched = cache
    if not batched:
        dout = dout[None]
    b, n, m = alpha.shape
    dk = wq.shape[1]
    do, dwo = core.matmul_backward(dout, o, wo)
    dalpha = (vg @ do[..., None])[..., 0]
    dvg = alpha[..., None] * do[:, :, None, :]
    ds = core.softmax_rows_backward(dalpha, alpha) / math.sqrt(dk)
    dq = (ds[:, :, None, :] @ kg)[:, :, 0]
    dkg = ds[..., None] * q[:, :, None, :]

    scatter = table.scatter

    def gather_back(g):
        flat = g.reshape(b, n * m, -1).transpose(1, 0, 2).reshape(n * m, -1)
        return (scatter @ flat).reshape(table.key.n, b, -1).transpose(1, 0, 2)

    dkk = gather_back(dkg)
    dvv = gather_back(dvg)
    dzq, dwq = core.matmul_backward(dq, zq, wq)
    dzk, dwk = core.matmul_backward(dkk, zkv, wk)
    dzv, dwv = core.matmul_backward(dvv, zkv, wv)
    dzkv = dzk + dzv
    if not batched:
        dzq, dzkv = dzq[0], dzkv[0]
    return dzq, dzkv, dwq, dwk, dwv, dwo


def local_xattn(zq, zkv, table: NeighborhoodTable, wq, wk, wv, wo):
    """Residual local cross-attention: ``z_u + (alpha_u V_u) W_O`` per query."""
    branch, _ = local_xattn_branch(zq, zkv, table, wq, wk, wv, wo)
    return zq + branch


# --------------------------------------------------------------------------
# blocks and stack


@dataclass
class FusionConfig:
    d: int
    radii: tuple[float, ...] = (1.0, 2.0, 3.0)
    d_k: int | None = None
    d_v: int | None = None
    ffn_mult: int = 4
    zero_init: bool = True

    def __post_init__(self):
        self.radii = tuple(float(r) for r in self.radii)
        self.d_k = self.d if self.d_k is None else self.d_k
        self.d_v = self.d if self.d_v is None else self.d_v
        if any(r < 0 for r in self.radii):
            raise ValueError("radii must be non-negative")
        if any(a > b for a, b in zip(self.radii, self.radii[1:])):
            raise ValueError(f"radii must be non-decreasing, got {self.radii}")
        if min(self.d, self.d_k, self.d_v, self.ffn_mult) < 1:
            raise ValueError("widths must be positive")

    @property
    def n_layers(self) -> int:
        return len(self.radii)

    @property
    def hidden(self) -> int:
        return self.ffn_mult * self.d


class LocalXAttnBlock:
    """Pre-LN local cross-attention residual followed by a pre-LN FFN residual."""

    def __init__(self, name: str, cfg: FusionConfig, radius: float, rng: np.random.Generator):
        d, dk, dv, h = cfg.d, cfg.d_k, cfg.d_v, cfg.hidden
        self.name, self.radius = name, float(radius)
        self.wq = Param(core.xavier_uniform(rng, d, dk), name=f"{name}.wq")
        self.wk = Param(core.xavier_uniform(rng, d, dk), name=f"{name}.wk")
        self.wv = Param(core.xavier_uniform(rng, d, dv), name=f"{name}.wv")
        wo = np.zeros((dv, d)) if cfg.zero_init else core.xavier_uniform(rng, dv, d)
        self.wo = Param(wo, name=f"{name}.wo")
        self.ln1 = LayerNorm(f"{name}.ln1", d)
        self.ln2 = LayerNorm(f"{name}.ln2", d)
        w1 = core.xavier_uniform(rng, d, h)
        w2 = np.zeros((h, d)) if cfg.zero_init else core.xavier_uniform(rng, h, d)
        self.ffn = FeedForward(f"{name}.ffn", w1, np.zeros(h), w2, np.zeros(d))

    def params(self) -> list[Param]:
        return [self.wq, self.wk, self.wv, self.wo, *self.ln1.params(), *self.ln2.params(),
                *self.ffn.params()]

    def forward(self, z, z_ir, table: NeighborhoodTable):
        if table.radius != self.radius:
            raise ValueError(f"{self.name}: table radius {table.radius} != block radius {self.radius}")
        zn, c_ln1 = self.ln1.forward(z)
        att, c_att = local_xattn_branch(zn, z_ir, table, self.wq.value, self.wk.value,
                                        self.wv.value, self.wo.value)
        h = z + att
        hn, c_ln2 = self.ln2.forward(h)
        f, c_ffn = self.ffn.forward(hn)
        return h + f, (c_ln1, c_att, c_ln2, c_ffn)

    def backward(self, dout, cache):
        c_ln1, c_att, c_ln2, c_ffn = cache
        dh = dout + self.ln2.backward(self.ffn.backward(dout, c_ffn), c_ln2)
        dzn, dz_ir, dwq, dwk, dwv, dwo = local_xattn_branch_backward(dh, c_att)
        for p, g in zip((self.wq, self.wk, self.wv, self.wo), (dwq, dwk, dwv, dwo)):
            p.accumulate(g)
        dz = dh + self.ln1.backward(dzn, c_ln1)
        return dz, dz_ir


def block_forward(z_prev, z_ir, table, block: LocalXAttnBlock):
    return block.forward(z_prev, z_ir, table)[0]


class FusionStack:
    def __init__(self, cfg: FusionConfig, rng: np.random.Generator, name: str = "fusion"):
        self.cfg = cfg
        self.blocks = [LocalXAttnBlock(f"{name}.{i}", cfg, r, rng) for i, r in enumerate(cfg.radii)]
        self._tables: dict[tuple, NeighborhoodTable] = {}

    def params(self) -> list[Param]:
        return [p for b in self.blocks for p in b.params()]

    def tables(self, query: PatchGrid, key: PatchGrid | None = None) -> list[NeighborhoodTable]:
        key = query if key is None else key
        out = []
        for b in self.blocks:
            k = (query, key, b.radius)
            if k not in self._tables:
                self._tables[k] = build_neighborhood(query, key, b.radius)
            out.append(self._tables[k])
        return out

    def forward(self, z_rgb, z_ir, tables):
        if len(tables) != len(self.blocks):
            raise ValueError(f"{len(tables)} tables for {len(self.blocks)} blocks")
        z, caches = z_rgb, []
        for block, table in zip(self.blocks, tables):
            z, c = block.forward(z, z_ir, table)
            caches.append(c)
        return z, caches

    def backward(self, dout, caches):
        dz_ir = 0.0
        dz = dout
        for block, c in zip(reversed(self.blocks), reversed(caches)):
            dz, dir_ = block.backward(dz, c)
            dz_ir = dz_ir + dir_
        return dz, dz_ir


def stack_forward(z_rgb, z_ir, stack: FusionStack, tables):
    return stack.forward(z_rgb, z_ir, tables)[0]


# --------------------------------------------------------------------------
# baselines


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def interleave(a, b):
    """``[a_0, b_0, a_1, b_1, ...]`` along the token axis."""
    out = np.empty(a.shape[:-2] + (2 * a.shape[-2], a.shape[-1]), dtype=DTYPE)
    out[..., 0::2, :] = a
    out[..., 1::2, :] = b
    return out


def fuse_baseline(z_rgb, z_ir, mode: str, weights=None):
    """Parameter-free view of the three baselines.

    ``weights`` are the pre-sigmoid per-token scalars for ``adaptive``.
    """
    if mode not in BASELINE_MODES:
        raise ValueError(f"unknown fusion mode {mode!r}; expected one of {BASELINE_MODES}")
    if mode == "concat":
        return interleave(z_rgb, z_ir)
    if z_rgb.shape != z_ir.shape:
        raise ValueError(f"{mode} fusion needs equal shapes, got {z_rgb.shape} and {z_ir.shape}")
    if mode == "add":
        return z_rgb + z_ir
    w = np.zeros(z_rgb.shape[-2]) if weights is None else np.asarray(weights)
    s = sigmoid(w)[:, None]
    return s * z_rgb + (1.0 - s) * z_ir


class AdaptiveAdd:
    """``sigmoid(w_u) * rgb_u + (1 - sigmoid(w_u)) * ir_u`` with learnable ``w``."""

    def __init__(self, n_tokens: int, name: str = "fusion.adaptive"):
        self.w = Param(np.zeros(n_tokens), name=f"{name}.w")

    def params(self) -> list[Param]:
        return [self.w]

    def forward(self, z_rgb, z_ir):
        return fuse_baseline(z_rgb, z_ir, "adaptive", self.w.value), (z_rgb, z_ir)

    def backward(self, dout, cache):
        z_rgb, z_ir = cache
        s = sigmoid(self.w.value)
        g = np.sum(dout * (z_rgb - z_ir), axis=-1)
        self.w.accumulate((g * s * (1 - s)).reshape(-1, len(s)).sum(axis=0))
        return dout * s[:, None], dout * (1 - s)[:, None]
