"""Desk-scale vision-language model around the fusion module.

Pipeline: frozen linear patch encoder (shared by RGB and channel-replicated IR)
-> fusion (local stack or a baseline) -> trainable projection -> one causal
self-attention decoder block with frozen base weights and low-rank adapters.

Trainable parameters are exactly the adapters, the projection and the fusion
weights. Each component draws its initialization from its own named RNG
stream, so models that differ only in fusion mode share every other weight.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import core
from ..core import LayerNorm, Linear, LoRALinear, Param, make_rng
from ..fusion import AdaptiveAdd, FusionConfig, FusionStack, interleave
from ..grid import grid_from_image
from .scenes import Vocab

MODES = ("local", "add", "adaptive", "concat", "rgb_only", "ir_only")


@dataclass
class ModelConfig:
    image: int = 32
    patch: int = 8
    d: int = 32
    d_dec: int = 32
    radii: tuple[float, ...] = (1.0, 2.0, 3.0)
    ffn_mult: int = 4
    mode: str = "local"
    lora_rank: int = 8
    lora_scale: float = 2.0
    max_seq: int = 64
    pos_std: float = 0.5
    enc_freqs: int = 2
    enc_gain: float = 0.5
    heads: int = 4
    seed: int = 0

    def __post_init__(self):
        self.radii = tuple(float(r) for r in self.radii)
        if self.mode not in MODES:
            raise ValueError(f"unknown fusion mode {self.mode!r}; expected one of {MODES}")
        grid_from_image(self.image, self.image, self.patch)

    @property
    def grid(self):
        return grid_from_image(self.image, self.image, self.patch)

    def to_dict(self) -> dict:
        return asdict(self)


def patchify(img: np.ndarray, patch: int) -> np.ndarray:
    """``(B, H, W, C) -> (B, N, patch*patch*C)`` in raster patch order."""
    b, h, w, c = img.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} is not divisible by patch {patch}")
    x = img.reshape(b, h // patch, patch, w // patch, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * c)


def dct_basis(patch: int, freqs: int) -> np.ndarray:
    """Orthonormal 2D DCT-II filters with ``u, v < freqs``, as columns of a ``(patch*patch, freqs**2)`` matrix."""
    n = np.arange(patch)
    k = np.arange(freqs)
    c = np.cos(np.pi * (n[:, None] + 0.5) * k[None, :] / patch)
    c *= np.where(k == 0, math.sqrt(1 / patch), math.sqrt(2 / patch))
    return np.einsum("iu,jv->ijuv", c, c).reshape(patch * patch, freqs * freqs)


class PatchEncoder:
    """Frozen, bias-free linear map from a flattened RGB patch to ``d`` features.

    Filters are random mixtures of the lowest ``enc_freqs**2`` DCT components
    per channel: smooth like the first layer of a trained encoder, so a
    token's direction reflects mean color more than the object's footprint.
    """

    def __init__(self, cfg: ModelConfig, rng):
        self.patch = cfg.patch
        basis = dct_basis(cfg.patch, cfg.enc_freqs)  # (P*P, F)
        f = basis.shape[1]
        mix = rng.normal(0.0, cfg.enc_gain / math.sqrt(3 * f), size=(f, 3, cfg.d))
        # pixel layout within a flattened patch is (row, col, channel)
        w = np.einsum("pf,fcd->pcd", basis, mix).reshape(cfg.patch * cfg.patch * 3, cfg.d)
        self.w = Param(w, trainable=False, name="encoder.w")

    def params(self):
        return [self.w]

    def __call__(self, img: np.ndarray) -> np.ndarray:
        if img.ndim == 3:
            img = img[None]
        if img.shape[-1] == 1:
            img = np.repeat(img, 3, axis=-1)
        if img.shape[-1] != 3:
            raise ValueError(f"expected 1 or 3 channels, got {img.shape[-1]}")
        return patchify(img, self.patch) @ self.w.value


class Decoder:
    """Single pre-LN causal self-attention block plus vocabulary head."""

    def __init__(self, cfg: ModelConfig, vocab_size: int, rng):
        d, r, s = cfg.d_dec, cfg.lora_rank, cfg.lora_scale
        if d % cfg.heads:
            raise ValueError(f"d_dec {d} is not divisible by {cfg.heads} heads")
        self.d = d
        self.heads = cfg.heads
        self.tok = Param(rng.normal(0, 1.0, (vocab_size, d)), False, "decoder.tok")
        self.pos = Param(rng.normal(0, cfg.pos_std, (cfg.max_seq, d)), False, "decoder.pos")
        self.ln1 = LayerNorm("decoder.ln1", d, trainable=False)
        self.ln2 = LayerNorm("decoder.ln2", d, trainable=False)
        self.lnf = LayerNorm("decoder.lnf", d, trainable=False)
        x = core.xavier_uniform
        self.q = LoRALinear("decoder.q", x(rng, d, d), r, s, rng)
        self.k = LoRALinear("decoder.k", x(rng, d, d), r, s, rng)
        self.v = LoRALinear("decoder.v", x(rng, d, d), r, s, rng)
        self.o = LoRALinear("decoder.o", x(rng, d, d), r, s, rng)
        self.f1 = LoRALinear("decoder.f1", x(rng, d, 4 * d), r, s, rng)
        self.f2 = LoRALinear("decoder.f2", x(rng, 4 * d, d), r, s, rng)
        self.head = LoRALinear("decoder.head", rng.normal(0, 0.02, (d, vocab_size)), r, s, rng)
        self.layers = [self.q, self.k, self.v, self.o, self.f1, self.f2, self.head]

    def params(self):
        out = [self.tok, self.pos, *self.ln1.params(), *self.ln2.params(), *self.lnf.params()]
        for layer in self.layers:
            out += layer.params()
        return out

    def _split(self, x):
        b, t, _ = x.shape
        return x.reshape(b, t, self.heads, self.d // self.heads).transpose(0, 2, 1, 3)

    def _merge(self, x):
        b, h, t, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)

    def forward(self, vis: np.ndarray, text: np.ndarray):
        """``vis (B, Nv, d)``, ``text (B, T)`` ids -> logits ``(B, T, V)`` at text positions."""
        b, nv, _ = vis.shape
        t = text.shape[1]
        if nv + t > self.pos.shape[0]:
            raise ValueError(f"sequence of {nv + t} exceeds max_seq {self.pos.shape[0]}")
        x = np.concatenate([vis, self.tok.value[text]], axis=1) + self.pos.value[: nv + t]
        a, c_ln1 = self.ln1.forward(x)
        q, c_q = self.q.forward(a)
        k, c_k = self.k.forward(a)
        v, c_v = self.v.forward(a)
        qh, kh, vh = self._split(q), self._split(k), self._split(v)
        s = qh @ kh.transpose(0, 1, 3, 2) / math.sqrt(self.d // self.heads)
        causal = np.tril(np.ones((nv + t, nv + t), dtype=bool))
        att = core.softmax_rows(np.where(causal, s, -np.inf))
        o = self._merge(att @ vh)
        y, c_o = self.o.forward(o)
        x2 = x + y
        h, c_ln2 = self.ln2.forward(x2)
        f1, c_f1 = self.f1.forward(h)
        g = core.gelu(f1)
        f2, c_f2 = self.f2.forward(g)
        x3 = x2 + f2
        z, c_lnf = self.lnf.forward(x3[:, nv:])
        logits, c_head = self.head.forward(z)
        cache = (nv, c_ln1, c_q, c_k, c_v, qh, kh, vh, att, c_o, c_ln2, c_f1, f1, c_f2, c_lnf, c_head)
        return logits, cache

    def backward(self, dlogits, cache):
        """Returns the gradient w.r.t. the visual input tokens."""
        nv, c_ln1, c_q, c_k, c_v, qh, kh, vh, att, c_o, c_ln2, c_f1, f1, c_f2, c_lnf, c_head = cache
        dz = self.head.backward(dlogits, c_head)
        dx3 = np.zeros((att.shape[0], att.shape[2], self.d))
        dx3[:, nv:] = self.lnf.backward(dz, c_lnf)
        dg = self.f2.backward(dx3, c_f2)
        dh = self.f1.backward(core.gelu_backward(dg, f1), c_f1)
        dx2 = dx3 + self.ln2.backward(dh, c_ln2)
        do = self._split(self.o.backward(dx2, c_o))
        datt = do @ vh.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do
        ds = core.softmax_rows_backward(datt, att) / math.sqrt(self.d // self.heads)
        dq = self._merge(ds @ kh)
        dk = self._merge(ds.transpose(0, 1, 3, 2) @ qh)
        da = self.q.backward(dq, c_q) + self.k.backward(dk, c_k) + self.v.backward(self._merge(dv), c_v)
        dx = dx2 + self.ln1.backward(da, c_ln1)
        return dx[:, :nv]


class ToyModel:
    def __init__(self, cfg: ModelConfig, vocab: Vocab | None = None):
        self.cfg = cfg
        self.vocab = vocab or Vocab()
        seed = cfg.seed
        self.grid = cfg.grid
        self.encoder = PatchEncoder(cfg, make_rng(seed, "encoder"))
        self.stack = None
        self.adaptive = None
        if cfg.mode == "local":
            fcfg = FusionConfig(d=cfg.d, radii=cfg.radii, ffn_mult=cfg.ffn_mult)
            self.stack = FusionStack(fcfg, make_rng(seed, "fusion"))
            self.tables = self.stack.tables(self.grid)
        elif cfg.mode == "adaptive":
            self.adaptive = AdaptiveAdd(self.grid.n)
        prng = make_rng(seed, "projection")
        self.proj = Linear(Param(core.xavier_uniform(prng, cfg.d, cfg.d_dec), name="projection.w"),
                           Param(np.zeros(cfg.d_dec), name="projection.b"))
        self.decoder = Decoder(cfg, len(self.vocab), make_rng(seed, "decoder"))

    # -- parameter bookkeeping

    def fusion_params(self) -> list[Param]:
        if self.stack is not None:
            return self.stack.params()
        if self.adaptive is not None:
            return self.adaptive.params()
        return []

    def param_groups(self) -> dict[str, list[Param]]:
        return {
            "fusion": self.fusion_params(),
            "projection": self.proj.params(),
            "adapters": [p for p in self.decoder.params() if p.trainable],
        }

    def params(self) -> list[Param]:
        return self.encoder.params() + self.fusion_params() + self.proj.params() + self.decoder.params()

    def named_params(self) -> dict[str, Param]:
        return {p.name: p for p in self.params()}

    def trainable(self) -> list[Param]:
        return [p for p in self.params() if p.trainable]

    # -- forward / backward

    @property
    def n_visual(self) -> int:
        return 2 * self.grid.n if self.cfg.mode == "concat" else self.grid.n

    def encode(self, img):
        return self.encoder(img)

    def fuse(self, z_rgb, z_ir):
        mode = self.cfg.mode
        if mode == "local":
            return self.stack.forward(z_rgb, z_ir, self.tables)
        if mode == "adaptive":
            return self.adaptive.forward(z_rgb, z_ir)
        if mode == "add":
            return z_rgb + z_ir, None
        if mode == "concat":
            return interleave(z_rgb, z_ir), None
        if mode == "rgb_only":
            return z_rgb, None
        return z_ir, None

    def fuse_backward(self, dvis, cache):
        mode = self.cfg.mode
        if mode == "local":
            self.stack.backward(dvis, cache)
        elif mode == "adaptive":
            self.adaptive.backward(dvis, cache)

    def forward(self, rgb, ir, text):
        z_rgb = self.encode(rgb)
        z_ir = self.encode(ir)
        fused, c_fuse = self.fuse(z_rgb, z_ir)
        vis, c_proj = self.proj.forward(fused)
        logits, c_dec = self.decoder.forward(vis, np.asarray(text))
        return logits, (c_fuse, c_proj, c_dec)

    def backward(self, dlogits, cache):
        c_fuse, c_proj, c_dec = cache
        dvis = self.decoder.backward(dlogits, c_dec)
        dfused = self.proj.backward(dvis, c_proj)
        self.fuse_backward(dfused, c_fuse)

    # -- state

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.params()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = self.named_params()
        missing = set(named) - set(state)
        extra = set(state) - set(named)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, value in state.items():
            if value.shape != named[name].shape:
                raise ValueError(f"{name}: checkpoint shape {value.shape} != model shape {named[name].shape}")
            named[name].value[...] = value
