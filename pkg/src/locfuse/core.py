"""Dense float64 primitives with hand-written backward passes.

Every differentiable op comes as a ``forward`` returning ``(out, cache)`` and a
matching ``*_backward`` that consumes the cache. Ops accept leading batch axes;
weights are always 2D. Layer classes wrap the ops and accumulate into
:class:`Param` gradients (only for trainable params).
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
LN_EPS = 1e-5
GELU_C = math.sqrt(2.0 / math.pi)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class ShapeError(ValueError):
    pass


# --------------------------------------------------------------------------
# randomness


def make_rng(seed: int, stream: str | None = None) -> np.random.Generator:
    """PCG64 generator seeded from ``seed`` and an optional named stream.

    Named streams let independent components draw from disjoint sequences, so
    adding a component never shifts another component's initialization.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    if stream is not None:
        entropy.append(zlib.crc32(stream.encode("utf-8")))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    limit = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(DTYPE)


# --------------------------------------------------------------------------
# parameters


@dataclass(eq=False)
class Param:
    value: np.ndarray
    trainable: bool = True
    name: str = ""
    grad: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def accumulate(self, g: np.ndarray) -> None:
        if self.trainable:
            self.grad += g


def zero_grads(params: Iterable[Param]) -> None:
    for p in params:
        p.grad[...] = 0.0


def clip_grad_norm(params: Iterable[Param], max_norm: float) -> float:
    """Rescale grads in place to a joint L2 norm of at most ``max_norm``; returns the pre-clip norm."""
    params = list(params)
    norm = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params))
    if norm > max_norm:
        for p in params:
            p.grad *= max_norm / norm
    return norm


# --------------------------------------------------------------------------
# matmul


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner extents differ, A is {a.shape}, B is {b.shape}")
    return a @ b


def matmul_backward(dc: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    da = dc @ np.swapaxes(b, -1, -2)
    if b.ndim == 2 and a.ndim > 2:
        a2 = a.reshape(-1, a.shape[-1])
        db = a2.T @ dc.reshape(-1, dc.shape[-1])
    else:
        db = np.swapaxes(a, -1, -2) @ dc
    return da, db


# --------------------------------------------------------------------------
# softmax


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max subtraction.

    Rows that are entirely ``-inf`` come back as all zeros.
    """
    m = np.max(x, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = np.sum(e, axis=-1, keepdims=True)
    return np.divide(e, s, out=np.zeros_like(e), where=s > 0)


def softmax_rows_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return y * (dy - np.sum(dy * y, axis=-1, keepdims=True))


# --------------------------------------------------------------------------
# layer norm


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, (xhat, rstd, gain)


def layer_norm_backward(dy: np.ndarray, cache):
    xhat, rstd, gain = cache
    d = xhat.shape[-1]
    dgain = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    dbias = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gain
    dx = (rstd / d) * (
        d * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


# --------------------------------------------------------------------------
# activations, feed-forward


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + 0.044715 * x * x * x)))


def gelu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    x2 = x * x
    t = np.tanh(GELU_C * x * (1.0 + 0.044715 * x2))
    dinner = GELU_C * (1.0 + 3 * 0.044715 * x2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def ffn(x, w1, b1, w2, b2):
    h = matmul(x, w1) + b1
    a = gelu(h)
    return matmul(a, w2) + b2, (x, h, a, w1, w2)


def ffn_backward(dy, cache):
    x, h, a, w1, w2 = cache
    da, dw2 = matmul_backward(dy, a, w2)
    db2 = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dh = gelu_backward(da, h)
    dx, dw1 = matmul_backward(dh, x, w1)
    db1 = dh.reshape(-1, dh.shape[-1]).sum(axis=0)
    return dx, dw1, db1, dw2, db2


# --------------------------------------------------------------------------
# low-rank adapted linear


def lora_linear(x, w, a, b, scale: float):
    r = a.shape[1]
    if r > min(w.shape):
        raise ShapeError(f"adapter rank {r} exceeds min{w.shape}")
    if a.shape[0] != w.shape[0] or b.shape != (r, w.shape[1]):
        raise ShapeError(f"adapter shapes {a.shape}, {b.shape} do not fit weight {w.shape}")
    xa = matmul(x, a)
    return matmul(x, w) + scale * matmul(xa, b), (x, xa, w, a, b, scale)


def lora_linear_backward(dy, cache):
    """Returns ``(dx, dw, da, db)``; callers decide whether ``dw`` is used."""
    x, xa, w, a, b, scale = cache
    dx, dw = matmul_backward(dy, x, w)
    dxa, db = matmul_backward(dy * scale, xa, b)
    dx2, da = matmul_backward(dxa, x, a)
    return dx + dx2, dw, da, db


# --------------------------------------------------------------------------
# loss


def cross_entropy(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray | None = None):
    """Mean negative log-likelihood over unmasked positions.

    ``logits`` is ``(..., V)``, ``targets`` integer ids of shape ``(...)``.
    """
    targets = np.asarray(targets)
    v = logits.shape[-1]
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    live = targets[mask]
    if live.size and (live.min() < 0 or live.max() >= v):
        raise ValueError(f"target id out of range [0, {v})")
    safe = np.where(mask, targets, 0)
    m = logits.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(logits - m).sum(axis=-1))
    picked = np.take_along_axis(logits, safe[..., None], axis=-1)[..., 0]
    nll = lse - picked
    count = max(int(mask.sum()), 1)
    loss = float(np.sum(nll * mask) / count)
    return loss, (logits, safe, mask, count)


def cross_entropy_backward(cache, dloss: float = 1.0) -> np.ndarray:
    logits, safe, mask, count = cache
    p = softmax_rows(logits)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
    return (p - onehot) * (mask[..., None] * (dloss / count))


# --------------------------------------------------------------------------
# layers


class Linear:
    def __init__(self, w: Param, b: Param | None = None):
        self.w, self.b = w, b

    def params(self) -> list[Param]:
        return [self.w] + ([self.b] if self.b is not None else [])

    def forward(self, x):
        y = matmul(x, self.w.value)
        if self.b is not None:
            y = y + self.b.value
        return y, x

    def backward(self, dy, x):
        dx, dw = matmul_backward(dy, x, self.w.value)
        self.w.accumulate(dw)
        if self.b is not None:
            self.b.accumulate(dy.reshape(-1, dy.shape[-1]).sum(axis=0))
        return dx


class LayerNorm:
    def __init__(self, name: str, d: int, trainable: bool = True, eps: float = LN_EPS):
        self.gain = Param(np.ones(d), trainable, f"{name}.gain")
        self.bias = Param(np.zeros(d), trainable, f"{name}.bias")
        self.eps = eps

    def params(self) -> list[Param]:
        return [self.gain, self.bias]

    def forward(self, x):
        return layer_norm(x, self.gain.value, self.bias.value, self.eps)

    def backward(self, dy, cache):
        dx, dg, db = layer_norm_backward(dy, cache)
        self.gain.accumulate(dg)
        self.bias.accumulate(db)
        return dx


class FeedForward:
    """Two-layer GELU MLP ``d -> hidden -> d``."""

    def __init__(self, name, w1, b1, w2, b2, trainable=True):
        self.w1 = Param(w1, trainable, f"{name}.w1")
        self.b1 = Param(b1, trainable, f"{name}.b1")
        self.w2 = Param(w2, trainable, f"{name}.w2")
        self.b2 = Param(b2, trainable, f"{name}.b2")

    def params(self) -> list[Param]:
        return [self.w1, self.b1, self.w2, self.b2]

    def forward(self, x):
        return ffn(x, self.w1.value, self.b1.value, self.w2.value, self.b2.value)

    def backward(self, dy, cache):
        dx, dw1, db1, dw2, db2 = ffn_backward(dy, cache)
        for p, g in zip(self.params(), (dw1, db1, dw2, db2)):
            p.accumulate(g)
        return dx


class LoRALinear:
    """Frozen base weight plus a trainable rank-``r`` update ``scale * A @ B``.

    ``B`` starts at zero so the adapted layer initially equals the base layer.
    """

    def __init__(self, name: str, w: np.ndarray, rank: int, scale: float, rng: np.random.Generator):
        d_in, d_out = w.shape
        if rank > min(d_in, d_out):
            raise ShapeError(f"{name}: adapter rank {rank} exceeds min({d_in}, {d_out})")
        self.w = Param(w, False, f"{name}.w")
        self.a = Param(rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, rank)), True, f"{name}.lora_a")
        self.b = Param(np.zeros((rank, d_out)), True, f"{name}.lora_b")
        self.scale = scale

    def params(self) -> list[Param]:
        return [self.w, self.a, self.b]

    def forward(self, x):
        return lora_linear(x, self.w.value, self.a.value, self.b.value, self.scale)

    def backward(self, dy, cache):
        dx, dw, da, db = lora_linear_backward(dy, cache)
        self.w.accumulate(dw)
        self.a.accumulate(da)
        self.b.accumulate(db)
        return dx


# --------------------------------------------------------------------------
# optimization


@dataclass
class WarmupCosine:
    """Linear warm-up from 0 to 1, then cosine decay to 0 at ``total``.

    ``factor(0) == 0``: the first warm-up step applies no update.
    """

    warmup: int
    total: int

    def factor(self, step: int) -> float:
        if step < self.warmup:
            return step / self.warmup
        if step >= self.total:
            return 0.0
        span = max(self.total - self.warmup, 1)
        return 0.5 * (1.0 + math.cos(math.pi * (step - self.warmup) / span))


class AdamW:
    """Adam with decoupled weight decay (default 0) over named lr groups."""

    def __init__(self, groups: dict[str, Sequence[Param]], lr_map: dict[str, float],
                 schedule: WarmupCosine | None = None, betas=ADAM_BETAS, eps=ADAM_EPS,
                 weight_decay: float = 0.0):
        for key in groups:
            if key not in lr_map:
                raise ValueError(f"no learning rate for group {key!r}")
            if lr_map[key] < 0:
                raise ValueError(f"negative learning rate for group {key!r}")
        self.groups = {k: [p for p in ps if p.trainable] for k, ps in groups.items()}
        self.lr_map = dict(lr_map)
        self.schedule = schedule
        self.betas, self.eps, self.weight_decay = betas, eps, weight_decay
        self.m = {id(p): np.zeros_like(p.value) for ps in self.groups.values() for p in ps}
        self.v = {id(p): np.zeros_like(p.value) for ps in self.groups.values() for p in ps}

    def lr(self, group: str, step: int) -> float:
        f = self.schedule.factor(step) if self.schedule is not None else 1.0
        return self.lr_map[group] * f

    def step(self, step: int) -> None:
        b1, b2 = self.betas
        t = step + 1
        c1, c2 = 1.0 - b1**t, 1.0 - b2**t
        for key, ps in self.groups.items():
            lr = self.lr(key, step)
            for p in ps:
                m, v = self.m[id(p)], self.v[id(p)]
                m *= b1
                m += (1.0 - b1) * p.grad
                v *= b2
                v += (1.0 - b2) * p.grad * p.grad
                if self.weight_decay:
                    p.value -= lr * self.weight_decay * p.value
                p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --------------------------------------------------------------------------
# finite differences


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|a - n| / max(|a| + |n|, tiny)`` in the Frobenius norm."""
    num = float(np.linalg.norm(analytic - numeric))
    den = float(np.linalg.norm(analytic) + np.linalg.norm(numeric))
    return num / den if den > 1e-300 else 0.0
