"""Central finite-difference checks over every trainable parameter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from .core import make_rng
from .fusion import FusionConfig, FusionStack
from .grid import PatchGrid

TOLERANCE = 1e-4


@dataclass(frozen=True)
class GradResult:
    name: str
    rel_error: float
    tol: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.rel_error < self.tol


def _perturb(params, rng, scale):
    # zero-initialized output layers make every upstream gradient vanish; move off that point
    for p in params:
        p.value[...] = p.value + scale * rng.normal(size=p.shape)


def check_params(params, loss_and_grads, loss, tol: float = TOLERANCE, eps: float = 1e-5) -> list[GradResult]:
    """``loss_and_grads()`` fills ``p.grad``; ``loss()`` evaluates without side effects."""
    core.zero_grads(params)
    loss_and_grads()
    analytic = {p.name: p.grad.copy() for p in params}
    return [GradResult(p.name, core.rel_error(analytic[p.name], core.numeric_grad(loss, p.value, eps)), tol)
            for p in params]


def check_fusion_stack(grid: int = 4, d: int = 6, radii=(1.0, 2.0, 3.0), batch: int = 2, seed: int = 0,
                       tol: float = TOLERANCE) -> list[GradResult]:
    rng = make_rng(seed, "gradcheck")
    stack = FusionStack(FusionConfig(d=d, radii=radii), rng)
    _perturb(stack.params(), rng, 0.2)
    tables = stack.tables(PatchGrid(grid, grid))
    z = rng.normal(size=(batch, grid * grid, d))
    z_ir = rng.normal(size=(batch, grid * grid, d))
    up = rng.normal(size=z.shape)

    def loss_and_grads():
        _, caches = stack.forward(z, z_ir, tables)
        stack.backward(up, caches)

    def loss():
        return float(np.sum(stack.forward(z, z_ir, tables)[0] * up))

    return check_params(stack.params(), loss_and_grads, loss, tol)


def check_model(mode: str = "local", seed: int = 0, tol: float = TOLERANCE) -> list[GradResult]:
    """Next-token loss of a tiny toy model w.r.t. its fusion, projection and adapter weights."""
    from .harness.model import ModelConfig, ToyModel
    from .harness.scenes import SceneConfig, make_dataset
    from .harness.train import loss_and_backward

    data = make_dataset(seed, 2, SceneConfig(grid=2, cell=8), "gradcheck")
    model = ToyModel(ModelConfig(image=16, patch=8, d=8, d_dec=8, lora_rank=2, heads=2, mode=mode, seed=seed))
    _perturb(model.trainable(), make_rng(seed, "gradcheck"), 0.3)
    rgb = np.stack([e.rgb for e in data])
    ir = np.stack([e.ir for e in data])
    qas = [e.qa for e in data]
    return check_params(model.trainable(), lambda: loss_and_backward(model, rgb, ir, qas),
                        lambda: loss_and_backward(model, rgb, ir, qas, backward=False), tol)
