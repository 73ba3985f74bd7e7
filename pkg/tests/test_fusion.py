import numpy as np
import pytest

from locfuse import core
from locfuse.accounting import (FULL_PRESET, attention_cost, attention_flops, block_params,
                                count_params, fusion_flops, full_scale_report)
from locfuse.fusion import (AdaptiveAdd, FusionConfig, FusionStack, LocalXAttnBlock,
                            block_forward, fuse_baseline, local_xattn, local_xattn_branch,
                            local_xattn_branch_backward, stack_forward)
from locfuse.grid import PatchGrid, build_neighborhood

from oracles import brute_mask, dense_block, masked_dense_xattn


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def weights(rng, d):
    return [rng.normal(size=(d, d)) / np.sqrt(d) for _ in range(4)]


def randomize(params, rng, scale=0.3):
    for p in params:
        p.value[...] = p.value + scale * rng.normal(size=p.shape)


# -- local cross-attention


def test_zero_values_pass_through(rng):
    g = PatchGrid(4, 4)
    zq = rng.normal(size=(16, 8))
    out = local_xattn(zq, np.zeros((16, 8)), build_neighborhood(g, g, 2), *weights(rng, 8))
    np.testing.assert_array_equal(out, zq)


@pytest.mark.parametrize("shape", [(3, 3), (4, 6), (8, 8)])
@pytest.mark.parametrize("r", [0.5, 1, 2, 3, "diam"])
def test_masked_dense_equivalence(rng, shape, r):
    g = PatchGrid(*shape)
    r = g.diameter if r == "diam" else r
    zq, zkv = rng.normal(size=(g.n, 12)), rng.normal(size=(g.n, 12))
    w = weights(rng, 12)
    out = local_xattn(zq, zkv, build_neighborhood(g, g, r), *w)
    ref = masked_dense_xattn(zq, zkv, brute_mask(g, g, r), *w)
    assert np.max(np.abs(out - ref)) < 1e-10


def test_cross_resolution_equivalence(rng):
    q, k = PatchGrid(6, 6), PatchGrid(3, 3)
    zq, zkv = rng.normal(size=(36, 8)), rng.normal(size=(9, 8))
    w = weights(rng, 8)
    out = local_xattn(zq, zkv, build_neighborhood(q, k, 1), *w)
    ref = masked_dense_xattn(zq, zkv, brute_mask(q, k, 1), *w)
    assert np.max(np.abs(out - ref)) < 1e-10


def test_radius_saturation_bit_identical(rng):
    g = PatchGrid(5, 5)
    zq, zkv = rng.normal(size=(25, 8)), rng.normal(size=(25, 8))
    w = weights(rng, 8)
    a = local_xattn(zq, zkv, build_neighborhood(g, g, g.diameter), *w)
    b = local_xattn(zq, zkv, build_neighborhood(g, g, 10 * g.diameter), *w)
    np.testing.assert_array_equal(a, b)


def test_global_radius_matches_unmasked_dense(rng):
    g = PatchGrid(4, 4)
    zq, zkv = rng.normal(size=(16, 8)), rng.normal(size=(16, 8))
    w = weights(rng, 8)
    out = local_xattn(zq, zkv, build_neighborhood(g, g, g.diameter), *w)
    ref = masked_dense_xattn(zq, zkv, np.ones((16, 16), dtype=bool), *w)
    assert np.max(np.abs(out - ref)) < 1e-10


def test_permutation_outside_neighborhood(rng):
    g = PatchGrid(6, 6)
    t = build_neighborhood(g, g, 1)
    zq, zkv = rng.normal(size=(36, 8)), rng.normal(size=(36, 8))
    w = weights(rng, 8)
    u = g.index((2, 2))
    outside = [v for v in range(36) if v not in t.neighbors[u]]
    perm = np.arange(36)
    perm[outside] = rng.permutation(outside)
    a = local_xattn(zq, zkv, t, *w)[u]
    b = local_xattn(zq, zkv[perm], t, *w)[u]
    np.testing.assert_array_equal(a, b)


def test_radius_zero_attends_to_mapped_cell(rng):
    q, k = PatchGrid(1, 1), PatchGrid(3, 3)
    t = build_neighborhood(q, k, 0.0)
    assert t.neighbors == ((4,),)
    zq, zkv = rng.normal(size=(1, 4)), rng.normal(size=(9, 4))
    wq, wk, wv, wo = weights(rng, 4)
    np.testing.assert_allclose(local_xattn(zq, zkv, t, wq, wk, wv, wo), zq + zkv[4] @ wv @ wo,
                               rtol=0, atol=1e-12)


def test_grid_table_mismatch(rng):
    g = PatchGrid(4, 4)
    with pytest.raises(ValueError, match="do not match"):
        local_xattn(np.zeros((9, 4)), np.zeros((16, 4)), build_neighborhood(g, g, 1), *weights(rng, 4))


def test_branch_grads_batched(rng):
    g = PatchGrid(3, 4)
    t = build_neighborhood(g, g, 1.5)
    zq, zkv = rng.normal(size=(2, 12, 6)), rng.normal(size=(2, 12, 6))
    w = weights(rng, 6)
    up = rng.normal(size=(2, 12, 6))
    _, cache = local_xattn_branch(zq, zkv, t, *w)
    grads = local_xattn_branch_backward(up, cache)
    f = lambda: float(np.sum(local_xattn_branch(zq, zkv, t, *w)[0] * up))
    for x, gr in zip([zq, zkv, *w], grads):
        assert core.rel_error(gr, core.numeric_grad(f, x)) < 1e-7


# -- blocks


def block_grads_ok(block, z, z_ir, table, rng, tol=1e-4):
    up = rng.normal(size=z.shape)
    core.zero_grads(block.params())
    out, cache = block.forward(z, z_ir, table)
    dz, dzir = block.backward(up, cache)
    f = lambda: float(np.sum(block.forward(z, z_ir, table)[0] * up))
    errs = {p.name: core.rel_error(p.grad, core.numeric_grad(f, p.value)) for p in block.params()}
    errs["z"] = core.rel_error(dz, core.numeric_grad(f, z))
    errs["z_ir"] = core.rel_error(dzir, core.numeric_grad(f, z_ir))
    return errs


def test_block_identity_at_init(rng):
    cfg = FusionConfig(d=8, radii=(1,))
    block = LocalXAttnBlock("b", cfg, 1, rng)
    g = PatchGrid(4, 4)
    z = rng.normal(size=(16, 8))
    out = block_forward(z, rng.normal(size=(16, 8)), build_neighborhood(g, g, 1), block)
    np.testing.assert_array_equal(out, z)


def test_block_matches_reference(rng):
    cfg = FusionConfig(d=8, radii=(2,), zero_init=False)
    block = LocalXAttnBlock("b", cfg, 2, rng)
    randomize(block.params(), rng)
    g = PatchGrid(4, 4)
    z, zir = rng.normal(size=(16, 8)), rng.normal(size=(16, 8))
    p = {n.split(".", 1)[1]: q.value for n, q in ((q.name, q) for q in block.params())}
    out = block_forward(z, zir, build_neighborhood(g, g, 2), block)
    ref = dense_block(z, zir, brute_mask(g, g, 2), p)
    assert np.max(np.abs(out - ref)) < 1e-10


def test_block_gradients(rng):
    cfg = FusionConfig(d=8, radii=(1,), zero_init=False)
    block = LocalXAttnBlock("b", cfg, 1, rng)
    randomize(block.params(), rng)
    g = PatchGrid(4, 4)
    errs = block_grads_ok(block, rng.normal(size=(16, 8)), rng.normal(size=(16, 8)),
                          build_neighborhood(g, g, 1), rng)
    assert max(errs.values()) < 1e-4, errs


def test_block_radius_mismatch(rng):
    block = LocalXAttnBlock("b", FusionConfig(d=4, radii=(1,)), 1, rng)
    g = PatchGrid(2, 2)
    with pytest.raises(ValueError, match="radius"):
        block.forward(np.zeros((4, 4)), np.zeros((4, 4)), build_neighborhood(g, g, 2))


# -- stack


def test_stack_empty_and_identity(rng):
    g = PatchGrid(4, 4)
    z, zir = rng.normal(size=(16, 8)), rng.normal(size=(16, 8))
    empty = FusionStack(FusionConfig(d=8, radii=()), rng)
    np.testing.assert_array_equal(stack_forward(z, zir, empty, []), z)
    stack = FusionStack(FusionConfig(d=8), rng)
    np.testing.assert_array_equal(stack_forward(z, zir, stack, stack.tables(g)), z)
    with pytest.raises(ValueError, match="tables"):
        stack.forward(z, zir, stack.tables(g)[:2])


def test_stack_uses_raw_ir_each_layer(rng):
    g = PatchGrid(3, 3)
    stack = FusionStack(FusionConfig(d=4, zero_init=False), rng)
    z, zir = rng.normal(size=(9, 4)), rng.normal(size=(9, 4))
    tables = stack.tables(g)
    x = z
    for b, t in zip(stack.blocks, tables):
        x = block_forward(x, zir, t, b)
    np.testing.assert_array_equal(stack_forward(z, zir, stack, tables), x)


def test_stack_gradients(rng):
    g = PatchGrid(4, 4)
    stack = FusionStack(FusionConfig(d=6, zero_init=False), rng)
    randomize(stack.params(), rng, 0.2)
    z, zir = rng.normal(size=(2, 16, 6)), rng.normal(size=(2, 16, 6))
    tables = stack.tables(g)
    up = rng.normal(size=z.shape)
    core.zero_grads(stack.params())
    _, caches = stack.forward(z, zir, tables)
    stack.backward(up, caches)
    f = lambda: float(np.sum(stack.forward(z, zir, tables)[0] * up))
    for p in stack.params():
        assert core.rel_error(p.grad, core.numeric_grad(f, p.value)) < 1e-4, p.name


def test_radii_must_be_non_decreasing():
    with pytest.raises(ValueError, match="non-decreasing"):
        FusionConfig(d=4, radii=(2, 1))


# -- baselines


def test_baselines(rng):
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    np.testing.assert_array_equal(fuse_baseline(a, np.zeros_like(a), "add"), a)
    np.testing.assert_allclose(fuse_baseline(a, b, "adaptive", np.zeros(5)), (a + b) / 2)
    cat = fuse_baseline(a, b, "concat")
    assert cat.shape == (10, 3)
    np.testing.assert_array_equal(cat[0::2], a)
    np.testing.assert_array_equal(cat[1::2], b)
    with pytest.raises(ValueError, match="unknown"):
        fuse_baseline(a, b, "multiply")


def test_adaptive_grads(rng):
    layer = AdaptiveAdd(5)
    layer.w.value[...] = rng.normal(size=5)
    a, b = rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 5, 3))
    up = rng.normal(size=(2, 5, 3))
    out, cache = layer.forward(a, b)
    da, db = layer.backward(up, cache)
    f = lambda: float(np.sum(layer.forward(a, b)[0] * up))
    assert core.rel_error(layer.w.grad, core.numeric_grad(f, layer.w.value)) < 1e-7
    assert core.rel_error(da, core.numeric_grad(f, a)) < 1e-7


# -- accounting


def test_count_params_matches_enumeration(rng):
    for cfg in [FusionConfig(d=8, radii=(1,)), FusionConfig(d=6, d_k=4, d_v=3, radii=(1, 2)),
                FusionConfig(d=5, ffn_mult=2)]:
        stack = FusionStack(cfg, rng)
        assert count_params(cfg) == sum(p.size for p in stack.params())
    assert count_params(FusionConfig(d=8, radii=(1,))) == 840
    assert count_params(FusionConfig(d=8, radii=())) == 0


def test_full_scale_params():
    params, report = full_scale_report()
    assert 0.035e9 <= params <= 0.065e9
    assert report.ratio == 4.0
    assert report.overhead_fraction < 0.01


def test_ratio_independent_of_text():
    cfg = FusionConfig(d=16)
    assert attention_flops(cfg, 36, 0, 2, 64).ratio == 4.0
    r = attention_flops(cfg, 36, 0, 2, 64)
    assert r.concat_path == 4 * r.fused_path


def test_global_window_cost():
    cfg = FusionConfig(d=8, radii=(1.0,))
    g = PatchGrid(4, 4)
    pairs = int(build_neighborhood(g, g, 1).counts().sum())
    extra = (g.n * g.n - pairs) * (2 * cfg.d_k + 2 * cfg.d_v)
    assert fusion_flops(cfg, g, global_window=True) - fusion_flops(cfg, g) == extra
    saturated = FusionConfig(d=8, radii=(g.diameter,))
    assert fusion_flops(saturated, g) == fusion_flops(cfg, g, global_window=True)


def test_flops_brute_force_small():
    cfg = FusionConfig(d=4, radii=(1.0,), ffn_mult=2)
    g = PatchGrid(2, 2)
    # each query sees itself + 2 edge neighbours on a 2x2 grid: 12 pairs
    attn = 12 * (2 * 4 + 2 * 4)
    dense = 4 * (2 * 4 * 4) * 4 + 4 * (2 * 4 * 8) * 2
    assert fusion_flops(cfg, g) == attn + dense
    assert attention_cost(3, 5) == 2 * 3 * 5 * 3 * 2


def test_block_params_formula():
    cfg = FusionConfig(d=1024)
    assert block_params(cfg) == 4 * 1024**2 + 4 * 1024 + 2 * 1024 * 4096 + 4096 + 1024
    assert FULL_PRESET["image"] // FULL_PRESET["patch"] == 24
