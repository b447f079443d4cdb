import math

import numpy as np
import pytest

from phasefuse import tensor as T
from phasefuse.errors import ConfigError, ShapeError
from phasefuse.model import (
    FusionModel, ModelConfig, backbone_forward, cross_vit_head, fuse_at_scale, late_fusion_head,
    mid_fusion_head, pa_block,
)
from phasefuse.tensor import Tensor

SMALL = dict(image_size=64, channels=(4, 8, 16, 32), embed_dim=16, num_heads=2, mlp_hidden=32)


def tensors(*arrays):
    return [Tensor(a) for a in arrays]


def naive_pa(f1, f2, wq, wk):
    h, w, c = f1.shape
    a, b = f1.reshape(-1, c), f2.reshape(-1, c)
    q, k = a @ wq, b @ wk
    out = np.zeros_like(a)
    for i in range(a.shape[0]):
        s = np.array([q[i] @ k[j] for j in range(a.shape[0])]) / math.sqrt(c)
        e = np.exp(s - s.max())
        out[i] = (e / e.sum()) @ b
    return out.reshape(h, w, c)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ------------------------------------------------------------------ pa_block

@pytest.mark.parametrize("shape", [(1, 1, 3), (2, 2, 8), (3, 5, 4), (8, 8, 8)])
def test_pa_block_matches_loops(rng, shape):
    c = shape[-1]
    f1, f2 = rng.uniform(-1, 1, shape), rng.uniform(-1, 1, shape)
    ws = [rng.uniform(-1, 1, (c, c)) for _ in range(4)]
    trace = []
    o1, o2 = pa_block(*tensors(f1, f2, *ws), trace=trace)
    np.testing.assert_allclose(o1.data, naive_pa(f1, f2, ws[0], ws[1]), atol=1e-12, rtol=0)
    np.testing.assert_allclose(o2.data, naive_pa(f2, f1, ws[2], ws[3]), atol=1e-12, rtol=0)
    for m in trace:
        assert np.abs(m.sum(axis=-1) - 1).max() <= 1e-12


def test_pa_single_pixel_copies_other_branch(rng):
    f1, f2 = rng.normal(size=(1, 1, 5)), rng.normal(size=(1, 1, 5))
    ws = [rng.normal(size=(5, 5)) for _ in range(4)]
    o1, o2 = pa_block(*tensors(f1, f2, *ws))
    np.testing.assert_array_equal(o1.data, f2)
    np.testing.assert_array_equal(o2.data, f1)


def test_pa_zero_enh_gives_uniform_attention_and_zero_output(rng):
    f1 = rng.normal(size=(3, 3, 4))
    ws = [rng.normal(size=(4, 4)) for _ in range(4)]
    trace = []
    o1, _ = pa_block(*tensors(f1, np.zeros((3, 3, 4)), *ws), trace=trace)
    np.testing.assert_allclose(trace[0], 1 / 9, atol=1e-15)
    np.testing.assert_array_equal(o1.data, 0.0)


def test_pa_shape_errors(rng):
    w = Tensor(np.eye(4))
    with pytest.raises(ShapeError):
        pa_block(Tensor(np.zeros((2, 2, 4))), Tensor(np.zeros((2, 3, 4))), w, w, w, w)
    with pytest.raises(ShapeError):
        pa_block(Tensor(np.zeros((2, 2, 3))), Tensor(np.zeros((2, 2, 3))), w, w, w, w)


# ------------------------------------------------------------ fuse_at_scale

def test_fuse_residual_identity_on_zero_maps(rng):
    z = np.zeros((1, 14, 14, 4))
    ws = tensors(*[rng.normal(size=(4, 4)) for _ in range(4)])
    a, b = fuse_at_scale(Tensor(z), Tensor(z), ws, 7)
    np.testing.assert_array_equal(a.data, z)
    np.testing.assert_array_equal(b.data, z)


def test_fuse_large_map_uses_pooled_attention(rng):
    f = rng.normal(size=(1, 56, 56, 4))
    ws = tensors(*[rng.normal(size=(4, 4)) for _ in range(4)])
    trace = []
    a, b = fuse_at_scale(Tensor(f), Tensor(f[..., ::-1].copy()), ws, 7, trace=trace)
    assert trace[0].shape == (1, 49, 49)
    assert a.shape == b.shape == (1, 56, 56, 4)


def test_fuse_constant_maps(rng):
    c1 = np.broadcast_to(rng.normal(size=4), (1, 28, 28, 4)).copy()
    c2 = np.broadcast_to(rng.normal(size=4), (1, 28, 28, 4)).copy()
    ws = tensors(*[rng.normal(size=(4, 4)) for _ in range(4)])
    a, b = fuse_at_scale(Tensor(c1), Tensor(c2), ws, 7)
    # uniform attention over identical tokens returns the other branch's vector
    np.testing.assert_allclose(a.data, c1 + c2, atol=1e-14)
    np.testing.assert_allclose(b.data, c2 + c1, atol=1e-14)


# ------------------------------------------------------------------ backbone

@pytest.mark.parametrize("size,expected", [(224, [56, 28, 14, 7]), (64, [16, 8, 4, 2])])
def test_pyramid_sizes(rng, size, expected):
    arch = ModelConfig(image_size=size)
    p = FusionModel.init(arch, 0).tensors()
    maps = backbone_forward(Tensor(rng.normal(size=(1, size, size, 3))), p, arch)
    assert [m.shape[1] for m in maps] == expected
    assert [m.shape[-1] for m in maps] == [16, 32, 64, 128]


def test_indivisible_input_rejected(rng):
    arch = ModelConfig(image_size=64)
    p = FusionModel.init(arch, 0).tensors()
    with pytest.raises(ShapeError):
        backbone_forward(Tensor(rng.normal(size=(1, 50, 50, 3))), p, arch)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(image_size=50)
    with pytest.raises(ConfigError):
        ModelConfig(head="transformer")
    with pytest.raises(ConfigError):
        ModelConfig(branches=1)  # default fusion scales need two branches
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"widths": [1]})


# --------------------------------------------------------------------- heads

def _maps(rng, n=2, h=2, c=32):
    return {"cxr": Tensor(rng.normal(size=(n, h, h, c))), "enh": Tensor(rng.normal(size=(n, h, h, c)))}


def test_cross_vit_zero_projection_gives_zero_logits(rng):
    model = FusionModel.init(ModelConfig(**SMALL), 0)
    p = model.tensors()
    for b in ("cxr", "enh"):
        p[f"head.{b}.out.w"] = Tensor(np.zeros_like(p[f"head.{b}.out.w"].data))
        p[f"head.{b}.out.b"] = Tensor(np.zeros(3))
    out = cross_vit_head(_maps(rng), p, model.arch)
    np.testing.assert_array_equal(out.data, 0.0)


def test_cross_vit_fifty_tokens(rng):
    arch = ModelConfig(image_size=224, channels=(4, 8, 16, 32), embed_dim=16, num_heads=2, mlp_hidden=32)
    model = FusionModel.init(arch, 0)
    assert model.params["head.cxr.pos"].shape == (50, 16)
    trace = []
    cross_vit_head(_maps(rng, 1, 7), model.tensors(), arch, trace)
    assert all(m.shape == (1, 2, 50, 50) for m in trace)


def test_cross_vit_branch_relabeling_symmetry(rng):
    model = FusionModel.init(ModelConfig(**SMALL), 0)
    p = model.tensors()
    swapped = {}
    for k, v in p.items():
        if k.startswith("head.cxr."):
            swapped["head.enh." + k[9:]] = v
        elif k.startswith("head.enh."):
            swapped["head.cxr." + k[9:]] = v
        else:
            swapped[k] = v
    maps = _maps(rng)
    a = cross_vit_head(maps, p, model.arch)
    b = cross_vit_head({"cxr": maps["enh"], "enh": maps["cxr"]}, swapped, model.arch)
    np.testing.assert_allclose(a.data, b.data, atol=1e-13)


def test_late_sum_decomposes(rng):
    arch = ModelConfig(**dict(SMALL, head="late_sum"))
    p = FusionModel.init(arch, 0).tensors()
    maps = _maps(rng)
    p["head.enh.out.w"] = Tensor(np.zeros_like(p["head.enh.out.w"].data))
    p["head.enh.out.b"] = Tensor(np.zeros(3))
    only_cxr = late_fusion_head({"cxr": maps["cxr"]}, p, arch)
    np.testing.assert_allclose(late_fusion_head(maps, p, arch).data, only_cxr.data, atol=1e-15)


def test_late_sum_identical_branches_doubles(rng):
    arch = ModelConfig(**dict(SMALL, head="late_sum"))
    p = FusionModel.init(arch, 0).tensors()
    for k in list(p):
        if k.startswith("head.enh."):
            p[k] = p["head.cxr." + k[9:]]
    f = Tensor(rng.normal(size=(2, 2, 2, 32)))
    single = late_fusion_head({"cxr": f}, p, arch)
    np.testing.assert_allclose(late_fusion_head({"cxr": f, "enh": f}, p, arch).data, 2 * single.data, atol=1e-14)


@pytest.mark.parametrize("head", ["cross_vit", "mid_conv", "late_sum"])
def test_heads_interchangeable(rng, head):
    arch = ModelConfig(**dict(SMALL, head=head))
    model = FusionModel.init(arch, 0)
    out = model(rng.normal(size=(3, 64, 64, 3)), rng.normal(size=(3, 64, 64, 3)))
    assert out.shape == (3, 3)


def test_mid_conv_shape_mismatch(rng):
    arch = ModelConfig(**dict(SMALL, head="mid_conv"))
    p = FusionModel.init(arch, 0).tensors()
    with pytest.raises(ShapeError):
        mid_fusion_head({"cxr": Tensor(np.zeros((1, 2, 2, 32))), "enh": Tensor(np.zeros((1, 3, 3, 32)))}, p, arch)


# -------------------------------------------------------------- full model

def test_no_fusion_means_independent_backbones(rng):
    arch = ModelConfig(**dict(SMALL, fusion_scales=()))
    model = FusionModel.init(arch, 0)
    x, y = rng.normal(size=(1, 64, 64, 3)), rng.normal(size=(1, 64, 64, 3))
    trace, trace2 = {}, {}
    model(x, y, trace=trace)
    model(x, rng.normal(size=(1, 64, 64, 3)), trace=trace2)
    for i in range(4):
        np.testing.assert_array_equal(trace["stages"][("cxr", i)].data, trace2["stages"][("cxr", i)].data)


def test_every_parameter_receives_gradient(rng):
    model = FusionModel.init(ModelConfig(**SMALL), 0)
    p = model.tensors(requires_grad=True)
    with T.Tape() as tape:
        out = T.sum_all(T.mul(model(rng.normal(size=(2, 64, 64, 3)), rng.normal(size=(2, 64, 64, 3)), p),
                              Tensor(rng.normal(size=(2, 3)))))
    T.backward(tape, out)
    for name, t in p.items():
        if name.endswith(".attn.bk"):
            # softmax cancels a per-row constant: the exact gradient is zero
            assert np.abs(t.grad).max() < 1e-12, name
        else:
            assert np.abs(t.grad).max() > 0, name


def test_attention_rows_stochastic_in_model(rng):
    model = FusionModel.init(ModelConfig(**SMALL), 1)
    trace = {}
    model(rng.normal(size=(2, 64, 64, 3)), rng.normal(size=(2, 64, 64, 3)), trace=trace)
    # two directions at each of 3 PA scales, then 2 encoder layers x 2 branches
    assert len(trace["attention"]) == 3 * 2 + 2 * 2
    for m in trace["attention"]:
        assert np.abs(m.sum(axis=-1) - 1).max() <= 1e-12


def test_init_modes():
    he = FusionModel.init(ModelConfig(**SMALL), 0).params
    uni = FusionModel.init(ModelConfig(**dict(SMALL, init="uniform")), 0).params
    w = uni["cxr.stage1.w"]
    assert np.abs(w).max() <= 1 / math.sqrt(3 * 3 * 4)
    assert np.abs(he["cxr.stage1.w"]).max() <= math.sqrt(6 / (3 * 3 * 4))
    assert np.all(he["cxr.stage1.b"] == 0)


def test_seeded_init_is_deterministic():
    a = FusionModel.init(ModelConfig(**SMALL), 5).params
    b = FusionModel.init(ModelConfig(**SMALL), 5).params
    assert all(np.array_equal(a[k], b[k]) for k in a)
