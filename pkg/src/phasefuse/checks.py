"""Finite-difference gradient checks for the fusion operators and full model."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .model import FusionModel, ModelConfig, cross_encoder_layer, pa_block
from .tensor import grad_check
from .training import bce_loss, one_hot

TOLERANCE = 1e-4


def _shift_invariant(name: str) -> bool:
    # a key bias adds one constant to a whole score row, which softmax removes:
    # its gradient is exactly zero and a finite difference only sees round-off
    return name.endswith(".attn.bk") or (name.startswith("pa") and name.split(".")[-1] in ("bk", "bk2"))


def _u(rng, *shape):
    return rng.uniform(-1.0, 1.0, shape)


def _probe(rng, shape):
    # fixed random weighting turns a tensor output into a scalar objective
    w = T.Tensor(_u(rng, *shape))
    return lambda y: T.sum_all(T.mul(y, w))


def op_checks(seed: int = 0, max_coords: int | None = None) -> dict[str, float]:
    """Max relative gradient error per operator on random inputs in [-1, 1]."""
    rng = np.random.default_rng(seed)
    out = {}

    c = 4
    f1, f2 = _u(rng, 2, 3, 3, c), _u(rng, 2, 3, 3, c)
    ws = [_u(rng, c, c) for _ in range(4)]
    probe_a, probe_b = _probe(rng, (2, 3, 3, c)), _probe(rng, (2, 3, 3, c))

    def pa(ts):
        a, b = pa_block(*ts)
        return T.add(probe_a(a), probe_b(b))
    out["pa_block"] = grad_check(pa, [f1, f2] + ws, max_coords=max_coords, rng=rng)

    probe = _probe(rng, (2, 3, 3, 5))
    out["conv1x1"] = grad_check(lambda ts: probe(T.conv1x1(ts[0], ts[1], ts[2])),
                                [_u(rng, 2, 3, 3, c), _u(rng, c, 5), _u(rng, 5)], max_coords=max_coords, rng=rng)

    probe = _probe(rng, (3, 6))
    out["softmax_rows"] = grad_check(lambda ts: probe(T.softmax_rows(ts[0], 1.7)), [_u(rng, 3, 6)],
                                     max_coords=max_coords, rng=rng)

    targets = one_hot(rng.integers(0, 3, 5), 3)
    out["bce_loss"] = grad_check(lambda ts: bce_loss(ts[0], targets), [_u(rng, 5, 3)],
                                 max_coords=max_coords, rng=rng)

    arch = ModelConfig(image_size=64, channels=(4, 8, 16, 32), embed_dim=8, num_heads=2, mlp_hidden=16, depth=1)
    p0 = {k: v + 0.1 * _u(rng, *v.shape) for k, v in FusionModel.init(arch, seed).params.items()
          if ".layer0." in k}
    names = sorted(k for k in p0 if not _shift_invariant(k))
    fixed = {k: T.Tensor(v) for k, v in p0.items() if _shift_invariant(k)}
    xs0 = {"cxr": _u(rng, 2, 5, 8), "enh": _u(rng, 2, 5, 8)}
    probe_a, probe_b = _probe(rng, (2, 5, 8)), _probe(rng, (2, 5, 8))

    def layer(ts):
        p = dict(zip(names, ts[2:]), **fixed)
        o = cross_encoder_layer({"cxr": ts[0], "enh": ts[1]}, p, 0, arch.num_heads)
        return T.add(probe_a(o["cxr"]), probe_b(o["enh"]))
    out["cross_attention_layer"] = grad_check(layer, [xs0["cxr"], xs0["enh"]] + [p0[k] for k in names],
                                              max_coords=max_coords, rng=rng)
    return out


def model_check(seed: int = 0, size: int = 64, channels=(4, 8, 16, 32), head: str = "cross_vit",
                batch: int = 2, max_coords: int | None = 3) -> float:
    """Max relative error of d(BCE)/d(params) for the dual-branch model.

    ``max_coords`` random coordinates of every parameter tensor are probed;
    ``None`` probes all of them (slow).  Attention key biases are held fixed
    since their exact gradient is zero.
    """
    rng = np.random.default_rng(seed)
    arch = ModelConfig(image_size=size, channels=tuple(channels), head=head)
    model = FusionModel.init(arch, seed)
    names = sorted(k for k in model.params if not _shift_invariant(k))
    fixed = {k: T.Tensor(v) for k, v in model.params.items() if _shift_invariant(k)}
    cxr, mf = rng.normal(size=(batch, size, size, 3)), rng.normal(size=(batch, size, size, 3))
    targets = one_hot(rng.integers(0, arch.num_classes, batch), arch.num_classes)

    def objective(ts):
        return bce_loss(model.forward(cxr, mf, dict(zip(names, ts), **fixed)), targets)
    return grad_check(objective, [model.params[k] for k in names], max_coords=max_coords, rng=rng)
