import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phasefuse import tensor as T
from phasefuse.errors import ConfigError, ContractError, DataError
from phasefuse.model import ModelConfig
from phasefuse.tensor import Tensor
from phasefuse.training import (
    AugmentConfig, Dataset, Transform, TrainConfig, apply_transform, augment, augment_pair, bce_loss,
    cosine_warmup_lr, one_hot, resize, sgd_momentum_step, standardize, stratified_kfold, train,
)

TINY = ModelConfig(image_size=32, channels=(2, 2, 2, 2), fusion_scales=(1,), embed_dim=4, num_heads=1,
                   mlp_hidden=4, depth=1)


def tiny_dataset(n_per_class=4, size=32, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(3), n_per_class)
    cxr = rng.uniform(size=(labels.size, size, size))
    mf = rng.uniform(size=(labels.size, size, size, 3))
    return Dataset(cxr, mf, labels)


# ---------------------------------------------------------------------- loss

def test_bce_zero_logits_is_ln2():
    assert bce_loss(Tensor(np.zeros((4, 3))), one_hot([0, 1, 2, 0])).item() == pytest.approx(math.log(2), abs=1e-15)


def test_bce_hand_value():
    loss = bce_loss(Tensor(np.array([[1.0, 0.0, 0.0]])), one_hot([0])).item()
    expected = (math.log1p(math.exp(-1)) + 2 * math.log(2)) / 3
    assert loss == pytest.approx(expected, abs=1e-15)
    assert loss == pytest.approx(0.56652, abs=1e-5)


def test_bce_perfect_limit_and_extremes():
    z = np.array([[800.0, -800.0, -800.0]])
    assert bce_loss(Tensor(z), one_hot([0])).item() == 0.0
    assert np.isfinite(bce_loss(Tensor(-z), one_hot([0])).item())


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.integers(0, 2))
def test_bce_non_negative(z, label):
    assert bce_loss(Tensor(np.array([z])), one_hot([label])).item() >= 0


def test_bce_rejects_non_one_hot():
    with pytest.raises(ContractError):
        bce_loss(Tensor(np.zeros((1, 3))), np.array([[1.0, 1.0, 0.0]]))
    with pytest.raises(ContractError):
        bce_loss(Tensor(np.zeros((1, 3))), np.array([[0.5, 0.5, 0.0]]))


# ----------------------------------------------------------------- optimizer

def test_sgd_two_steps():
    p, v = {"w": np.array([1.0])}, {}
    p, v = sgd_momentum_step(p, {"w": np.array([1.0])}, v, 0.1, 0.9)
    assert (p["w"][0], v["w"][0]) == (0.9, 1.0)
    p, v = sgd_momentum_step(p, {"w": np.array([1.0])}, v, 0.1, 0.9)
    assert (p["w"][0], v["w"][0]) == (0.71, 1.9)


def test_sgd_zero_gradient_fixed_point():
    p = {"w": np.array([0.3, -2.0])}
    out, _ = sgd_momentum_step(p, {"w": np.zeros(2)}, {"w": np.zeros(2)}, 0.5, 0.9)
    np.testing.assert_array_equal(out["w"], p["w"])


# ------------------------------------------------------------------ schedule

def test_schedule_defaults():
    cfg = TrainConfig()
    lrs = [cosine_warmup_lr(e, cfg) for e in range(cfg.epochs)]
    assert lrs[:4] == [0.00025, 0.0005, 0.00075, 0.001]
    assert lrs[3] == lrs[4] == 0.001
    assert lrs[34] == pytest.approx(0.001 * 0.5 * (1 + math.cos(math.pi * 30 / 31)), rel=1e-15)
    assert lrs[34] == pytest.approx(2.56e-6, rel=1e-2)
    assert all(a >= b for a, b in zip(lrs[3:], lrs[4:]))


def test_schedule_range():
    with pytest.raises(ContractError):
        cosine_warmup_lr(35, TrainConfig())


@pytest.mark.parametrize("bad", [dict(warmup_epochs=35), dict(batch_size=0), dict(epochs=0), dict(folds=1)])
def test_train_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


# ---------------------------------------------------------------- augmentation

def test_augment_disabled_is_standardized_resize():
    img = np.random.default_rng(0).uniform(size=(40, 40))
    out = augment(img, np.random.default_rng(1), AugmentConfig(enabled=False), 32)
    np.testing.assert_array_equal(out, standardize(resize(img, 32)))


def test_flip_twice_is_identity():
    img = np.random.default_rng(0).uniform(size=(16, 16, 3))
    t = Transform(flip=True)
    np.testing.assert_array_equal(apply_transform(apply_transform(img, t), t), img)


def test_augment_seeded_determinism():
    img = np.random.default_rng(0).uniform(size=(32, 32))
    mf = np.random.default_rng(1).uniform(size=(32, 32, 3))
    a = augment_pair(img, mf, np.random.default_rng(7), AugmentConfig(), 32)
    b = augment_pair(img, mf, np.random.default_rng(7), AugmentConfig(), 32)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_pair_shares_geometry():
    # an identical image in both slots must come out identical when brightness is neutral
    img = np.random.default_rng(0).uniform(size=(32, 32))
    cfg = AugmentConfig(brightness_low=1.0, brightness_high=1.0)
    for seed in range(5):
        a, b = augment_pair(img, np.repeat(img[..., None], 3, -1), np.random.default_rng(seed), cfg, 32)
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_standardize_guards_constant():
    out = standardize(np.full((8, 8, 3), 0.4))
    assert np.all(np.isfinite(out)) and np.abs(out).max() < 1e-12


def test_augment_output_stats():
    img = np.random.default_rng(2).uniform(size=(32, 32))
    out = augment(img, np.random.default_rng(3), AugmentConfig(), 32)
    assert abs(out.mean()) < 1e-12 and abs(out.std() - 1) < 1e-12


# --------------------------------------------------------------------- folds

def test_kfold_balanced():
    folds = stratified_kfold(np.repeat(np.arange(3), 10), 5, 0)
    for c in range(3):
        assert np.bincount(folds[c * 10:(c + 1) * 10], minlength=5).tolist() == [2] * 5


def test_kfold_remainder():
    labels = np.array([0] * 11 + [1] * 5)
    folds = stratified_kfold(labels, 5, 3)
    assert sorted(np.bincount(folds[:11], minlength=5).tolist(), reverse=True) == [3, 2, 2, 2, 2]
    assert set(folds.tolist()) == set(range(5)) and np.all(folds >= 0)


def test_kfold_seeded_and_small_class():
    labels = np.repeat(np.arange(3), 7)
    np.testing.assert_array_equal(stratified_kfold(labels, 5, 1), stratified_kfold(labels, 5, 1))
    with pytest.raises(ConfigError, match="class 2"):
        stratified_kfold(np.array([0] * 5 + [1] * 5 + [2] * 4), 5, 0)


# ---------------------------------------------------------------------- loop

def test_zero_lr_freezes_parameters():
    from phasefuse.model import FusionModel
    data = tiny_dataset()
    cfg = TrainConfig(base_lr=0.0, epochs=1, warmup_epochs=0, batch_size=4, folds=2)
    res = train(cfg, data, TINY, fold=0)
    seeds = np.random.SeedSequence([cfg.seed, 0]).spawn(2)
    init = FusionModel.init(TINY, int(seeds[0].generate_state(1)[0])).params
    assert all(np.array_equal(init[k], res.model.params[k]) for k in init)
    assert res.history[0]["lr"] == 0.0


def test_training_is_deterministic():
    data = tiny_dataset()
    cfg = TrainConfig(epochs=2, warmup_epochs=1, batch_size=4, folds=2, seed=3)
    a, b = train(cfg, data, TINY, 1), train(cfg, data, TINY, 1)
    assert a.history == b.history
    assert all(np.array_equal(a.model.params[k], b.model.params[k]) for k in a.model.params)
    assert set(a.history[0]) == {"epoch", "lr", "train_loss", "val_acc", "val_auc_macro"}
    assert a.config["training"]["seed"] == 3 and a.config["fold"] == 1


def test_train_errors():
    data = tiny_dataset()
    with pytest.raises(DataError):
        train(TrainConfig(epochs=1, warmup_epochs=0), Dataset(data.cxr[:4], data.mf[:4], data.labels[:4]), TINY, None)
    with pytest.raises(ConfigError):
        train(TrainConfig(epochs=1, warmup_epochs=0, folds=2), data, TINY, fold=5)


def test_linear_toy_convex_descent():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(-2, 0.5, (20, 2)), rng.normal(2, 0.5, (20, 2))])
    y = one_hot(np.repeat([0, 1], 20), 2)
    params = {"w": np.zeros((2, 2)), "b": np.zeros(2)}
    velocity: dict = {}
    losses = []
    for _ in range(50):
        pt = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
        with T.Tape() as tape:
            loss = bce_loss(T.add(T.matmul(Tensor(x), pt["w"]), pt["b"]), y)
        T.backward(tape, loss)
        params, velocity = sgd_momentum_step(params, {k: t.grad for k, t in pt.items()}, velocity, 0.02, 0.9)
        losses.append(loss.item())
    assert all(a > b for a, b in zip(losses, losses[1:]))


# ------------------------------------------------------- data-dependent head init

@pytest.mark.parametrize("head", ["mid_conv", "late_sum"])
def test_head_init_standardizes_pooled_channels(head):
    from phasefuse.model import FusionModel
    arch = ModelConfig(image_size=32, channels=(2, 4, 4, 8), fusion_scales=(1,), head=head)
    model = FusionModel.init(arch, 0)
    rng = np.random.default_rng(1)
    batches = [(rng.normal(size=(6, 32, 32, 3)), rng.normal(size=(6, 32, 32, 3))) for _ in range(2)]
    model.init_head_from_data(batches)
    pooled = {k: np.concatenate([model.pooled_features(*b)[k] for b in batches]) for k in model.pooled_features(*batches[0])}
    assert pooled
    for k, v in pooled.items():
        out = T.layer_norm(Tensor(v), Tensor(model.params[k + ".g"]), Tensor(model.params[k + ".b"])).data
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.std(axis=0), 1.0, atol=1e-3)


def test_head_init_noop_for_cross_vit():
    from phasefuse.model import FusionModel
    model = FusionModel.init(TINY, 0)
    before = {k: v.copy() for k, v in model.params.items()}
    model.init_head_from_data([(np.ones((2, 32, 32, 3)), np.ones((2, 32, 32, 3)))])
    assert all(np.array_equal(before[k], v) for k, v in model.params.items())


def test_head_init_flag_and_determinism():
    data = tiny_dataset()
    cfg = TrainConfig(epochs=1, warmup_epochs=0, base_lr=0.0, folds=2)
    on = ModelConfig(image_size=32, channels=(2, 2, 2, 2), fusion_scales=(1,), head="late_sum")
    off = ModelConfig(image_size=32, channels=(2, 2, 2, 2), fusion_scales=(1,), head="late_sum", head_data_init=False)
    a, b = train(cfg, data, on, 0), train(cfg, data, on, 0)
    assert all(np.array_equal(a.model.params[k], b.model.params[k]) for k in a.model.params)
    assert not np.array_equal(a.model.params["head.cxr.ln.g"], np.ones(2))
    np.testing.assert_array_equal(train(cfg, data, off, 0).model.params["head.cxr.ln.g"], np.ones(2))
