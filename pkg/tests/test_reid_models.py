import numpy as np
import pytest
import torch

from ipgan.reid_models import (
    IBN_POSITIONS,
    ReIDConfig,
    instance_normalize,
    make_reid_net,
    reid_forward,
    reid_params,
    semantic_discriminator_forward,
)

TINY = dict(stage_channels=(4, 8, 8, 8), stem_channels=4, embedding_dim=32)


def images(n, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, (n, 32, 16, 3)).astype(np.float32)


def test_output_sizes():
    p = reid_params(ReIDConfig(num_classes=20, **TINY))
    emb, logits = reid_forward(p, images(3))
    assert emb.shape == (3, 32) and logits.shape == (3, 20)
    emb1, logits1 = reid_forward(p, images(1)[0])
    assert emb1.shape == (32,) and logits1.shape == (20,)


def test_default_embedding_is_1024():
    assert ReIDConfig().embedding_dim == 1024


def test_eval_mode_is_batch_independent():
    p = reid_params(ReIDConfig(num_classes=5, use_ibn=True, **TINY), seed=1)
    X = images(6)
    alone, _ = reid_forward(p, X[2:3])
    batch, _ = reid_forward(p, X)
    np.testing.assert_allclose(alone[0], batch[2], atol=1e-6)


def test_train_mode_needs_two():
    p = reid_params(ReIDConfig(num_classes=5, **TINY))
    with pytest.raises(ValueError):
        reid_forward(p, images(1), mode="train")
    with pytest.raises(ValueError):
        reid_forward(p, images(2), mode="predict")


def test_ibn_adds_exactly_three_affine_instance_norms():
    base = make_reid_net(ReIDConfig(num_classes=5, **TINY), 7)
    ibn = make_reid_net(ReIDConfig(num_classes=5, use_ibn=True, **TINY), 7)
    b, i = dict(base.named_parameters()), dict(ibn.named_parameters())
    extra = set(i) - set(b)
    assert set(b) <= set(i)
    assert {name.split(".")[1] for name in extra} == set(IBN_POSITIONS)
    assert len(extra) == 2 * 3  # weight and bias per layer
    for name in b:
        torch.testing.assert_close(b[name], i[name], rtol=0, atol=0)
    norms = [m for m in ibn.modules() if isinstance(m, torch.nn.InstanceNorm2d)]
    assert len(norms) == 3 and all(m.affine for m in norms)


def test_head_has_two_linear_layers():
    net = make_reid_net(ReIDConfig(num_classes=9, **TINY))
    linears = [m for m in net.modules() if isinstance(m, torch.nn.Linear)]
    assert [(m.in_features, m.out_features) for m in linears] == [(8, 32), (32, 9)]


def test_bottleneck_imagenet_variant_runs():
    cfg = ReIDConfig(num_classes=3, stage_channels=(8, 16, 16, 16), block="bottleneck", stem="imagenet", stem_channels=8, embedding_dim=16)
    emb, logits = reid_forward(reid_params(cfg), images(2))
    assert emb.shape == (2, 16) and logits.shape == (2, 3)


def test_config_validation():
    with pytest.raises(ValueError):
        ReIDConfig(block="dense")
    with pytest.raises(ValueError):
        ReIDConfig(stage_channels=(1, 2, 3))
    with pytest.raises(ValueError):
        ReIDConfig(feature_source="fc2")


def test_semantic_forward_is_eval_logits():
    p = reid_params(ReIDConfig(num_classes=4, **TINY), seed=2)
    X = images(3)
    np.testing.assert_array_equal(semantic_discriminator_forward(p, X), reid_forward(p, X, "eval")[1])


def test_same_seed_same_params():
    cfg = ReIDConfig(num_classes=4, **TINY)
    assert reid_params(cfg, 5).to_bytes() == reid_params(cfg, 5).to_bytes()


# numpy instance normalization


def test_instance_norm_constant_channel():
    np.testing.assert_array_equal(instance_normalize(np.full((1, 2, 3, 3), 3.0)), 0)


def test_instance_norm_two_values():
    x = np.array([-1.0, 1.0]).reshape(1, 1, 1, 2)
    np.testing.assert_allclose(instance_normalize(x, eps=1e-12), x, atol=1e-6)


def test_instance_norm_idempotent_on_normalized():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 5, 4))
    x = (x - x.mean(axis=(2, 3), keepdims=True)) / x.std(axis=(2, 3), keepdims=True)
    np.testing.assert_allclose(instance_normalize(x), x, atol=1e-3)


def test_instance_norm_matches_torch():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 6, 5)) * 4 + 2
    gain, bias = rng.normal(size=3), rng.normal(size=3)
    ref = torch.nn.functional.instance_norm(torch.from_numpy(x), weight=torch.from_numpy(gain), bias=torch.from_numpy(bias), eps=1e-5)
    np.testing.assert_allclose(instance_normalize(x, 1e-5, gain, bias), ref.numpy(), atol=1e-10)


def test_instance_norm_errors():
    with pytest.raises(ValueError):
        instance_normalize(np.zeros((1, 2, 2, 2)), eps=0)
    with pytest.raises(ValueError):
        instance_normalize(np.zeros((1, 2, 2, 2)), gain=np.ones(3))
