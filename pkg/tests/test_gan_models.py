import numpy as np
import pytest
import torch

from ipgan.gan_models import (
    DomainDiscriminatorConfig,
    DomainLabel,
    GeneratorConfig,
    discriminator_from_params,
    domain_discriminator_forward,
    domain_discriminator_params,
    generator_forward,
    generator_from_params,
    generator_params,
    make_generator,
)
from ipgan.params import ModelParams

SMALL = dict(base_channels=8, num_residual_blocks=1)


@pytest.fixture(scope="module")
def gparams():
    return generator_params(GeneratorConfig(**SMALL), seed=3)


@pytest.fixture(scope="module")
def dparams():
    return domain_discriminator_params(DomainDiscriminatorConfig(base_channels=8), seed=3)


def images(n=2, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, (n, 32, 16, 3)).astype(np.float32)


def test_domain_label():
    c = DomainLabel(2, 5)
    np.testing.assert_array_equal(c.one_hot, [0, 0, 1, 0, 0])
    assert DomainLabel.from_one_hot(c.one_hot) == c
    with pytest.raises(ValueError):
        DomainLabel(5, 5)
    with pytest.raises(ValueError):
        DomainLabel.from_one_hot([1, 1, 0])


def test_generator_shape_and_range(gparams):
    out = generator_forward(gparams, images(3), DomainLabel(1, 5))
    assert out.shape == (3, 32, 16, 3)
    assert np.abs(out).max() <= 1
    single = generator_forward(gparams, images(1)[0], 4)
    assert single.shape == (32, 16, 3)


def test_generator_range_under_extreme_weights():
    g = make_generator(GeneratorConfig(**SMALL), 0)
    with torch.no_grad():
        for p in g.parameters():
            p.mul_(50)
    out = g(torch.randn(2, 3, 32, 16) * 10, torch.eye(5)[:2])
    assert out.abs().max() <= 1


def test_generator_deterministic(gparams):
    x = images()
    np.testing.assert_array_equal(generator_forward(gparams, x, 2), generator_forward(gparams, x, 2))


def test_conditioning_channels(gparams):
    g = generator_from_params(gparams)
    assert g.config.input_channels == 3 + 5
    first = next(m for m in g.modules() if isinstance(m, torch.nn.Conv2d))
    assert first.in_channels == 8


def test_generator_layout():
    g = make_generator(GeneratorConfig(base_channels=8, num_residual_blocks=6), 0)
    convs = [m for m in g.modules() if type(m) is torch.nn.Conv2d and m.stride == (2, 2)]
    tconvs = [m for m in g.modules() if isinstance(m, torch.nn.ConvTranspose2d)]
    assert len(convs) == 2 and len(tconvs) == 2
    assert sum(type(m).__name__ == "ResidualBlock" for m in g.modules()) == 6
    # the output layer is the only one without instance normalization
    norms = [m for m in g.modules() if isinstance(m, torch.nn.InstanceNorm2d)]
    assert len(norms) == 2 + 2 * 6 + 2


def test_generator_errors(gparams):
    with pytest.raises(ValueError):
        generator_forward(gparams, np.zeros((1, 16, 16, 3)), 1)
    with pytest.raises(ValueError, match="out of range"):
        generator_forward(gparams, images(1), 5)
    with pytest.raises(ValueError):
        generator_forward(gparams, images(1), DomainLabel(1, 7))
    with pytest.raises(ValueError):
        GeneratorConfig(image_height=30)


def test_same_seed_same_parameters():
    a = generator_params(GeneratorConfig(**SMALL), seed=11)
    b = generator_params(GeneratorConfig(**SMALL), seed=11)
    c = generator_params(GeneratorConfig(**SMALL), seed=12)
    assert a == b and a.to_bytes() == b.to_bytes()
    assert a != c


def test_distinct_domains_give_distinct_outputs(gparams):
    x = images(1)
    assert not np.array_equal(generator_forward(gparams, x, 1), generator_forward(gparams, x, 2))


def test_discriminator_heads(dparams):
    adv, dom = domain_discriminator_forward(dparams, images(4))
    assert adv.shape == (4, 4, 2)
    assert dom.shape == (4, 5)
    a1, d1 = domain_discriminator_forward(dparams, images(4))
    np.testing.assert_array_equal(adv, a1)
    np.testing.assert_array_equal(dom, d1)


def test_discriminator_patch_shape_and_slope():
    cfg = DomainDiscriminatorConfig(image_height=128, image_width=64, num_layers=6)
    assert cfg.patch_shape == (2, 1)
    d = discriminator_from_params(domain_discriminator_params(DomainDiscriminatorConfig(base_channels=4)))
    slopes = {m.negative_slope for m in d.modules() if isinstance(m, torch.nn.LeakyReLU)}
    assert slopes == {0.01}
    with pytest.raises(ValueError):
        DomainDiscriminatorConfig(image_height=36)


def test_params_round_trip(tmp_path, gparams, dparams):
    for p in (gparams, dparams):
        path = p.save(tmp_path / f"{p.kind}.params")
        loaded = ModelParams.load(path)
        assert loaded == p
        assert loaded.digest() == p.digest()
        assert path.read_bytes() == p.to_bytes()
    x = images()
    np.testing.assert_array_equal(
        generator_forward(ModelParams.load(tmp_path / "generator.params"), x, 3), generator_forward(gparams, x, 3)
    )


def test_params_kind_checked(gparams, dparams):
    with pytest.raises(ValueError):
        discriminator_from_params(gparams)
    with pytest.raises(ValueError):
        generator_from_params(dparams)
    with pytest.raises(ValueError):
        ModelParams("bogus", {}, {})
