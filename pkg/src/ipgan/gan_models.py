"""Conditional generator G(x, c) and the two-headed domain discriminator."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from ._torch import images_to_tensor, seeded, tensor_to_images
from ._validation import check_images
from .params import ModelParams


@dataclass(frozen=True)
class DomainLabel:
    """One of the L+1 domains: 0 is the source, 1..L are target cameras."""

    index: int
    num_domains: int

    def __post_init__(self):
        if self.num_domains < 2:
            raise ValueError("need at least two domains")
        if not 0 <= self.index < self.num_domains:
            raise ValueError(f"domain index {self.index} out of range [0, {self.num_domains - 1}]")

    @property
    def one_hot(self):
        v = np.zeros(self.num_domains, dtype=np.float32)
        v[self.index] = 1.0
        return v

    @classmethod
    def from_one_hot(cls, vec):
        vec = np.asarray(vec)
        if vec.ndim != 1 or np.count_nonzero(vec) != 1 or vec.max() != 1:
            raise ValueError("one_hot must have exactly one entry equal to 1")
        return cls(int(np.argmax(vec)), len(vec))


@dataclass(frozen=True)
class GeneratorConfig:
    image_height: int = 32
    image_width: int = 16
    image_channels: int = 3
    num_domains: int = 5
    base_channels: int = 32
    num_residual_blocks: int = 3

    def __post_init__(self):
        if self.image_height % 4 or self.image_width % 4:
            raise ValueError("generator needs image sides divisible by 4")
        if self.num_domains < 2 or self.base_channels < 1 or self.num_residual_blocks < 0:
            raise ValueError("invalid generator config")

    @property
    def input_channels(self):
        return self.image_channels + self.num_domains


@dataclass(frozen=True)
class DomainDiscriminatorConfig:
    image_height: int = 32
    image_width: int = 16
    image_channels: int = 3
    num_domains: int = 5
    base_channels: int = 32
    num_layers: int = 3
    leaky_slope: float = 0.01

    def __post_init__(self):
        f = 2**self.num_layers
        if self.num_layers < 1 or self.image_height % f or self.image_width % f:
            raise ValueError(f"discriminator with {self.num_layers} stride-2 layers needs sides divisible by {f}")

    @property
    def patch_shape(self):
        f = 2**self.num_layers
        return (self.image_height // f, self.image_width // f)


def _in(c):
    return nn.InstanceNorm2d(c, affine=True, track_running_stats=False)


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 1, 1, bias=False),
            _in(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, 1, 1, bias=False),
            _in(channels),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Two stride-2 convs, residual blocks, two transposed convs, tanh output conv.

    Every layer but the output conv is instance-normalized. The domain one-hot
    is tiled over the image and concatenated as extra input channels.
    """

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        layers = [
            nn.Conv2d(config.input_channels, c, 4, 2, 1, bias=False),
            _in(c),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, 2 * c, 4, 2, 1, bias=False),
            _in(2 * c),
            nn.ReLU(inplace=True),
        ]
        layers += [ResidualBlock(2 * c) for _ in range(config.num_residual_blocks)]
        layers += [
            nn.ConvTranspose2d(2 * c, c, 4, 2, 1, bias=False),
            _in(c),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(c, c, 4, 2, 1, bias=False),
            _in(c),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, config.image_channels, 7, 1, 3, bias=False),
            nn.Tanh(),
        ]
        self.main = nn.Sequential(*layers)

    def forward(self, x, c_onehot):
        c = c_onehot.view(c_onehot.size(0), c_onehot.size(1), 1, 1).expand(-1, -1, x.size(2), x.size(3))
        return self.main(torch.cat([x, c.to(x.dtype)], dim=1))


class DomainDiscriminator(nn.Module):
    """PatchGAN trunk with a real/fake patch head and an (L+1)-way domain head.

    Both heads return raw logits.
    """

    def __init__(self, config: DomainDiscriminatorConfig):
        super().__init__()
        self.config = config
        layers, ch_in, ch = [], config.image_channels, config.base_channels
        for _ in range(config.num_layers):
            layers += [nn.Conv2d(ch_in, ch, 4, 2, 1), nn.LeakyReLU(config.leaky_slope)]
            ch_in, ch = ch, ch * 2
        self.main = nn.Sequential(*layers)
        self.adv_head = nn.Conv2d(ch_in, 1, 3, 1, 1, bias=False)
        self.domain_head = nn.Conv2d(ch_in, config.num_domains, config.patch_shape, bias=False)

    def forward(self, x):
        h = self.main(x)
        return self.adv_head(h).squeeze(1), self.domain_head(h).flatten(1)


def make_generator(config, seed=0):
    with seeded(seed):
        return Generator(config)


def make_domain_discriminator(config, seed=0):
    with seeded(seed):
        return DomainDiscriminator(config)


def generator_from_params(params: ModelParams):
    if params.kind != "generator":
        raise ValueError(f"expected generator params, got {params.kind!r}")
    g = Generator(GeneratorConfig(**params.config))
    g.load_state_dict(params.state_dict())
    return g.eval()


def discriminator_from_params(params: ModelParams):
    if params.kind != "domain_discriminator":
        raise ValueError(f"expected domain_discriminator params, got {params.kind!r}")
    d = DomainDiscriminator(DomainDiscriminatorConfig(**params.config))
    d.load_state_dict(params.state_dict())
    return d.eval()


def generator_params(config, seed=0):
    return ModelParams.from_module("generator", asdict(config), make_generator(config, seed))


def domain_discriminator_params(config, seed=0):
    return ModelParams.from_module("domain_discriminator", asdict(config), make_domain_discriminator(config, seed))


def _domain_indices(c, n, num_domains):
    if isinstance(c, DomainLabel):
        if c.num_domains != num_domains:
            raise ValueError(f"label has {c.num_domains} domains, generator has {num_domains}")
        idx = np.full(n, c.index)
    else:
        idx = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
    if idx.min() < 0 or idx.max() >= num_domains:
        raise ValueError(f"domain index out of range [0, {num_domains - 1}]")
    return torch.from_numpy(np.array(idx))


def translate_batch(generator, X, c, batch_size=64):
    """Run a generator module over an NHWC batch toward domain(s) ``c``."""
    cfg = generator.config
    n = len(X)
    idx = _domain_indices(c, n, cfg.num_domains)
    out = np.empty_like(X, dtype=np.float32)
    with torch.no_grad():
        for s in range(0, n, batch_size):
            xb = images_to_tensor(X[s : s + batch_size])
            cb = nn.functional.one_hot(idx[s : s + batch_size], cfg.num_domains).float()
            out[s : s + batch_size] = tensor_to_images(generator(xb, cb))
    return out


def generator_forward(params, x, c):
    """G(x, c) for one HWC image or an NHWC batch; output has the input's layout."""
    g = generator_from_params(params)
    cfg = g.config
    single = np.asarray(x).ndim == 3
    X = check_images(x, (cfg.image_height, cfg.image_width, cfg.image_channels))
    out = translate_batch(g, X, c)
    return out[0] if single else out


def domain_discriminator_forward(params, x):
    """Return (adv_map, domain_logits) as raw scores; single images drop the batch axis."""
    d = discriminator_from_params(params)
    cfg = d.config
    single = np.asarray(x).ndim == 3
    X = check_images(x, (cfg.image_height, cfg.image_width, cfg.image_channels))
    with torch.no_grad():
        adv, dom = d(images_to_tensor(X))
    adv, dom = adv.numpy(), dom.numpy()
    return (adv[0], dom[0]) if single else (adv, dom)
