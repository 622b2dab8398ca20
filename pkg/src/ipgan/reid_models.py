"""Identity classifiers: the IDE-style baseline (also the frozen semantic
discriminator) and the IBN variant with three instance-norm layers."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from ._torch import images_to_tensor, seeded
from ._validation import check_images
from .params import ModelParams

IBN_POSITIONS = ("conv1", "conv2_x", "conv3_x")


@dataclass(frozen=True)
class ReIDConfig:
    image_height: int = 32
    image_width: int = 16
    image_channels: int = 3
    num_classes: int = 20
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: tuple = (1, 1, 1, 1)
    block: str = "basic"
    stem: str = "compact"
    stem_channels: int = 16
    embedding_dim: int = 1024
    use_ibn: bool = False
    feature_source: str = "embedding"

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ValueError("backbone has exactly four stages")
        if self.block not in ("basic", "bottleneck"):
            raise ValueError(f"unknown block type {self.block!r}")
        if self.stem not in ("compact", "imagenet"):
            raise ValueError(f"unknown stem {self.stem!r}")
        if self.feature_source not in ("embedding", "backbone_pool"):
            raise ValueError(f"unknown feature_source {self.feature_source!r}")
        if self.num_classes < 1 or self.embedding_dim < 1:
            raise ValueError("num_classes and embedding_dim must be positive")


class BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), nn.BatchNorm2d(c_out))
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return self.relu(out + skip)


class Bottleneck(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        mid = max(c_out // 4, 1)
        self.conv1 = nn.Conv2d(c_in, mid, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid)
        self.conv3 = nn.Conv2d(mid, c_out, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(c_out)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), nn.BatchNorm2d(c_out))
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return self.relu(out + skip)


class ReIDNet(nn.Module):
    """Residual backbone -> global pool -> FC(embedding_dim) -> FC(num_classes).

    With ``use_ibn`` an affine InstanceNorm2d follows the stem and each of the
    first two stages; it always uses per-instance statistics.
    """

    def __init__(self, config: ReIDConfig):
        super().__init__()
        self.config = config
        cfg = config
        if cfg.stem == "compact":
            self.stem = nn.Sequential(
                nn.Conv2d(cfg.image_channels, cfg.stem_channels, 3, 1, 1, bias=False),
                nn.BatchNorm2d(cfg.stem_channels),
                nn.ReLU(inplace=True),
            )
        else:
            self.stem = nn.Sequential(
                nn.Conv2d(cfg.image_channels, cfg.stem_channels, 7, 2, 3, bias=False),
                nn.BatchNorm2d(cfg.stem_channels),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(3, 2, 1),
            )
        block = BasicBlock if cfg.block == "basic" else Bottleneck
        stages, c_in = [], cfg.stem_channels
        for i, (c_out, n) in enumerate(zip(cfg.stage_channels, cfg.blocks_per_stage)):
            blocks = []
            for j in range(n):
                blocks.append(block(c_in, c_out, 2 if (i > 0 and j == 0) else 1))
                c_in = c_out
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc1 = nn.Linear(c_in, cfg.embedding_dim)
        self.bn_emb = nn.BatchNorm1d(cfg.embedding_dim)
        self.fc2 = nn.Linear(cfg.embedding_dim, cfg.num_classes)
        self.ibn = None
        if cfg.use_ibn:
            widths = (cfg.stem_channels, cfg.stage_channels[0], cfg.stage_channels[1])
            self.ibn = nn.ModuleDict(
                {
                    name: nn.InstanceNorm2d(w, affine=True, track_running_stats=False)
                    for name, w in zip(IBN_POSITIONS, widths)
                }
            )

    def backbone(self, x):
        x = self.stem(x)
        if self.ibn is not None:
            x = self.ibn["conv1"](x)
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if self.ibn is not None and i < 2:
                x = self.ibn[IBN_POSITIONS[i + 1]](x)
        return self.pool(x).flatten(1)

    def forward(self, x):
        pooled = self.backbone(x)
        emb = self.fc1(pooled)
        logits = self.fc2(torch.relu(self.bn_emb(emb)))
        return emb, logits

    def features(self, x):
        if self.config.feature_source == "backbone_pool":
            return self.backbone(x)
        return self.fc1(self.backbone(x))


def make_reid_net(config, seed=0):
    with seeded(seed):
        return ReIDNet(config)


def reid_from_params(params: ModelParams):
    if params.kind != "reid":
        raise ValueError(f"expected reid params, got {params.kind!r}")
    net = ReIDNet(ReIDConfig(**params.config))
    net.load_state_dict(params.state_dict())
    return net.eval()


def reid_params(config, seed=0, extra=None):
    return ModelParams.from_module("reid", asdict(config), make_reid_net(config, seed), extra)


def _run(net, x, mode):
    cfg = net.config
    X = check_images(x, (cfg.image_height, cfg.image_width, cfg.image_channels))
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and len(X) < 2:
        raise ValueError("train mode needs a batch of at least 2 for batch statistics")
    net.train(mode == "train")
    with torch.no_grad():
        emb, logits = net(images_to_tensor(X))
    return emb.numpy(), logits.numpy()


def reid_forward(params, x, mode="eval"):
    """(embedding, logits) for an HWC image or NHWC batch."""
    single = np.asarray(x).ndim == 3
    emb, logits = _run(reid_from_params(params), x, mode)
    return (emb[0], logits[0]) if single else (emb, logits)


def semantic_discriminator_forward(params, x):
    """Identity logits over the source classes, always with running BN statistics."""
    return reid_forward(params, x, mode="eval")[1]


def instance_normalize(x, eps=1e-5, gain=None, bias=None):
    """Per-(sample, channel) normalization over spatial positions.

    ``x`` is NCHW (or CHW). ``gain``/``bias`` are per-channel and default to 1/0.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[2] * x.shape[3] < 1:
        raise ValueError("expected an NCHW feature map with at least one spatial position")
    c = x.shape[1]
    gain = np.ones(c) if gain is None else np.asarray(gain, dtype=np.float64)
    bias = np.zeros(c) if bias is None else np.asarray(bias, dtype=np.float64)
    if gain.shape != (c,) or bias.shape != (c,):
        raise ValueError(f"gain and bias must have shape ({c},)")
    mean = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    out = gain[None, :, None, None] * (x - mean) / np.sqrt(var + eps) + bias[None, :, None, None]
    return out[0] if single else out
