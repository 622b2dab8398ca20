"""Training procedures: semantic-discriminator pretraining, IPGAN, and re-ID.

Data order and random domain targets come from generators keyed by
``(seed, epoch)``, so resuming from an epoch-boundary checkpoint replays the
exact batches an uninterrupted run would have seen.
"""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
import threading
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import losses
from ._torch import derive_seed, epoch_generator, images_to_tensor
from ._validation import check_contiguous
from .gan_models import (
    DomainDiscriminatorConfig,
    GeneratorConfig,
    discriminator_from_params,
    generator_from_params,
    make_domain_discriminator,
    make_generator,
)
from .losses import LossWeights
from .params import ModelParams
from .reid_models import ReIDConfig, make_reid_net, reid_from_params

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ipgan-checkpoint/1"


@dataclass(frozen=True)
class TrainConfig:
    total_epochs: int = 200
    base_lr: float = 1e-4
    batch_size: int = 16
    seed: int = 0
    weights: LossWeights = LossWeights()
    d_steps_per_g_step: int = 1
    with_semantic: bool = True
    non_saturating: bool = False
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 0
    log_every: int = 10
    # classifier training only: mirror a random half of each batch
    flip: bool = False

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        if self.total_epochs < 2 or self.total_epochs % 2:
            raise ValueError("total_epochs must be a positive even number (the schedule splits it in half)")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if self.batch_size < 1 or self.d_steps_per_g_step < 1:
            raise ValueError("batch_size and d_steps_per_g_step must be >= 1")

    @classmethod
    def for_classifier(cls, **kw):
        kw.setdefault("beta1", 0.9)
        kw.setdefault("total_epochs", 30)
        kw.setdefault("base_lr", 1e-3)
        return cls(**kw)

    @property
    def uses_semantic(self):
        return self.with_semantic and self.weights.lambda_sem > 0

    def to_dict(self):
        return asdict(self)


def lr_at_epoch(config, epoch):
    """Constant ``base_lr`` for the first half, then linear decay toward 0."""
    E = config.total_epochs
    if not 0 <= epoch < E:
        raise ValueError(f"epoch {epoch} outside [0, {E})")
    half = E // 2
    if epoch < half:
        return config.base_lr
    return config.base_lr * (E - epoch) / half


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def _adam(params, config):
    return torch.optim.Adam(params, lr=config.base_lr, betas=(config.beta1, config.beta2), eps=config.eps)


# ----------------------------------------------------------------------------
# metrics and checkpoints


class MetricsLog:
    """Append-only metrics: per-step records, per-epoch means, optional JSON-lines file."""

    def __init__(self, path=None, steps=None, epochs=None):
        self.path = Path(path) if path is not None else None
        self.steps = list(steps or [])
        self.epochs = list(epochs or [])
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def _write(self, rec):
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def log_step(self, epoch, step, scalars, write=True):
        rec = {"epoch": epoch, "step": step, **{k: float(v) for k, v in scalars.items()}}
        with self._lock:
            self.steps.append(rec)
            if write:
                self._write(rec)

    def log_epoch(self, epoch, scalars):
        rec = {"epoch": epoch, "kind": "epoch", **{k: float(v) for k, v in scalars.items()}}
        with self._lock:
            self.epochs.append(rec)
            self._write(rec)


@dataclass
class Checkpoint:
    models: dict
    optimizer_state: dict
    epoch: int
    rng_state: dict
    config: dict
    metrics: dict = field(default_factory=dict)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        opt = io.BytesIO()
        torch.save(self.optimizer_state, opt)
        state = {
            "format": CHECKPOINT_FORMAT,
            "epoch": self.epoch,
            "rng_state": self.rng_state,
            "config": self.config,
            "metrics": self.metrics,
            "models": sorted(self.models),
        }
        tmp = path.with_suffix(path.suffix + ".tmp")
        members = [("state.json", json.dumps(state, sort_keys=True).encode()), ("optimizers.pt", opt.getvalue())]
        members += [(f"models/{n}.params", self.models[n].to_bytes()) for n in sorted(self.models)]
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
            for name, data in members:
                # fixed timestamp keeps the archive bytes a function of content only
                zf.writestr(zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0)), data)
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path):
        with zipfile.ZipFile(path) as zf:
            state = json.loads(zf.read("state.json"))
            if state.get("format") != CHECKPOINT_FORMAT:
                raise ValueError(f"unsupported checkpoint format {state.get('format')!r}")
            opt = torch.load(io.BytesIO(zf.read("optimizers.pt")), weights_only=True)
            models = {n: ModelParams.from_bytes(zf.read(f"models/{n}.params")) for n in state["models"]}
        return cls(models, opt, state["epoch"], state["rng_state"], state["config"], state["metrics"])


# ----------------------------------------------------------------------------
# loops


def _batches(n, batch_size, gen, min_size=1):
    perm = torch.randperm(n, generator=gen)
    for s in range(0, n, batch_size):
        idx = perm[s : s + batch_size]
        if len(idx) >= min_size:
            yield idx


def fit_classifier(net, X, y, config, metrics=None):
    """Cross-entropy training of a ReIDNet on NHWC images with labels 0..N-1."""
    if len(X) < 2:
        raise ValueError("need at least two training images")
    metrics = metrics or MetricsLog()
    Xt = images_to_tensor(X)
    yt = torch.as_tensor(np.asarray(y, dtype=np.int64))
    opt = _adam(net.parameters(), config)
    net.train()
    for epoch in range(config.total_epochs):
        _set_lr(opt, lr_at_epoch(config, epoch))
        gen = epoch_generator(config.seed, epoch)
        total, count = 0.0, 0
        for step, idx in enumerate(_batches(len(Xt), config.batch_size, gen, min_size=2)):
            xb = Xt[idx]
            if config.flip:
                mirror = torch.rand(len(idx), generator=gen) < 0.5
                xb = torch.where(mirror[:, None, None, None], xb.flip(3), xb)
            _, logits = net(xb)
            loss = F.cross_entropy(logits, yt[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
            if config.log_every and step % config.log_every == 0:
                metrics.log_step(epoch, step, {"loss": loss.item()}, write=False)
        metrics.log_epoch(epoch, {"loss": total / max(count, 1), "lr": lr_at_epoch(config, epoch)})
    return net.eval()


def evaluate_classifier(net, X, y, batch_size=256):
    """(accuracy, mean cross-entropy) in eval mode."""
    net.eval()
    logits = []
    with torch.no_grad():
        for s in range(0, len(X), batch_size):
            logits.append(net(images_to_tensor(X[s : s + batch_size]))[1])
    logits = torch.cat(logits)
    yt = torch.as_tensor(np.asarray(y, dtype=np.int64))
    acc = float((logits.argmax(1) == yt).double().mean())
    ce = float(F.cross_entropy(logits.double(), yt))
    return acc, ce


@dataclass
class GanNetworks:
    generator: torch.nn.Module
    discriminator: torch.nn.Module
    g_opt: torch.optim.Optimizer
    d_opt: torch.optim.Optimizer


def fit_ipgan(nets, d_sem, X, domains, sem_labels, config, *, start_epoch=0, metrics=None, on_epoch_end=None):
    """Alternate domain-discriminator and generator updates.

    ``domains`` holds each image's original domain (0 = source). ``sem_labels``
    holds D_sem class indices for source images (ignored elsewhere). ``d_sem``
    is a frozen classifier in eval mode, or ``None`` for the StarGAN ablation.
    """
    G, D = nets.generator, nets.discriminator
    K = G.config.num_domains
    w = config.weights
    use_sem = config.uses_semantic
    if use_sem and d_sem is None:
        raise ValueError("semantic loss requested without a semantic discriminator")
    metrics = metrics or MetricsLog()
    Xt = images_to_tensor(X)
    ct = torch.as_tensor(np.asarray(domains, dtype=np.int64))
    yt = torch.as_tensor(np.asarray(sem_labels, dtype=np.int64))
    G.train()
    D.train()
    for epoch in range(start_epoch, config.total_epochs):
        lr = lr_at_epoch(config, epoch)
        _set_lr(nets.g_opt, lr)
        _set_lr(nets.d_opt, lr)
        gen = epoch_generator(config.seed, epoch)
        sums = {}
        n_steps = 0
        for step, idx in enumerate(_batches(len(Xt), config.batch_size, gen)):
            x, c_org, y = Xt[idx], ct[idx], yt[idx]
            c_trg = torch.randint(0, K, (len(idx),), generator=gen)
            oh_org = F.one_hot(c_org, K).float()
            oh_trg = F.one_hot(c_trg, K).float()

            fake = G(x, oh_trg)
            adv_real, dom_real = D(x)
            adv_fake, _ = D(fake.detach())
            l_adv = losses.adversarial_loss(adv_real, adv_fake)
            l_dom_r = losses.domain_classification_loss(dom_real, c_org)
            d_loss = losses.discriminator_objective((l_adv, l_dom_r), w)
            nets.d_opt.zero_grad()
            d_loss.backward()
            nets.d_opt.step()
            scalars = {"d_loss": d_loss, "adv": l_adv, "dom_real": l_dom_r}

            if (step + 1) % config.d_steps_per_g_step == 0:
                adv_f, dom_f = D(fake)
                g_adv = losses.generator_adversarial_term(adv_f, config.non_saturating)
                l_dom_f = losses.domain_classification_loss(dom_f, c_trg)
                l_rec = losses.reconstruction_loss(x, G(fake, oh_org))
                parts = [g_adv, l_dom_f, l_rec]
                if use_sem:
                    l_sem = losses.identity_semantic_loss(d_sem(fake)[1], y, mask=c_org == 0)
                    parts.append(l_sem)
                    scalars["sem"] = l_sem
                g_loss = losses.generator_objective(parts, w, with_semantic=use_sem)
                nets.g_opt.zero_grad()
                g_loss.backward()
                nets.g_opt.step()
                scalars.update(g_loss=g_loss, g_adv=g_adv, dom_fake=l_dom_f, rec=l_rec)

            scalars = {k: float(v.detach()) for k, v in scalars.items()}
            for k, v in scalars.items():
                sums[k] = sums.get(k, 0.0) + v
            n_steps += 1
            metrics.log_step(epoch, step, scalars, write=bool(config.log_every) and step % config.log_every == 0)
        metrics.log_epoch(epoch, {**{k: v / n_steps for k, v in sums.items()}, "lr": lr})
        if on_epoch_end is not None:
            on_epoch_end(epoch + 1)
    G.eval()
    D.eval()
    return nets


# ----------------------------------------------------------------------------
# manifest-level procedures


def reid_config_for(manifest, num_classes, use_ibn=False, **arch):
    return ReIDConfig(
        image_height=manifest.image_height,
        image_width=manifest.image_width,
        image_channels=manifest.image_channels,
        num_classes=num_classes,
        use_ibn=use_ibn,
        **arch,
    )


def _train_reid_params(X, y, vocabulary, config, reid_config, metrics_path=None):
    net = make_reid_net(reid_config, derive_seed(config.seed, 3))
    metrics = MetricsLog(metrics_path)
    fit_classifier(net, X, y, config, metrics)
    acc, ce = evaluate_classifier(net, X, y)
    extra = {
        "vocabulary": [int(v) for v in vocabulary],
        "train_accuracy": acc,
        "train_cross_entropy": ce,
        "history": [e["loss"] for e in metrics.epochs],
    }
    return ModelParams.from_module("reid", asdict(reid_config), net, extra)


def pretrain_semantic_discriminator(source_train, config, arch=None, metrics_path=None):
    """Fit the identity classifier that later stays frozen as D_sem."""
    if len(source_train) == 0:
        raise ValueError("empty source manifest")
    ids = source_train.identities
    vocab = np.unique(ids[ids >= 0])
    if len(vocab) < 2:
        raise ValueError("degenerate classification: need at least 2 identities")
    y = np.searchsorted(vocab, ids)
    cfg = reid_config_for(source_train, len(vocab), use_ibn=False, **(arch or {}))
    return _train_reid_params(source_train.load_images(), y, vocab, config, cfg, metrics_path)


def train_reid(train_set, config, use_ibn=False, arch=None, metrics_path=None):
    """Supervised IDE training; identities must already be 0..N-1."""
    if len(train_set) == 0:
        raise ValueError("empty training manifest")
    y = train_set.identities
    n = check_contiguous(y, name="train identities")
    cfg = reid_config_for(train_set, n, use_ibn=use_ibn, **(arch or {}))
    params = _train_reid_params(train_set.load_images(), y, np.arange(n), config, cfg, metrics_path)
    params.extra["use_ibn"] = bool(use_ibn)
    return params


def train_camera_classifier(manifest, config, arch=None, metrics_path=None):
    """Camera-style classifier over a manifest's camera labels (vocabulary = camera ids)."""
    cams = manifest.cameras
    vocab = np.unique(cams)
    if len(vocab) < 2:
        raise ValueError("degenerate classification: need at least 2 cameras")
    cfg = reid_config_for(manifest, len(vocab), use_ibn=False, **(arch or {}))
    return _train_reid_params(manifest.load_images(), np.searchsorted(vocab, cams), vocab, config, cfg, metrics_path)


@dataclass(frozen=True)
class GanArchitecture:
    base_channels: int = 32
    num_residual_blocks: int = 3
    disc_base_channels: int = 32
    disc_layers: int = 3
    leaky_slope: float = 0.01


def build_gan(image_shape, num_domains, arch, config):
    H, W, C = image_shape
    g_cfg = GeneratorConfig(H, W, C, num_domains, arch.base_channels, arch.num_residual_blocks)
    d_cfg = DomainDiscriminatorConfig(H, W, C, num_domains, arch.disc_base_channels, arch.disc_layers, arch.leaky_slope)
    G = make_generator(g_cfg, derive_seed(config.seed, 1))
    D = make_domain_discriminator(d_cfg, derive_seed(config.seed, 2))
    return GanNetworks(G, D, _adam(G.parameters(), config), _adam(D.parameters(), config))


def gan_checkpoint(nets, config, arch, epoch, metrics, extra=None):
    extra = dict(extra or {})
    extra.setdefault("method", "ipgan" if config.uses_semantic else "stargan")
    return Checkpoint(
        models={
            "generator": ModelParams.from_module("generator", asdict(nets.generator.config), nets.generator, extra),
            "domain_discriminator": ModelParams.from_module(
                "domain_discriminator", asdict(nets.discriminator.config), nets.discriminator
            ),
        },
        optimizer_state={"generator": nets.g_opt.state_dict(), "domain_discriminator": nets.d_opt.state_dict()},
        epoch=epoch,
        rng_state={"seed": config.seed, "next_epoch": epoch},
        config={"train": config.to_dict(), "arch": asdict(arch)},
        metrics={"steps": metrics.steps, "epochs": metrics.epochs},
    )


def restore_gan(checkpoint, config):
    """Rebuild networks and optimizers from a checkpoint for resumption."""
    saved = checkpoint.config["train"]
    for key in ("seed", "total_epochs", "batch_size"):
        if saved[key] != getattr(config, key):
            raise ValueError(f"cannot resume: checkpoint {key}={saved[key]} but config has {getattr(config, key)}")
    arch = GanArchitecture(**checkpoint.config["arch"])
    G = generator_from_params(checkpoint.models["generator"])
    D = discriminator_from_params(checkpoint.models["domain_discriminator"])
    g_opt, d_opt = _adam(G.parameters(), config), _adam(D.parameters(), config)
    g_opt.load_state_dict(checkpoint.optimizer_state["generator"])
    d_opt.load_state_dict(checkpoint.optimizer_state["domain_discriminator"])
    return GanNetworks(G, D, g_opt, d_opt), arch


def frozen_semantic_discriminator(d_sem):
    net = reid_from_params(d_sem)
    for p in net.parameters():
        p.requires_grad_(False)
    return net.eval()


def train_ipgan(
    source_train,
    target_train,
    d_sem,
    config,
    arch=None,
    checkpoint_dir=None,
    resume_from=None,
    metrics_path=None,
):
    """Train G and D_dom over the source domain plus the L target camera domains.

    ``d_sem`` may be ``None`` only when the config disables the semantic term.
    Returns the final :class:`Checkpoint`.
    """
    arch = arch or GanArchitecture()
    if source_train.image_shape != target_train.image_shape:
        raise ValueError("source and target images differ in shape")
    L = target_train.num_cameras
    num_domains = L + 1
    cams = target_train.cameras
    if len(cams) and (cams.min() < 1 or cams.max() > L):
        raise ValueError("target camera labels must lie in 1..L")

    src_ids = source_train.identities
    sem_labels = np.zeros(len(source_train), dtype=np.int64)
    sem_net = None
    if config.uses_semantic:
        if d_sem is None:
            raise ValueError("semantic loss enabled but no semantic discriminator given")
        vocab = np.asarray(d_sem.extra.get("vocabulary", []), dtype=np.int64)
        if not np.isin(src_ids, vocab).all():
            raise ValueError("semantic discriminator vocabulary does not cover the source identities")
        if d_sem.config["image_height"] != source_train.image_height or d_sem.config["image_width"] != source_train.image_width:
            raise ValueError("semantic discriminator input size does not match the images")
        sem_labels = np.searchsorted(vocab, src_ids)
        sem_net = frozen_semantic_discriminator(d_sem)

    X = np.concatenate([source_train.load_images(), target_train.load_images()])
    domains = np.concatenate([np.zeros(len(source_train), dtype=np.int64), cams])
    labels = np.concatenate([sem_labels, np.zeros(len(target_train), dtype=np.int64)])

    extra = {
        "method": "ipgan" if config.uses_semantic else "stargan",
        "weights": asdict(config.weights),
        "num_target_cameras": L,
        "source": source_train.name,
        "target": target_train.name,
    }
    if resume_from is not None:
        ckpt = Checkpoint.load(resume_from) if not isinstance(resume_from, Checkpoint) else resume_from
        nets, arch = restore_gan(ckpt, config)
        start = ckpt.epoch
        metrics = MetricsLog(metrics_path, ckpt.metrics.get("steps"), ckpt.metrics.get("epochs"))
    else:
        nets = build_gan(source_train.image_shape, num_domains, arch, config)
        start = 0
        metrics = MetricsLog(metrics_path)

    def on_epoch_end(done):
        if checkpoint_dir is None or not config.checkpoint_every:
            return
        if done % config.checkpoint_every == 0 or done == config.total_epochs:
            ck = gan_checkpoint(nets, config, arch, done, metrics, extra)
            ck.save(Path(checkpoint_dir) / f"epoch_{done:04d}.ckpt")
            ck.save(Path(checkpoint_dir) / "latest.ckpt")

    fit_ipgan(nets, sem_net, X, domains, labels, config, start_epoch=start, metrics=metrics, on_epoch_end=on_epoch_end)
    return gan_checkpoint(nets, config, arch, config.total_epochs, metrics, extra)


def windowed_means(values, fraction=0.1):
    """Means of the first and last ``fraction`` of a series."""
    values = np.asarray(values, dtype=np.float64)
    k = max(1, int(math.ceil(len(values) * fraction)))
    return float(values[:k].mean()), float(values[-k:].mean())


def replace_config(config, **changes):
    return dataclasses.replace(config, **changes)
