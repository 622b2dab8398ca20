"""scikit-learn style wrappers so the networks compose with the wider ecosystem.

``ReIDClassifier`` is a classifier (``predict``) and a transformer
(``transform`` returns L2-normalized retrieval features). ``IPGAN`` fits on
images labeled with their domain and translates with ``transform``.
"""

from __future__ import annotations

from dataclasses import asdict

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._torch import derive_seed, images_to_tensor
from ._validation import check_images, check_labels
from .evaluation import l2_normalize
from .gan_models import generator_from_params, translate_batch
from .losses import LossWeights
from .params import ModelParams
from .reid_models import ReIDConfig, make_reid_net, reid_from_params
from .training import (
    GanArchitecture,
    MetricsLog,
    TrainConfig,
    build_gan,
    evaluate_classifier,
    fit_classifier,
    fit_ipgan,
    frozen_semantic_discriminator,
    gan_checkpoint,
)


class ReIDClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """IDE identity classifier with an optional IBN backbone.

    Parameters
    ----------
    use_ibn : bool
        Insert instance normalization after the stem and the first two stages.
    feature_source : {"embedding", "backbone_pool"}
        Which layer ``transform`` returns.
    epochs, lr, batch_size, beta1, beta2
        Adam training schedule; the learning rate is held for the first half
        of ``epochs`` and decays linearly to zero over the second.
    """

    def __init__(
        self,
        stage_channels=(16, 32, 64, 128),
        blocks_per_stage=(1, 1, 1, 1),
        block="basic",
        stem="compact",
        stem_channels=16,
        embedding_dim=1024,
        use_ibn=False,
        feature_source="embedding",
        epochs=30,
        lr=1e-3,
        batch_size=16,
        beta1=0.9,
        beta2=0.999,
        random_state=0,
    ):
        self.stage_channels = stage_channels
        self.blocks_per_stage = blocks_per_stage
        self.block = block
        self.stem = stem
        self.stem_channels = stem_channels
        self.embedding_dim = embedding_dim
        self.use_ibn = use_ibn
        self.feature_source = feature_source
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.beta1 = beta1
        self.beta2 = beta2
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(
            total_epochs=self.epochs,
            base_lr=self.lr,
            batch_size=self.batch_size,
            seed=self.random_state,
            beta1=self.beta1,
            beta2=self.beta2,
        )

    def fit(self, X, y):
        X = check_images(X, allow_single=False)
        y = check_labels(y, len(X))
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        H, W, C = X.shape[1:]
        config = ReIDConfig(
            image_height=H,
            image_width=W,
            image_channels=C,
            num_classes=len(self.classes_),
            stage_channels=self.stage_channels,
            blocks_per_stage=self.blocks_per_stage,
            block=self.block,
            stem=self.stem,
            stem_channels=self.stem_channels,
            embedding_dim=self.embedding_dim,
            use_ibn=self.use_ibn,
            feature_source=self.feature_source,
        )
        train_config = self._train_config()
        self.net_ = make_reid_net(config, derive_seed(self.random_state, 3))
        self.metrics_ = MetricsLog()
        fit_classifier(self.net_, X, y_enc, train_config, self.metrics_)
        self.train_accuracy_, self.train_cross_entropy_ = evaluate_classifier(self.net_, X, y_enc)
        return self

    def _forward(self, X, batch_size=256):
        check_is_fitted(self, "net_")
        cfg = self.net_.config
        X = check_images(X, (cfg.image_height, cfg.image_width, cfg.image_channels))
        self.net_.eval()
        embs, logits = [], []
        with torch.no_grad():
            for s in range(0, len(X), batch_size):
                xb = images_to_tensor(X[s : s + batch_size])
                embs.append(self.net_.features(xb).double().numpy())
                logits.append(self.net_(xb)[1].double().numpy())
        return np.concatenate(embs), np.concatenate(logits)

    def decision_function(self, X):
        return self._forward(X)[1]

    def predict_proba(self, X):
        logits = self.decision_function(X)
        logits = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def transform(self, X):
        return l2_normalize(self._forward(X)[0])

    def to_params(self):
        check_is_fitted(self, "net_")
        return ModelParams.from_module(
            "reid",
            asdict(self.net_.config),
            self.net_,
            {"vocabulary": [int(c) for c in self.classes_], "train_accuracy": self.train_accuracy_},
        )

    @classmethod
    def from_params(cls, params, **kwargs):
        net = reid_from_params(params)
        cfg = net.config
        est = cls(
            stage_channels=cfg.stage_channels,
            blocks_per_stage=cfg.blocks_per_stage,
            block=cfg.block,
            stem=cfg.stem,
            stem_channels=cfg.stem_channels,
            embedding_dim=cfg.embedding_dim,
            use_ibn=cfg.use_ibn,
            feature_source=cfg.feature_source,
            **kwargs,
        )
        est.net_ = net
        est.classes_ = np.asarray(params.extra.get("vocabulary", range(cfg.num_classes)), dtype=np.int64)
        est.train_accuracy_ = params.extra.get("train_accuracy")
        return est


class IPGAN(TransformerMixin, BaseEstimator):
    """Single-generator translation among a source domain and L target cameras.

    ``fit(X, y, identity=...)`` takes images, their domain labels ``y``
    (0 = source, 1..L = target camera) and, for source images, identity
    labels in the vocabulary of ``semantic_discriminator``. The semantic
    discriminator is a frozen ``ModelParams``; with ``with_semantic=False``
    or ``lambda_sem=0`` it is ignored and the model reduces to StarGAN.
    """

    def __init__(
        self,
        semantic_discriminator=None,
        base_channels=32,
        num_residual_blocks=3,
        disc_base_channels=32,
        disc_layers=3,
        leaky_slope=0.01,
        lambda_dom=1.0,
        lambda_rec=10.0,
        lambda_sem=1.0,
        with_semantic=True,
        non_saturating=False,
        epochs=60,
        lr=1e-4,
        batch_size=16,
        beta1=0.5,
        beta2=0.999,
        d_steps_per_g_step=1,
        random_state=0,
    ):
        self.semantic_discriminator = semantic_discriminator
        self.base_channels = base_channels
        self.num_residual_blocks = num_residual_blocks
        self.disc_base_channels = disc_base_channels
        self.disc_layers = disc_layers
        self.leaky_slope = leaky_slope
        self.lambda_dom = lambda_dom
        self.lambda_rec = lambda_rec
        self.lambda_sem = lambda_sem
        self.with_semantic = with_semantic
        self.non_saturating = non_saturating
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.beta1 = beta1
        self.beta2 = beta2
        self.d_steps_per_g_step = d_steps_per_g_step
        self.random_state = random_state

    def _configs(self):
        train = TrainConfig(
            total_epochs=self.epochs,
            base_lr=self.lr,
            batch_size=self.batch_size,
            seed=self.random_state,
            weights=LossWeights(self.lambda_dom, self.lambda_rec, self.lambda_sem),
            d_steps_per_g_step=self.d_steps_per_g_step,
            with_semantic=self.with_semantic,
            non_saturating=self.non_saturating,
            beta1=self.beta1,
            beta2=self.beta2,
            log_every=0,
        )
        arch = GanArchitecture(
            self.base_channels, self.num_residual_blocks, self.disc_base_channels, self.disc_layers, self.leaky_slope
        )
        return train, arch

    def fit(self, X, y, identity=None):
        X = check_images(X, allow_single=False)
        y = check_labels(y, len(X), name="domain labels", low=0)
        num_domains = int(y.max()) + 1
        if num_domains < 2:
            raise ValueError("need a source domain and at least one target domain")
        train, arch = self._configs()
        d_sem = None
        sem_labels = np.zeros(len(X), dtype=np.int64)
        if train.uses_semantic:
            if self.semantic_discriminator is None:
                raise ValueError("semantic loss enabled but semantic_discriminator is None")
            if identity is None:
                raise ValueError("identity labels are required for source images")
            identity = check_labels(identity, len(X), name="identity")
            vocab = np.asarray(self.semantic_discriminator.extra.get("vocabulary", []), dtype=np.int64)
            src = y == 0
            if not np.isin(identity[src], vocab).all():
                raise ValueError("semantic discriminator vocabulary does not cover the source identities")
            sem_labels[src] = np.searchsorted(vocab, identity[src])
            d_sem = frozen_semantic_discriminator(self.semantic_discriminator)
        self.n_domains_ = num_domains
        nets = build_gan(X.shape[1:], num_domains, arch, train)
        self.metrics_ = MetricsLog()
        fit_ipgan(nets, d_sem, X, y, sem_labels, train, metrics=self.metrics_)
        self.generator_ = nets.generator
        self.discriminator_ = nets.discriminator
        self.checkpoint_ = gan_checkpoint(nets, train, arch, train.total_epochs, self.metrics_)
        return self

    def transform(self, X, target_domain=1):
        check_is_fitted(self, "generator_")
        cfg = self.generator_.config
        X = check_images(X, (cfg.image_height, cfg.image_width, cfg.image_channels))
        return translate_batch(self.generator_, X, target_domain)

    def to_params(self):
        check_is_fitted(self, "generator_")
        return self.checkpoint_.models["generator"]

    @classmethod
    def from_params(cls, params, **kwargs):
        est = cls(**kwargs)
        est.generator_ = generator_from_params(params)
        est.n_domains_ = est.generator_.config.num_domains
        return est
