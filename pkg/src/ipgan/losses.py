"""Adversarial, domain, reconstruction and identity-semantic losses and the
two IPGAN objectives.

All functions take raw scores (logits) and work on torch tensors; numpy
arrays and floats are promoted to float64 tensors. Probabilities are never
formed explicitly: log-sigmoid and log-softmax keep large-class losses
stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossWeights:
    lambda_dom: float = 1.0
    lambda_rec: float = 10.0
    lambda_sem: float = 1.0

    def __post_init__(self):
        for name in ("lambda_dom", "lambda_rec", "lambda_sem"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def _t(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _labels(label, n, k, what):
    if isinstance(getattr(label, "index", None), int):
        label = label.index
    if isinstance(label, torch.Tensor):
        lab = label.long().reshape(-1)
    else:
        lab = torch.as_tensor(np.asarray(label, dtype=np.int64)).reshape(-1)
    if lab.numel() == 1 and n > 1:
        lab = lab.expand(n)
    if lab.numel() != n:
        raise ValueError(f"{what}: got {lab.numel()} labels for {n} rows")
    if n and (lab.min() < 0 or lab.max() >= k):
        raise ValueError(f"{what}: label out of range [0, {k - 1}]")
    return lab


def adversarial_loss(d_real, d_fake):
    """``mean log sigmoid(d_real) + mean log(1 - sigmoid(d_fake))``; always <= 0.

    Either argument may be ``None`` to drop its term, which is how the
    generator step evaluates the loss (the real term has no generator
    gradient).
    """
    total = None
    if d_real is not None:
        total = F.logsigmoid(_t(d_real)).mean()
    if d_fake is not None:
        fake = F.logsigmoid(-_t(d_fake)).mean()
        total = fake if total is None else total + fake
    if total is None:
        raise ValueError("need at least one of d_real, d_fake")
    return total


def generator_adversarial_term(d_fake, non_saturating=False):
    """What the generator minimizes for realism.

    As written it is ``mean log(1 - sigmoid(d_fake))``; the non-saturating
    switch swaps in ``-mean log sigmoid(d_fake)``.
    """
    d_fake = _t(d_fake)
    if non_saturating:
        return -F.logsigmoid(d_fake).mean()
    return F.logsigmoid(-d_fake).mean()


def _cross_entropy(logits, label, what):
    logits = _t(logits)
    single = logits.dim() == 1
    if single:
        logits = logits.unsqueeze(0)
    lab = _labels(label, logits.size(0), logits.size(1), what)
    return F.cross_entropy(logits, lab)


def domain_classification_loss(domain_logits, label):
    """``-log softmax(logits)[label]``, averaged over rows for a batch."""
    return _cross_entropy(domain_logits, label, "domain label")


def identity_semantic_loss(id_logits, y, mask=None):
    """Cross-entropy of the frozen identity classifier on translated images.

    ``mask`` selects rows that came from the source domain; the mean runs over
    those rows only and an empty selection contributes zero.
    """
    id_logits = _t(id_logits)
    if mask is not None:
        mask = torch.as_tensor(np.asarray(mask, dtype=bool)) if not isinstance(mask, torch.Tensor) else mask.bool()
        if not bool(mask.any()):
            return id_logits.sum() * 0.0
        id_logits = id_logits[mask]
        y = y.reshape(-1)[mask] if isinstance(y, torch.Tensor) else np.asarray(y).reshape(-1)[mask.numpy()]
    return _cross_entropy(id_logits, y, "identity label")


def reconstruction_loss(x, x_rec):
    """Mean absolute difference between an image and its cycle reconstruction."""
    x, x_rec = _t(x), _t(x_rec)
    if x.shape != x_rec.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_rec.shape)}")
    return (x - x_rec).abs().mean()


def discriminator_objective(parts, w=LossWeights()):
    """``-L_adv + lambda_dom * L_dom_real``. Identical for StarGAN and IPGAN."""
    adv, dom_real = parts
    return -adv + w.lambda_dom * dom_real


stargan_discriminator_objective = discriminator_objective


def generator_objective(parts, w=LossWeights(), with_semantic=True):
    """``L_adv + lambda_dom L_dom_fake + lambda_rec L_rec (+ lambda_sem L_sem)``.

    ``parts`` is ``(adv, dom_fake, rec)`` or ``(adv, dom_fake, rec, sem)``.
    With ``with_semantic=False`` the semantic term is ignored (StarGAN).
    """
    adv, dom_fake, rec, *rest = parts
    total = adv + w.lambda_dom * dom_fake + w.lambda_rec * rec
    if with_semantic:
        sem = rest[0] if rest else None
        if sem is None:
            raise ValueError("with_semantic=True needs the semantic loss term")
        total = total + w.lambda_sem * sem
    return total
