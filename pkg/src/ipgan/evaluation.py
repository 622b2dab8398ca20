"""Retrieval evaluation (CMC / mAP) and translation audits."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ._torch import images_to_tensor
from .datasets import JUNK_IDENTITY
from .params import ModelParams
from .reid_models import reid_from_params

METRICS = ("euclidean", "cosine")


@dataclass
class FeatureMatrix:
    features: np.ndarray
    identities: np.ndarray
    cameras: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.identities = np.asarray(self.identities, dtype=np.int64)
        self.cameras = np.asarray(self.cameras, dtype=np.int64)
        n = len(self.features)
        if self.features.ndim != 2 or len(self.identities) != n or len(self.cameras) != n:
            raise ValueError("features, identities and cameras must be row-aligned")


@dataclass
class EvalResult:
    cmc: np.ndarray
    mAP: float
    per_query_ap: np.ndarray
    num_skipped: int
    protocol: dict = field(default_factory=dict)

    def rank(self, k):
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def to_dict(self):
        return {
            "protocol": self.protocol,
            "cmc": [float(v) for v in self.cmc],
            "mAP": float(self.mAP),
            "rank1": self.rank(1),
            "num_queries": int(len(self.per_query_ap)),
            "skipped_queries": int(self.num_skipped),
        }

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def l2_normalize(F, eps=1e-12):
    F = np.asarray(F, dtype=np.float64)
    return F / np.maximum(np.linalg.norm(F, axis=1, keepdims=True), eps)


def _model(model):
    if isinstance(model, ModelParams):
        return reid_from_params(model)
    if hasattr(model, "net_"):
        return model.net_.eval()
    return model.eval()


def extract_features(model, manifest, batch_size=256):
    """L2-normalized retrieval features for every record, in manifest order."""
    net = _model(model)
    cfg = net.config
    if manifest.image_shape != (cfg.image_height, cfg.image_width, cfg.image_channels):
        raise ValueError(
            f"manifest images are {manifest.image_shape}, model expects "
            f"{(cfg.image_height, cfg.image_width, cfg.image_channels)}"
        )
    X = manifest.load_images()
    feats = []
    with torch.no_grad():
        for s in range(0, len(X), batch_size):
            feats.append(net.features(images_to_tensor(X[s : s + batch_size])).double().numpy())
    F = np.concatenate(feats) if feats else np.zeros((0, cfg.embedding_dim))
    return FeatureMatrix(l2_normalize(F), manifest.identities, manifest.cameras, normalized=True)


def pairwise_distances(Q, G, metric="euclidean", chunk=64):
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    if metric == "cosine":
        return 1.0 - Q @ G.T
    out = np.empty((len(Q), len(G)))
    for s in range(0, len(Q), chunk):
        diff = Q[s : s + chunk, None, :] - G[None, :, :]
        out[s : s + chunk] = np.sqrt(np.einsum("qgd,qgd->qg", diff, diff))
    return out


def evaluate_distances(distmat, q_ids, q_cams, g_ids, g_cams, K=10):
    """Single-query protocol on a precomputed distance matrix.

    Gallery entries sharing the query's identity *and* camera are dropped, as
    are junk entries (identity -1). Ties keep gallery order. Queries with no
    remaining true match are skipped and counted.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    distmat = np.asarray(distmat, dtype=np.float64)
    q_ids, q_cams = np.asarray(q_ids), np.asarray(q_cams)
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    nq = len(q_ids)
    cmc_sum = np.zeros(K)
    aps = np.full(nq, np.nan)
    for i in range(nq):
        order = np.argsort(distmat[i], kind="stable")
        ids, cams = g_ids[order], g_cams[order]
        keep = (ids != JUNK_IDENTITY) & ~((ids == q_ids[i]) & (cams == q_cams[i]))
        hits = ids[keep] == q_ids[i]
        if not hits.any():
            continue
        first = int(np.argmax(hits))
        if first < K:
            cmc_sum[first:] += 1
        ranks = np.flatnonzero(hits) + 1
        aps[i] = float(np.mean(np.arange(1, len(ranks) + 1) / ranks))
    valid = ~np.isnan(aps)
    n_valid = int(valid.sum())
    cmc = cmc_sum / n_valid if n_valid else np.zeros(K)
    mAP = float(aps[valid].mean()) if n_valid else 0.0
    return EvalResult(cmc, mAP, aps, nq - n_valid)


def compute_cmc_map(queries, gallery, K=10, metric="euclidean"):
    """CMC curve (ranks 1..K) and mAP, ranking on L2-normalized features."""
    if queries.features.shape[1] != gallery.features.shape[1]:
        raise ValueError(
            f"feature dimension mismatch: {queries.features.shape[1]} vs {gallery.features.shape[1]}"
        )
    if K < 1:
        raise ValueError("K must be >= 1")
    D = pairwise_distances(l2_normalize(queries.features), l2_normalize(gallery.features), metric)
    res = evaluate_distances(D, queries.identities, queries.cameras, gallery.identities, gallery.cameras, K)
    res.protocol = {
        "metric": metric,
        "features": "l2-normalized",
        "exclusion": "same identity and same camera",
        "junk": "identity -1 ignored",
        "ties": "stable, by gallery index",
        "mode": "single-query",
    }
    return res


def predict_labels(classifier, X, batch_size=256):
    """Vocabulary labels predicted by a classifier parameter set."""
    net = _model(classifier)
    vocab = np.asarray(classifier.extra["vocabulary"], dtype=np.int64)
    preds = []
    with torch.no_grad():
        for s in range(0, len(X), batch_size):
            preds.append(net(images_to_tensor(X[s : s + batch_size]))[1].argmax(1).numpy())
    return vocab[np.concatenate(preds)] if preds else np.zeros(0, dtype=np.int64)


def identity_preservation_accuracy(classifier, translated):
    """Fraction of translated images whose predicted identity is the inherited one."""
    vocab = set(classifier.extra.get("vocabulary", []))
    missing = {int(i) for i in translated.identities} - vocab
    if missing:
        raise ValueError(f"classifier vocabulary does not cover identities {sorted(missing)[:5]}")
    if len(translated) == 0:
        raise ValueError("empty translated set")
    return float(np.mean(predict_labels(classifier, translated.load_images()) == translated.identities))


def camera_assignment_accuracy(camera_classifier, translated):
    """Fraction of images a camera-style classifier assigns to their record's camera."""
    vocab = set(camera_classifier.extra.get("vocabulary", []))
    if not set(translated.cameras.tolist()) <= vocab:
        raise ValueError("camera classifier does not know every requested camera")
    return float(np.mean(predict_labels(camera_classifier, translated.load_images()) == translated.cameras))


def plot_cmc(results, path):
    """Write CMC curves (``{label: EvalResult}``) to an image file."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for label, res in results.items():
        ks = np.arange(1, len(res.cmc) + 1)
        ax.plot(ks, res.cmc, marker="o", label=f"{label} (mAP {res.mAP:.3f})")
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_losses(epoch_metrics, path, keys=("d_loss", "g_loss", "rec", "sem")):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for key in keys:
        vals = [e[key] for e in epoch_metrics if key in e]
        if vals:
            ax.plot(range(len(vals)), vals, label=key)
    ax.set_xlabel("epoch")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
