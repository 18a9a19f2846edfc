"""Embedding recognizer and verification metrics.

A small convolutional classifier trained with softmax cross-entropy; the
L2-normalized penultimate activation is the verification embedding and cosine
similarity (a plain dot product of unit vectors) is the match score. Metrics
come from a full ROC sweep: EER at the interpolated FPR=FNR crossing, TAR at
fixed FARs, and AUC.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pinact import nn
from pinact.linalg import SeededRng


@dataclass
class RecognizerConfig:
    emb_dim: int = 32
    lr: float = 0.02
    momentum: float = 0.9
    epochs: int = 60
    min_epochs: int = 24
    batch_size: int = 16
    decay_epochs: int = 30
    target_acc: float = 0.995
    min_acc: float = 0.90
    # keeps unnormalized feature norms small, so the cosine head is as
    # perturbation-sensitive as a deep backbone would be at this scale
    feature_norm_penalty: float = 0.3
    grad_clip: float = 5.0
    seed: int = 11


class RecognizerModel:
    """Classifier net plus the embedding view over the same trunk weights."""

    def __init__(self, classifier_spec, params, n_trunk, height, width):
        self.classifier_spec = classifier_spec
        self.params = params
        self.n_trunk = n_trunk
        self.height = height
        self.width = width
        self.trunk_spec = nn.NetworkSpec(
            classifier_spec.layers[:n_trunk], classifier_spec.input_shape
        )
        self.head_spec = nn.NetworkSpec(
            classifier_spec.layers[n_trunk:], self.trunk_spec.output_shape
        )
        self.embed_spec = nn.NetworkSpec(
            list(classifier_spec.layers[:n_trunk]) + [nn.L2Normalize()],
            classifier_spec.input_shape,
        )

    @property
    def emb_dim(self):
        return self.embed_spec.output_shape[0]

    def embed_params(self):
        return self.params[: self.n_trunk] + [{}]

    def checkpoint_hash(self):
        return nn.params_hash(self.params)


def build_recognizer(n_identities, height=32, width=32, emb_dim=32, seed=11):
    def down(n):
        return (n + 2 - 3) // 2 + 1

    flat = down(down(height)) * down(down(width)) * 32
    layers = [
        nn.Conv2d(1, 16, 3, 1, 1),
        nn.PReLU(16),
        nn.Conv2d(16, 32, 3, 2, 1),
        nn.PReLU(32),
        nn.Conv2d(32, 32, 3, 2, 1),
        nn.PReLU(32),
        nn.Flatten(),
        nn.Affine(flat, emb_dim),
    ]
    n_trunk = len(layers)
    layers.append(nn.Affine(emb_dim, n_identities))
    spec = nn.NetworkSpec(layers, (1, height, width))
    params = nn.init_params(spec, SeededRng(seed, 101))
    return RecognizerModel(spec, params, n_trunk, height, width)


def train_recognizer(images, labels, config=None, height=32, width=32):
    """Cross-entropy training until the accuracy target or the epoch cap.

    `images` are flat rows in [0, 1]; raises if the final train accuracy is
    below config.min_acc (a dataset/model mismatch rather than bad luck).
    """
    config = config or RecognizerConfig()
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    idents = np.unique(labels)
    if idents.size < 8:
        raise ValueError("need at least 8 identities to train the recognizer")
    counts = np.bincount(labels)
    if np.any(counts[idents] < 10):
        raise ValueError("need at least 10 images per identity")
    model = build_recognizer(
        int(idents.max()) + 1, height, width, config.emb_dim, config.seed
    )
    n_trunk = model.n_trunk
    state = nn.init_optimizer(
        model.params, config.lr, config.momentum, config.decay_epochs
    )
    rng = SeededRng(config.seed, 202)
    order = np.arange(len(images))
    accuracy = 0.0
    for epoch in range(config.epochs):
        state.epoch = epoch
        rng.shuffle(order)
        hits = 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            grads = nn.zeros_like_params(model.params)
            for i in batch:
                x = images[i].reshape(1, height, width)
                feat, trunk_tape = nn.forward(
                    model.trunk_spec, model.params[:n_trunk], x
                )
                logits, head_tape = nn.forward(
                    model.head_spec, model.params[n_trunk:], feat
                )
                hits += int(np.argmax(logits) == labels[i])
                _, dlogits = nn.softmax_cross_entropy(logits, labels[i])
                head_res = nn.backward(head_tape, dlogits)
                trunk_res = nn.backward(
                    trunk_tape,
                    head_res.input_grad + config.feature_norm_penalty * feat,
                )
                nn.accumulate_params(
                    grads[:n_trunk], trunk_res.param_grads, 1.0 / len(batch)
                )
                nn.accumulate_params(
                    grads[n_trunk:], head_res.param_grads, 1.0 / len(batch)
                )
            nn.clip_grad_norm(grads, config.grad_clip)
            nn.sgd_momentum_step(model.params, grads, state)
        accuracy = hits / len(order)
        if accuracy >= config.target_acc and epoch + 1 >= config.min_epochs:
            break
    if accuracy < config.min_acc:
        raise RuntimeError(
            f"recognizer reached only {accuracy:.1%} train accuracy: "
            "dataset/model mismatch"
        )
    return model


def embed(model, x):
    """Deterministic unit-norm embedding of a flat image."""
    x = np.asarray(x, dtype=np.float64).reshape(1, model.height, model.width)
    return nn.predict(model.embed_spec, model.embed_params(), x)


def embed_many(model, images):
    return np.stack([embed(model, x) for x in images])


def similarity(e1, e2):
    return float(np.dot(e1, e2))


def pair_scores(model, dataset, pairs, transform=None):
    """Similarity per (id_a, id_b, label) pair; transform is applied to the
    probe (first) image, mirroring the attack/defense protocols."""
    pos, neg = [], []
    for id_a, id_b, label in pairs:
        xa = dataset.images[id_a]
        if transform is not None:
            xa = transform(xa)
        s = similarity(embed(model, xa), embed(model, dataset.images[id_b]))
        (pos if label else neg).append(s)
    return np.array(pos), np.array(neg)


# --- metrics ---------------------------------------------------------------------


@dataclass
class VerificationMetrics:
    eer: float
    tar_at_far: dict
    auc: float
    threshold: float
    low_confidence: bool = False

    def as_row(self):
        row = {"eer": self.eer, "auc": self.auc, "threshold": self.threshold}
        for far, tar in self.tar_at_far.items():
            row[f"tar_at_far_{far:g}"] = tar
        return row


def _roc_points(pos, neg):
    """FPR/TPR evaluated at thresholds -inf plus every score (predict s > t)."""
    taus = np.concatenate(([-np.inf], np.unique(np.concatenate([pos, neg]))))
    tpr = np.array([(pos > t).mean() for t in taus])
    fpr = np.array([(neg > t).mean() for t in taus])
    return taus, fpr, tpr


def compute_metrics(pos_scores, neg_scores, fars=(0.1, 0.01, 0.001)):
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both score lists must be non-empty")
    taus, fpr, tpr = _roc_points(pos, neg)
    fnr = 1.0 - tpr

    # EER: first threshold index where FPR <= FNR, linearly interpolated
    diff = fpr - fnr
    k = int(np.argmax(diff <= 0))
    if diff[k] == 0 or k == 0:
        eer = float(fpr[k])
        eer_tau = float(taus[k])
    else:
        d0, d1 = diff[k - 1], diff[k]
        t = d0 / (d0 - d1)
        eer = float(fpr[k - 1] + t * (fpr[k] - fpr[k - 1]))
        eer_tau = float(taus[k]) if np.isfinite(taus[k]) else float(taus[k - 1])

    order = np.lexsort((tpr, fpr))  # upper envelope at tied FPR values
    fpr_sorted = fpr[order]
    tpr_sorted = tpr[order]
    auc = float(np.trapezoid(tpr_sorted, fpr_sorted))
    tar = {
        far: float(np.interp(far, fpr_sorted, tpr_sorted)) for far in fars
    }
    return VerificationMetrics(
        eer=eer,
        tar_at_far=tar,
        auc=auc,
        threshold=eer_tau,
        low_confidence=bool(pos.size < 2 or neg.size < 2),
    )


def calibrate_threshold(pos_scores, tpr_target=0.99):
    """Highest threshold keeping clean TPR at or above the target."""
    pos = np.sort(np.asarray(pos_scores, dtype=np.float64))
    if pos.size == 0:
        raise ValueError("need positive scores to calibrate")
    k = int(np.floor((1.0 - tpr_target) * pos.size))
    return float(pos[min(k, pos.size - 1)] - 1e-9)


MODEL_META_KEYS = ("n_identities", "emb_dim", "height", "width")


def save_recognizer(path, model):
    nn.save_params(path, model.classifier_spec, model.params)


def load_recognizer(path, n_identities, height=32, width=32, emb_dim=32):
    model = build_recognizer(n_identities, height, width, emb_dim)
    model.params = nn.load_params(path, model.classifier_spec)
    return model
