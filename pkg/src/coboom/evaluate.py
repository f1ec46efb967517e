"""Downstream evaluation: frozen-encoder linear probing, full fine-tuning,
and multi-label ROC-AUC scoring.

Probing is full-batch gradient descent on mean sigmoid cross-entropy over
standardized pooled features; datasets here are tiny, so full batches
remove batching nondeterminism.  AUC uses the Mann-Whitney rank form with
ties counted as half, which agrees exactly with pairwise counting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, add, bce_with_logits, div, matmul, reshape, sub, scale, zero_grad
from .data import Dataset, ImageSample
from .errors import ContractError, DimensionError
from .model import Encoder, ModelState, MLPHead, ConvLayer, encode, global_avg_pool
from .seeding import mix64, tag

Array = np.ndarray


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

def snapshot_encoder(encoder: Encoder, requires_grad: bool = False) -> Encoder:
    """Value copy of an encoder, by default gradient-free and read-only."""
    layers = [ConvLayer(w=Tensor(l.w.data.copy(), requires_grad=requires_grad),
                        b=Tensor(l.b.data.copy(), requires_grad=requires_grad),
                        stride=l.stride, pad=l.pad)
              for l in encoder.layers]
    return Encoder(layers, encoder.in_size)


def extract_features(encoder: Encoder, samples: list[ImageSample]) -> Array:
    """Row i = pooled tokens of image i; no augmentation, no gradients."""
    rows = []
    for s in samples:
        image = Tensor(s.pixels[None, :, :])
        rows.append(global_avg_pool(encode(encoder, image)).data.copy())
    return np.stack(rows, axis=0)


def label_matrix(samples: list[ImageSample]) -> Array:
    return np.stack([s.labels for s in samples], axis=0).astype(np.float64)


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------

@dataclass
class ProbeModel:
    weight: Array            # (F, C)
    bias: Array              # (C,)
    feat_mean: Array         # standardization folded into the model
    feat_std: Array
    loss_history: list[float] = field(default_factory=list)

    def decision_scores(self, features: Array) -> Array:
        return ((features - self.feat_mean) / self.feat_std) @ self.weight + self.bias


def _head_init(feature_dim: int, classes: int, seed: int) -> tuple[Array, Array]:
    rng = np.random.default_rng(mix64(seed, tag("probe_head")))
    return rng.normal(0.0, 0.01, size=(feature_dim, classes)), np.zeros(classes)


def _standardization(features: Array) -> tuple[Array, Array]:
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    return mean, std


def train_linear_probe(features: Array, labels: Array, epochs: int, lr: float,
                       seed: int) -> ProbeModel:
    """Full-batch GD on mean sigmoid cross-entropy; deterministic per seed."""
    if features.shape[0] != labels.shape[0]:
        raise DimensionError(
            f"feature rows ({features.shape[0]}) != label rows ({labels.shape[0]})")
    n, f = features.shape
    classes = labels.shape[1]
    mean, std = _standardization(features)
    xs = Tensor((features - mean) / std)
    ones = Tensor(np.ones((n, 1)))
    w0, b0 = _head_init(f, classes, seed)
    w = Tensor(w0, requires_grad=True)
    b = Tensor(b0, requires_grad=True)
    history = []
    for _ in range(epochs):
        zero_grad([w, b])
        logits = add(matmul(xs, w), matmul(ones, reshape(b, (1, classes))))
        loss = bce_with_logits(logits, labels)
        loss.backward()
        w.data -= lr * w.grad
        b.data -= lr * b.grad
        history.append(loss.item())
    return ProbeModel(weight=w.data.copy(), bias=b.data.copy(),
                      feat_mean=mean, feat_std=std, loss_history=history)


def fine_tune(state: ModelState, samples: list[ImageSample], epochs: int, lr: float,
              seed: int) -> tuple[Encoder, ProbeModel]:
    """Jointly update a copy of the online encoder and the linear head.

    Standardization statistics are frozen from the initial encoder's
    features so the frozen-probe model stays inside this hypothesis class.
    """
    encoder = snapshot_encoder(state.encoder, requires_grad=True)
    frozen = snapshot_encoder(state.encoder)
    feats0 = extract_features(frozen, samples)
    mean, std = _standardization(feats0)
    labels = label_matrix(samples)
    n, classes = labels.shape
    w0, b0 = _head_init(feats0.shape[1], classes, seed)
    w = Tensor(w0, requires_grad=True)
    b = Tensor(b0, requires_grad=True)
    mean_t = Tensor(mean)
    std_t = Tensor(std)
    params = [p for _, p in encoder.named_parameters()] + [w, b]
    history = []
    for _ in range(epochs):
        zero_grad(params)
        per_sample = []
        for s in samples:
            z = global_avg_pool(encode(encoder, Tensor(s.pixels[None, :, :])))
            zs = div(sub(z, mean_t), std_t)
            logits = add(matmul(reshape(zs, (1, feats0.shape[1])), w),
                         reshape(b, (1, classes)))
            per_sample.append(bce_with_logits(logits, s.labels[None, :].astype(np.float64)))
        loss = per_sample[0]
        for term in per_sample[1:]:
            loss = add(loss, term)
        loss = scale(loss, 1.0 / n)
        loss.backward()
        for p in params:
            if p.grad is not None:
                p.data -= lr * p.grad
        history.append(loss.item())
    probe = ProbeModel(weight=w.data.copy(), bias=b.data.copy(),
                       feat_mean=mean, feat_std=std, loss_history=history)
    return encoder, probe


# ---------------------------------------------------------------------------
# ROC-AUC
# ---------------------------------------------------------------------------

def roc_auc(scores, labels) -> float | None:
    """Fraction of (positive, negative) pairs ranked correctly, ties as 0.5.

    Returns None (the undefined marker) when either class is absent.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise DimensionError(f"roc_auc expects matching 1-d arrays, got {s.shape} and {y.shape}")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != y.size:
        raise ContractError("labels must be binary 0/1")
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(s, kind="stable")
    ranks = np.empty(s.size, dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0   # average 1-based rank
        i = j + 1
    rank_sum_pos = ranks[y == 1].sum()
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def macro_auc(scores: Array, labels: Array) -> tuple[list[float | None], float | None]:
    """Per-class AUCs plus their mean over the defined columns."""
    per_class = [roc_auc(scores[:, c], labels[:, c]) for c in range(labels.shape[1])]
    defined = [a for a in per_class if a is not None]
    return per_class, (float(np.mean(defined)) if defined else None)


# ---------------------------------------------------------------------------
# label subsetting
# ---------------------------------------------------------------------------

def stratified_subset(labels: Array, fraction: float, seed: int) -> Array:
    """Seeded stratified sampling by full label vector; ~fraction per group,
    at least one sample from every nonempty group."""
    if not (0.0 < fraction <= 1.0):
        raise ContractError(f"fraction must be in (0, 1], got {fraction}")
    groups: dict[tuple, list[int]] = {}
    for i, row in enumerate(np.asarray(labels)):
        groups.setdefault(tuple(int(v) for v in row), []).append(i)
    rng = np.random.default_rng(mix64(seed, tag("label_subset")))
    chosen: list[int] = []
    for key in sorted(groups):
        members = groups[key]
        k = max(1, int(round(fraction * len(members))))
        k = min(k, len(members))
        pick = rng.choice(len(members), size=k, replace=False)
        chosen.extend(members[p] for p in sorted(pick))
    return np.array(sorted(chosen), dtype=np.int64)


# ---------------------------------------------------------------------------
# evaluation protocols
# ---------------------------------------------------------------------------

def _splits(dataset: Dataset) -> tuple[list[ImageSample], list[ImageSample]]:
    train = dataset.subset("train")
    test = dataset.subset("test")
    if not train or not test:
        raise ContractError("evaluation needs both a train and a test split in the dataset")
    return train, test


def probe_evaluation(encoder: Encoder, dataset: Dataset, fraction: float, seed: int,
                     epochs: int, lr: float) -> dict:
    """Frozen-encoder linear probing on a stratified label fraction."""
    train, test = _splits(dataset)
    frozen = snapshot_encoder(encoder)
    train_feats = extract_features(frozen, train)
    train_labels = label_matrix(train)
    idx = stratified_subset(train_labels, fraction, seed)
    probe = train_linear_probe(train_feats[idx], train_labels[idx], epochs, lr, seed)
    scores = probe.decision_scores(extract_features(frozen, test))
    per_class, macro = macro_auc(scores, label_matrix(test))
    return {"protocol": "linear_probe", "label_fraction": fraction,
            "per_class_auc": per_class, "macro_auc": macro,
            "n_train": int(idx.size), "n_test": len(test), "seed": seed,
            "probe_epochs": epochs, "probe_lr": lr,
            "final_train_loss": probe.loss_history[-1] if probe.loss_history else None}


def finetune_evaluation(state: ModelState, dataset: Dataset, fraction: float, seed: int,
                        epochs: int, lr: float) -> dict:
    """Encoder + linear head updated jointly on a stratified label fraction."""
    train, test = _splits(dataset)
    train_labels = label_matrix(train)
    idx = stratified_subset(train_labels, fraction, seed)
    subset = [train[i] for i in idx]
    encoder, probe = fine_tune(state, subset, epochs, lr, seed)
    frozen = snapshot_encoder(encoder)
    scores = probe.decision_scores(extract_features(frozen, test))
    per_class, macro = macro_auc(scores, label_matrix(test))
    return {"protocol": "fine_tune", "label_fraction": fraction,
            "per_class_auc": per_class, "macro_auc": macro,
            "n_train": int(idx.size), "n_test": len(test), "seed": seed,
            "finetune_epochs": epochs, "finetune_lr": lr,
            "final_train_loss": probe.loss_history[-1] if probe.loss_history else None}
