"""Image-quality deferral: a contrastive projection network with a
probability head, trained to separate good from perturbed embeddings.

Label convention: 1 = good quality, 0 = adversarial / low quality. The
head's sigmoid output is the quality score; a sample is accepted only when
the score is strictly above the threshold.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, InsufficientDataError
from .fusion import FUSED_DIM
from .numcore import (
    Adam,
    BatchNorm1d,
    Linear,
    Module,
    PlateauScheduler,
    ReLU,
    as_array,
    binary_cross_entropy,
    sigmoid,
)

GOOD, ADVERSARIAL = 1, 0
DEFAULT_THRESHOLD = 0.8


class ContrastiveNet(Module):
    """Linear(1024->128) -> ReLU -> Linear(128->64) -> BatchNorm(64), then a
    Linear(64->1) + sigmoid head on the normalized projection."""

    def __init__(self, seed: int = 0, in_dim: int = FUSED_DIM, hidden: int = 128, proj_dim: int = 64):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.fc1 = self.add_child("fc1", Linear(in_dim, hidden, rng))
        self.act = ReLU()
        self.fc2 = self.add_child("fc2", Linear(hidden, proj_dim, rng))
        self.bn = self.add_child("bn", BatchNorm1d(proj_dim))
        self.head = self.add_child("head", Linear(proj_dim, 1, rng))

    def project(self, x) -> np.ndarray:
        return self.bn.forward(self.fc2.forward(self.act.forward(self.fc1.forward(x))))

    def forward(self, x):
        """Returns (projections (n, 64), quality scores (n,))."""
        z = self.project(x)
        return z, sigmoid(self.head.forward(z)[:, 0])

    def backward(self, dz, dlogit):
        dz = dz + self.head.backward(np.asarray(dlogit)[:, None])
        return self.fc1.backward(self.act.backward(self.fc2.backward(self.bn.backward(dz))))


def pairwise_distances(z: np.ndarray) -> np.ndarray:
    diff = z[:, None, :] - z[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def _pair_terms(d: np.ndarray, labels: np.ndarray, margin: float) -> tuple[float, np.ndarray]:
    """Loss from a distance matrix and the symmetric per-pair coefficient dL/dd."""
    n = d.shape[0]
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & upper
    neg_mask = ~same & upper
    n_pos, n_neg = int(pos_mask.sum()), int(neg_mask.sum())

    coef = np.zeros((n, n))
    loss = 0.0
    if n_pos:
        loss += d[pos_mask].sum() / n_pos
        coef[pos_mask] = 1.0 / n_pos
    if n_neg:
        hinge = margin - d[neg_mask]
        loss += np.maximum(hinge, 0.0).sum() / n_neg
        coef[neg_mask] = np.where(hinge > 0, -1.0 / n_neg, 0.0)
    return float(loss), coef + coef.T


def contrastive_loss_from_distances(d, labels, margin: float = 1.0) -> float:
    """Same loss evaluated on a precomputed symmetric distance matrix."""
    d = as_array(d)
    labels = np.asarray(labels)
    if d.ndim != 2 or d.shape[0] != d.shape[1] or labels.shape != (d.shape[0],):
        raise DimensionError("expected an (n, n) distance matrix and n labels")
    return _pair_terms(d, labels, margin)[0]


def contrastive_loss(z, labels, margin: float = 1.0) -> tuple[float, np.ndarray]:
    """Mean same-class distance plus mean cross-class hinge ``max(0, margin - d)``.

    Pairs are unordered (i < j). A term whose pair set is empty contributes 0.
    Returns the loss and its gradient w.r.t. ``z`` (zero-distance pairs
    contribute a zero subgradient).
    """
    z = as_array(z)
    labels = np.asarray(labels)
    n = z.shape[0]
    if n < 2:
        raise InsufficientDataError("contrastive loss needs at least 2 samples")
    if labels.shape != (n,):
        raise DimensionError("one label per projection is required")
    d = pairwise_distances(z)
    loss, coef = _pair_terms(d, labels, margin)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(d > 0, coef / d, 0.0)
    dz = g.sum(axis=1)[:, None] * z - g @ z
    return loss, dz


@dataclass
class DeferralConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    margin: float = 1.0
    contrastive_weight: float = 1.0
    bce_weight: float = 1.0
    val_fraction: float = 0.2
    patience: int = 5
    factor: float = 0.5
    min_lr: float = 1e-6
    threshold: float = DEFAULT_THRESHOLD
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 1 and batch_size >= 2")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.margin <= 0:
            raise ConfigError("margin must be positive")


def deferral_objective(net: ContrastiveNet, x, labels, config: DeferralConfig | None = None,
                       backward: bool = True) -> dict:
    """Weighted sum of contrastive loss on the projections and BCE on the head.

    With ``backward`` set, parameter gradients are accumulated into ``net``.
    """
    config = config or DeferralConfig()
    labels = np.asarray(labels, dtype=np.float64)
    z = net.project(x)
    logit = net.head.forward(z)[:, 0]
    p = sigmoid(logit)
    c_loss, dz = contrastive_loss(z, labels, config.margin)
    b_loss, dp = binary_cross_entropy(p, labels)
    total = config.contrastive_weight * c_loss + config.bce_weight * b_loss
    if backward:
        dlogit = config.bce_weight * dp * p * (1.0 - p)
        net.backward(config.contrastive_weight * dz, dlogit)
    return {"total": total, "contrastive": c_loss, "bce": b_loss, "scores": p}


@dataclass
class DeferralDecision:
    quality_score: float
    threshold: float
    verdict: str


def decide(score: float, threshold: float = DEFAULT_THRESHOLD) -> DeferralDecision:
    score = float(score)
    return DeferralDecision(score, threshold, "accept" if score > threshold else "defer")


def accept_mask(scores, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    return np.asarray(scores) > threshold


def stratified_holdout(labels, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels)
    train, val = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        if idx.size < 2:
            raise InsufficientDataError(f"class {c} needs at least 2 samples for a validation split")
        k = min(max(1, math.ceil(round(fraction * idx.size, 9))), idx.size - 1)
        val.append(idx[:k])
        train.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    chunks = [order[i:i + size] for i in range(0, order.size, size)]
    # batch norm cannot train on a single sample; fold it into the previous batch
    if len(chunks) > 1 and chunks[-1].size < 2:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def score(net: ContrastiveNet, x) -> np.ndarray:
    net.eval()
    _, p = net.forward(as_array(x))
    return p


@dataclass
class DeferralResult:
    net: ContrastiveNet
    history: list[dict] = field(default_factory=list)
    train_idx: np.ndarray | None = None
    val_idx: np.ndarray | None = None
    config: DeferralConfig | None = None

    def summary(self) -> dict:
        last = self.history[-1]
        return {
            "epochs": len(self.history),
            "final_lr": last["lr"],
            "final_train_loss": last["train_loss"],
            "final_val_loss": last["val_loss"],
            "final_val_accuracy": last["val_accuracy"],
            "config": asdict(self.config) if self.config else None,
        }


def train_deferral(good, adversarial, config: DeferralConfig | None = None) -> DeferralResult:
    """Adam + plateau scheduler on validation loss, stratified 80/20 split."""
    config = config or DeferralConfig()
    good = as_array(good)
    adversarial = as_array(adversarial)
    if good.ndim != 2 or adversarial.ndim != 2 or good.shape[1] != adversarial.shape[1]:
        raise DimensionError("good and adversarial embeddings must be 2-D with equal widths")
    if good.shape[0] == 0 or adversarial.shape[0] == 0:
        raise InsufficientDataError("both quality classes need at least one sample")
    x = np.vstack([good, adversarial])
    y = np.concatenate([np.full(good.shape[0], GOOD), np.full(adversarial.shape[0], ADVERSARIAL)])

    ss = np.random.SeedSequence(config.seed)
    init_ss, split_ss, shuffle_ss = ss.spawn(3)
    rng_split = np.random.default_rng(split_ss)
    rng_shuffle = np.random.default_rng(shuffle_ss)
    train_idx, val_idx = stratified_holdout(y, config.val_fraction, rng_split)

    net = ContrastiveNet(seed=int(init_ss.generate_state(1)[0]), in_dim=x.shape[1])
    opt = Adam(net, lr=config.lr)
    sched = PlateauScheduler(lr=config.lr, patience=config.patience, factor=config.factor,
                             min_lr=config.min_lr)
    history = []
    for epoch in range(config.epochs):
        net.train()
        lr_used = opt.lr
        total, seen = 0.0, 0
        for batch in _batches(rng_shuffle.permutation(train_idx), config.batch_size):
            opt.zero_grad()
            out = deferral_objective(net, x[batch], y[batch], config)
            opt.step()
            total += out["total"] * batch.size
            seen += batch.size
        net.eval()
        val = deferral_objective(net, x[val_idx], y[val_idx], config, backward=False)
        val_acc = float(np.mean(accept_mask(val["scores"], config.threshold) == (y[val_idx] == GOOD)))
        opt.lr = sched.step(val["total"])
        history.append({
            "epoch": epoch + 1,
            "lr": lr_used,
            "train_loss": total / seen,
            "val_loss": val["total"],
            "val_contrastive": val["contrastive"],
            "val_bce": val["bce"],
            "val_accuracy": val_acc,
        })
    net.eval()
    return DeferralResult(net, history, train_idx, val_idx, config)
