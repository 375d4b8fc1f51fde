"""Training loops: the tabular baseline and cross-validated fusion models."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .dataprep import (
    N_CLASSES,
    SELECTED_FEATURES,
    Dataset,
    Scaler,
    class_weights,
    downsample_balanced,
    kfold,
)
from .errors import ConfigError, DimensionError, InsufficientDataError
from .formats import EmbeddingFile
from .fusion import FusionModel, TabularNet, canonical_strategy
from .metrics import MetricsReport, mean_reports
from .numcore import Adam, Module, softmax, weighted_cross_entropy


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    strategy: str = "concat"
    class_weights: list[float] | None = None
    k: int = 5
    per_class: int | None = 82
    balance_test: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if self.k < 2:
            raise ConfigError("k must be at least 2")
        self.strategy = canonical_strategy(self.strategy)


def fit_classifier(model: Module, inputs: tuple, y, weights, epochs: int, batch_size: int,
                   lr: float, rng: np.random.Generator) -> list[float]:
    """Minibatch Adam on class-weighted cross entropy; reshuffles every epoch.

    Returns the mean training loss of each epoch.
    """
    y = np.asarray(y, dtype=np.int64)
    n = y.size
    opt = Adam(model, lr=lr)
    history = []
    model.train()
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            logits = model.forward(*(a[idx] for a in inputs))
            loss, dlogits = weighted_cross_entropy(logits, y[idx], weights)
            model.backward(dlogits)
            opt.step()
            total += loss * idx.size
        history.append(total / n)
    model.eval()
    return history


def predict_proba(model: Module, inputs: tuple) -> np.ndarray:
    model.eval()
    return softmax(model.forward(*inputs))


def fusion_inputs(ds: Dataset, images, scaler: Scaler) -> tuple[np.ndarray, np.ndarray]:
    """(image embeddings (n, 512), standardized selected features (n, 4))."""
    if isinstance(images, EmbeddingFile):
        img = images.take(ds.sample_ids).astype(np.float64)
    else:
        img = np.asarray(images, dtype=np.float64)
        if img.shape[0] != len(ds):
            raise DimensionError(f"{img.shape[0]} image embeddings for {len(ds)} samples")
    x = scaler.transform(ds.X)
    pos = [ds.feature_names.index(f) for f in SELECTED_FEATURES]
    return img, x[:, pos]


def _weights_for(counts, config_weights):
    if config_weights is not None:
        return np.asarray(config_weights, dtype=np.float64)
    return class_weights(np.maximum(counts, 1))


@dataclass
class FoldResult:
    fold: int
    model: FusionModel
    train_metrics: MetricsReport
    val_metrics: MetricsReport
    loss_history: list[float]
    val_ids: list[str]


@dataclass
class FusionCVResult:
    strategy: str
    folds: list[FoldResult]
    scaler: Scaler
    train_ids: list[str]
    test_metrics: MetricsReport | None = None
    test_ids: list[str] = field(default_factory=list)
    config: TrainConfig | None = None

    @property
    def best_fold(self) -> int:
        accs = [f.val_metrics.accuracy for f in self.folds]
        return int(np.argmax(accs))

    def to_dict(self) -> dict:
        return {
            "kind": "fusion_cv",
            "strategy": self.strategy,
            "config": asdict(self.config) if self.config else None,
            "n_train": len(self.train_ids),
            "n_test": len(self.test_ids),
            "best_fold": self.best_fold,
            "fold_train_mean": mean_reports([f.train_metrics for f in self.folds]),
            "fold_val_mean": mean_reports([f.val_metrics for f in self.folds]),
            "folds": [
                {
                    "fold": f.fold,
                    "train": f.train_metrics.to_dict(),
                    "val": f.val_metrics.to_dict(),
                    "loss_history": f.loss_history,
                }
                for f in self.folds
            ],
            "test": self.test_metrics.to_dict() if self.test_metrics else None,
        }


def _balanced_keep(y, seed) -> np.ndarray:
    """Downsample every stage to the rarest stage's count (all stages must be present)."""
    counts = np.bincount(y, minlength=N_CLASSES)
    if counts.min() == 0:
        return np.arange(y.size)
    return downsample_balanced(y, int(counts.min()), seed)


def train_fusion_cv(train: Dataset, images, config: TrainConfig | None = None,
                    test: Dataset | None = None, test_images=None) -> FusionCVResult:
    """k-fold cross-validation of one fusion strategy.

    The training pool is put in sample-id order, optionally downsampled to
    ``per_class`` per stage, standardized with statistics from that pool,
    and split into stratified folds. Held-out metrics average the softmax
    outputs of the k fold models.
    """
    config = config or TrainConfig()
    ss = np.random.SeedSequence(config.seed)
    ds_ss, fold_ss, test_ss, *fold_children = ss.spawn(3 + config.k)

    order = np.argsort(np.asarray(train.sample_ids, dtype=object), kind="stable")
    pool = train.subset(order)
    pool_images = images if isinstance(images, EmbeddingFile) else np.asarray(images)[order]
    if config.per_class is not None:
        keep = downsample_balanced(pool.y, config.per_class, np.random.default_rng(ds_ss))
        pool = pool.subset(keep)
        if not isinstance(pool_images, EmbeddingFile):
            pool_images = pool_images[keep]
    if len(pool) < config.k:
        raise InsufficientDataError(f"{len(pool)} samples cannot fill {config.k} folds")

    scaler = Scaler.fit(pool.X)
    img, tab = fusion_inputs(pool, pool_images, scaler)
    folds = []
    for f, (tr, va) in enumerate(kfold(pool.y, config.k, np.random.default_rng(fold_ss))):
        init_ss, shuffle_ss = fold_children[f].spawn(2)
        model = FusionModel(config.strategy, seed=int(init_ss.generate_state(1)[0]))
        weights = _weights_for(np.bincount(pool.y[tr], minlength=N_CLASSES), config.class_weights)
        history = fit_classifier(model, (img[tr], tab[tr]), pool.y[tr], weights, config.epochs,
                                 config.batch_size, config.lr, np.random.default_rng(shuffle_ss))
        folds.append(FoldResult(
            f,
            model,
            MetricsReport.from_predictions(pool.y[tr], predict_proba(model, (img[tr], tab[tr])), N_CLASSES),
            MetricsReport.from_predictions(pool.y[va], predict_proba(model, (img[va], tab[va])), N_CLASSES),
            history,
            [pool.sample_ids[i] for i in va],
        ))

    result = FusionCVResult(config.strategy, folds, scaler, list(pool.sample_ids), config=config)
    if test is not None and len(test):
        t_order = np.argsort(np.asarray(test.sample_ids, dtype=object), kind="stable")
        held = test.subset(t_order)
        t_images = test_images if test_images is not None else images
        if not isinstance(t_images, EmbeddingFile):
            t_images = np.asarray(t_images)[t_order]
        if config.balance_test:
            keep = _balanced_keep(held.y, np.random.default_rng(test_ss))
            held = held.subset(keep)
            if not isinstance(t_images, EmbeddingFile):
                t_images = t_images[keep]
        t_img, t_tab = fusion_inputs(held, t_images, scaler)
        probs = np.mean([predict_proba(fr.model, (t_img, t_tab)) for fr in folds], axis=0)
        result.test_metrics = MetricsReport.from_predictions(held.y, probs, N_CLASSES)
        result.test_ids = list(held.sample_ids)
    return result


@dataclass
class TabularResult:
    model: TabularNet
    scaler: Scaler
    weights: np.ndarray
    loss_history: list[float]
    test_metrics: MetricsReport | None
    train_metrics: MetricsReport

    def to_dict(self) -> dict:
        return {
            "kind": "tabular",
            "class_weights": [float(w) for w in self.weights],
            "loss_history": self.loss_history,
            "train": self.train_metrics.to_dict(),
            "test": self.test_metrics.to_dict() if self.test_metrics else None,
        }


def train_tabular(dataset: Dataset, config: TrainConfig | None = None) -> TabularResult:
    """Tabular baseline on the ``train`` split, evaluated on the ``test`` split."""
    config = config or TrainConfig(epochs=20, per_class=None)
    ds = dataset.sorted_by_id()
    train = ds.where_split("train")
    test = ds.where_split("test")
    if len(train) < 2:
        raise InsufficientDataError("tabular training needs a train split with at least 2 samples")
    init_ss, shuffle_ss = np.random.SeedSequence(config.seed).spawn(2)
    scaler = Scaler.fit(train.X)
    weights = _weights_for(train.class_counts(), config.class_weights)
    model = TabularNet(seed=int(init_ss.generate_state(1)[0]))
    xtr = scaler.transform(train.X)
    history = fit_classifier(model, (xtr,), train.y, weights, config.epochs, config.batch_size,
                             config.lr, np.random.default_rng(shuffle_ss))
    train_m = MetricsReport.from_predictions(train.y, predict_proba(model, (xtr,)), N_CLASSES)
    test_m = None
    if len(test):
        test_m = MetricsReport.from_predictions(test.y, predict_proba(model, (scaler.transform(test.X),)), N_CLASSES)
    return TabularResult(model, scaler, weights, history, test_m, train_m)
