"""Tabular ingestion, cleaning, scaling, splitting and synthetic data."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    DimensionError,
    EmptyDatasetError,
    FormatError,
    InsufficientDataError,
)
from .formats import atomic_write_text

N_CLASSES = 5
EMBED_DIM = 512

FEATURE_NAMES = (
    "age",
    "sex",
    "dm_time",
    "insulin",
    "insulin_time",
    "oraltreatment_dm",
    "systemic_hypertension",
    "insurance",
    "educational_level",
    "alcohol_consumption",
    "smoking",
    "obesity",
    "vascular_disease",
    "acute_myocardial_infarction",
    "nephropathy",
    "neuropathy",
    "diabetic_foot",
)
# order used for tabular tokens
SELECTED_FEATURES = ("educational_level", "sex", "dm_time", "age")


@dataclass
class TabularRecord:
    patient_id: str
    features: dict[str, float | None]
    dr_stage: int | None
    sample_id: str | None = None
    split: str | None = None

    def __post_init__(self):
        if set(self.features) != set(FEATURE_NAMES):
            missing = sorted(set(FEATURE_NAMES) - set(self.features))
            extra = sorted(set(self.features) - set(FEATURE_NAMES))
            raise DimensionError(f"record needs the 17 features; missing={missing} extra={extra}")

    @property
    def missing(self) -> dict[str, bool]:
        return {k: v is None for k, v in self.features.items()}


@dataclass
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x) -> "Scaler":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise InsufficientDataError("standardization needs at least 2 samples")
        mean = x.mean(axis=0)
        std = np.sqrt(((x - mean) ** 2).mean(axis=0))
        return cls(mean, std)

    def transform(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        safe = np.where(self.std > 0, self.std, 1.0)
        return np.where(self.std > 0, (x - self.mean) / safe, 0.0)

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d) -> "Scaler":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def standardize_fit_transform(train_x) -> tuple[Scaler, np.ndarray]:
    scaler = Scaler.fit(train_x)
    return scaler, scaler.transform(train_x)


@dataclass
class Dataset:
    sample_ids: list[str]
    patient_ids: list[str]
    X: np.ndarray  # (n, 17) raw feature values
    y: np.ndarray  # (n,) stage labels
    split: np.ndarray  # (n,) "train" / "test" / ""
    feature_names: tuple[str, ...] = FEATURE_NAMES
    scaler: Scaler | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64).reshape(len(self.sample_ids), len(self.feature_names))
        self.y = np.asarray(self.y, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=object)
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise FormatError("sample ids must be unique")

    def __len__(self) -> int:
        return len(self.sample_ids)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            [self.sample_ids[i] for i in idx],
            [self.patient_ids[i] for i in idx],
            self.X[idx],
            self.y[idx],
            self.split[idx],
            self.feature_names,
            self.scaler,
        )

    def where_split(self, tag: str) -> "Dataset":
        return self.subset(np.flatnonzero(self.split == tag))

    def sorted_by_id(self) -> "Dataset":
        return self.subset(np.argsort(np.asarray(self.sample_ids, dtype=object), kind="stable"))

    def columns(self, names) -> np.ndarray:
        pos = [self.feature_names.index(n) for n in names]
        return self.X[:, pos]

    def class_counts(self, k: int = N_CLASSES) -> np.ndarray:
        return np.bincount(self.y, minlength=k)

    def index_of(self) -> dict[str, int]:
        return {sid: i for i, sid in enumerate(self.sample_ids)}


def _mode(values: np.ndarray) -> float:
    uniq, counts = np.unique(values, return_counts=True)
    # np.unique sorts ascending, argmax takes the first maximum -> smallest value wins ties
    return float(uniq[np.argmax(counts)])


def clean(records) -> Dataset:
    """Drop rows without a stage and mode-impute missing feature values."""
    kept = [r for r in records if r.dr_stage is not None]
    if not kept:
        raise EmptyDatasetError("no records with a known dr_stage")
    for r in kept:
        if not 0 <= int(r.dr_stage) < N_CLASSES:
            raise FormatError(f"dr_stage {r.dr_stage} out of range for {r.patient_id}")
    x = np.array(
        [[np.nan if r.features[f] is None else float(r.features[f]) for f in FEATURE_NAMES] for r in kept],
        dtype=np.float64,
    )
    for j, name in enumerate(FEATURE_NAMES):
        col = x[:, j]
        gaps = np.isnan(col)
        if gaps.any():
            present = col[~gaps]
            if present.size == 0:
                raise EmptyDatasetError(f"feature {name!r} is missing in every record")
            col[gaps] = _mode(present)
    sample_ids = [r.sample_id if r.sample_id else r.patient_id for r in kept]
    return Dataset(
        sample_ids,
        [r.patient_id for r in kept],
        x,
        np.array([int(r.dr_stage) for r in kept]),
        np.array([r.split or "" for r in kept], dtype=object),
    )


def split_train_test(dataset: Dataset, ratio: float = 0.8, seed: int = 0) -> Dataset:
    """Random image-level split; the test side gets ceil((1 - ratio) * n) samples."""
    n = len(dataset)
    if n < 5:
        raise InsufficientDataError(f"need at least 5 samples to split, got {n}")
    if not 0.0 < ratio < 1.0:
        raise ConfigError("ratio must lie in (0, 1)")
    n_test = math.ceil(round((1.0 - ratio) * n, 9))
    perm = np.random.default_rng(seed).permutation(n)
    split = np.full(n, "train", dtype=object)
    split[perm[n - n_test:]] = "test"
    out = dataset.subset(np.arange(n))
    out.split = split
    return out


def class_weights(counts) -> np.ndarray:
    """Inverse-frequency weights N / (K * n_c)."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise ConfigError("counts must be a non-empty 1-D sequence")
    if np.any(counts <= 0):
        raise ConfigError(f"every class needs a positive count, got {counts.tolist()}")
    return counts.sum() / (counts.size * counts)


def downsample_balanced(labels, per_class: int = 82, seed: int = 0, k: int = N_CLASSES) -> np.ndarray:
    """Indices of ``per_class`` samples drawn without replacement from each class."""
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(k):
        idx = np.flatnonzero(labels == c)
        if idx.size < per_class:
            raise InsufficientDataError(f"class {c} has {idx.size} samples, need {per_class}")
        chosen.append(rng.choice(idx, size=per_class, replace=False))
    return np.sort(np.concatenate(chosen))


def kfold(labels, k: int = 5, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified k-fold partition of positions ``0..n-1``.

    Each class is shuffled and dealt round-robin; the deal continues across
    classes, so overall fold sizes also differ by at most one.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    if k < 2:
        raise ConfigError("k must be at least 2")
    if n < k:
        raise InsufficientDataError(f"cannot make {k} folds from {n} samples")
    rng = np.random.default_rng(seed)
    order = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)])
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[order] = np.arange(n) % k
    return [(np.flatnonzero(fold_of != f), np.flatnonzero(fold_of == f)) for f in range(k)]


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def _synth_tabular(rng: np.random.Generator, y: np.ndarray) -> np.ndarray:
    n = y.size
    cols = {}
    cols["age"] = np.clip(np.round(48 + 4.0 * y + rng.normal(0, 6, n)), 18, 95)
    cols["sex"] = (rng.random(n) < 0.25 + 0.12 * y).astype(float)
    cols["dm_time"] = np.clip(np.round(4 + 3.0 * y + rng.normal(0, 2.5, n)), 0, 60)
    cols["educational_level"] = np.clip(np.round(5.5 - 0.9 * y + rng.normal(0, 0.8, n)), 1, 7)
    cols["insulin_time"] = np.clip(np.round(rng.normal(6, 4, n)), 0, 40)
    for name in FEATURE_NAMES:
        if name not in cols:
            cols[name] = (rng.random(n) < 0.3).astype(float)
    return np.column_stack([cols[name] for name in FEATURE_NAMES])


def synth_generate(
    n_per_class: int,
    seed: int = 0,
    sigma: float = 1.0,
    mean_scale: float = 0.25,
    holdout_per_class: int = 0,
    dim: int = EMBED_DIM,
) -> tuple[Dataset, np.ndarray]:
    """Class-structured stand-in for a real image + tabular cohort.

    Image embeddings are ``N(mu_c, sigma^2 I)`` with class means drawn once
    from the seed; the four selected tabular features shift with the stage
    and the other thirteen are noise. Samples are tagged ``train``; an
    optional balanced ``test`` block is drawn from the same distribution.
    """
    if n_per_class < 1 or holdout_per_class < 0:
        raise ConfigError("n_per_class must be >= 1 and holdout_per_class >= 0")
    ss = np.random.SeedSequence(seed)
    mean_ss, train_ss, test_ss = ss.spawn(3)
    means = np.random.default_rng(mean_ss).standard_normal((N_CLASSES, dim)) * mean_scale

    def block(n_each, child, tag, prefix):
        rng = np.random.default_rng(child)
        y = np.repeat(np.arange(N_CLASSES), n_each)
        emb = means[y] + sigma * rng.standard_normal((y.size, dim))
        x = _synth_tabular(rng, y)
        ids = [f"{prefix}{i:05d}" for i in range(y.size)]
        pids = [f"P{prefix}{i // 2:05d}" for i in range(y.size)]
        return ids, pids, x, y, [tag] * y.size, emb

    parts = [block(n_per_class, train_ss, "train", "s")]
    if holdout_per_class:
        parts.append(block(holdout_per_class, test_ss, "test", "t"))
    ids = sum((p[0] for p in parts), [])
    pids = sum((p[1] for p in parts), [])
    ds = Dataset(
        ids,
        pids,
        np.vstack([p[2] for p in parts]),
        np.concatenate([p[3] for p in parts]),
        np.array(sum((p[4] for p in parts), []), dtype=object),
    )
    return ds, np.vstack([p[5] for p in parts])


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

REQUIRED_COLUMNS = ("patient_id", *FEATURE_NAMES, "dr_stage")


def _parse_number(text: str, line: int, col: str) -> float | None:
    text = text.strip()
    if text == "" or text.lower() == "nan":
        return None
    try:
        return float(text)
    except ValueError:
        raise FormatError(f"line {line}: column {col!r} is not numeric: {text!r}") from None


def read_records(path) -> list[TabularRecord]:
    """Parse a header-first UTF-8 CSV; empty cells are missing values."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise FormatError(f"{path}: missing columns {missing}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            stage = _parse_number(row["dr_stage"], lineno, "dr_stage")
            if stage is not None and stage != int(stage):
                raise FormatError(f"line {lineno}: dr_stage must be an integer")
            records.append(
                TabularRecord(
                    patient_id=row["patient_id"],
                    features={f: _parse_number(row[f], lineno, f) for f in FEATURE_NAMES},
                    dr_stage=None if stage is None else int(stage),
                    sample_id=(row.get("sample_id") or None),
                    split=(row.get("split") or None),
                )
            )
    return records


def _fmt(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 1e15 else repr(v)


def dataset_to_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "patient_id", *ds.feature_names, "dr_stage", "split"])
    for i, sid in enumerate(ds.sample_ids):
        w.writerow([sid, ds.patient_ids[i], *(_fmt(v) for v in ds.X[i]), int(ds.y[i]), ds.split[i]])
    return buf.getvalue()


def write_dataset(ds: Dataset, path) -> None:
    atomic_write_text(path, dataset_to_csv(ds))


def load_dataset(path) -> Dataset:
    """Read a dataset CSV; rows must be complete (run ``clean`` for raw data)."""
    return clean(read_records(path))
