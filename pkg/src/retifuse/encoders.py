"""Image-embedding sources and the shared per-feature tabular projection."""

from __future__ import annotations

import math

import numpy as np

from .dataprep import EMBED_DIM
from .errors import DimensionError
from .formats import EmbeddingFile
from .numcore import LayerNorm, Linear, Module
from .perturb import check_image, resize_bilinear

POOL = 16


class PrecomputedEncoder:
    """Row lookup into an embedding file, keyed by sample id."""

    def __init__(self, source: EmbeddingFile):
        if source.cols != EMBED_DIM:
            raise DimensionError(f"image embeddings must have {EMBED_DIM} columns, got {source.cols}")
        self.source = source

    def encode(self, sample_id: str) -> np.ndarray:
        return self.source.lookup(sample_id).astype(np.float64)

    def encode_many(self, sample_ids) -> np.ndarray:
        return self.source.take(list(sample_ids)).astype(np.float64)


class BaselineEncoder:
    """Frozen stand-in backbone: bilinear pool to 16x16x3, then a fixed
    Gaussian random projection 768 -> 512 scaled by 1/sqrt(768)."""

    def __init__(self, seed: int = 0, dim: int = EMBED_DIM):
        n_in = POOL * POOL * 3
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x62617365]))
        self.projection = rng.standard_normal((dim, n_in)) / math.sqrt(n_in)
        self.projection.setflags(write=False)
        self.seed = seed

    def encode(self, image: np.ndarray) -> np.ndarray:
        """``image`` is a preprocessed (normalized) 224x224x3 array."""
        check_image(image)
        pooled = resize_bilinear(image, POOL, POOL)
        return self.projection @ pooled.reshape(-1)

    def encode_many(self, images) -> np.ndarray:
        return np.stack([self.encode(im) for im in images]) if len(images) else np.zeros((0, EMBED_DIM))


def encode_image(item, encoder) -> np.ndarray:
    """Embed one image (baseline) or one sample id (precomputed)."""
    return encoder.encode(item)


class TabularProjection(Module):
    """One Linear(1 -> 512) + LayerNorm(512) shared by every selected feature.

    Input (n, F) scalars -> output (n, F, 512) tokens.
    """

    def __init__(self, n_features: int = 4, dim: int = EMBED_DIM, rng=None):
        super().__init__()
        self.n_features = n_features
        self.dim = dim
        self.linear = self.add_child("linear", Linear(1, dim, rng))
        self.norm = self.add_child("norm", LayerNorm(dim))

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise DimensionError(f"expected {self.n_features} tabular scalars per sample, got shape {x.shape}")
        return self.norm.forward(self.linear.forward(x[..., None]))

    def backward(self, dtokens: np.ndarray) -> np.ndarray:
        return self.linear.backward(self.norm.backward(dtokens))[..., 0]


def project_tabular(x, proj: TabularProjection) -> np.ndarray:
    out = proj.forward(x)
    return out[0] if np.asarray(x).ndim == 1 else out
