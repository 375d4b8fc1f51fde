"""Fusion strategies, the stage classifier and the tabular-only baseline.

Token batches are shaped (B, T, 512): one image token and four tabular
tokens per sample. Every strategy returns a (B, 1024) joint vector with the
image-derived half first.
"""

from __future__ import annotations

import math

import numpy as np

from .dataprep import EMBED_DIM, FEATURE_NAMES, N_CLASSES, SELECTED_FEATURES
from .encoders import TabularProjection
from .errors import ConfigError, DimensionError
from .numcore import Linear, Module, ReLU, softmax

FUSED_DIM = 2 * EMBED_DIM
STRATEGIES = ("concat", "fc", "xattn")
_ALIASES = {"cross_attention": "xattn", "cross-attention": "xattn", "concatenate": "concat"}


def canonical_strategy(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in STRATEGIES:
        raise ConfigError(f"unknown fusion strategy {name!r}; choose from {STRATEGIES}")
    return name


def _as_batch(tokens: np.ndarray) -> tuple[np.ndarray, bool]:
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim == 2:
        return tokens[None], True
    if tokens.ndim != 3:
        raise DimensionError(f"tokens must be (T, d) or (B, T, d), got {tokens.shape}")
    return tokens, False


def _check_tokens(img: np.ndarray, tab: np.ndarray) -> None:
    if img.shape[-1] != EMBED_DIM or tab.shape[-1] != EMBED_DIM:
        raise DimensionError(f"token width must be {EMBED_DIM}, got {img.shape[-1]} and {tab.shape[-1]}")
    if img.shape[0] != tab.shape[0]:
        raise DimensionError("image and tabular token batches differ in size")


class ScaledDotAttention(Module):
    """softmax(Q K^T / sqrt(d)) V over (B, m, d) queries and (B, n, d) keys/values."""

    def forward(self, q, k, v):
        d = q.shape[-1]
        self._scale = 1.0 / math.sqrt(d)
        a = softmax(q @ np.swapaxes(k, -1, -2) * self._scale)
        self._q, self._k, self._v, self.weights = q, k, v, a
        return a @ v

    def backward(self, dout):
        a = self.weights
        dv = np.swapaxes(a, -1, -2) @ dout
        da = dout @ np.swapaxes(self._v, -1, -2)
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * self._scale
        dq = ds @ self._k
        dk = np.swapaxes(ds, -1, -2) @ self._q
        return dq, dk, dv


def scaled_dot_attention(q, k, v) -> np.ndarray:
    return ScaledDotAttention().forward(np.asarray(q, float), np.asarray(k, float), np.asarray(v, float))


class ConcatFusion(Module):
    def forward(self, img, tab):
        _check_tokens(img, tab)
        self._t_img, self._t_tab = img.shape[1], tab.shape[1]
        return np.concatenate([img.mean(axis=1), tab.mean(axis=1)], axis=-1)

    def backward(self, dfused):
        d_img, d_tab = dfused[:, :EMBED_DIM], dfused[:, EMBED_DIM:]
        return (
            np.repeat(d_img[:, None, :] / self._t_img, self._t_img, axis=1),
            np.repeat(d_tab[:, None, :] / self._t_tab, self._t_tab, axis=1),
        )


class FCFusion(Module):
    """Mean-pool, concatenate, then one 1024 -> 1024 linear layer (no activation)."""

    def __init__(self, rng=None):
        super().__init__()
        self.concat = ConcatFusion()
        self.fc = self.add_child("fc", Linear(FUSED_DIM, FUSED_DIM, rng))

    def forward(self, img, tab):
        return self.fc.forward(self.concat.forward(img, tab))

    def backward(self, dfused):
        return self.concat.backward(self.fc.backward(dfused))


class CrossAttentionFusion(Module):
    """Bidirectional single-head cross-attention.

    Direction ``a``: image tokens query the tabular tokens. Direction ``b``:
    tabular tokens query the image tokens. Each output is mean-pooled over
    its query tokens and the two are concatenated ``[a | b]``.
    """

    def __init__(self, rng=None):
        super().__init__()
        for direction in ("a", "b"):
            for role in ("q", "k", "v"):
                self.add_child(f"{direction}_{role}", Linear(EMBED_DIM, EMBED_DIM, rng))
        self.attn_a = ScaledDotAttention()
        self.attn_b = ScaledDotAttention()

    def forward(self, img, tab):
        _check_tokens(img, tab)
        c = self.children
        out_a = self.attn_a.forward(c["a_q"](img), c["a_k"](tab), c["a_v"](tab))
        out_b = self.attn_b.forward(c["b_q"](tab), c["b_k"](img), c["b_v"](img))
        self._m_a, self._m_b = out_a.shape[1], out_b.shape[1]
        return np.concatenate([out_a.mean(axis=1), out_b.mean(axis=1)], axis=-1)

    def backward(self, dfused):
        c = self.children
        d_out_a = np.repeat(dfused[:, None, :EMBED_DIM] / self._m_a, self._m_a, axis=1)
        d_out_b = np.repeat(dfused[:, None, EMBED_DIM:] / self._m_b, self._m_b, axis=1)
        dq_a, dk_a, dv_a = self.attn_a.backward(d_out_a)
        dq_b, dk_b, dv_b = self.attn_b.backward(d_out_b)
        d_img = c["a_q"].backward(dq_a) + c["b_k"].backward(dk_b) + c["b_v"].backward(dv_b)
        d_tab = c["a_k"].backward(dk_a) + c["a_v"].backward(dv_a) + c["b_q"].backward(dq_b)
        return d_img, d_tab


def fuse_concat(img_tokens, tab_tokens) -> np.ndarray:
    img, single = _as_batch(img_tokens)
    tab, _ = _as_batch(tab_tokens)
    out = ConcatFusion().forward(img, tab)
    return out[0] if single else out


def fuse_fc(img_tokens, tab_tokens, fc: Linear) -> np.ndarray:
    img, single = _as_batch(img_tokens)
    tab, _ = _as_batch(tab_tokens)
    out = fc.forward(ConcatFusion().forward(img, tab))
    return out[0] if single else out


def fuse_cross_attention(img_tokens, tab_tokens, params: CrossAttentionFusion) -> np.ndarray:
    img, single = _as_batch(img_tokens)
    tab, _ = _as_batch(tab_tokens)
    out = params.forward(img, tab)
    return out[0] if single else out


def classify(fused, head: Linear) -> np.ndarray:
    return head.forward(np.asarray(fused, dtype=np.float64))


def predict_stage(logits) -> np.ndarray:
    return np.argmax(np.asarray(logits), axis=-1)


def make_fusion_layer(strategy: str, rng) -> Module:
    strategy = canonical_strategy(strategy)
    if strategy == "concat":
        return ConcatFusion()
    if strategy == "fc":
        return FCFusion(rng)
    return CrossAttentionFusion(rng)


class FusionModel(Module):
    """Tabular projection -> fusion strategy -> linear stage classifier.

    ``forward`` takes (B, 512) image embeddings and (B, 4) standardized
    selected features. The image encoder sits outside and stays frozen.
    """

    def __init__(self, strategy: str = "concat", seed: int = 0, n_classes: int = N_CLASSES):
        super().__init__()
        self.strategy = canonical_strategy(strategy)
        rng = np.random.default_rng(seed)
        self.proj = self.add_child("proj", TabularProjection(len(SELECTED_FEATURES), EMBED_DIM, rng))
        self.fusion = self.add_child("fusion", make_fusion_layer(self.strategy, rng))
        self.head = self.add_child("head", Linear(FUSED_DIM, n_classes, rng))

    def embed(self, img: np.ndarray, tab: np.ndarray) -> np.ndarray:
        img = np.asarray(img, dtype=np.float64)
        if img.ndim != 2 or img.shape[1] != EMBED_DIM:
            raise DimensionError(f"image embeddings must be (B, {EMBED_DIM}), got {img.shape}")
        tab_tokens = self.proj.forward(tab)
        return self.fusion.forward(img[:, None, :], tab_tokens)

    def forward(self, img: np.ndarray, tab: np.ndarray) -> np.ndarray:
        return self.head.forward(self.embed(img, tab))

    def backward(self, dlogits: np.ndarray):
        """Returns gradients w.r.t. (image embeddings, tabular scalars)."""
        d_img, d_tab = self.fusion.backward(self.head.backward(dlogits))
        return d_img[:, 0, :], self.proj.backward(d_tab)


class TabularNet(Module):
    """Linear(17 -> 32) -> ReLU -> Linear(32 -> 5)."""

    def __init__(self, seed: int = 0, n_in: int = len(FEATURE_NAMES), hidden: int = 32,
                 n_classes: int = N_CLASSES):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.fc1 = self.add_child("fc1", Linear(n_in, hidden, rng))
        self.act = ReLU()
        self.fc2 = self.add_child("fc2", Linear(hidden, n_classes, rng))

    def forward(self, x):
        return self.fc2.forward(self.act.forward(self.fc1.forward(x)))

    def backward(self, dlogits):
        return self.fc1.backward(self.act.backward(self.fc2.backward(dlogits)))


def tabularnet_forward(features, net: TabularNet) -> np.ndarray:
    return net.forward(features)
