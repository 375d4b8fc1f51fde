"""Exact O(n^2) t-SNE to two dimensions."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InsufficientDataError, NumericalError


@dataclass
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    exaggeration: float = 12.0
    exaggeration_iters: int = 250
    learning_rate: float = 200.0
    momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch: int = 250
    entropy_tol: float = 1e-5
    max_bisection: int = 50
    min_gain: float = 0.01
    monotone: bool = True
    seed: int = 0


@dataclass
class TsneResult:
    embedding: np.ndarray
    kl_history: list[float] = field(default_factory=list)
    entropy_error: float = 0.0
    P: np.ndarray | None = None


def squared_distances(x: np.ndarray) -> np.ndarray:
    sq = (x * x).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _row_entropy(d_row: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    """Shannon entropy (bits) and probabilities of exp(-beta * d) over one row."""
    shifted = d_row - d_row.min()
    p = np.exp(-beta * shifted)
    s = p.sum()
    p /= s
    h = beta * float((p * shifted).sum()) + math.log(s)
    return h / math.log(2.0), p


def conditional_probabilities(d2: np.ndarray, perplexity: float, tol: float = 1e-5,
                              max_steps: int = 50) -> tuple[np.ndarray, float]:
    """Per-point Gaussian bandwidths by bisection on precision so that each
    row's entropy equals log2(perplexity). Returns (P_cond, worst |error|)."""
    n = d2.shape[0]
    target = math.log2(perplexity)
    P = np.zeros((n, n))
    worst = 0.0
    capped = 0
    for i in range(n):
        row = np.delete(d2[i], i)
        beta, lo, hi = 1.0, 0.0, math.inf
        h, p = _row_entropy(row, beta)
        for _ in range(max_steps):
            diff = h - target
            if abs(diff) < tol:
                break
            if diff > 0:  # too flat -> sharpen
                lo = beta
                beta = beta * 2.0 if math.isinf(hi) else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
            h, p = _row_entropy(row, beta)
        err = abs(h - target)
        if err >= tol:
            capped += 1
        worst = max(worst, err)
        P[i, np.arange(n) != i] = p
    if capped:
        warnings.warn(f"perplexity search hit the bisection cap for {capped} points", stacklevel=2)
    return P, worst


def joint_probabilities(x: np.ndarray, perplexity: float, tol: float = 1e-5,
                        max_steps: int = 50) -> tuple[np.ndarray, float]:
    cond, worst = conditional_probabilities(squared_distances(x), perplexity, tol, max_steps)
    P = (cond + cond.T) / (2.0 * x.shape[0])
    return P, worst


def _q_and_grad(Y: np.ndarray, P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    num = 1.0 / (1.0 + squared_distances(Y))
    np.fill_diagonal(num, 0.0)
    Q = num / num.sum()
    W = (P - Q) * num
    grad = 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y)
    return Q, grad


def kl_divergence(P: np.ndarray, Q: np.ndarray) -> float:
    mask = P > 0
    return float((P[mask] * np.log(P[mask] / np.maximum(Q[mask], 1e-300))).sum())


def tsne_embed(x, config: TsneConfig | None = None) -> TsneResult:
    """Embed rows of ``x`` in 2-D.

    Gradient descent with momentum and per-coordinate adaptive gains; the
    affinities are exaggerated for the first iterations and the layout is
    re-centred after every step. ``kl_history`` holds KL(P || Q) for the
    un-exaggerated P after each iteration.

    With ``config.monotone`` (default) a post-exaggeration step that would
    raise the KL divergence is rejected: the layout stays put, the velocity
    is cleared and the gains are halved before the next iteration.
    """
    config = config or TsneConfig()
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if x.ndim != 2 or n < 5:
        raise InsufficientDataError("t-SNE needs a 2-D input with at least 5 rows")
    if not np.all(np.isfinite(x)):
        raise NumericalError("t-SNE input contains non-finite values")
    if not 0 < config.perplexity < n:
        raise ConfigError(f"perplexity must lie in (0, n={n}), got {config.perplexity}")
    if config.iterations < 1:
        raise ConfigError("iterations must be at least 1")

    P, worst = joint_probabilities(x, config.perplexity, config.entropy_tol, config.max_bisection)
    rng = np.random.default_rng(config.seed)
    Y = rng.standard_normal((n, 2)) * 1e-4
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    history = []
    kl = math.inf
    for it in range(config.iterations):
        exaggerate = it < config.exaggeration_iters
        if it == config.exaggeration_iters:
            # velocity built under exaggerated affinities overshoots the true objective
            update[...] = 0.0
            gains[...] = 1.0
        momentum = config.momentum if it < config.momentum_switch else config.final_momentum
        _, grad = _q_and_grad(Y, P * config.exaggeration if exaggerate else P)
        same_sign = np.sign(grad) == np.sign(update)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.maximum(gains, config.min_gain, out=gains)
        step = momentum * update - config.learning_rate * gains * grad
        cand = Y + step
        cand -= cand.mean(axis=0)
        Q, _ = _q_and_grad(cand, P)
        cand_kl = kl_divergence(P, Q)
        if config.monotone and not exaggerate and cand_kl > kl:
            update[...] = 0.0
            gains *= 0.5
            np.maximum(gains, config.min_gain, out=gains)
        else:
            Y, update, kl = cand, step, cand_kl
        history.append(kl)
    return TsneResult(Y, history, worst, P)


def silhouette(points: np.ndarray, labels) -> float:
    """Mean silhouette coefficient with Euclidean distance."""
    labels = np.asarray(labels)
    d = np.sqrt(squared_distances(np.asarray(points, dtype=np.float64)))
    scores = []
    for i in range(labels.size):
        same = labels == labels[i]
        same[i] = False
        if not same.any():
            scores.append(0.0)
            continue
        a = d[i, same].mean()
        b = min(d[i, labels == c].mean() for c in np.unique(labels) if c != labels[i])
        scores.append((b - a) / max(a, b))
    return float(np.mean(scores))
