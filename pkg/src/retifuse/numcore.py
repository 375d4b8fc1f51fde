"""Small dense layer library with hand-written backward passes.

Arrays are plain float64 numpy arrays. Every layer caches what it needs in
``forward`` and accumulates parameter gradients in ``backward``; callers
zero gradients between optimizer steps, as with any minibatch loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateBatchError, DimensionError, NumericalError

DTYPE = np.float64


def as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def check_finite(x: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {what}")
    return x


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class Module:
    """Container for parameters, gradients, buffers and child modules."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}
        self.training = True

    def add_param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = as_array(value)
        self.grads[name] = np.zeros_like(self.params[name])

    def add_child(self, name: str, module: "Module") -> "Module":
        self.children[name] = module
        return module

    def named_parameters(self, prefix: str = ""):
        for name, p in self.params.items():
            yield prefix + name, p, self.grads[name]
        for cname, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = ""):
        for name, b in self.buffers.items():
            yield prefix + name, b
        for cname, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def zero_grad(self) -> None:
        for _, _, g in self.named_parameters():
            g[...] = 0.0

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self.children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.copy() for name, p, _ in self.named_parameters()}
        out.update({name: b.copy() for name, b in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        targets = {name: p for name, p, _ in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        missing = set(targets) - set(state)
        extra = set(state) - set(targets)
        if missing or extra:
            raise DimensionError(
                f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}"
            )
        for name, arr in targets.items():
            src = np.asarray(state[name], dtype=DTYPE)
            if src.shape != arr.shape:
                raise DimensionError(f"{name}: expected shape {arr.shape}, got {src.shape}")
            arr[...] = src

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """y = x W^T + b over the last axis of ``x``."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        self.add_param("W", uniform_init(rng, (out_features, in_features), in_features))
        self.add_param("b", uniform_init(rng, (out_features,), in_features))
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = as_array(x)
        if x.ndim == 0 or x.shape[-1] != self.in_features:
            raise DimensionError(
                f"linear layer expects last dim {self.in_features}, got shape {x.shape}"
            )
        self._x = x
        # 2-D matmul keeps BLAS on the fast path for (B, T, d) inputs
        y = x.reshape(-1, self.in_features) @ self.params["W"].T + self.params["b"]
        return y.reshape(*x.shape[:-1], self.out_features)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x2 = self._x.reshape(-1, self.in_features)
        dy2 = dy.reshape(-1, self.out_features)
        self.grads["W"] += dy2.T @ x2
        self.grads["b"] += dy2.sum(axis=0)
        return (dy2 @ self.params["W"]).reshape(self._x.shape)


def linear_apply(x: np.ndarray, layer: Linear) -> np.ndarray:
    return layer.forward(x)


class ReLU(Module):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return np.where(self._mask, dy, 0.0)


def relu_apply(x: np.ndarray) -> np.ndarray:
    return np.maximum(as_array(x), 0.0)


class LayerNorm(Module):
    """Normalize over the last axis (population variance), then scale-shift."""

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        if dim < 2:
            raise DimensionError("layer norm needs at least 2 features")
        self.dim = dim
        self.eps = eps
        self.add_param("gamma", np.ones(dim))
        self.add_param("beta", np.zeros(dim))

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = as_array(x)
        if x.shape[-1] != self.dim:
            raise DimensionError(f"layer norm expects last dim {self.dim}, got {x.shape}")
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv_std
        self._xhat, self._inv_std = xhat, inv_std
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, inv_std = self._xhat, self._inv_std
        self.grads["gamma"] += (dy * xhat).reshape(-1, self.dim).sum(axis=0)
        self.grads["beta"] += dy.reshape(-1, self.dim).sum(axis=0)
        dxhat = dy * self.params["gamma"]
        return inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )


def layer_norm_apply(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    x = as_array(x)
    ln = LayerNorm(x.shape[-1], eps)
    ln.params["gamma"][...] = gamma
    ln.params["beta"][...] = beta
    return ln.forward(x)


class BatchNorm1d(Module):
    """Batch normalization over axis 0 of an (n, d) array.

    Training mode normalizes with batch statistics and folds them into the
    running estimates; eval mode uses the running estimates only. As in the
    common framework convention, the running variance tracks the unbiased
    batch variance while normalization uses the biased one.
    """

    def __init__(self, dim: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.dim = dim
        self.eps = eps
        self.momentum = momentum
        self.add_param("gamma", np.ones(dim))
        self.add_param("beta", np.zeros(dim))
        self.buffers["running_mean"] = np.zeros(dim)
        self.buffers["running_var"] = np.ones(dim)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = as_array(x)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionError(f"batch norm expects (n, {self.dim}), got {x.shape}")
        if self.training:
            n = x.shape[0]
            if n < 2:
                raise DegenerateBatchError("batch norm in training mode needs at least 2 samples")
            mu = x.mean(axis=0)
            var = ((x - mu) ** 2).mean(axis=0)
            m = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm[...] = (1.0 - m) * rm + m * mu
            rv[...] = (1.0 - m) * rv + m * var * n / (n - 1)
        else:
            mu = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv_std
        self._xhat, self._inv_std, self._batch_stats = xhat, inv_std, self.training
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, inv_std = self._xhat, self._inv_std
        self.grads["gamma"] += (dy * xhat).sum(axis=0)
        self.grads["beta"] += dy.sum(axis=0)
        dxhat = dy * self.params["gamma"]
        if not self._batch_stats:
            return dxhat * inv_std
        return inv_std * (
            dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0)
        )


def batch_norm_apply(x, bn: BatchNorm1d, mode: str = "train") -> np.ndarray:
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    bn.train(mode == "train")
    return bn.forward(x)


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = as_array(z)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = as_array(z)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = as_array(z)
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def weighted_cross_entropy(logits, targets, weights) -> tuple[float, np.ndarray]:
    """Class-weighted cross entropy with weighted-mean reduction.

    Returns the loss and its gradient with respect to ``logits``.
    """
    logits = as_array(logits)
    targets = np.asarray(targets, dtype=np.int64)
    weights = as_array(weights)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (n, K), got {logits.shape}")
    n, k = logits.shape
    if weights.shape != (k,):
        raise DimensionError(f"expected {k} class weights, got shape {weights.shape}")
    if np.any(weights <= 0):
        raise ConfigError("class weights must be strictly positive")
    if targets.shape != (n,) or np.any(targets < 0) or np.any(targets >= k):
        raise DimensionError("targets must be n class indices in [0, K)")
    check_finite(logits, "logits")
    logp = log_softmax(logits)
    w = weights[targets]
    total_w = w.sum()
    nll = -logp[np.arange(n), targets]
    loss = float((w * nll).sum() / total_w)
    grad = np.exp(logp)
    grad[np.arange(n), targets] -= 1.0
    grad *= (w / total_w)[:, None]
    return loss, grad


BCE_CLAMP = 1e-7


def binary_cross_entropy(p, y) -> tuple[float, np.ndarray]:
    """Mean binary cross entropy on probabilities; gradient w.r.t. ``p``.

    ``p`` is clamped to [1e-7, 1 - 1e-7]; clamped entries get zero gradient.
    """
    p = as_array(p)
    y = as_array(y)
    if p.shape != y.shape:
        raise DimensionError(f"p and y shapes differ: {p.shape} vs {y.shape}")
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    n = p.size
    loss = float(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).sum() / n)
    grad = -(y / pc - (1.0 - y) / (1.0 - pc)) / n
    grad = np.where((p > BCE_CLAMP) & (p < 1.0 - BCE_CLAMP), grad, 0.0)
    return loss, grad


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if set(params) != set(grads):
        raise DimensionError("params and grads must have the same keys")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise DimensionError(f"{name}: grad shape {grads[name].shape} != param shape {p.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    step_size = state.lr / c1
    for name, p in params.items():
        g = grads[name]
        check_finite(g, f"gradient of {name}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        tmp = np.multiply(g, 1.0 - b1)
        m *= b1
        m += tmp
        np.square(g, out=tmp)
        tmp *= 1.0 - b2
        v *= b2
        v += tmp
        # tmp <- step_size * m / (sqrt(v / c2) + eps)
        np.divide(v, c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= step_size
        p -= tmp


class Adam:
    """Adam bound to a module's parameters."""

    def __init__(self, module: Module, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.module = module
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self) -> None:
        params, grads = {}, {}
        for name, p, g in self.module.named_parameters():
            params[name] = p
            grads[name] = g
        adam_step(params, grads, self.state)

    def zero_grad(self) -> None:
        self.module.zero_grad()


@dataclass
class PlateauScheduler:
    """Halve the learning rate after ``patience`` epochs without improvement.

    Improvement means a strict decrease below the best loss seen so far.
    """

    lr: float = 1e-3
    patience: int = 5
    factor: float = 0.5
    min_lr: float = 1e-6
    best_loss: float = math.inf
    epochs_since_improvement: int = 0

    def __post_init__(self):
        if self.patience < 1 or not 0.0 < self.factor < 1.0:
            raise ConfigError("patience must be >= 1 and factor in (0, 1)")

    def step(self, val_loss: float) -> float:
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.epochs_since_improvement = 0
        else:
            self.epochs_since_improvement += 1
            if self.epochs_since_improvement >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.epochs_since_improvement = 0
        return self.lr


def plateau_update(scheduler: PlateauScheduler, epoch_val_loss: float) -> float:
    return scheduler.step(epoch_val_loss)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor).

    The floor keeps structurally-zero gradients (where central differences
    only see roundoff, ~1e-10) from reading as large relative errors.
    """
    analytic = np.asarray(analytic, dtype=DTYPE)
    numeric = np.asarray(numeric, dtype=DTYPE)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def numeric_gradient(f, x: np.ndarray, h: float = 1e-5, entries=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (perturbed in place).

    ``entries`` restricts the probe to those flat indices; others stay 0.
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size) if entries is None else entries:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def finite_diff_check(layer: Module, x, h: float = 1e-5, seed: int = 0,
                      max_entries: int | None = None) -> float:
    """Compare analytic and central-difference gradients of ``sum(R * layer(x))``.

    ``x`` is one array or a tuple of arrays passed positionally. ``R`` is a
    fixed random cotangent. Every parameter entry and every input entry is
    checked, unless ``max_entries`` caps each tensor to a seeded random
    sample of that many entries (needed for the 512-wide fusion layers).
    Buffers (batch norm running stats) are restored after each probe so the
    check has no side effects.
    """
    if h <= 0:
        raise ConfigError("h must be positive")
    xs = tuple(as_array(a).copy() for a in (x if isinstance(x, tuple) else (x,)))
    saved = {name: b.copy() for name, b in layer.named_buffers()}

    def restore():
        for name, b in layer.named_buffers():
            b[...] = saved[name]

    rng = np.random.default_rng(seed)
    out = layer.forward(*xs)
    restore()
    r = rng.standard_normal(out.shape)

    def loss():
        val = float((layer.forward(*xs) * r).sum())
        restore()
        return val

    layer.zero_grad()
    layer.forward(*xs)
    restore()
    dxs = layer.backward(r)
    if dxs is not None and not isinstance(dxs, tuple):
        dxs = (dxs,)
    analytic = {name: g.copy() for name, _, g in layer.named_parameters()}

    def compare(a, target):
        if max_entries is None or target.size <= max_entries:
            return relative_error(a, numeric_gradient(loss, target, h))
        pick = np.sort(rng.choice(target.size, size=max_entries, replace=False))
        num = numeric_gradient(loss, target, h, entries=pick)
        return relative_error(a.reshape(-1)[pick], num.reshape(-1)[pick])

    worst = 0.0
    if dxs is not None:
        for xi, dxi in zip(xs, dxs):
            worst = max(worst, compare(dxi, xi))
    for name, p, _ in layer.named_parameters():
        worst = max(worst, compare(analytic[name], p))
    layer.zero_grad()
    return worst
