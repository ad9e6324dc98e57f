"""Minimal reverse-mode training core for fully-connected networks.

Each layer caches what its backward pass needs during ``forward``; callers run
one forward, hand the gradient w.r.t. the logits to ``backward``, then take an
optimizer step. Everything is float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when an input does not match a layer's expected dimensions."""


class Dense:
    """Affine map ``y = x @ W.T + b`` with ``W`` shaped (out, in)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None):
        if rng is None:
            self.W = np.zeros((out_dim, in_dim))
        else:
            # He-normal init, suited to the ReLU stacks used here
            self.W = rng.normal(0.0, np.sqrt(2.0 / in_dim), size=(out_dim, in_dim))
        self.b = np.zeros(out_dim)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)
        self._x: np.ndarray | None = None

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"Dense expects (n, {self.in_dim}) input, got {x.shape}")
        self._x = x
        return x @ self.W.T + self.b

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients and return the input gradient."""
        if self._x is None:
            raise RuntimeError("backward called before forward")
        self.gW += grad_out.T @ self._x
        self.gb += grad_out.sum(axis=0)
        return grad_out @ self.W

    def params(self) -> list[np.ndarray]:
        return [self.W, self.b]

    def grads(self) -> list[np.ndarray]:
        return [self.gW, self.gb]


class ReLU:
    def __init__(self):
        self._mask: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return np.where(self._mask, grad_out, 0.0)

    def params(self) -> list[np.ndarray]:
        return []

    def grads(self) -> list[np.ndarray]:
        return []


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad_out, 0.0)


def dense_forward(layer: Dense, x: np.ndarray) -> np.ndarray:
    return layer.forward(x)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, targets, mask=None, denominator=None):
    """Masked cross-entropy over the rows of ``logits`` and its logit gradient.

    ``targets`` are class indices (or one-hot rows). ``mask`` weights each row
    (default all ones). The sum is divided by ``denominator``, which defaults to
    the effective count ``mask.sum()``; pass the batch size to get the
    FixMatch-style ``1/(mu B)`` normalisation. When nothing contributes the
    loss is 0 and the gradient is all zeros.

    Returns ``(loss, grad_logits)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n, c = logits.shape
    targets = np.asarray(targets)
    if targets.ndim == 2:
        targets = targets.argmax(axis=1)
    targets = targets.astype(np.int64)
    if targets.shape != (n,):
        raise ShapeError(f"expected {n} targets, got shape {targets.shape}")
    if n and (targets.min() < 0 or targets.max() >= c):
        raise ValueError(f"targets must lie in [0, {c})")
    mask = np.ones(n) if mask is None else np.asarray(mask, dtype=np.float64)
    if denominator is None:
        denominator = mask.sum()
    if n == 0 or denominator <= 0 or not mask.any():
        return 0.0, np.zeros_like(logits)
    rows = np.arange(n)
    logp = log_softmax(logits)
    loss = float(-(logp[rows, targets] * mask).sum() / denominator)
    grad = np.exp(logp)
    grad[rows, targets] -= 1.0
    grad *= (mask / denominator)[:, None]
    return loss, grad


class Network:
    """MLP backbone plus a linear classification head.

    ``aux_classes`` adds a second head on the same features (used for the
    two-head ablation); ``forward`` then returns ``(logits, aux_logits)``.
    """

    def __init__(self, in_dim: int, hidden: tuple[int, ...] | list[int], num_classes: int,
                 rng: np.random.Generator | None = None, aux_classes: int | None = None):
        self.in_dim = in_dim
        self.hidden = tuple(hidden)
        self.num_classes = num_classes
        self.aux_classes = aux_classes
        self.backbone: list = []
        d = in_dim
        for h in self.hidden:
            self.backbone += [Dense(d, h, rng), ReLU()]
            d = h
        self.head = Dense(d, num_classes, rng)
        self.aux_head = Dense(d, aux_classes, rng) if aux_classes else None

    def features(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for layer in self.backbone:
            h = layer.forward(h)
        return h

    def forward(self, x: np.ndarray):
        h = self.features(x)
        logits = self.head.forward(h)
        if self.aux_head is None:
            return logits
        return logits, self.aux_head.forward(h)

    def logits(self, x: np.ndarray) -> np.ndarray:
        """Main-head logits only, regardless of auxiliary heads."""
        out = self.forward(x)
        return out[0] if isinstance(out, tuple) else out

    def backward(self, grad_logits: np.ndarray, grad_aux: np.ndarray | None = None) -> np.ndarray:
        g = self.head.backward(grad_logits)
        if self.aux_head is not None and grad_aux is not None:
            g = g + self.aux_head.backward(grad_aux)
        for layer in reversed(self.backbone):
            g = layer.backward(g)
        return g

    def layers(self) -> list[Dense]:
        out = [l for l in self.backbone if isinstance(l, Dense)] + [self.head]
        if self.aux_head is not None:
            out.append(self.aux_head)
        return out

    def params(self) -> list[np.ndarray]:
        return [p for l in self.layers() for p in l.params()]

    def grads(self) -> list[np.ndarray]:
        return [g for l in self.layers() for g in l.grads()]

    def zero_grad(self) -> None:
        for g in self.grads():
            g.fill(0.0)

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "Network":
        other = Network(self.in_dim, self.hidden, self.num_classes, None, self.aux_classes)
        for dst, src in zip(other.params(), self.params()):
            dst[...] = src
        return other

    def load_params(self, arrays) -> None:
        params = self.params()
        if len(arrays) != len(params):
            raise ShapeError(f"expected {len(params)} arrays, got {len(arrays)}")
        for dst, src in zip(params, arrays):
            if dst.shape != np.shape(src):
                raise ShapeError(f"parameter shape {np.shape(src)} != {dst.shape}")
            dst[...] = src


@dataclass
class SgdConfig:
    learning_rate: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


class SGD:
    """Heavy-ball momentum: ``v = m*v + (g + wd*p)``, ``p -= lr*v``."""

    def __init__(self, params: list[np.ndarray], config: SgdConfig):
        self.params = params
        self.config = config
        self.buffers = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        sgd_step(self.params, grads, self.config, self.buffers)


def sgd_step(params, grads, config: SgdConfig, buffers) -> None:
    """In-place momentum SGD update of ``params`` using ``buffers``."""
    lr, m, wd = config.learning_rate, config.momentum, config.weight_decay
    for p, g, v in zip(params, grads, buffers):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(f"parameter/gradient shape mismatch {p.shape} vs {g.shape}")
        d = g + wd * p if wd else g
        v *= m
        v += d
        p -= lr * v


def ema_update(teacher_params, student_params, alpha: float) -> None:
    """``teacher <- alpha*teacher + (1-alpha)*student``, elementwise in place."""
    for t, s in zip(teacher_params, student_params):
        if t.shape != s.shape:
            raise ShapeError(f"EMA shape mismatch {t.shape} vs {s.shape}")
        t *= alpha
        t += (1.0 - alpha) * s


def numerical_gradient(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm relative error, guarded against all-zero gradients."""
    num = np.abs(a - b).max(initial=0.0)
    den = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(num / den)
