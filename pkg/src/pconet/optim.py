"""Adam optimizer and binary cross-entropy loss over the two-sigmoid head.

Adam uses the common framework defaults beta1=0.9, beta2=0.999, eps=1e-7,
with eps added outside the square root.
"""

from __future__ import annotations

import numpy as np

PROB_EPS = 1e-7


class NonFiniteGradientError(ValueError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


class Adam:
    """Per-parameter first/second moments keyed by parameter name; the step
    counter t increments by exactly 1 per step() call."""

    def __init__(self, lr: float = 1e-5, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-7):
        if lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update `params` in place: m <- b1*m + (1-b1)g, v <- b2*v + (1-b2)g^2,
        p <- p - lr * m_hat / (sqrt(v_hat) + eps) with bias-corrected moments."""
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(
                    f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}"
                )
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(name)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def bce_loss(probs: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Binary cross-entropy averaged over the batch and both output
    neurons (the 1/(2n) convention), with probabilities clipped to
    [1e-7, 1-1e-7] before the logs.

    Returns (loss, dloss/dprobs); the gradient is the exact derivative of
    the clipped expression, i.e. zero where the clip is active.
    """
    if probs.shape != targets.shape or probs.ndim != 2 or probs.shape[1] != 2:
        raise ValueError(
            f"expected matching (n,2) probs/targets, got {probs.shape} and {targets.shape}"
        )
    onehot = np.isin(targets, (0.0, 1.0)).all(axis=1) & (targets.sum(axis=1) == 1)
    if not onehot.all():
        bad = int(np.argmin(onehot))
        raise ValueError(f"target row {bad} is not one-hot: {targets[bad]}")

    n = probs.shape[0]
    p = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    y = targets.astype(p.dtype)
    loss = -float((y * np.log(p) + (1 - y) * np.log1p(-p)).sum(dtype=np.float64)) / (2 * n)
    inside = (probs >= PROB_EPS) & (probs <= 1.0 - PROB_EPS)
    grad = np.where(inside, -(y / p - (1 - y) / (1 - p)) / (2 * n), 0).astype(p.dtype)
    return loss, grad
