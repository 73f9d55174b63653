"""Logistic probes on raw pixels; used to audit renderer separability
and prompted-view control of the diffusion sampler."""

from __future__ import annotations

import numpy as np


def train_logistic_probe(x: np.ndarray, y: np.ndarray, steps: int = 300,
                         lr: float = 1.0) -> tuple[np.ndarray, float]:
    """Full-batch gradient descent on mean log-loss. Deterministic."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64)
    mu, sd = x.mean(axis=0), x.std(axis=0) + 1e-6
    xn = (x - mu) / sd
    w = np.zeros(xn.shape[1])
    b = 0.0
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-(xn @ w + b)))
        err = p - y
        w -= lr * (xn.T @ err) / len(x)
        b -= lr * err.mean()
    return np.concatenate([w / sd, [b - (w / sd) @ mu]]), 0.0


def probe_predict(params, x: np.ndarray) -> np.ndarray:
    wb, _ = params
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    z = x @ wb[:-1] + wb[-1]
    return 1.0 / (1.0 + np.exp(-z))
