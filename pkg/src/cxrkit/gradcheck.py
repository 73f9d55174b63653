"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Graph, Tensor, forward_backward


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict = field(default_factory=dict)  # parameter name -> relative error

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    def worst(self):
        if not self.errors:
            return None, 0.0
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]


def grad_check(params: dict[str, Tensor], loss_builder, tolerance: float = 1e-4,
               step: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    `loss_builder` must be a deterministic zero-argument callable that
    rebuilds the scalar loss from the current parameter values; two
    evaluations that disagree bitwise are rejected.
    """
    l0 = loss_builder()
    l1 = loss_builder()
    if l0.data.tobytes() != l1.data.tobytes():
        raise ValueError("loss builder is not deterministic")

    graph = Graph(params)
    grads = forward_backward(graph, loss_builder())

    report = GradCheckReport(tolerance=tolerance)
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g_ad = grads[name].data if name in grads else np.zeros_like(p.data)
        g_fd = np.zeros(p.data.shape, dtype=np.float64)
        flat = p.data.reshape(-1)
        fd_flat = g_fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = float(loss_builder().data)
            flat[i] = orig - step
            lm = float(loss_builder().data)
            flat[i] = orig
            fd_flat[i] = (lp - lm) / (2.0 * step)
        denom = np.abs(g_fd).max() + 1e-12
        report.errors[name] = float(np.abs(g_ad.astype(np.float64) - g_fd).max() / denom)
    return report
