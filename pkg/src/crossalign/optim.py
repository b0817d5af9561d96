"""Adam with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import Tensor
from .errors import DimensionError


@dataclass
class OptimizerState:
    """Per-parameter moment accumulators plus the shared hyperparameters.

    The learning-rate default matches the reference training recipe; the
    desk-scale CLI overrides it (sum-reduced loss at small batch sizes wants
    a larger step).
    """

    lr: float = 5e-6
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState) -> None:
    """One in-place update of every parameter.

    Weight decay is decoupled: each parameter is shrunk by ``lr * wd`` before
    the moment-based update, so decay never enters the moment estimates.
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, param in params.items():
        grad = grads[name]
        if grad.shape != param.shape:
            raise DimensionError(f"adam_step: grad shape {grad.shape} != param shape {param.shape} for {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(param.data)
            state.v[name] = np.zeros_like(param.data)
        m, v = state.m[name], state.v[name]
        if state.weight_decay:
            param.data *= 1.0 - state.lr * state.weight_decay
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        m_hat = m / bc1
        v_hat = v / bc2
        param.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
