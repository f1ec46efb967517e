"""Parameter updates (SGD with momentum, LARS trust-ratio scaling) and the
cosine-decay learning-rate schedule without restarts."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor
from .errors import ContractError

Array = np.ndarray


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr * 0.5 * (1 + cos(pi * step/total)); nonincreasing in step."""
    if total_steps < 1:
        raise ContractError(f"total_steps must be >= 1, got {total_steps}")
    if not (0 <= step <= total_steps):
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def sgd_step(param: Array, grad: Array, buf: Array, lr: float,
             momentum: float, weight_decay: float) -> None:
    """In place: g' = grad + wd*param; buf = momentum*buf + g'; param -= lr*buf."""
    if param.shape != grad.shape or param.shape != buf.shape:
        raise ContractError(
            f"sgd_step shape mismatch: param {param.shape}, grad {grad.shape}, buf {buf.shape}")
    if lr < 0:
        raise ContractError(f"learning rate must be >= 0, got {lr}")
    g = grad + weight_decay * param
    buf *= momentum
    buf += g
    param -= lr * buf


def lars_step(param: Array, grad: Array, buf: Array, lr: float,
              weight_decay: float, eps: float = 1e-9, momentum: float = 0.0) -> None:
    """Layer-wise trust scaling, then the sgd update at the local rate.

    trust = |param| / (|grad| + wd*|param| + eps) when |param| > 0, else 1,
    so freshly zeroed layers update at the base rate.
    """
    if eps <= 0:
        raise ContractError(f"lars eps must be positive, got {eps}")
    p_norm = float(np.linalg.norm(param))
    g_norm = float(np.linalg.norm(grad))
    trust = p_norm / (g_norm + weight_decay * p_norm + eps) if p_norm > 0 else 1.0
    sgd_step(param, grad, buf, lr * trust, momentum, weight_decay)


class Optimizer:
    """Momentum buffers plus a mode switch between sgd and lars.

    In lars mode, rank<=1 parameters (biases and other vectors) skip trust
    scaling and take the plain sgd update.
    """

    def __init__(self, named_params: list[tuple[str, Tensor]], base_lr: float,
                 momentum: float = 0.9, weight_decay: float = 1e-4,
                 mode: str = "sgd", lars_eps: float = 1e-9):
        if mode not in ("sgd", "lars"):
            raise ContractError(f"optimizer mode must be 'sgd' or 'lars', got {mode!r}")
        if base_lr <= 0:
            raise ContractError(f"base_lr must be positive, got {base_lr}")
        self.params = list(named_params)
        self.base_lr = base_lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.mode = mode
        self.lars_eps = lars_eps
        self.buffers = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        for name, p in self.params:
            if p.grad is None:
                continue
            buf = self.buffers[name]
            if self.mode == "lars" and p.data.ndim > 1:
                lars_step(p.data, p.grad, buf, lr, self.weight_decay,
                          eps=self.lars_eps, momentum=self.momentum)
            else:
                sgd_step(p.data, p.grad, buf, lr, self.momentum, self.weight_decay)
