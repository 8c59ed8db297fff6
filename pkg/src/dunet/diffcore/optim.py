from __future__ import annotations

import math

import numpy as np

from .tensor import NonFiniteError


def cosine_lr(step: int, total: int, lr0: float) -> float:
    if total <= 0:
        raise ValueError("total steps must be positive")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr0 * (1.0 + math.cos(math.pi * step / total)) / 2.0


def _check_finite(op, *arrays):
    if not all(np.isfinite(a).all() for a in arrays):
        raise NonFiniteError(op, phase="update")


def _check_lr(lr):
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")


def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray, lr: float,
             momentum: float = 0.9, weight_decay: float = 0.0):
    """Heavy-ball SGD with coupled L2 decay; returns (param, velocity)."""
    _check_lr(lr)
    g = grad + weight_decay * param if weight_decay else grad
    velocity = momentum * velocity + g
    return param - lr * velocity, velocity


def adamw_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
               lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
    """One AdamW update with decoupled weight decay; t counts from 1. Returns (param, m, v)."""
    _check_lr(lr)
    b1, b2 = betas
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    mhat = m / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    param = param - lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * param)
    return param, m, v


class SGD:
    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        _check_lr(lr)
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            with np.errstate(over="ignore", invalid="ignore"):
                data, vel = sgd_step(p.data, p.grad, self.velocity[i], lr,
                                     self.momentum, self.weight_decay)
            _check_finite("sgd", data, vel)
            p.data, self.velocity[i] = data, vel

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class AdamW:
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        _check_lr(lr)
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        for i, p in enumerate(self.params):
            grad = np.zeros_like(p.data) if p.grad is None else p.grad
            with np.errstate(over="ignore", invalid="ignore"):
                data, m, v = adamw_step(p.data, grad, self.m[i], self.v[i], self.t,
                                        lr, self.betas, self.eps, self.weight_decay)
            _check_finite("adamw", data, m, v)
            p.data, self.m[i], self.v[i] = data, m, v

    def zero_grad(self):
        for p in self.params:
            p.grad = None
