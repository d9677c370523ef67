"""SGD with momentum and Adam, updating only the parameter regions touched in
the current step."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .nn import FULL


def sgd_momentum_step(param, grad, velocity, lr, momentum=0.9, weight_decay=0.0):
    """In-place heavy-ball update on numpy arrays (possibly views)."""
    if param.shape != grad.shape or velocity.shape != param.shape:
        raise ShapeError(f"parameter {param.shape}, gradient {grad.shape}, state {velocity.shape} differ")
    g = grad + weight_decay * param if weight_decay else grad
    velocity *= momentum
    velocity += g
    param -= lr * velocity


def adam_step(param, grad, m, v, t, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """In-place bias-corrected Adam update for step number ``t`` (1-based)."""
    if param.shape != grad.shape or m.shape != param.shape or v.shape != param.shape:
        raise ShapeError(f"parameter {param.shape}, gradient {grad.shape}, state {m.shape}/{v.shape} differ")
    g = grad + weight_decay * param if weight_decay else grad
    m *= beta1
    m += (1 - beta1) * g
    v *= beta2
    v += (1 - beta2) * (g * g)
    mhat = m / (1 - beta1 ** t)
    vhat = v / (1 - beta2 ** t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


def _regions(p):
    if not getattr(p, "regions", None):
        return []
    if any(r is FULL for r in p.regions):
        return [FULL]
    seen = {}
    for r in p.regions:
        seen.setdefault(tuple((s.start, s.stop) for s in r), r)
    return list(seen.values())


class Optimizer:
    def __init__(self, params):
        self.params = list(params)

    def zero_grad(self):
        for p in self.params:
            if p.grad is not None:
                for r in _regions(p) or [FULL]:
                    p.grad[r] = 0
            p.regions = []


class SGD(Optimizer):
    def __init__(self, params, lr=0.01, momentum=0.9, weight_decay=0.0):
        super().__init__(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, vel in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            for r in _regions(p):
                sgd_momentum_step(p.data[r], p.grad[r], vel[r], self.lr, self.momentum, self.weight_decay)


class Adam(Optimizer):
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        super().__init__(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            for r in _regions(p):
                adam_step(p.data[r], p.grad[r], m[r], v[r], self.t, self.lr, b1, b2, self.eps, self.weight_decay)
