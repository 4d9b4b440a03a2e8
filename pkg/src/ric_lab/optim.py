"""First-order optimizers over :class:`~ric_lab.agent.Params` dictionaries."""

import numpy as np


def global_norm(grads):
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def clip_by_global_norm(grads, max_norm):
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, lr=3e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m, self.v = {}, {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, g in grads.items():
            w = params.arrays[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(w)
                self.v[name] = np.zeros_like(w)
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                w -= self.lr * self.weight_decay * w
            w -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, lr=1e-2, momentum=0.9, weight_decay=0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf = {}

    def step(self, params, grads):
        for name, g in grads.items():
            w = params.arrays[name]
            if self.weight_decay:
                g = g + self.weight_decay * w
            b = self.buf.get(name)
            if b is None:
                b = self.buf[name] = np.zeros_like(w)
            b *= self.momentum
            b += g
            w -= self.lr * b


def make_optimizer(kind, lr, weight_decay, momentum=0.9):
    if kind == "adam":
        return Adam(lr=lr, weight_decay=weight_decay)
    if kind == "sgd":
        return SGD(lr=lr, momentum=momentum, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")
