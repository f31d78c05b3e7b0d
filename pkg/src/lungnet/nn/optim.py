"""Optimizers and the cross-entropy loss."""
from __future__ import annotations

import numpy as np

from .layers import log_softmax, softmax


def _check(params, grads):
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameter groups but {len(grads)} gradient groups")
    for i, (p, g) in enumerate(zip(params, grads)):
        if set(p) != set(g):
            raise ValueError(f"layer {i}: parameter names {sorted(p)} vs gradient names {sorted(g)}")
        for k in p:
            if p[k].shape != np.shape(g[k]):
                raise ValueError(f"layer {i} {k}: parameter shape {p[k].shape} vs gradient shape {np.shape(g[k])}")


class SGD:
    def __init__(self, lr=0.01, momentum=0.0):
        self.lr = lr
        self.momentum = momentum
        self._velocity = None

    def step(self, params, grads):
        """Update ``params`` (list of name -> array dicts) in place."""
        _check(params, grads)
        if self.momentum and self._velocity is None:
            self._velocity = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
        for i, (p, g) in enumerate(zip(params, grads)):
            for k in p:
                step = g[k]
                if self.momentum:
                    v = self._velocity[i][k]
                    v *= self.momentum
                    v += g[k]
                    step = v
                p[k] -= (self.lr * step).astype(p[k].dtype, copy=False)
        return params


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = None
        self._v = None

    def step(self, params, grads):
        _check(params, grads)
        if self._m is None:
            self._m = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
            self._v = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self._m, self._v):
            for k in p:
                gk = np.asarray(g[k], dtype=p[k].dtype)
                m[k] *= self.beta1
                m[k] += (1.0 - self.beta1) * gk
                v[k] *= self.beta2
                v[k] += (1.0 - self.beta2) * gk * gk
                update = self.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + self.eps)
                p[k] -= update.astype(p[k].dtype, copy=False)
        return params


def sgd_step(params, grads, lr=0.01):
    return SGD(lr).step(params, grads)


def adam_step(params, grads, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, state=None):
    """One Adam update; pass the returned optimizer back as ``state`` to continue."""
    opt = state if state is not None else Adam(lr, beta1, beta2, eps)
    opt.step(params, grads)
    return opt


def cross_entropy(logits, labels, class_weights=None):
    """Mean (optionally class-weighted) cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    logp = log_softmax(logits)
    picked = logp[np.arange(n), labels]
    if class_weights is None:
        w = np.ones(n, dtype=logits.dtype)
    else:
        w = np.asarray(class_weights, dtype=logits.dtype)[labels]
    norm = w.sum()
    loss = -float(np.sum(w * picked) / norm)
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    grad *= (w / norm)[:, None]
    return loss, grad
