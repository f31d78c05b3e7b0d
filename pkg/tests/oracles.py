"""Independent reference computations used by the tests.

Nothing here imports the engine's layer code; convolutions and pooling are
plain Python loops and gradients come from central differences.
"""
import math

import numpy as np


def naive_conv1d(x, W, b, stride=1):
    n, c, length = x.shape
    o, _, k = W.shape
    lout = (length - k) // stride + 1
    y = np.zeros((n, o, lout))
    for s in range(n):
        for oc in range(o):
            for t in range(lout):
                acc = b[oc]
                for ic in range(c):
                    for j in range(k):
                        acc += W[oc, ic, j] * x[s, ic, t * stride + j]
                y[s, oc, t] = acc
    return y


def naive_conv2d(x, W, b, stride=(1, 1)):
    n, c, h, w = x.shape
    o, _, kh, kw = W.shape
    ho, wo = (h - kh) // stride[0] + 1, (w - kw) // stride[1] + 1
    y = np.zeros((n, o, ho, wo))
    for s in range(n):
        for oc in range(o):
            for r in range(ho):
                for q in range(wo):
                    acc = b[oc]
                    for ic in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += W[oc, ic, i, j] * x[s, ic, r * stride[0] + i, q * stride[1] + j]
                    y[s, oc, r, q] = acc
    return y


def naive_maxpool1d(x, k, stride=None):
    stride = stride or k
    n, c, length = x.shape
    lout = (length - k) // stride + 1
    y = np.zeros((n, c, lout))
    for s in range(n):
        for ch in range(c):
            for t in range(lout):
                y[s, ch, t] = max(x[s, ch, t * stride + j] for j in range(k))
    return y


def naive_maxpool2d(x, k, stride=None):
    stride = stride or k
    n, c, h, w = x.shape
    ho, wo = (h - k[0]) // stride[0] + 1, (w - k[1]) // stride[1] + 1
    y = np.zeros((n, c, ho, wo))
    for s in range(n):
        for ch in range(c):
            for r in range(ho):
                for q in range(wo):
                    y[s, ch, r, q] = max(
                        x[s, ch, r * stride[0] + i, q * stride[1] + j] for i in range(k[0]) for j in range(k[1])
                    )
    return y


def naive_dense(x, W, b):
    n, d = x.shape
    u = W.shape[1]
    y = np.zeros((n, u))
    for s in range(n):
        for j in range(u):
            y[s, j] = b[j] + sum(x[s, i] * W[i, j] for i in range(d))
    return y


def naive_relu(x):
    return np.vectorize(lambda v: v if v > 0 else 0.0)(x)


def naive_softmax(z):
    out = np.zeros_like(z, dtype=float)
    for s in range(z.shape[0]):
        m = max(z[s])
        e = [math.exp(v - m) for v in z[s]]
        tot = sum(e)
        out[s] = [v / tot for v in e]
    return out


def central_diff(f, arr, h=1e-5):
    """Numerical gradient of scalar ``f()`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def max_rel_error(analytic, numeric, floor=1e-6):
    """Elementwise |a - n| / max(|a|, |n|, floor), maximised."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def gradcheck(graph, x, aux=None, seed=0, h=1e-5):
    """Max relative error between backward() and central differences for every tensor.

    Loss is ``sum(output * R)`` with a fixed random ``R``, so ``dL/doutput = R``.
    Returns a dict name -> error.
    """
    rng = np.random.default_rng(seed + 7919)
    aux = {k: np.array(v, dtype=np.float64) for k, v in (aux or {}).items()}
    x = np.array(x, dtype=np.float64)
    out = graph.forward(x, aux)
    R = rng.standard_normal(out.shape)

    def loss():
        return float(np.sum(graph.forward(x, aux, cache=False) * R))

    graph.forward(x, aux)
    grads = graph.backward(R)
    errors = {}
    for i, p in enumerate(graph.params):
        for k in p:
            errors[f"layer{i}.{k}"] = max_rel_error(grads.params[i][k], central_diff(loss, p[k], h))
    errors["input"] = max_rel_error(grads.input, central_diff(loss, x, h))
    for port, a in aux.items():
        errors[f"aux.{port}"] = max_rel_error(grads.aux[port], central_diff(loss, a, h))
    return errors


def _top2_gap(windows):
    """Smallest nonzero gap between the largest and second-largest entry over the last axis.

    Exact ties come from structurally identical computations (ReLU-clamped
    zeros, bias-only outputs over dead inputs); they move together under any
    perturbation, so only near-ties count as kinks.
    """
    if windows.shape[-1] < 2:
        return np.inf
    part = np.sort(windows, axis=-1)
    gap = part[..., -1] - part[..., -2]
    gap = gap[gap != 0]
    return float(np.min(gap)) if gap.size else np.inf


def kink_margin(graph, x, aux=None):
    """Distance of the forward pass from the nearest ReLU or max-pool kink.

    Central differences are only valid where the loss is smooth within
    ``h``; this is the smallest |ReLU input| or max-pool top-2 gap.
    """
    aux = aux or {}
    margin = np.inf
    x = np.asarray(x, dtype=np.float64)
    for layer, p in zip(graph.layers, graph.params):
        kind = type(layer).__name__
        if kind == "ReLU":
            margin = min(margin, float(np.min(np.abs(x))))
        elif kind == "MaxPool1D":
            k, s = layer.kernel, layer.stride
            lout = (x.shape[2] - k) // s + 1
            win = np.stack([x[:, :, t * s : t * s + k] for t in range(lout)], axis=2)
            margin = min(margin, _top2_gap(win))
        elif kind == "MaxPool2D":
            (kh, kw), (sh, sw) = layer.kernel, layer.stride
            ho, wo = (x.shape[2] - kh) // sh + 1, (x.shape[3] - kw) // sw + 1
            win = np.stack(
                [x[:, :, r * sh : r * sh + kh, q * sw : q * sw + kw].reshape(x.shape[0], x.shape[1], -1)
                 for r in range(ho) for q in range(wo)],
                axis=2,
            )
            margin = min(margin, _top2_gap(win))
        a = aux.get(getattr(layer, "port", None))
        x, _ = layer.forward(x, p, a)
    return margin
