"""Layer kinds of the engine.

Shapes passed to ``out_shape``/``cost``/``init`` are per example (no batch
axis); arrays passed to ``forward``/``backward`` carry a leading batch axis.
Channels-first throughout: 1-D maps are ``(C, L)``, 2-D maps ``(C, H, W)``.
Convolutions are 'valid' (no padding).
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (list, tuple)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def _span(start, stride, count):
    # slice picking `count` positions start, start+stride, ...
    return slice(start, start + stride * (count - 1) + 1, stride)


class Layer:
    kind = "Layer"
    has_params = False

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def param_shapes(self, in_shape) -> dict:
        return {}

    def fan_in(self, in_shape) -> int:
        return 0

    def cost(self, in_shape) -> tuple[int, int]:
        """(parameter count, FLOPs) for one example; 1 MAC = 2 FLOPs."""
        return 0, 0

    def forward(self, x, params, aux=None):
        raise NotImplementedError

    def backward(self, dy, params, cache):
        """Return (dx, param grads, aux grad or None)."""
        raise NotImplementedError

    def config(self) -> dict:
        return {}

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.config()}

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.config().items())
        return f"{self.kind}({args})"

    def __eq__(self, other):
        return type(self) is type(other) and self.config() == other.config()


class Conv1D(Layer):
    kind = "Conv1D"
    has_params = True

    def __init__(self, out_channels, kernel, stride=1):
        self.out_channels = int(out_channels)
        self.kernel = int(kernel)
        self.stride = int(stride)
        if min(self.out_channels, self.kernel, self.stride) <= 0:
            raise ValueError(f"Conv1D hyperparameters must be positive: {self.config()}")

    def config(self):
        return {"out_channels": self.out_channels, "kernel": self.kernel, "stride": self.stride}

    def out_shape(self, in_shape):
        if len(in_shape) != 2:
            raise ShapeError(f"Conv1D expects (channels, length), got {in_shape}")
        c, n = in_shape
        out = (n - self.kernel) // self.stride + 1
        if n < self.kernel or out <= 0:
            raise ShapeError(f"Conv1D kernel {self.kernel} longer than input length {n}")
        return (self.out_channels, out)

    def param_shapes(self, in_shape):
        return {"W": (self.out_channels, in_shape[0], self.kernel), "b": (self.out_channels,)}

    def fan_in(self, in_shape):
        return in_shape[0] * self.kernel

    def cost(self, in_shape):
        c = in_shape[0]
        o, lout = self.out_shape(in_shape)
        params = self.kernel * c * o + o
        flops = 2 * self.kernel * c * o * lout + o * lout
        return params, flops

    def forward(self, x, params, aux=None):
        W, b = params["W"], params["b"]
        lout = (x.shape[2] - self.kernel) // self.stride + 1
        y = np.zeros((x.shape[0], self.out_channels, lout), dtype=x.dtype)
        for j in range(self.kernel):
            y += np.matmul(W[:, :, j], x[:, :, _span(j, self.stride, lout)])
        y += b[:, None]
        return y, x

    def backward(self, dy, params, x):
        W = params["W"]
        lout = dy.shape[2]
        dW = np.empty_like(W)
        dx = np.zeros_like(x)
        for j in range(self.kernel):
            sl = _span(j, self.stride, lout)
            dW[:, :, j] = np.tensordot(dy, x[:, :, sl], axes=([0, 2], [0, 2]))
            dx[:, :, sl] += np.matmul(W[:, :, j].T, dy)
        return dx, {"W": dW, "b": dy.sum(axis=(0, 2))}, None


class Conv2D(Layer):
    kind = "Conv2D"
    has_params = True

    def __init__(self, out_channels, kernel, stride=1):
        self.out_channels = int(out_channels)
        self.kernel = _pair(kernel)
        self.stride = _pair(stride)
        if min(self.out_channels, *self.kernel, *self.stride) <= 0:
            raise ValueError(f"Conv2D hyperparameters must be positive: {self.config()}")

    def config(self):
        return {"out_channels": self.out_channels, "kernel": list(self.kernel), "stride": list(self.stride)}

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"Conv2D expects (channels, height, width), got {in_shape}")
        _, h, w = in_shape
        (kh, kw), (sh, sw) = self.kernel, self.stride
        if h < kh or w < kw:
            raise ShapeError(f"Conv2D kernel {self.kernel} larger than input {(h, w)}")
        return (self.out_channels, (h - kh) // sh + 1, (w - kw) // sw + 1)

    def param_shapes(self, in_shape):
        return {"W": (self.out_channels, in_shape[0], *self.kernel), "b": (self.out_channels,)}

    def fan_in(self, in_shape):
        return in_shape[0] * self.kernel[0] * self.kernel[1]

    def cost(self, in_shape):
        c = in_shape[0]
        o, ho, wo = self.out_shape(in_shape)
        kh, kw = self.kernel
        return kh * kw * c * o + o, 2 * kh * kw * c * o * ho * wo + o * ho * wo

    def forward(self, x, params, aux=None):
        W, b = params["W"], params["b"]
        n, c, h, w = x.shape
        (kh, kw), (sh, sw) = self.kernel, self.stride
        ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
        y = np.zeros((n, self.out_channels, ho * wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                xs = x[:, :, _span(i, sh, ho), _span(j, sw, wo)].reshape(n, c, ho * wo)
                y += np.matmul(W[:, :, i, j], xs)
        y += b[:, None]
        return y.reshape(n, self.out_channels, ho, wo), x

    def backward(self, dy, params, x):
        W = params["W"]
        n, c, _, _ = x.shape
        (kh, kw), (sh, sw) = self.kernel, self.stride
        ho, wo = dy.shape[2], dy.shape[3]
        dyf = dy.reshape(n, self.out_channels, ho * wo)
        dW = np.empty_like(W)
        dx = np.zeros_like(x)
        for i in range(kh):
            for j in range(kw):
                rs, cs = _span(i, sh, ho), _span(j, sw, wo)
                dW[:, :, i, j] = np.tensordot(dy, x[:, :, rs, cs], axes=([0, 2, 3], [0, 2, 3]))
                dx[:, :, rs, cs] += np.matmul(W[:, :, i, j].T, dyf).reshape(n, c, ho, wo)
        return dx, {"W": dW, "b": dy.sum(axis=(0, 2, 3))}, None


class MaxPool1D(Layer):
    kind = "MaxPool1D"

    def __init__(self, kernel, stride=None):
        self.kernel = int(kernel)
        self.stride = int(stride) if stride is not None else self.kernel
        if self.kernel <= 0 or self.stride <= 0:
            raise ValueError(f"MaxPool1D hyperparameters must be positive: {self.config()}")

    def config(self):
        return {"kernel": self.kernel, "stride": self.stride}

    def out_shape(self, in_shape):
        if len(in_shape) != 2:
            raise ShapeError(f"MaxPool1D expects (channels, length), got {in_shape}")
        c, n = in_shape
        if n < self.kernel:
            raise ShapeError(f"MaxPool1D kernel {self.kernel} longer than input length {n}")
        return (c, (n - self.kernel) // self.stride + 1)

    def cost(self, in_shape):
        return 0, math.prod(self.out_shape(in_shape))

    def forward(self, x, params, aux=None):
        lout = (x.shape[2] - self.kernel) // self.stride + 1
        win = sliding_window_view(x, self.kernel, axis=2)[:, :, : self.stride * (lout - 1) + 1 : self.stride]
        idx = win.argmax(axis=3)
        y = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]
        pos = idx + (np.arange(lout) * self.stride)
        return y, (x.shape, pos)

    def backward(self, dy, params, cache):
        shape, pos = cache
        dx = np.zeros(shape, dtype=dy.dtype)
        if self.stride >= self.kernel:
            np.put_along_axis(dx, pos, dy, axis=2)
        else:
            n, c = np.indices(pos.shape[:2])
            np.add.at(dx, (n[..., None], c[..., None], pos), dy)
        return dx, {}, None


class MaxPool2D(Layer):
    kind = "MaxPool2D"

    def __init__(self, kernel, stride=None):
        self.kernel = _pair(kernel)
        self.stride = _pair(stride) if stride is not None else self.kernel
        if min(*self.kernel, *self.stride) <= 0:
            raise ValueError(f"MaxPool2D hyperparameters must be positive: {self.config()}")

    def config(self):
        return {"kernel": list(self.kernel), "stride": list(self.stride)}

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"MaxPool2D expects (channels, height, width), got {in_shape}")
        c, h, w = in_shape
        (kh, kw), (sh, sw) = self.kernel, self.stride
        if h < kh or w < kw:
            raise ShapeError(f"MaxPool2D kernel {self.kernel} larger than input {(h, w)}")
        return (c, (h - kh) // sh + 1, (w - kw) // sw + 1)

    def cost(self, in_shape):
        return 0, math.prod(self.out_shape(in_shape))

    def forward(self, x, params, aux=None):
        n, c, h, w = x.shape
        (kh, kw), (sh, sw) = self.kernel, self.stride
        ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
        win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, _span(0, sh, ho), _span(0, sw, wo)]
        win = win.reshape(n, c, ho, wo, kh * kw)
        idx = win.argmax(axis=4)
        y = np.take_along_axis(win, idx[..., None], axis=4)[..., 0]
        rows = np.arange(ho)[:, None] * sh + idx // kw
        cols = np.arange(wo)[None, :] * sw + idx % kw
        return y, (x.shape, rows * w + cols)

    def backward(self, dy, params, cache):
        shape, flat = cache
        n, c, h, w = shape
        dx = np.zeros((n, c, h * w), dtype=dy.dtype)
        flat = flat.reshape(n, c, -1)
        if self.stride[0] >= self.kernel[0] and self.stride[1] >= self.kernel[1]:
            np.put_along_axis(dx, flat, dy.reshape(n, c, -1), axis=2)
        else:
            ni, ci = np.indices((n, c))
            np.add.at(dx, (ni[..., None], ci[..., None], flat), dy.reshape(n, c, -1))
        return dx.reshape(shape), {}, None


class Dense(Layer):
    kind = "Dense"
    has_params = True

    def __init__(self, units):
        self.units = int(units)
        if self.units <= 0:
            raise ValueError("Dense units must be positive")

    def config(self):
        return {"units": self.units}

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"Dense expects a flat vector, got {in_shape}")
        return (self.units,)

    def param_shapes(self, in_shape):
        return {"W": (in_shape[0], self.units), "b": (self.units,)}

    def fan_in(self, in_shape):
        return in_shape[0]

    def cost(self, in_shape):
        d = in_shape[0]
        return d * self.units + self.units, 2 * d * self.units + self.units

    def forward(self, x, params, aux=None):
        return x @ params["W"] + params["b"], x

    def backward(self, dy, params, x):
        return dy @ params["W"].T, {"W": x.T @ dy, "b": dy.sum(axis=0)}, None


class ReLU(Layer):
    kind = "ReLU"

    def cost(self, in_shape):
        return 0, math.prod(in_shape)

    def forward(self, x, params, aux=None):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, params, mask):
        return dy * mask, {}, None


class Softmax(Layer):
    kind = "Softmax"

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"Softmax expects a flat vector, got {in_shape}")
        return tuple(in_shape)

    def cost(self, in_shape):
        return 0, math.prod(in_shape)

    def forward(self, x, params, aux=None):
        p = softmax(x)
        return p, p

    def backward(self, dy, params, p):
        return p * (dy - np.sum(dy * p, axis=-1, keepdims=True)), {}, None


class Flatten(Layer):
    kind = "Flatten"

    def out_shape(self, in_shape):
        return (math.prod(in_shape),)

    def forward(self, x, params, aux=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, params, shape):
        return dy.reshape(shape), {}, None


class Reshape(Layer):
    """Reinterpret the per-example shape; one entry may be -1."""

    kind = "Reshape"

    def __init__(self, shape):
        self.shape = tuple(int(s) for s in shape)
        if sum(s == -1 for s in self.shape) > 1 or any(s == 0 or s < -1 for s in self.shape):
            raise ValueError(f"bad Reshape target {self.shape}")

    def config(self):
        return {"shape": list(self.shape)}

    def out_shape(self, in_shape):
        total = math.prod(in_shape)
        known = math.prod(s for s in self.shape if s != -1)
        if -1 in self.shape:
            if total % known:
                raise ShapeError(f"cannot reshape {in_shape} to {self.shape}")
            return tuple(total // known if s == -1 else s for s in self.shape)
        if known != total:
            raise ShapeError(f"cannot reshape {in_shape} to {self.shape}")
        return self.shape

    def forward(self, x, params, aux=None):
        return x.reshape((x.shape[0],) + self.out_shape(x.shape[1:])), x.shape

    def backward(self, dy, params, shape):
        return dy.reshape(shape), {}, None


class Concat(Layer):
    """Append an auxiliary input vector (e.g. demographics) to flat features."""

    kind = "Concat"

    def __init__(self, port, width):
        self.port = str(port)
        self.width = int(width)
        if self.width <= 0:
            raise ValueError("Concat width must be positive")

    def config(self):
        return {"port": self.port, "width": self.width}

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"Concat expects a flat vector, got {in_shape}")
        return (in_shape[0] + self.width,)

    def forward(self, x, params, aux=None):
        if aux is None:
            raise ShapeError(f"Concat needs auxiliary input {self.port!r}")
        if aux.shape != (x.shape[0], self.width):
            raise ShapeError(f"auxiliary input {self.port!r} has shape {aux.shape}, expected ({x.shape[0]}, {self.width})")
        return np.concatenate([x, aux.astype(x.dtype, copy=False)], axis=1), x.shape[1]

    def backward(self, dy, params, d):
        return dy[:, :d], {}, dy[:, d:]


def softmax(z):
    z = np.asarray(z)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z):
    z = np.asarray(z)
    s = z - z.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


LAYER_KINDS = {
    cls.kind: cls
    for cls in (Conv1D, Conv2D, MaxPool1D, MaxPool2D, Dense, ReLU, Softmax, Flatten, Reshape, Concat)
}


def layer_from_dict(d: dict) -> Layer:
    d = dict(d)
    kind = d.pop("kind")
    if kind not in LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    return LAYER_KINDS[kind](**d)
