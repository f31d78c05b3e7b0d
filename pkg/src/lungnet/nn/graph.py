from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .layers import Concat, Layer, ReLU, ShapeError, Softmax, layer_from_dict


class NumericError(FloatingPointError):
    pass


@dataclass
class Gradients:
    params: list[dict]
    input: np.ndarray
    aux: dict = field(default_factory=dict)


class ModelGraph:
    """An ordered stack of layers with one primary input and optional auxiliary ports.

    ``input_shape`` excludes the batch axis. Auxiliary ports are flat vectors
    consumed by :class:`Concat` layers naming them.
    """

    def __init__(self, layers, input_shape, aux_ports=None, dtype=np.float32, name="model"):
        self.layers: list[Layer] = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.aux_ports = dict(aux_ports or {})
        self.dtype = np.dtype(dtype)
        self.name = name
        self.shapes = self._resolve_shapes()
        self.params: list[dict] = [
            {k: np.zeros(s, dtype=self.dtype) for k, s in layer.param_shapes(ins).items()}
            for layer, (ins, _) in zip(self.layers, self.shapes)
        ]
        self._cache = None

    def _resolve_shapes(self):
        shapes = []
        shape = self.input_shape
        used = set()
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Concat):
                if layer.port not in self.aux_ports:
                    raise ShapeError(f"layer {i} ({layer.kind}): undeclared auxiliary port {layer.port!r}")
                if self.aux_ports[layer.port] != layer.width:
                    raise ShapeError(
                        f"layer {i} ({layer.kind}): port {layer.port!r} declared with width "
                        f"{self.aux_ports[layer.port]}, layer expects {layer.width}"
                    )
                used.add(layer.port)
            try:
                out = layer.out_shape(shape)
            except ShapeError as e:
                raise ShapeError(f"layer {i} ({layer.kind}): {e}") from None
            shapes.append((shape, out))
            shape = out
        unused = set(self.aux_ports) - used
        if unused:
            raise ShapeError(f"auxiliary ports never consumed: {sorted(unused)}")
        return shapes

    @property
    def output_shape(self):
        return self.shapes[-1][1] if self.shapes else self.input_shape

    def initialize(self, seed=0):
        """Fan-in scaled uniform init; He bound for layers feeding a ReLU, LeCun otherwise. Biases zero."""
        rng = np.random.default_rng(seed)
        for i, (layer, (ins, _)) in enumerate(zip(self.layers, self.shapes)):
            if not layer.has_params:
                continue
            nxt = self.layers[i + 1] if i + 1 < len(self.layers) else None
            gain = 6.0 if isinstance(nxt, ReLU) else 3.0
            bound = math.sqrt(gain / layer.fan_in(ins))
            for k, s in layer.param_shapes(ins).items():
                if k == "b":
                    v = np.zeros(s)
                else:
                    v = rng.uniform(-bound, bound, size=s)
                self.params[i][k] = v.astype(self.dtype)
        return self

    def astype(self, dtype) -> "ModelGraph":
        g = ModelGraph(self.layers, self.input_shape, self.aux_ports, dtype, self.name)
        g.params = [{k: v.astype(dtype) for k, v in p.items()} for p in self.params]
        return g

    def copy(self) -> "ModelGraph":
        g = ModelGraph(copy.deepcopy(self.layers), self.input_shape, self.aux_ports, self.dtype, self.name)
        g.params = [{k: v.copy() for k, v in p.items()} for p in self.params]
        return g

    def n_params(self) -> int:
        return sum(v.size for p in self.params for v in p.values())

    def _check_aux(self, aux, batch):
        aux = dict(aux or {})
        extra = set(aux) - set(self.aux_ports)
        if extra:
            raise ShapeError(f"unknown auxiliary inputs {sorted(extra)}")
        for port, width in self.aux_ports.items():
            if port not in aux:
                raise ShapeError(f"missing auxiliary input {port!r}")
            a = np.asarray(aux[port], dtype=self.dtype)
            if a.shape != (batch, width):
                raise ShapeError(f"auxiliary input {port!r} has shape {a.shape}, expected ({batch}, {width})")
            aux[port] = a
        return aux

    def forward(self, x, aux=None, cache=True):
        """Run a batch ``(N, *input_shape)`` through the graph.

        With ``cache=True`` the activations are kept for :meth:`backward`;
        pass ``cache=False`` for inference shared across threads.
        """
        return self._run(x, aux, cache, stop_before_softmax=False)

    def logits(self, x, aux=None, cache=True):
        """Forward pass returning the input of a final Softmax (or the output if there is none).

        The cache still covers the whole graph, so ``backward(..., wrt_logits=True)``
        may follow.
        """
        return self._run(x, aux, cache, stop_before_softmax=True)

    def _run(self, x, aux, cache, stop_before_softmax):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"input has per-example shape {x.shape[1:]}, graph expects {self.input_shape}")
        aux = self._check_aux(aux, x.shape[0])
        caches = []
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            if stop_before_softmax and i == last and isinstance(layer, Softmax):
                logits = x
            a = aux[layer.port] if isinstance(layer, Concat) else None
            x, c = layer.forward(x, self.params[i], a)
            if not np.all(np.isfinite(x)):
                raise NumericError(f"layer {i} ({layer.kind}): non-finite output")
            caches.append(c)
        if cache:
            self._cache = caches
        if stop_before_softmax and self.layers and isinstance(self.layers[-1], Softmax):
            return logits
        return x

    def backward(self, dout, wrt_logits=False) -> Gradients:
        """Reverse-mode pass from ``dout`` (gradient w.r.t. the output).

        With ``wrt_logits=True`` and a final Softmax, ``dout`` is taken as the
        gradient w.r.t. the Softmax input, which is how cross-entropy training
        avoids dividing by small probabilities.
        """
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        layers = list(enumerate(self.layers))
        if wrt_logits and layers and isinstance(self.layers[-1], Softmax):
            layers = layers[:-1]
        dy = np.asarray(dout, dtype=self.dtype)
        grads: list[dict] = [{} for _ in self.layers]
        aux_grads = {}
        for i, layer in reversed(layers):
            dy, g, da = layer.backward(dy, self.params[i], self._cache[i])
            grads[i] = g
            if da is not None:
                aux_grads[layer.port] = da
        return Gradients(grads, dy, aux_grads)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "aux_ports": self.aux_ports,
            "dtype": self.dtype.name,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelGraph":
        return cls(
            [layer_from_dict(x) for x in d["layers"]],
            d["input_shape"],
            d.get("aux_ports") or {},
            np.dtype(d.get("dtype", "float32")),
            d.get("name", "model"),
        )

    def same_architecture(self, other: "ModelGraph") -> bool:
        a, b = self.to_dict(), other.to_dict()
        a.pop("dtype"), b.pop("dtype"), a.pop("name"), b.pop("name")
        return a == b

    def summary(self) -> str:
        from .cost import count_cost

        return count_cost(self).format()


def forward(g: ModelGraph, primary_input, aux_inputs=None):
    return g.forward(primary_input, aux_inputs)


def backward(g: ModelGraph, loss_grad, wrt_logits=False) -> Gradients:
    return g.backward(loss_grad, wrt_logits)
