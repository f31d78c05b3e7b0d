from __future__ import annotations

from dataclasses import dataclass

from .layers import ShapeError

FLOP_CONVENTION = (
    "1 multiply-accumulate = 2 FLOPs; bias adds, activations, pooling and softmax "
    "count 1 FLOP per output element; reshape/flatten/concat are free"
)


@dataclass
class LayerCost:
    index: int
    kind: str
    in_shape: tuple
    out_shape: tuple
    params: int
    flops: int


@dataclass
class CostReport:
    layers: list[LayerCost]
    convention: str = FLOP_CONVENTION

    @property
    def total_params(self) -> int:
        return sum(c.params for c in self.layers)

    @property
    def total_flops(self) -> int:
        return sum(c.flops for c in self.layers)

    def __add__(self, other: "CostReport") -> "CostReport":
        return CostReport(self.layers + other.layers, self.convention)

    def to_dict(self) -> dict:
        return {
            "convention": self.convention,
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "layers": [
                {
                    "index": c.index,
                    "kind": c.kind,
                    "in_shape": list(c.in_shape),
                    "out_shape": list(c.out_shape),
                    "params": c.params,
                    "flops": c.flops,
                }
                for c in self.layers
            ],
        }

    def format(self) -> str:
        lines = [f"{'#':>3}  {'layer':<10} {'output':<18} {'params':>10} {'FLOPs':>14}"]
        for c in self.layers:
            shape = "x".join(str(s) for s in c.out_shape)
            lines.append(f"{c.index:>3}  {c.kind:<10} {shape:<18} {c.params:>10,} {c.flops:>14,}")
        lines.append(f"{'':>3}  {'total':<10} {'':<18} {self.total_params:>10,} {self.total_flops:>14,}")
        lines.append(f"FLOP convention: {self.convention}")
        return "\n".join(lines)


def count_cost(graph_or_layers, input_shape=None) -> CostReport:
    """Per-layer parameter and FLOP counts for one example.

    Accepts a ModelGraph (its input shape is used unless ``input_shape`` is
    given) or a bare list of layers plus ``input_shape``.
    """
    if hasattr(graph_or_layers, "layers"):
        layers = graph_or_layers.layers
        shape = tuple(input_shape) if input_shape is not None else graph_or_layers.input_shape
    else:
        layers = list(graph_or_layers)
        if input_shape is None:
            raise ShapeError("input_shape is required for a bare layer list")
        shape = tuple(input_shape)
    rows = []
    for i, layer in enumerate(layers):
        try:
            out = layer.out_shape(shape)
            params, flops = layer.cost(shape)
        except ShapeError as e:
            raise ShapeError(f"layer {i} ({layer.kind}): {e}") from None
        rows.append(LayerCost(i, layer.kind, tuple(shape), tuple(out), params, flops))
        shape = out
    return CostReport(rows)
