"""EnvNet-like raw-waveform classifier and its demographic late-fusion variant.

Trunk: two 1-D convolutions, a non-overlapping 1-D max-pool, a reshape
that treats the (channels x time) map as a one-channel image, then 2-D
convolution blocks each followed by a 2-D max-pool. The head flattens,
optionally concatenates the demographic vector, and applies two
Dense+ReLU layers and a Dense+Softmax classifier.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .ingest import RETAINED_CLASSES, SEXES
from .nn import (
    Concat,
    Conv1D,
    Conv2D,
    Dense,
    Flatten,
    MaxPool1D,
    MaxPool2D,
    ModelGraph,
    ReLU,
    Reshape,
    ShapeError,
    Softmax,
    count_cost,
)

N_AGE_GROUPS = 10
AGE_GROUP_WIDTH = 10.0
DEMOGRAPHICS_PORT = "demographics"


@dataclass
class DemographicVector:
    age_group_onehot: np.ndarray
    gender_onehot: np.ndarray
    use_age: bool = True
    use_gender: bool = False

    def as_array(self) -> np.ndarray:
        parts = []
        if self.use_age:
            parts.append(self.age_group_onehot)
        if self.use_gender:
            parts.append(self.gender_onehot)
        return np.concatenate(parts) if parts else np.zeros(0)


def demographic_width(use_age=True, use_gender=False) -> int:
    return N_AGE_GROUPS * bool(use_age) + 2 * bool(use_gender)


def encode_demographics(age_years, sex="Unknown", use_age=True, use_gender=False) -> DemographicVector:
    """One-hot age decade (clamped to the last group) and sex; unknowns give all-zero blocks."""
    age = np.zeros(N_AGE_GROUPS)
    if age_years is not None and not (isinstance(age_years, float) and math.isnan(age_years)):
        if age_years < 0:
            raise ValueError(f"negative age {age_years}")
        age[min(int(math.floor(age_years / AGE_GROUP_WIDTH)), N_AGE_GROUPS - 1)] = 1.0
    gender = np.zeros(2)
    if sex in ("M", "F"):
        gender[0 if sex == "M" else 1] = 1.0
    elif sex not in SEXES and sex is not None:
        raise ValueError(f"unknown sex {sex!r}")
    return DemographicVector(age, gender, use_age, use_gender)


@dataclass
class Conv2DBlock:
    channels: int
    kernel: tuple[int, int]
    pool: tuple[int, int]


@dataclass
class ModelConfig:
    window_s: float = 5.0
    sample_rate_hz: int = 44100
    classes: tuple[str, ...] = RETAINED_CLASSES
    # (channels, kernel) of the two 1-D convolutions
    conv1d: tuple[tuple[int, int], ...] = ((8, 10), (8, 5))
    pool1d: int = 200
    conv2d: tuple[Conv2DBlock, ...] = (
        Conv2DBlock(8, (3, 8), (1, 3)),
        Conv2DBlock(14, (3, 5), (1, 4)),
    )
    dense: tuple[int, ...] = (64, 64)
    fusion: bool = False
    use_age: bool = True
    use_gender: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.conv1d = tuple(tuple(int(v) for v in c) for c in self.conv1d)
        self.conv2d = tuple(
            Conv2DBlock(int(b.channels), tuple(b.kernel), tuple(b.pool))
            if isinstance(b, Conv2DBlock)
            else Conv2DBlock(int(b["channels"]), tuple(b["kernel"]), tuple(b["pool"]))
            for b in self.conv2d
        )
        self.dense = tuple(int(d) for d in self.dense)
        if len(self.classes) < 2:
            raise ValueError("need at least two classes")
        if self.window_s <= 0 or self.sample_rate_hz <= 0:
            raise ValueError("window and sample rate must be positive")
        if self.fusion and not (self.use_age or self.use_gender):
            raise ValueError("fusion model needs at least one demographic feature")

    @property
    def input_length(self) -> int:
        return int(round(self.window_s * self.sample_rate_hz))

    @property
    def demographic_width(self) -> int:
        return demographic_width(self.use_age, self.use_gender)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = list(self.classes)
        d["conv1d"] = [list(c) for c in self.conv1d]
        d["conv2d"] = [{"channels": b.channels, "kernel": list(b.kernel), "pool": list(b.pool)} for b in self.conv2d]
        d["dense"] = list(self.dense)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def shipped_config(name: str) -> ModelConfig:
    """Load one of the bundled configs: ``audio_only`` or ``fusion``."""
    text = resources.files("lungnet").joinpath("configs", f"{name}.json").read_text(encoding="utf-8")
    return ModelConfig.from_dict(json.loads(text))


def _trunk(cfg: ModelConfig) -> list:
    layers = []
    for ch, k in cfg.conv1d:
        layers += [Conv1D(ch, k), ReLU()]
    layers.append(MaxPool1D(cfg.pool1d))
    # EnvNet-style: the (channels x time) map becomes a 1-channel image
    channels = cfg.conv1d[-1][0]
    layers.append(Reshape((1, channels, -1)))
    for b in cfg.conv2d:
        layers += [Conv2D(b.channels, b.kernel), ReLU(), MaxPool2D(b.pool)]
    layers.append(Flatten())
    return layers


def _head(cfg: ModelConfig) -> list:
    layers = []
    for units in cfg.dense:
        layers += [Dense(units), ReLU()]
    return layers + [Dense(len(cfg.classes)), Softmax()]


def _graph(cfg: ModelConfig, layers, aux) -> ModelGraph:
    try:
        g = ModelGraph(layers, (1, cfg.input_length), aux, np.dtype(cfg.dtype), "fusion" if aux else "audio")
    except ShapeError as e:
        raise ValueError(f"config yields an invalid network: {e}") from None
    g.cost = count_cost(g)
    return g


def build_audio_model(cfg: ModelConfig) -> ModelGraph:
    return _graph(cfg, _trunk(cfg) + _head(cfg), None)


def build_fusion_model(cfg: ModelConfig) -> ModelGraph:
    width = cfg.demographic_width
    layers = _trunk(cfg) + [Concat(DEMOGRAPHICS_PORT, width)] + _head(cfg)
    return _graph(cfg, layers, {DEMOGRAPHICS_PORT: width})


def build_model(cfg: ModelConfig) -> ModelGraph:
    return build_fusion_model(cfg) if cfg.fusion else build_audio_model(cfg)


def fusion_column_slice(g: ModelGraph) -> tuple[int, slice]:
    """(layer index, row slice) of the first post-Concat Dense weights fed by demographics."""
    for i, layer in enumerate(g.layers):
        if isinstance(layer, Concat):
            d = g.shapes[i][0][0]
            j = next(k for k in range(i + 1, len(g.layers)) if isinstance(g.layers[k], Dense))
            return j, slice(d, d + layer.width)
    raise ValueError("graph has no Concat layer")


def demographics_for(recordings, use_age=True, use_gender=False) -> dict[str, DemographicVector]:
    """Subject -> encoded demographics, taken from each subject's first recording."""
    out = {}
    for r in recordings:
        if r.subject_id not in out:
            out[r.subject_id] = encode_demographics(r.age_years, r.sex, use_age, use_gender)
    return out
