"""Training loop and per-class sensitivity evaluation."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio import FrameSet, normalize_frames
from .ingest import DIAGNOSES
from .model import DEMOGRAPHICS_PORT, ModelConfig
from .nn import SGD, Adam, ModelGraph, NumericError, cross_entropy
from .nn.serialize import load_model_with_extra, save_model

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 100
    lr: float = 1e-3
    # step schedule: lr * lr_decay ** (epoch // lr_decay_every); 0 disables
    lr_decay: float = 1.0
    lr_decay_every: int = 0
    optimizer: str = "adam"
    momentum: float = 0.0
    seed: int = 0
    patience: int = 10
    val_fraction: float = 0.1
    class_weights: bool = False
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.batch_size <= 0 or self.epochs <= 0 or self.eval_batch_size <= 0:
            raise ValueError("batch_size, epochs and eval_batch_size must be positive")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainedModel:
    graph: ModelGraph
    classes: tuple[str, ...]
    config: ModelConfig | None = None

    @property
    def uses_demographics(self) -> bool:
        return DEMOGRAPHICS_PORT in self.graph.aux_ports

    def save(self, path):
        extra = {"classes": list(self.classes)}
        if self.config is not None:
            extra["model_config"] = self.config.to_dict()
        save_model(self.graph, path, extra)

    @classmethod
    def load(cls, path) -> "TrainedModel":
        g, extra = load_model_with_extra(path)
        cfg = ModelConfig.from_dict(extra["model_config"]) if "model_config" in extra else None
        return cls(g, tuple(extra["classes"]), cfg)


@dataclass
class TrainResult:
    model: TrainedModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def history_tsv(self) -> str:
        buf = io.StringIO()
        cols = ["epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc"]
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(cols)
        for row in self.history:
            w.writerow(["" if row[c] is None else repr(row[c]) for c in cols])
        return buf.getvalue()


def infer_classes(labels) -> tuple[str, ...]:
    present = set(labels)
    known = [c for c in DIAGNOSES if c in present]
    return tuple(known + sorted(present - set(known)))


def label_indices(labels, classes) -> np.ndarray:
    lookup = {c: i for i, c in enumerate(classes)}
    missing = sorted(set(labels) - set(lookup))
    if missing:
        raise ValueError(f"frame labels outside the model's classes: {missing}")
    return np.array([lookup[lab] for lab in labels], dtype=np.int64)


def _inputs(frames: FrameSet, idx, graph: ModelGraph, demos):
    x = normalize_frames(frames.samples[idx].astype(graph.dtype, copy=False))[:, None, :]
    aux = None
    if DEMOGRAPHICS_PORT in graph.aux_ports:
        aux = {DEMOGRAPHICS_PORT: np.stack([_demo_row(demos, frames.subject_ids[i]) for i in idx])}
    return x, aux


def _demo_row(demos, subject):
    if demos is None or subject not in demos:
        raise KeyError(f"no demographic entry for subject {subject!r}")
    d = demos[subject]
    return d.as_array() if hasattr(d, "as_array") else np.asarray(d, dtype=float)


def _check_demos(graph, frames, demos):
    if DEMOGRAPHICS_PORT not in graph.aux_ports:
        return
    missing = sorted({s for s in frames.subject_ids if demos is None or s not in demos})
    if missing:
        raise ValueError(f"fusion model needs demographics for subjects {missing[:5]}{'...' if len(missing) > 5 else ''}")


def _split_validation(frames: FrameSet, fraction, rng):
    subjects = sorted(set(frames.subject_ids))
    if fraction <= 0 or len(subjects) < 2:
        return np.arange(len(frames)), np.arange(0)
    order = list(subjects)
    rng.shuffle(order)
    n_val = min(max(int(round(fraction * len(order))), 1), len(order) - 1)
    val = set(order[:n_val])
    is_val = np.array([s in val for s in frames.subject_ids])
    return np.flatnonzero(~is_val), np.flatnonzero(is_val)


def _predict_logits(graph, frames, idx, demos, batch):
    out = []
    for start in range(0, len(idx), batch):
        x, aux = _inputs(frames, idx[start : start + batch], graph, demos)
        out.append(graph.logits(x, aux, cache=False))
    return np.concatenate(out) if out else np.zeros((0, graph.output_shape[0]))


def train(model, frames: FrameSet, demos=None, cfg: TrainConfig | None = None, classes=None) -> TrainResult:
    """Mini-batch cross-entropy training on a copy of ``model``.

    ``model`` is a ModelGraph (``classes`` then names its outputs, defaulting
    to the labels present) or a TrainedModel. A subject-exclusive slice of
    the training frames drives early stopping; the best validation weights
    are kept.
    """
    cfg = cfg or TrainConfig()
    if isinstance(model, TrainedModel):
        graph, classes, mcfg = model.graph.copy(), model.classes, model.config
    else:
        graph, mcfg = model.copy(), None
        classes = tuple(classes) if classes is not None else infer_classes(frames.labels)
    if len(frames) == 0:
        raise ValueError("no training frames")
    if graph.output_shape != (len(classes),):
        raise ValueError(f"model outputs {graph.output_shape} but {len(classes)} classes were given")
    _check_demos(graph, frames, demos)
    y_all = label_indices(frames.labels, classes)

    rng = np.random.default_rng(cfg.seed)
    tr_idx, val_idx = _split_validation(frames, cfg.val_fraction, rng)
    weights = None
    if cfg.class_weights:
        counts = np.bincount(y_all[tr_idx], minlength=len(classes)).astype(float)
        weights = np.where(counts > 0, counts.sum() / (len(classes) * np.maximum(counts, 1)), 0.0)

    opt = Adam(cfg.lr) if cfg.optimizer == "adam" else SGD(cfg.lr, cfg.momentum)
    history = []
    best = (math.inf, None, 0)
    stale = 0
    stopped = False
    batch_no = 0
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr
        if cfg.lr_decay_every > 0:
            lr = cfg.lr * cfg.lr_decay ** ((epoch - 1) // cfg.lr_decay_every)
        opt.lr = lr
        perm = tr_idx[rng.permutation(len(tr_idx))]
        loss_sum, correct = 0.0, 0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            x, aux = _inputs(frames, idx, graph, demos)
            try:
                logits = graph.logits(x, aux)
            except NumericError as e:
                raise TrainingError(f"epoch {epoch}, batch {batch_no}: {e}") from None
            loss, dlogits = cross_entropy(logits, y_all[idx], weights)
            if not math.isfinite(loss):
                raise TrainingError(f"epoch {epoch}, batch {batch_no}: loss is {loss}")
            grads = graph.backward(dlogits, wrt_logits=True)
            opt.step(graph.params, grads.params)
            loss_sum += loss * len(idx)
            correct += int(np.sum(logits.argmax(axis=1) == y_all[idx]))
            batch_no += 1
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": loss_sum / len(perm),
            "train_acc": correct / len(perm),
            "val_loss": None,
            "val_acc": None,
        }
        if len(val_idx):
            vlog = _predict_logits(graph, frames, val_idx, demos, cfg.eval_batch_size)
            vloss, _ = cross_entropy(vlog, y_all[val_idx], weights)
            row["val_loss"] = vloss
            row["val_acc"] = float(np.mean(vlog.argmax(axis=1) == y_all[val_idx]))
            if vloss < best[0]:
                best = (vloss, [{k: v.copy() for k, v in p.items()} for p in graph.params], epoch)
                stale = 0
            else:
                stale += 1
        history.append(row)
        vl = "n/a" if row["val_loss"] is None else f"{row['val_loss']:.4f}"
        log.info("epoch %d: train loss %.4f acc %.3f, val loss %s", epoch, row["train_loss"], row["train_acc"], vl)
        if len(val_idx) and cfg.patience > 0 and stale >= cfg.patience:
            stopped = True
            break

    best_epoch = len(history)
    if best[1] is not None:
        graph.params = best[1]
        best_epoch = best[2]
    return TrainResult(TrainedModel(graph, tuple(classes), mcfg), history, best_epoch, stopped)


# -- evaluation


@dataclass
class EvalReport:
    classes: tuple[str, ...]
    confusion: np.ndarray  # rows = truth, columns = prediction
    level: str = "frame"

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.confusion = np.asarray(self.confusion, dtype=np.int64)
        k = len(self.classes)
        if self.confusion.shape != (k, k):
            raise ValueError(f"confusion shape {self.confusion.shape} does not match {k} classes")

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        return int(np.trace(self.confusion)) / self.total if self.total else float("nan")

    @property
    def per_class_sensitivity(self) -> list[float | None]:
        """Recall per class; None where the class has no evaluated examples."""
        out = []
        for c in range(len(self.classes)):
            row = int(self.confusion[c].sum())
            out.append(int(self.confusion[c, c]) / row if row else None)
        return out

    @property
    def undefined_classes(self) -> list[str]:
        return [c for c, s in zip(self.classes, self.per_class_sensitivity) if s is None]

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "classes": list(self.classes),
            "confusion": self.confusion.tolist(),
            "per_class_sensitivity": self.per_class_sensitivity,
            "undefined_classes": self.undefined_classes,
            "accuracy": self.accuracy,
            "total": self.total,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(tuple(d["classes"]), np.array(d["confusion"]), d.get("level", "frame"))


def report_from_predictions(y_true, y_pred, classes, level="frame") -> EvalReport:
    k = len(classes)
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return EvalReport(tuple(classes), conf, level)


def majority_vote(labels, n_classes) -> int:
    """Most frequent label; ties go to the lowest class index."""
    return int(np.argmax(np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes)))


def subject_level(y_true, y_pred, subjects, classes) -> EvalReport:
    by_subject: dict[str, list[int]] = {}
    for i, s in enumerate(subjects):
        by_subject.setdefault(s, []).append(i)
    t, p = [], []
    for s in sorted(by_subject):
        idx = by_subject[s]
        t.append(majority_vote(np.asarray(y_true)[idx], len(classes)))
        p.append(majority_vote(np.asarray(y_pred)[idx], len(classes)))
    return report_from_predictions(t, p, classes, level="subject")


@dataclass
class EvalResult:
    frame: EvalReport
    subject: EvalReport

    def to_dict(self) -> dict:
        return {"frame": self.frame.to_dict(), "subject": self.subject.to_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def predict(model: TrainedModel, frames: FrameSet, demos=None, batch_size=64) -> np.ndarray:
    _check_demos(model.graph, frames, demos)
    logits = _predict_logits(model.graph, frames, np.arange(len(frames)), demos, batch_size)
    return logits.argmax(axis=1)


def evaluate(model: TrainedModel, frames: FrameSet, demos=None, batch_size=64) -> EvalResult:
    y_true = label_indices(frames.labels, model.classes)
    y_pred = predict(model, frames, demos, batch_size)
    return EvalResult(
        report_from_predictions(y_true, y_pred, model.classes),
        subject_level(y_true, y_pred, frames.subject_ids, model.classes),
    )


def _pct(v):
    return "n/a" if v is None else f"{100 * v:.0f}%"


def format_table(rows) -> str:
    """Sensitivity/accuracy table; ``rows`` holds (label, EvalReport, CostReport or None)."""
    classes = rows[0][1].classes
    head = ["Model", "#params", "FLOPs"] + list(classes) + ["Accuracy"]
    body = []
    for name, rep, cost in rows:
        params = f"{cost.total_params / 1e3:.0f}k" if cost is not None else "-"
        flops = f"{cost.total_flops / 1e9:.3g}B" if cost is not None else "-"
        body.append([name, params, flops] + [_pct(s) for s in rep.per_class_sensitivity] + [_pct(rep.accuracy)])
    widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
    lines = [" | ".join(h.ljust(w) for h, w in zip(head, widths))]
    lines.append("-+-".join("-" * w for w in widths))
    lines += [" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in body]
    return "\n".join(lines)


def save_history(result: TrainResult, path):
    Path(path).write_text(result.history_tsv(), encoding="utf-8")


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
