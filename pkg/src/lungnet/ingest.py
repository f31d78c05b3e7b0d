"""Manifest parsing, dataset statistics and subject-exclusive selection.

A manifest is a UTF-8 tab-separated file (comma-separated if the name ends
in ``.csv``) with a header row and the columns::

    subject_id  diagnosis  device  age_years  sex  audio_path  annotation_path  [duration_s]

``annotation_path`` may be empty; ``duration_s`` is optional and is read
from the WAV header when absent. Relative paths resolve against the
manifest's directory.
"""
from __future__ import annotations

import csv
import json
import math
import os
import random
from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

DIAGNOSES = (
    "URTI",
    "Healthy",
    "COPD",
    "Bronchiectasis",
    "Bronchiolitis",
    "Asthma",
    "LRTI",
    "Pneumonia",
)
DEVICES = ("Microphone", "LittmannClassic", "Littmann3200", "Meditron")
SEXES = ("M", "F", "Unknown")

# the five classes kept after dropping the sparse Meditron ones
RETAINED_CLASSES = ("URTI", "Healthy", "COPD", "Bronchiectasis", "Bronchiolitis")
DROPPED_CLASSES = frozenset({"Asthma", "LRTI", "Pneumonia"})

MANIFEST_COLUMNS = (
    "subject_id",
    "diagnosis",
    "device",
    "age_years",
    "sex",
    "audio_path",
    "annotation_path",
)

_UNKNOWN_TOKENS = {"", "na", "nan", "none", "unknown", "?"}


class ManifestError(ValueError):
    """Raised for malformed manifest or annotation content."""


class EmptySelectionError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class CycleAnnotation:
    start_s: float
    end_s: float
    crackles: bool = False
    wheezes: bool = False

    def __post_init__(self):
        if not self.start_s < self.end_s:
            raise ValueError(f"inverted cycle interval [{self.start_s}, {self.end_s}]")


@dataclass(frozen=True)
class RecordingMeta:
    subject_id: str
    diagnosis: str
    device: str
    age_years: float | None
    sex: str
    audio_path: Path
    duration_s: float
    cycles: tuple[CycleAnnotation, ...] = ()
    annotation_path: Path | None = None

    def __post_init__(self):
        if self.diagnosis not in DIAGNOSES:
            raise ValueError(f"unknown diagnosis {self.diagnosis!r}")
        if self.device not in DEVICES:
            raise ValueError(f"unknown device {self.device!r}")
        if self.sex not in SEXES:
            raise ValueError(f"unknown sex {self.sex!r}")
        if not self.duration_s > 0:
            raise ValueError(f"duration must be positive, got {self.duration_s}")
        if self.age_years is not None and self.age_years < 0:
            raise ValueError(f"negative age {self.age_years}")
        for c in self.cycles:
            if c.start_s < 0 or c.end_s > self.duration_s + 1e-6:
                raise ValueError(
                    f"cycle [{c.start_s}, {c.end_s}] outside recording of {self.duration_s} s"
                )


@dataclass
class DatasetStats:
    classes: tuple[str, ...]
    age_group_width_years: float
    class_counts: dict[str, int]
    class_by_age_group: np.ndarray  # (len(classes), n_age_groups), rows follow `classes`
    unknown_age_counts: dict[str, int]
    class_by_device: dict[tuple[str, str], int]
    class_durations_s: dict[str, float]
    class_cycle_counts: dict[str, int]
    n_subjects: int
    n_recordings: int

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "age_group_width_years": self.age_group_width_years,
            "class_counts": self.class_counts,
            "class_by_age_group": self.class_by_age_group.tolist(),
            "unknown_age_counts": self.unknown_age_counts,
            "class_by_device": {f"{c}/{d}": n for (c, d), n in self.class_by_device.items()},
            "class_durations_s": self.class_durations_s,
            "class_cycle_counts": self.class_cycle_counts,
            "n_subjects": self.n_subjects,
            "n_recordings": self.n_recordings,
        }


@dataclass
class SplitSpec:
    train_subjects: frozenset[str]
    test_subjects: frozenset[str]
    classes: tuple[str, ...] = RETAINED_CLASSES
    seed: int | None = None
    test_fraction: float | None = None

    def __post_init__(self):
        self.train_subjects = frozenset(self.train_subjects)
        self.test_subjects = frozenset(self.test_subjects)
        self.classes = tuple(self.classes)
        overlap = self.train_subjects & self.test_subjects
        if overlap:
            raise SplitError(f"subjects on both sides of the split: {sorted(overlap)}")

    def to_json(self) -> str:
        return json.dumps(
            {
                "classes": list(self.classes),
                "train_subjects": sorted(self.train_subjects),
                "test_subjects": sorted(self.test_subjects),
                "seed": self.seed,
                "test_fraction": self.test_fraction,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "SplitSpec":
        d = json.loads(text)
        return cls(
            train_subjects=frozenset(d["train_subjects"]),
            test_subjects=frozenset(d["test_subjects"]),
            classes=tuple(d["classes"]),
            seed=d.get("seed"),
            test_fraction=d.get("test_fraction"),
        )

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SplitSpec":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _lookup(token: str, allowed, what: str) -> str:
    for a in allowed:
        if token.lower() == a.lower():
            return a
    raise ValueError(f"unknown {what} token {token!r}")


def _delimiter(path: Path) -> str:
    return "," if path.suffix.lower() == ".csv" else "\t"


def load_cycles(path) -> list[CycleAnnotation]:
    """Read ``start end crackles wheezes`` rows, whitespace separated."""
    path = Path(path)
    cycles = []
    prev_start = -math.inf
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise ManifestError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                start, end = float(parts[0]), float(parts[1])
                crackles, wheezes = int(parts[2]), int(parts[3])
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: non-numeric field in {line.strip()!r}") from None
            if crackles not in (0, 1) or wheezes not in (0, 1):
                raise ManifestError(f"{path}:{lineno}: event flags must be 0 or 1")
            if not start < end:
                raise ManifestError(f"{path}:{lineno}: inverted interval {start} >= {end}")
            if start < prev_start:
                raise ManifestError(f"{path}:{lineno}: cycle starts before the previous one")
            prev_start = start
            cycles.append(CycleAnnotation(start, end, bool(crackles), bool(wheezes)))
    return cycles


def load_manifest(path) -> list[RecordingMeta]:
    from .audio import wav_duration

    path = Path(path)
    root = path.parent
    out = []
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f, delimiter=_delimiter(path))
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ManifestError(f"{path}: header lacks columns {missing}")
        for rowno, row in enumerate(reader, start=2):
            where = f"{path}: row {rowno}"

            def field_value(name):
                v = row.get(name)
                if v is None:
                    raise ManifestError(f"{where}: missing field {name!r}")
                return v.strip()

            subject = field_value("subject_id")
            if not subject:
                raise ManifestError(f"{where}: empty subject_id")
            try:
                diagnosis = _lookup(field_value("diagnosis"), DIAGNOSES, "diagnosis")
                device = _lookup(field_value("device"), DEVICES, "device")
            except ValueError as e:
                raise ManifestError(f"{where}: {e}") from None

            age_tok = field_value("age_years")
            if age_tok.lower() in _UNKNOWN_TOKENS:
                age = None
            else:
                try:
                    age = float(age_tok)
                except ValueError:
                    raise ManifestError(f"{where}: field 'age_years' is not a number: {age_tok!r}") from None
                if age < 0 or not math.isfinite(age):
                    raise ManifestError(f"{where}: field 'age_years' must be non-negative, got {age_tok}")

            sex_tok = field_value("sex")
            if sex_tok.lower() in _UNKNOWN_TOKENS:
                sex = "Unknown"
            else:
                try:
                    sex = _lookup(sex_tok, SEXES, "sex")
                except ValueError as e:
                    raise ManifestError(f"{where}: {e}") from None

            audio_path = Path(os.path.normpath(root / field_value("audio_path")))
            if not audio_path.is_file():
                raise ManifestError(f"{where}: audio file not found: {audio_path}")

            dur_tok = (row.get("duration_s") or "").strip()
            if dur_tok:
                try:
                    duration = float(dur_tok)
                except ValueError:
                    raise ManifestError(f"{where}: field 'duration_s' is not a number: {dur_tok!r}") from None
            else:
                duration = wav_duration(audio_path)
            if not duration > 0:
                raise ManifestError(f"{where}: non-positive duration {duration}")

            ann_tok = field_value("annotation_path")
            ann_path = Path(os.path.normpath(root / ann_tok)) if ann_tok else None
            cycles: list[CycleAnnotation] = []
            if ann_path is not None:
                if not ann_path.is_file():
                    raise ManifestError(f"{where}: annotation file not found: {ann_path}")
                cycles = load_cycles(ann_path)
            try:
                rec = RecordingMeta(
                    subject_id=subject,
                    diagnosis=diagnosis,
                    device=device,
                    age_years=age,
                    sex=sex,
                    audio_path=audio_path,
                    duration_s=duration,
                    cycles=tuple(cycles),
                    annotation_path=ann_path,
                )
            except ValueError as e:
                raise ManifestError(f"{where}: {e}") from None
            out.append(rec)
    return out


def write_manifest(recordings, path, include_duration=True):
    """Write recordings back out; paths are made relative to the new manifest when possible."""
    path = Path(path)
    root = path.parent.resolve()

    def rel(p):
        if p is None:
            return ""
        p = Path(p).resolve()
        try:
            return p.relative_to(root).as_posix()
        except ValueError:
            return Path(os.path.relpath(p, root)).as_posix()

    cols = list(MANIFEST_COLUMNS) + (["duration_s"] if include_duration else [])
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, delimiter=_delimiter(path), lineterminator="\n")
        w.writerow(cols)
        for r in recordings:
            row = [
                r.subject_id,
                r.diagnosis,
                r.device,
                "NA" if r.age_years is None else repr(float(r.age_years)),
                r.sex,
                rel(r.audio_path),
                rel(r.annotation_path),
            ]
            if include_duration:
                row.append(repr(float(r.duration_s)))
            w.writerow(row)


def load_demographics(path) -> dict[str, tuple[float | None, str]]:
    """Read an externally estimated demographics table: subject_id, age_years, sex."""
    path = Path(path)
    out = {}
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f, delimiter=_delimiter(path))
        for rowno, row in enumerate(reader, start=2):
            try:
                subject = row["subject_id"].strip()
                age_tok = (row.get("age_years") or "").strip()
                age = None if age_tok.lower() in _UNKNOWN_TOKENS else float(age_tok)
                sex_tok = (row.get("sex") or "").strip()
                sex = "Unknown" if sex_tok.lower() in _UNKNOWN_TOKENS else _lookup(sex_tok, SEXES, "sex")
            except (KeyError, ValueError) as e:
                raise ManifestError(f"{path}: row {rowno}: {e}") from None
            if age is not None and age < 0:
                raise ManifestError(f"{path}: row {rowno}: negative age {age}")
            out[subject] = (age, sex)
    return out


def age_group(age_years: float, width: float = 10.0, n_groups: int = 10) -> int:
    return min(int(math.floor(age_years / width)), n_groups - 1)


def compute_stats(
    recordings,
    age_group_width_years: float = 10.0,
    n_age_groups: int = 10,
    allow_empty: bool = False,
) -> DatasetStats:
    recordings = list(recordings)
    if not recordings and not allow_empty:
        raise ValueError("compute_stats needs at least one recording")
    if age_group_width_years <= 0:
        raise ValueError("age group width must be positive")

    classes = DIAGNOSES
    row = {c: i for i, c in enumerate(classes)}
    # a subject counts once per class; its first recording supplies the age
    subject_age: dict[tuple[str, str], float | None] = {}
    devices: set[tuple[str, str, str]] = set()
    cycles = defaultdict(int)
    for r in recordings:
        subject_age.setdefault((r.diagnosis, r.subject_id), r.age_years)
        devices.add((r.diagnosis, r.device, r.subject_id))
        cycles[r.diagnosis] += len(r.cycles)

    counts = dict.fromkeys(classes, 0)
    unknown = dict.fromkeys(classes, 0)
    matrix = np.zeros((len(classes), n_age_groups), dtype=np.int64)
    for (cls, _), age in subject_age.items():
        counts[cls] += 1
        if age is None:
            unknown[cls] += 1
        else:
            matrix[row[cls], age_group(age, age_group_width_years, n_age_groups)] += 1

    by_device = {(c, d): 0 for c in classes for d in DEVICES}
    for cls, dev, _ in devices:
        by_device[(cls, dev)] += 1

    # fsum keeps totals independent of input order
    dur = {c: math.fsum(r.duration_s for r in recordings if r.diagnosis == c) for c in classes}

    return DatasetStats(
        classes=classes,
        age_group_width_years=age_group_width_years,
        class_counts=counts,
        class_by_age_group=matrix,
        unknown_age_counts=unknown,
        class_by_device=by_device,
        class_durations_s=dur,
        class_cycle_counts={c: cycles[c] for c in classes},
        n_subjects=len({r.subject_id for r in recordings}),
        n_recordings=len(recordings),
    )


def format_stats(stats: DatasetStats, only_present: bool = True) -> str:
    """Plain-text breakdowns: per class, class by age group, class by device."""
    classes = [c for c in stats.classes if not only_present or stats.class_counts[c] > 0]
    w = max([len(c) for c in classes] + [5])
    lines = [f"{stats.n_recordings} recordings from {stats.n_subjects} subjects", ""]
    lines.append(f"{'class':<{w}}  {'subjects':>8}  {'duration_s':>10}  {'cycles':>6}")
    for c in classes:
        lines.append(
            f"{c:<{w}}  {stats.class_counts[c]:>8}  {stats.class_durations_s[c]:>10g}  {stats.class_cycle_counts[c]:>6}"
        )
    total_dur = math.fsum(stats.class_durations_s[c] for c in classes)
    lines.append(
        f"{'Total':<{w}}  {sum(stats.class_counts[c] for c in classes):>8}  {total_dur:>10g}  "
        f"{sum(stats.class_cycle_counts[c] for c in classes):>6}"
    )

    width = stats.age_group_width_years
    n_groups = stats.class_by_age_group.shape[1]
    heads = [f"{int(i * width)}-{int((i + 1) * width) - 1}" for i in range(n_groups - 1)]
    heads.append(f"{int((n_groups - 1) * width)}+")
    lines += ["", "subjects by age group (years)"]
    lines.append(f"{'class':<{w}}  " + " ".join(f"{h:>6}" for h in heads) + f"  {'NA':>4}")
    for c in classes:
        r = stats.class_by_age_group[stats.classes.index(c)]
        lines.append(f"{c:<{w}}  " + " ".join(f"{v:>6}" for v in r) + f"  {stats.unknown_age_counts[c]:>4}")

    lines += ["", "subjects by device"]
    lines.append(f"{'class':<{w}}  " + " ".join(f"{d:>15}" for d in DEVICES))
    for c in classes:
        lines.append(f"{c:<{w}}  " + " ".join(f"{stats.class_by_device[(c, d)]:>15}" for d in DEVICES))
    return "\n".join(lines)


def select_subset(recordings, keep_device: str = "Meditron", drop_classes=DROPPED_CLASSES):
    keep_device = _lookup(keep_device, DEVICES, "device")
    drop = {_lookup(c, DIAGNOSES, "diagnosis") for c in drop_classes}
    out = [r for r in recordings if r.device == keep_device and r.diagnosis not in drop]
    if not out:
        raise EmptySelectionError(
            f"no recordings left after keeping device {keep_device} and dropping {sorted(drop)}"
        )
    return out


def _subjects_by_class(recordings) -> dict[str, list[str]]:
    first_class: dict[str, str] = {}
    for r in recordings:
        first_class.setdefault(r.subject_id, r.diagnosis)
    by_class = defaultdict(list)
    for s, c in first_class.items():
        by_class[c].append(s)
    return by_class


def split_subjects(recordings, test_fraction: float = 0.19, seed: int = 0, classes=None) -> SplitSpec:
    """Stratified, seeded, subject-exclusive train/test split.

    Each class's subjects are shuffled and ``round(test_fraction * n)``
    of them (at least one, never all) go to the test side. A subject with
    recordings under several diagnoses is placed by its first recording.
    """
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    recordings = list(recordings)
    by_class = _subjects_by_class(recordings)
    if classes is None:
        classes = tuple(c for c in DIAGNOSES if c in by_class)
    else:
        classes = tuple(classes)
        stray = sorted({r.diagnosis for r in recordings} - set(classes))
        if stray:
            raise SplitError(f"recordings with diagnoses outside the class list: {stray}")

    rng = random.Random(seed)
    train, test = set(), set()
    for c in classes:
        subjects = sorted(by_class.get(c, []))
        if len(subjects) < 2:
            raise SplitError(f"class {c} has {len(subjects)} subject(s); need at least 2 to split")
        rng.shuffle(subjects)
        n_test = min(max(int(round(test_fraction * len(subjects))), 1), len(subjects) - 1)
        test.update(subjects[:n_test])
        train.update(subjects[n_test:])
    return SplitSpec(frozenset(train), frozenset(test), classes, seed=seed, test_fraction=test_fraction)


def apply_split(recordings, split: SplitSpec):
    """Partition recordings into (train, test) lists, dropping unassigned subjects."""
    train = [r for r in recordings if r.subject_id in split.train_subjects]
    test = [r for r in recordings if r.subject_id in split.test_subjects]
    return train, test


def with_demographics(recordings, table: dict[str, tuple[float | None, str]]):
    """Override age/sex from an external estimator's table."""
    out = []
    for r in recordings:
        if r.subject_id in table:
            age, sex = table[r.subject_id]
            r = replace(r, age_years=age, sex=sex)
        out.append(r)
    return out
