"""Synthetic datasets: the bundled respiratory-database fixture and desk-scale audio tasks.

Run ``python -m lungnet.synthetic OUTDIR [--rate HZ]`` to regenerate the
bundled fixture.
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from .audio import FrameSet, write_wav
from .ingest import CycleAnnotation, RecordingMeta, SplitSpec, write_manifest
from .model import encode_demographics

RECORDING_S = 20.0

# class -> (subjects, 20 s recordings, respiratory cycles), per side of the split
TABLE1_TRAIN = {
    "URTI": (12, 19, 207),
    "Healthy": (24, 28, 257),
    "COPD": (6, 29, 406),
    "Bronchiectasis": (5, 13, 88),
    "Bronchiolitis": (5, 11, 141),
}
TABLE1_TEST = {
    "URTI": (2, 4, 26),
    "Healthy": (4, 7, 48),
    "COPD": (2, 7, 119),
    "Bronchiectasis": (2, 3, 17),
    "Bronchiolitis": (1, 2, 16),
}
# recordings the subset selection must discard: (class, device, subjects)
DISTRACTORS = [
    ("Pneumonia", "Meditron", 2),
    ("LRTI", "Meditron", 2),
    ("COPD", "LittmannClassic", 3),
    ("COPD", "Littmann3200", 2),
    ("COPD", "Microphone", 2),
    ("Asthma", "Microphone", 1),
    ("URTI", "Littmann3200", 1),
]

_AGE_RANGE = {
    "URTI": (2, 60),
    "Healthy": (1, 70),
    "COPD": (55, 90),
    "Bronchiectasis": (40, 80),
    "Bronchiolitis": (0.2, 3),
    "Pneumonia": (60, 85),
    "LRTI": (5, 70),
    "Asthma": (30, 70),
}
_TONE_HZ = {
    "URTI": 11.0,
    "Healthy": 7.0,
    "COPD": 23.0,
    "Bronchiectasis": 31.0,
    "Bronchiolitis": 43.0,
    "Pneumonia": 17.0,
    "LRTI": 13.0,
    "Asthma": 37.0,
}


def _spread(total, parts):
    base, extra = divmod(total, parts)
    return [base + (i < extra) for i in range(parts)]


def _cycles(n):
    step = RECORDING_S / n
    return [
        CycleAnnotation(round(i * step, 3), round((i + 1) * step - 0.05, 3), bool((i * 7) % 5 == 0), bool((i * 3) % 7 == 0))
        for i in range(n)
    ]


def _recording_audio(rng, diagnosis, rate):
    t = np.arange(int(RECORDING_S * rate)) / rate
    f = min(_TONE_HZ[diagnosis], 0.45 * rate)
    breath = 0.5 + 0.5 * np.sin(2 * np.pi * 0.25 * t)
    x = 0.5 * breath * np.sin(2 * np.pi * f * t) + 0.1 * rng.standard_normal(t.size)
    return np.clip(x, -1, 1)


def table1_recordings(root, rate=200, seed=2020, write_audio=True):
    """Build the fixture under ``root``; returns (train, test, distractor) RecordingMeta lists."""
    root = Path(root)
    (root / "audio").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    next_id = [101]

    def make(groups, device="Meditron"):
        out = []
        for diagnosis, (n_subj, n_rec, n_cyc) in groups:
            subjects = []
            for _ in range(n_subj):
                lo, hi = _AGE_RANGE[diagnosis]
                age = round(float(rng.uniform(lo, hi)), 1 if hi < 5 else 0)
                sex = "M" if rng.random() < 0.5 else "F"
                subjects.append((str(next_id[0]), age, sex))
                next_id[0] += 1
            per_rec = _spread(n_cyc, n_rec)
            for r in range(n_rec):
                sid, age, sex = subjects[r % n_subj]
                name = f"{sid}_{r // n_subj + 1}b1_Al_sc_{device}"
                wav = root / "audio" / f"{name}.wav"
                ann = root / "annotations" / f"{name}.txt"
                cycles = _cycles(per_rec[r]) if per_rec[r] else []
                if write_audio:
                    write_wav(wav, _recording_audio(rng, diagnosis, rate), rate)
                    ann.write_text(
                        "".join(f"{c.start_s:.3f}\t{c.end_s:.3f}\t{int(c.crackles)}\t{int(c.wheezes)}\n" for c in cycles),
                        encoding="utf-8",
                    )
                out.append(RecordingMeta(sid, diagnosis, device, age, sex, wav, RECORDING_S, tuple(cycles), ann))
        return out

    train = make(TABLE1_TRAIN.items())
    test = make(TABLE1_TEST.items())
    extra = []
    for diagnosis, device, n in DISTRACTORS:
        extra += make([(diagnosis, (n, n, 3 * n))], device)
    return train, test, extra


def write_table1_fixture(root, rate=200, seed=2020):
    """Write audio, annotations, ``database.tsv``, ``train.tsv``, ``test.tsv`` and ``split.json``."""
    root = Path(root)
    train, test, extra = table1_recordings(root, rate, seed)
    write_manifest(train + test + extra, root / "database.tsv", include_duration=False)
    write_manifest(train, root / "train.tsv", include_duration=False)
    write_manifest(test, root / "test.tsv", include_duration=False)
    SplitSpec(
        frozenset(r.subject_id for r in train),
        frozenset(r.subject_id for r in test),
        tuple(TABLE1_TRAIN),
    ).save(root / "split.json")
    return root


def tone_vs_noise(n, rate=8000, window_s=1.0, seed=0, subject_prefix="s") -> FrameSet:
    """Balanced two-class set: a band-limited tone (200-800 Hz) in light noise vs broadband noise."""
    rng = np.random.default_rng(seed)
    length = int(round(rate * window_s))
    t = np.arange(length) / rate
    samples = np.empty((n, length), dtype=np.float32)
    labels = []
    for i in range(n):
        amp = rng.uniform(0.3, 1.0)
        if i % 2 == 0:
            f = rng.uniform(200, 800)
            x = amp * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)) + 0.05 * rng.standard_normal(length)
            labels.append("tone")
        else:
            x = amp * 0.4 * rng.standard_normal(length)
            labels.append("noise")
        samples[i] = np.clip(x, -1, 1)
    return FrameSet(
        samples=samples,
        subject_ids=[f"{subject_prefix}{i}" for i in range(n)],
        labels=labels,
        offsets_s=[0.0] * n,
        sources=["synthetic"] * n,
        sample_rate_hz=rate,
        window_s=window_s,
        stride_s=window_s,
    )


JOINT_CLASSES = ("low", "high-young", "high-old")


def joint_audio_age(n, rate=8000, window_s=0.5, seed=0, subject_prefix="j"):
    """Label depends on the audio pattern and the age group together.

    Pattern 0 (a low tone) is always class ``low``. Pattern 1 (a high tone)
    is ``high-young`` below 50 years and ``high-old`` otherwise. Age groups
    are uniform, so audio alone is right at most 75% of the time.
    Returns (FrameSet, subject -> DemographicVector).
    """
    rng = np.random.default_rng(seed)
    length = int(round(rate * window_s))
    t = np.arange(length) / rate
    samples = np.empty((n, length), dtype=np.float32)
    labels, subjects, demos = [], [], {}
    for i in range(n):
        pattern = int(rng.integers(0, 2))
        group = int(rng.integers(0, 10))
        age = group * 10 + float(rng.uniform(0, 10))
        f = rng.uniform(250, 450) if pattern == 0 else rng.uniform(1500, 2500)
        amp = rng.uniform(0.3, 1.0)
        x = amp * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)) + 0.1 * rng.standard_normal(length)
        samples[i] = np.clip(x, -1, 1)
        if pattern == 0:
            labels.append(JOINT_CLASSES[0])
        else:
            labels.append(JOINT_CLASSES[1] if group < 5 else JOINT_CLASSES[2])
        sid = f"{subject_prefix}{i}"
        subjects.append(sid)
        demos[sid] = encode_demographics(age, "Unknown")
    frames = FrameSet(samples, subjects, labels, [0.0] * n, ["synthetic"] * n, rate, window_s, window_s)
    return frames, demos


def main(argv=None):
    p = argparse.ArgumentParser(description="write the synthetic respiratory-database fixture")
    p.add_argument("outdir")
    p.add_argument("--rate", type=int, default=200, help="WAV sample rate in Hz (default 200)")
    p.add_argument("--seed", type=int, default=2020)
    args = p.parse_args(argv)
    write_table1_fixture(args.outdir, args.rate, args.seed)
    print(f"fixture written to {args.outdir}")


if __name__ == "__main__":
    main()
