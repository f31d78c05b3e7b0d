"""Batch-1 inference latency and the derived throughput/energy columns.

Performance, energy and efficiency are pure functions of model FLOPs,
measured latency and an externally supplied power figure::

    performance [GFLOP/s] = FLOPs / 1e9 / latency [s]
    energy [J]            = power [mW] / 1000 * latency [s]
    efficiency [GFLOPS/W] = performance / (power [mW] / 1000)
"""
from __future__ import annotations

import json
import statistics
import time
import warnings
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .nn import FLOP_CONVENTION


class BenchConfigError(ValueError):
    pass


@dataclass
class BenchConfig:
    warmup_runs: int = 5
    measured_runs: int = 30
    power_mw: float | None = None
    label: str = "host CPU"
    cpu_mhz: float | None = None
    gpu_mhz: float | None = None
    # 1 pins BLAS to a single thread; None leaves the engine's default threading
    threads: int | None = 1

    def __post_init__(self):
        if self.measured_runs < 1:
            raise BenchConfigError(f"measured_runs must be at least 1, got {self.measured_runs}")
        if self.warmup_runs < 0:
            raise BenchConfigError("warmup_runs must be non-negative")
        if self.power_mw is not None and not self.power_mw > 0:
            raise BenchConfigError(f"power must be positive, got {self.power_mw}")


@dataclass
class LatencyStats:
    samples_s: list[float]
    median_s: float
    min_s: float
    max_s: float
    timer_resolution_s: float
    warnings: list[str] = field(default_factory=list)


@dataclass
class BenchReport:
    label: str
    latency_median_s: float
    latency_min_s: float
    latency_max_s: float
    runs: int
    flops: int
    performance_gflops: float
    power_mw: float | None = None
    energy_j: float | None = None
    energy_eff_gflops_per_w: float | None = None
    cpu_mhz: float | None = None
    gpu_mhz: float | None = None
    flop_convention: str = FLOP_CONVENTION
    warnings: list[str] = field(default_factory=list)
    latency_samples_s: list[float] = field(default_factory=list)


def read_power_file(path) -> float:
    """A sensor file holds one line with an integer milliwatt reading."""
    text = Path(path).read_text(encoding="utf-8").strip()
    try:
        mw = int(text.splitlines()[0].strip())
    except (ValueError, IndexError):
        raise BenchConfigError(f"{path}: expected a single integer milliwatt value, got {text[:40]!r}") from None
    if mw <= 0:
        raise BenchConfigError(f"{path}: power must be positive, got {mw}")
    return float(mw)


def _thread_limit(threads):
    if threads is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def _runner(model, x, aux):
    if callable(model) and not hasattr(model, "forward") and not hasattr(model, "graph"):
        return lambda: model(x)
    graph = getattr(model, "graph", model)
    return lambda: graph.forward(x, aux, cache=False)


def measure_latency(model, x, cfg: BenchConfig | None = None, aux=None) -> LatencyStats:
    """Wall-clock seconds per single-input forward pass.

    ``model`` is a ModelGraph, a TrainedModel or any callable taking ``x``.
    ``x`` must already be prepared; only the call itself is timed.
    """
    cfg = cfg or BenchConfig()
    run = _runner(model, x, aux)
    samples = []
    with _thread_limit(cfg.threads):
        for _ in range(cfg.warmup_runs):
            run()
        for _ in range(cfg.measured_runs):
            t0 = time.perf_counter()
            run()
            samples.append(time.perf_counter() - t0)
    res = time.get_clock_info("perf_counter").resolution
    med = statistics.median(samples)
    notes = []
    if res > 0.01 * med:
        notes.append(f"timer resolution {res:.3g} s is coarser than 1% of the median latency {med:.3g} s")
    if cfg.measured_runs < 10:
        notes.append(f"only {cfg.measured_runs} measured runs; medians need at least 10")
    for n in notes:
        warnings.warn(n, RuntimeWarning, stacklevel=2)
    return LatencyStats(samples, med, min(samples), max(samples), res, notes)


@dataclass
class Metrics:
    performance_gflops: float
    energy_j: float | None
    energy_eff_gflops_per_w: float | None


def derive_metrics(flops, latency_s, power_mw=None) -> Metrics:
    if not flops > 0:
        raise ValueError(f"FLOPs must be positive, got {flops}")
    if not latency_s > 0:
        raise ValueError(f"latency must be positive, got {latency_s}")
    perf = (flops / 1e9) / latency_s
    if power_mw is None:
        return Metrics(perf, None, None)
    if not power_mw > 0:
        raise ValueError(f"power must be positive, got {power_mw}")
    watts = power_mw / 1000.0
    return Metrics(perf, watts * latency_s, perf / watts)


def make_report(flops, stats: LatencyStats | float, cfg: BenchConfig | None = None) -> BenchReport:
    """Combine model FLOPs, latency (measured stats or a given number) and config into a report."""
    cfg = cfg or BenchConfig()
    if isinstance(stats, LatencyStats):
        med, lo, hi, runs, notes, raw = stats.median_s, stats.min_s, stats.max_s, len(stats.samples_s), stats.warnings, stats.samples_s
    else:
        med = lo = hi = float(stats)
        runs, notes, raw = 0, ["latency supplied, not measured"], []
    m = derive_metrics(flops, med, cfg.power_mw)
    return BenchReport(
        label=cfg.label,
        latency_median_s=med,
        latency_min_s=lo,
        latency_max_s=hi,
        runs=runs,
        flops=int(flops),
        performance_gflops=m.performance_gflops,
        power_mw=cfg.power_mw,
        energy_j=m.energy_j,
        energy_eff_gflops_per_w=m.energy_eff_gflops_per_w,
        cpu_mhz=cfg.cpu_mhz,
        gpu_mhz=cfg.gpu_mhz,
        warnings=list(notes),
        latency_samples_s=list(raw),
    )


def benchmark(model, x, flops, cfg: BenchConfig | None = None, aux=None) -> BenchReport:
    cfg = cfg or BenchConfig()
    return make_report(flops, measure_latency(model, x, cfg, aux), cfg)


def sig(v, digits=3) -> str:
    """``digits`` significant figures, keeping trailing zeros (10.0, 0.0194)."""
    if v is None:
        return ""
    if v == 0:
        return "0"
    s = f"{v:#.{digits}g}"
    if "e" in s:
        return f"{v:.0f}"
    return s.rstrip(".")


TABLE_COLUMNS = (
    "Configuration",
    "CPU Freq. (MHz)",
    "GPU Freq. (MHz)",
    "Power (mW)",
    "Latency (S)",
    "Performance (GFLOP/S)",
    "Energy (J)",
    "Energy Eff (GFLOPS/W)",
)


def _row(r: BenchReport):
    def freq(v):
        return "-" if v is None else f"{v:g}"

    return [
        r.label,
        freq(r.cpu_mhz),
        freq(r.gpu_mhz),
        "" if r.power_mw is None else f"{r.power_mw:.0f}",
        sig(r.latency_median_s),
        sig(r.performance_gflops),
        sig(r.energy_j),
        sig(r.energy_eff_gflops_per_w),
    ]


def emit_report(reports, fmt="table") -> str:
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to emit")
    if fmt == "structured":
        return json.dumps([asdict(r) for r in reports], indent=2)
    if fmt != "table":
        raise ValueError(f"unknown report format {fmt!r}")
    rows = [list(TABLE_COLUMNS)] + [_row(r) for r in reports]
    widths = [max(len(row[i]) for row in rows) for i in range(len(TABLE_COLUMNS))]
    lines = [" | ".join(c.ljust(w) for c, w in zip(rows[0], widths)).rstrip()]
    lines.append("-+-".join("-" * w for w in widths))
    lines += [" | ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows[1:]]
    flops = sorted({r.flops for r in reports})
    lines.append(f"model FLOPs: {', '.join(f'{f:,}' for f in flops)}; {reports[0].flop_convention}")
    return "\n".join(lines)


def parse_structured(text) -> list[BenchReport]:
    names = {f.name for f in fields(BenchReport)}
    return [BenchReport(**{k: v for k, v in d.items() if k in names}) for d in json.loads(text)]


def frame_input(length, seed=0, dtype=np.float32):
    """A deterministic, peak-normalized random frame shaped ``(1, 1, length)``."""
    x = np.random.default_rng(seed).uniform(-1, 1, size=(1, 1, length))
    return (x / np.abs(x).max()).astype(dtype)
