import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lungnet.bench import (
    TABLE_COLUMNS,
    BenchConfig,
    BenchConfigError,
    BenchReport,
    benchmark,
    derive_metrics,
    emit_report,
    frame_input,
    make_report,
    measure_latency,
    parse_structured,
    read_power_file,
    sig,
)
from lungnet.nn import Dense, Flatten, ModelGraph, Softmax, count_cost


def sleeper(seconds):
    return lambda x: time.sleep(seconds)


def test_sleep_stub_median():
    s = measure_latency(sleeper(0.05), None, BenchConfig(warmup_runs=1, measured_runs=10))
    assert 0.050 <= s.median_s <= 0.060
    assert len(s.samples_s) == 10
    assert s.min_s <= s.median_s <= s.max_s


def test_longer_sleep_gives_larger_median():
    cfg = BenchConfig(warmup_runs=0, measured_runs=10)
    short = measure_latency(sleeper(0.005), None, cfg).median_s
    long = measure_latency(sleeper(0.02), None, cfg).median_s
    assert long > short


def test_config_errors():
    with pytest.raises(BenchConfigError):
        BenchConfig(measured_runs=0)
    with pytest.raises(BenchConfigError):
        BenchConfig(power_mw=-5)


def test_few_runs_warns():
    with pytest.warns(RuntimeWarning, match="measured runs"):
        s = measure_latency(sleeper(0.001), None, BenchConfig(warmup_runs=0, measured_runs=3))
    assert s.warnings


def test_graph_benchmark_repeatable():
    g = ModelGraph([Flatten(), Dense(8), Softmax()], (1, 64))
    g.initialize(0)
    x = frame_input(64)
    flops = count_cost(g).total_flops
    r1 = benchmark(g, x, flops, BenchConfig(warmup_runs=2, measured_runs=20))
    r2 = benchmark(g, x, flops, BenchConfig(warmup_runs=2, measured_runs=20))
    assert len(r1.latency_samples_s) == 20
    assert r1.flops == flops == 2 * 64 * 8 + 8 + 8
    # run-to-run noise on a sub-millisecond call stays well inside an order of magnitude
    assert 0.1 < r1.latency_median_s / r2.latency_median_s < 10


def test_derive_metrics_examples():
    m = derive_metrics(0.194e9, 10.0, 881)
    assert m.performance_gflops == pytest.approx(0.0194)
    assert m.energy_j == pytest.approx(8.81)
    assert round(m.energy_eff_gflops_per_w, 3) == 0.022
    m = derive_metrics(0.194e9, 0.9, 3170)
    assert (round(m.performance_gflops, 4), round(m.energy_j, 3), round(m.energy_eff_gflops_per_w, 3)) == (0.2156, 2.853, 0.068)
    m = derive_metrics(0.194e9, 0.6, 4425)
    assert (round(m.performance_gflops, 4), round(m.energy_j, 3), round(m.energy_eff_gflops_per_w, 4)) == (0.3233, 2.655, 0.0731)
    m = derive_metrics(1e9, 0.5)
    assert m.performance_gflops == 2.0 and m.energy_j is None and m.energy_eff_gflops_per_w is None


def test_derive_metrics_rejects_non_positive():
    for args in ((0, 1.0), (1e9, 0.0), (1e9, -1.0), (1e9, 1.0, 0)):
        with pytest.raises(ValueError):
            derive_metrics(*args)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 10**12), st.floats(1e-6, 1e3), st.floats(1.0, 1e5))
def test_derive_metrics_identities(flops, lat, mw):
    m = derive_metrics(flops, lat, mw)
    assert m.performance_gflops * lat == pytest.approx(flops / 1e9, rel=1e-12)
    assert m.energy_j / lat == pytest.approx(mw / 1000, rel=1e-12)
    assert m.energy_eff_gflops_per_w * (mw / 1000) == pytest.approx(m.performance_gflops, rel=1e-12)


def test_sig_figures():
    assert sig(0.0194) == "0.0194"
    assert sig(10.0) == "10.0"
    assert sig(8.81) == "8.81"
    assert sig(0.21556) == "0.216"
    assert sig(1940.0) == "1940"
    assert sig(None) == ""


def test_emit_table_single_and_mixed():
    with_power = make_report(0.194e9, 10.0, BenchConfig(power_mw=881, label="Denver", cpu_mhz=345))
    no_power = make_report(0.194e9, 0.6, BenchConfig(label="host"))
    one = emit_report([with_power]).splitlines()
    assert all(c in one[0] for c in TABLE_COLUMNS)
    assert one[0].index("Power") < one[0].index("Latency") < one[0].index("Performance") < one[0].index("Energy (J)")
    cells = [c.strip() for c in one[2].split("|")]
    assert cells == ["Denver", "345", "-", "881", "10.0", "0.0194", "8.81", "0.0220"]
    mixed = emit_report([with_power, no_power]).splitlines()
    cells = [c.strip() for c in mixed[3].split("|")]
    assert cells[3] == "" and cells[4] == "0.600" and cells[5] == "0.323"
    assert all(c == "" for c in cells[6:])
    with pytest.raises(ValueError):
        emit_report([])


def test_structured_round_trip():
    stats = measure_latency(sleeper(0.001), None, BenchConfig(warmup_runs=0, measured_runs=10))
    reports = [
        make_report(123456789, stats, BenchConfig(power_mw=3170, label="a")),
        make_report(0.194e9, 1 / 3, BenchConfig(label="b")),
    ]
    back = parse_structured(emit_report(reports, "structured"))
    assert back == reports
    assert isinstance(back[0], BenchReport)


def test_power_file(tmp_path):
    p = tmp_path / "power"
    p.write_text("4425\n")
    assert read_power_file(p) == 4425.0
    p.write_text("4.4 W\n")
    with pytest.raises(BenchConfigError):
        read_power_file(p)


def test_frame_input_is_normalized_and_deterministic():
    a, b = frame_input(1000, seed=3), frame_input(1000, seed=3)
    assert np.array_equal(a, b) and a.shape == (1, 1, 1000)
    assert np.max(np.abs(a)) == pytest.approx(1.0)
