import itertools

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from sibling_scanner.classifiers import classify_ml1
from sibling_scanner.features import (
    DegenerateX,
    FeatureExtractor,
    FeatureStatus,
    NoOverlap,
    OffsetArray,
    TooFewSamples,
    compute_side,
    delta_tcpraw,
    dynamic_range,
    estimate_hz,
    extract_features,
    feature_row,
    nominal_hz,
    offsets,
    robust_skew,
    spline_curves,
    spline_pair,
    unwrap_and_relativize,
)
from sibling_scanner.models import (
    Family,
    Reason,
    TimestampSample,
    TimestampSeries,
    Verdict,
)
from sibling_scanner.simulator import (
    ClockSpec,
    JitterSpec,
    Sinusoid,
    measurement_times,
    simulate_host,
    simulate_sibling,
    tick_counter,
    with_hz,
)

START = 1_480_000_000.0
NO_JITTER = JitterSpec()


def _offset_array(x, y, origin=0.0):
    return OffsetArray(
        x=np.asarray(x, dtype=float), y=np.asarray(y, dtype=float), hz=1000.0,
        r2_hz=1.0, origin=origin,
    )


def _series(family, pairs):
    ip = "192.0.2.1" if family is Family.V4 else "2001:db8::1"
    return TimestampSeries(ip, family, tuple(TimestampSample(t, v) for t, v in pairs))


def test_theil_sen_matches_brute_force_median():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(3, 51))
        x = np.sort(rng.uniform(0, 36000, n))
        while np.any(np.diff(x) == 0):
            x = np.sort(rng.uniform(0, 36000, n))
        y = rng.normal(0, 5, n) + rng.uniform(-0.01, 0.01) * x

        slope, r2 = robust_skew(_offset_array(x, y))

        pairwise = [
            (y[j] - y[i]) / (x[j] - x[i])
            for i, j in itertools.combinations(range(n), 2)
        ]
        assert slope == pytest.approx(float(np.median(pairwise)), abs=1e-12)
        assert r2 <= 1.0


def test_robust_skew_needs_three_points():
    with pytest.raises(TooFewSamples):
        robust_skew(_offset_array([0.0, 1.0], [0.0, 1.0]))


def test_robust_skew_of_a_flat_line_is_perfect_fit():
    slope, r2 = robust_skew(_offset_array([0.0, 1.0, 2.0, 3.0], [2.0] * 4))

    assert slope == 0.0
    assert r2 == 1.0


def test_unwrap_matches_untruncated_counter_across_wrap():
    rng = np.random.default_rng(3)
    times = measurement_times(START, 3600.0, 60.0)
    for _ in range(50):
        hz = int(rng.choice([100, 250, 1000]))
        ticks_before_wrap = float(rng.uniform(60, 3000)) * hz
        boot = START - (2**32 - ticks_before_wrap) / hz
        spec = ClockSpec(hz=hz, boot_epoch=boot, skew_ppm=float(rng.uniform(-50, 50)))

        series = simulate_host(spec, times, jitter=NO_JITTER)
        x, v = unwrap_and_relativize(series)

        expected = [tick_counter(spec, t) - tick_counter(spec, times[0]) for t in times]
        assert v.tolist() == expected
        assert x[0] == 0.0


def test_unwrap_needs_two_samples():
    with pytest.raises(TooFewSamples):
        unwrap_and_relativize(_series(Family.V4, [(1.0, 5)]))


def test_estimate_hz_recovers_slope():
    x = np.arange(0, 600, 60, dtype=float)

    hz, r2 = estimate_hz(x, 250 * x)

    assert hz == pytest.approx(250.0)
    assert r2 == pytest.approx(1.0)
    assert nominal_hz(hz) == 250


def test_estimate_hz_degenerate_inputs():
    with pytest.raises(DegenerateX):
        estimate_hz(np.zeros(4), np.arange(4))
    assert estimate_hz(np.arange(4.0), np.zeros(4)) == (0.0, 0.0)


def test_offsets_of_a_perfect_clock_are_zero():
    x = np.arange(0, 3600, 60, dtype=float)

    off = offsets(x, 1000 * x, 1000)

    assert np.allclose(off.y, 0.0)


def test_dynamic_range_trims_both_tails():
    off = _offset_array(np.arange(40.0), np.arange(40.0))

    # floor(0.025 * 40) = 1 point dropped at each end
    assert dynamic_range(off) == 37.0


def test_delta_tcpraw_of_zero_jitter_sibling_is_below_one_tick():
    rng = np.random.default_rng(5)
    for _ in range(200):
        hz = int(rng.choice([10, 100, 250, 1000]))
        spec = ClockSpec(
            hz=hz,
            boot_epoch=START - float(rng.uniform(3600, 1e6)),
            skew_ppm=float(rng.uniform(-60, 60)),
        )
        times = measurement_times(START, 600.0, 60.0)
        same_times = simulate_sibling(spec, NO_JITTER, NO_JITTER, times)
        unskewed = ClockSpec(hz=hz, boot_epoch=spec.boot_epoch)
        shifted = simulate_sibling(
            unskewed, NO_JITTER, NO_JITTER, times,
            sample_times6=times + float(rng.uniform(0, 5)),
        )

        for pair in (same_times, shifted):
            assert delta_tcpraw(pair.series4, pair.series6, hz, hz) < 1.0 / hz


def test_delta_tcpraw_separates_hosts_booted_an_hour_apart():
    rng = np.random.default_rng(6)
    times = measurement_times(START, 120.0, 60.0)
    for _ in range(1000):
        boot_a = START - float(rng.uniform(3600, 1e6))
        boot_b = boot_a - float(rng.uniform(3600, 1e6)) * rng.choice([-1, 1])
        boot_b = min(boot_b, START - 1.0)
        if abs(boot_a - boot_b) < 3600:
            continue
        a = simulate_host(ClockSpec(1000, boot_a), times, family=Family.V4)
        b = simulate_host(
            ClockSpec(1000, boot_b), times, ip="2001:db8::1", family=Family.V6
        )

        assert delta_tcpraw(a, b, 1000, 1000) > 0.2557


def test_randomized_timestamps_fail_the_frequency_gate():
    times = measurement_times(START, 6000.0, 60.0)
    failed = 0
    for seed in range(1000):
        spec = ClockSpec(1000, START - 1e5, seed=seed, randomized=True)
        pair = simulate_sibling(spec, NO_JITTER, NO_JITTER, times)

        fv = extract_features(pair)
        decision = classify_ml1(fv)
        if (
            decision.verdict is Verdict.NONSIBLING
            and decision.reason is Reason.HZ_FIT_FAILED
        ):
            failed += 1

    assert failed >= 990


def test_compute_side_flags_erratic_counters():
    values = [4_000_000_000, 10, 4_000_000_000, 10, 4_000_000_000, 10, 4_000_000_000, 10]
    series = _series(Family.V4, [(START + 60 * i, v) for i, v in enumerate(values)])

    side = compute_side(series)

    assert side.wraps == 4
    assert side.erratic
    assert side.hz_status is FeatureStatus.FAILED


def test_compute_side_single_sample_fails():
    side = compute_side(_series(Family.V4, [(START, 1)]))

    assert side.hz_status is FeatureStatus.FAILED
    assert side.offsets is None


def _variable_offsets(seed, amplitude=20.0):
    spec = ClockSpec(
        hz=1000,
        boot_epoch=START - 1e6,
        skew_ppm=1.0,
        variable=Sinusoid(amplitude_ms=amplitude, period_s=14400.0),
        seed=seed,
    )
    jitter = JitterSpec(min_ms=1.0, scale_ms=1.5, max_ms=10.0)
    pair = simulate_sibling(
        spec, jitter, jitter, measurement_times(START, 36000.0, 60.0),
        sample_times6=measurement_times(START, 36000.0, 60.0, phase=2.0),
    )
    return compute_side(pair.series4).offsets, compute_side(pair.series6).offsets


def test_spline_of_identical_arrays_is_zero():
    off4, _ = _variable_offsets(11)

    spl_diff, scaled = spline_pair(off4, off4)

    assert spl_diff == pytest.approx(0.0, abs=1e-12)
    assert scaled is None


def test_spline_is_invariant_under_constant_offset():
    off4, off6 = _variable_offsets(12)

    base, _ = spline_pair(off4, off6)
    moved4, _ = spline_pair(off4.shifted(7.5), off6)
    moved6, _ = spline_pair(off4, off6.shifted(-3.0))

    assert abs(moved4 - base) < 1e-9
    assert abs(moved6 - base) < 1e-9


def test_spline_pair_matches_dense_grid_oracle():
    for seed in range(50):
        off4, off6 = _variable_offsets(100 + seed)
        spl_diff, _ = spline_pair(off4, off6)

        _, s4, s6 = spline_curves(off4, off6, grid_points=20001)
        diff = s4 - s6
        best = minimize_scalar(
            lambda c: float(np.mean(np.abs(diff - c))),
            bounds=(float(diff.min()), float(diff.max())),
            method="bounded",
            options={"xatol": 1e-10},
        )

        assert spl_diff == pytest.approx(best.fun, rel=0.01, abs=1e-6)


def test_spline_curves_without_overlap():
    x = np.linspace(0, 600, 20)
    off4 = _offset_array(x, np.zeros(20), origin=START)
    off6 = _offset_array(x, np.zeros(20), origin=START + 10_000)

    with pytest.raises(NoOverlap):
        spline_curves(off4, off6)


def test_spline_curves_needs_enough_points():
    x = np.linspace(0, 600, 8)
    off = _offset_array(x, np.zeros(8), origin=START)

    with pytest.raises(TooFewSamples):
        spline_curves(off, off)


def test_extract_features_for_a_sibling():
    spec = ClockSpec(hz=1000, boot_epoch=START - 1e6, skew_ppm=30.0, seed=4)
    jitter = JitterSpec(min_ms=1.0, scale_ms=1.0, max_ms=10.0)
    pair = simulate_sibling(spec, jitter, jitter, measurement_times(START, 36000.0, 60.0))

    fv = extract_features(pair)

    assert not fv.opts_diff
    assert fv.computed("hz4", "hz6", "delta_tcpraw", "skew_diff", "range_diff", "spline")
    assert fv.hz_diff == 0
    assert fv.delta_tcpraw < 0.2557
    assert fv.alpha4 == pytest.approx(0.03, abs=1e-3)
    assert fv.alpha_diff == pytest.approx(0.0, abs=1e-3)


def test_extract_features_skips_pair_features_when_hz_differs():
    spec = ClockSpec(hz=1000, boot_epoch=START - 1e6, seed=4)
    times = measurement_times(START, 3600.0, 60.0)
    pair = simulate_sibling(spec, NO_JITTER, NO_JITTER, times, spec6=with_hz(spec, 100))

    fv = extract_features(pair)

    assert fv.hz_diff == 900
    assert fv.delta_tcpraw is None
    assert fv.status["delta_tcpraw"] is FeatureStatus.SKIPPED
    assert fv.status["spline"] is FeatureStatus.SKIPPED
    assert fv.computed("skew4", "skew6", "range4", "range6")


def test_feature_extractor_caches_per_series():
    spec = ClockSpec(hz=100, boot_epoch=START - 1e5)
    pair = simulate_sibling(
        spec, NO_JITTER, NO_JITTER, measurement_times(START, 600.0, 60.0)
    )
    extractor = FeatureExtractor()

    assert extractor.side(pair.series4) is extractor.side(pair.series4)
    assert len(extractor.extract_all([pair, pair])) == 2


def test_feature_row_flattens_status():
    spec = ClockSpec(hz=100, boot_epoch=START - 1e5)
    pair = simulate_sibling(
        spec, NO_JITTER, NO_JITTER, measurement_times(START, 600.0, 60.0),
        pair_id="p-1",
    )

    row = feature_row(extract_features(pair))

    assert row["pair_id"] == "p-1"
    assert row["status_hz4"] == "computed"
    assert "status" not in row
