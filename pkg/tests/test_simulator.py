from dataclasses import replace

import numpy as np
import pytest

from sibling_scanner.classifiers import ClassifierSuite
from sibling_scanner.features import FeatureExtractor, extract_features
from sibling_scanner.ingest import synthesize_nonsiblings
from sibling_scanner.models import Family, Label, OptionsFingerprint, Verdict
from sibling_scanner.simulator import (
    ClockSpec,
    JitterSpec,
    NtpdRamp,
    Sinusoid,
    Steps,
    clock_spec_from_mapping,
    elapsed_seconds,
    generate_population,
    host_address,
    leap_second,
    leap_smear,
    measurement_times,
    simulate_host,
    simulate_sibling,
    tick_counter,
)

START = 1_480_000_000.0


def test_tick_quantization_bound():
    rng = np.random.default_rng(0)
    for _ in range(200):
        spec = ClockSpec(
            hz=int(rng.choice([10, 100, 250, 1000])),
            boot_epoch=START - float(rng.uniform(1, 1e7)),
            skew_ppm=float(rng.uniform(-60, 60)),
        )
        t = START + float(rng.uniform(0, 36000))

        ticks = tick_counter(spec, t)

        remainder = elapsed_seconds(spec, t) - ticks / spec.hz
        assert -1e-9 <= remainder < 1 / spec.hz + 1e-9


def test_zero_jitter_zero_skew_offsets_stay_within_one_tick():
    spec = ClockSpec(hz=250, boot_epoch=START - 5e5)
    pair = simulate_sibling(
        spec, JitterSpec(), JitterSpec(), measurement_times(START, 3600.0, 60.0)
    )

    fv = extract_features(pair)
    assert fv.rng4 < 1000 / 250
    assert fv.alpha4 == pytest.approx(0.0, abs=1e-3)


def test_simulate_host_is_deterministic_per_seed():
    spec = ClockSpec(
        hz=1000, boot_epoch=START - 1e6, jitter=JitterSpec(1.0, 2.0, 10.0), seed=9
    )
    times = measurement_times(START, 600.0, 60.0)

    assert simulate_host(spec, times) == simulate_host(spec, times)
    other = simulate_host(replace(spec, seed=10), times)
    assert other != simulate_host(spec, times)


def test_simulate_host_rounds_receive_times_and_sorts():
    spec = ClockSpec(hz=100, boot_epoch=START - 1e5, jitter=JitterSpec(1.0, 5.0))

    series = simulate_host(spec, measurement_times(START, 3600.0, 60.0))

    assert all(round(t, 6) == t for t in series.recv_times)
    assert series.recv_times == sorted(series.recv_times)


def test_simulate_host_rejects_unsorted_times():
    with pytest.raises(ValueError):
        simulate_host(ClockSpec(100, START - 1e5), [START + 10, START])


def test_jitter_is_truncated():
    spec = JitterSpec(min_ms=1.0, scale_ms=50.0, max_ms=10.0)
    delays = spec.draw(np.random.default_rng(1), 1000)

    assert delays.min() >= 0.001
    assert delays.max() <= 0.010


def test_simulate_sibling_shares_one_clock():
    spec = ClockSpec(hz=1000, boot_epoch=START - 1e6, skew_ppm=20.0)
    times = measurement_times(START, 600.0, 60.0)

    pair = simulate_sibling(spec, JitterSpec(), JitterSpec(), times)

    assert pair.label is Label.SIBLING
    assert pair.series4.tsvals == pair.series6.tsvals
    assert pair.series4.family is Family.V4
    assert pair.fp4 == pair.fp6


def test_sibling_with_steps_on_both_sides_stays_sibling():
    spec = ClockSpec(
        hz=1000,
        boot_epoch=START - 1e6,
        skew_ppm=3.0,
        variable=leap_second(START + 18000),
        jitter=JitterSpec(1.0, 1.0, 10.0),
        seed=2,
    )
    pair = simulate_sibling(spec, None, None, measurement_times(START, 36000.0, 60.0))

    fv = extract_features(pair)
    decisions = ClassifierSuite().classify_all(fv)

    assert decisions["ml1"].verdict is Verdict.SIBLING
    assert decisions["ht"].verdict is not Verdict.NONSIBLING


def test_per_family_hz_and_options_are_detectable():
    spec = ClockSpec(hz=1000, boot_epoch=START - 1e6)
    times = measurement_times(START, 3600.0, 60.0)
    mixed_hz = simulate_sibling(
        spec, None, None, times, spec6=ClockSpec(hz=100, boot_epoch=START - 1e6)
    )
    mixed_opts = simulate_sibling(
        spec, None, None, times, fingerprint6=OptionsFingerprint("MSS-NOP-WS07")
    )

    suite = ClassifierSuite()
    assert suite.classify("ml1", extract_features(mixed_hz)).reason.value == "HzDiffer"
    assert suite.classify("ht", extract_features(mixed_opts)).reason.value == (
        "OptionsDiffer"
    )


def test_variable_components_shift_elapsed_time():
    base = ClockSpec(hz=1000, boot_epoch=START)
    t = START + 100.0

    stepped = ClockSpec(1000, START, variable=Steps(((START + 50, 250.0),)))
    ramped = ClockSpec(1000, START, variable=NtpdRamp(((START + 50, 10.0),)))
    wave = ClockSpec(1000, START, variable=Sinusoid(10.0, 400.0))

    assert elapsed_seconds(stepped, t) - elapsed_seconds(base, t) == pytest.approx(0.25)
    assert elapsed_seconds(ramped, t) - elapsed_seconds(base, t) == pytest.approx(5e-4)
    assert abs(elapsed_seconds(wave, t) - elapsed_seconds(base, t)) <= 0.010


def test_leap_smear_absorbs_one_second():
    smear = leap_smear(START, START + 86400.0)
    spec = ClockSpec(1000, START - 10.0, variable=smear)
    plain = ClockSpec(1000, START - 10.0)
    t = START + 90000.0

    assert elapsed_seconds(plain, t) - elapsed_seconds(spec, t) == pytest.approx(1.0)


def test_measurement_times_count():
    times = measurement_times(START, 600.0, 60.0, phase=1.5)

    assert len(times) == 10
    assert times[0] == START + 1.5


def test_host_address_families():
    assert host_address(Family.V4, 0) == "10.0.0.1"
    assert host_address(Family.V6, 0) == "2001:db8::1"


def test_generate_population_counts_and_determinism():
    first = generate_population(20, 0.3, seed=1, duration=3600.0)
    second = generate_population(20, 0.3, seed=1, duration=3600.0)

    assert first == second
    assert [p.series4 for p in first] == [p.series4 for p in second]
    groups = [p.group for p in first]
    assert groups.count("constant") == 6
    assert groups.count("variable") == 14
    assert len({p.id for p in first}) == 20


def test_generate_population_validates_arguments():
    with pytest.raises(ValueError):
        generate_population(1, 0.5, seed=0)
    with pytest.raises(ValueError):
        generate_population(10, 1.5, seed=0)


def test_population_nonsiblings_rarely_fall_below_threshold():
    siblings = generate_population(40, 0.3, seed=3, duration=1800.0)
    nonsiblings = synthesize_nonsiblings(siblings)

    vectors = FeatureExtractor().extract_all(nonsiblings)
    below = sum(
        1 for fv in vectors if fv.delta_tcpraw is not None and fv.delta_tcpraw <= 0.2557
    )

    assert len(nonsiblings) == 40 * 39
    assert below / len(nonsiblings) < 0.01


def test_clock_spec_from_mapping():
    spec = clock_spec_from_mapping(
        {
            "hz": 250,
            "boot_epoch": START,
            "skew_ppm": 4,
            "variable": {"steps": [[START + 60, 1000]]},
            "jitter": {"min_ms": 1, "scale_ms": 2, "max_ms": 10},
            "seed": 5,
        }
    )

    assert spec.hz == 250
    assert spec.variable == Steps(((START + 60, 1000.0),))
    assert spec.jitter == JitterSpec(1, 2, 10)
    assert spec.seed == 5

