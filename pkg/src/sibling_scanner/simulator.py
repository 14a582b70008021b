"""
Deterministic synthetic dual-stack hosts and measurement traces.

Randomness comes from numpy's counter-based Philox bit generator, seeded through
SeedSequence([seed, stream]) so every host and every network path owns an
independent, reproducible stream.
"""

from __future__ import annotations

import ipaddress
import logging
import math
from dataclasses import dataclass, replace
from typing import Any, Mapping, Sequence, Union

import numpy as np

from sibling_scanner.models import (
    TSVAL_MODULUS,
    CandidatePair,
    Family,
    Label,
    OptionsFingerprint,
    TimestampSample,
    TimestampSeries,
    canonicalize_options,
)

logger = logging.getLogger(__name__)

TYPICAL_HZ = (10, 100, 250, 1000)
HZ_WEIGHTS = (0.05, 0.25, 0.2, 0.5)
DEFAULT_START_EPOCH = 1_480_000_000.0
THREE_YEARS = 3 * 365 * 86400.0

# (kind, value) option lists as seen in SYN-ACKs
COMMON_OPTIONS: tuple[tuple[tuple[int, bytes], ...], ...] = (
    ((2, b"\x05\xb4"), (4, b""), (8, b""), (1, b""), (3, b"\x07")),
    ((2, b"\x05\xb4"), (1, b""), (3, b"\x08"), (4, b""), (8, b"")),
    ((2, b"\x05\xb4"), (4, b""), (8, b""), (1, b""), (3, b"\x09")),
)
OPTION_WEIGHTS = (0.7, 0.2, 0.1)

STREAM_CLOCK = 0
STREAM_PATH4 = 4
STREAM_PATH6 = 6


@dataclass(frozen=True)
class Sinusoid:
    amplitude_ms: float
    period_s: float
    phase: float = 0.0


@dataclass(frozen=True)
class Steps:
    """Instant clock corrections: (epoch seconds, jump in ms)."""

    steps: tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class NtpdRamp:
    """Frequency changes: (epoch seconds, new skew in ppm)."""

    changes: tuple[tuple[float, float], ...]


VariableComponent = Union[Sinusoid, Steps, NtpdRamp, None]


@dataclass(frozen=True)
class JitterSpec:
    """Shifted exponential one-way delay, optionally truncated at max_ms."""

    min_ms: float = 0.0
    scale_ms: float = 0.0
    max_ms: float | None = None

    def __post_init__(self) -> None:
        if self.min_ms < 0 or self.scale_ms < 0:
            raise ValueError("jitter parameters must be non-negative")

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        delays = np.full(size, self.min_ms, dtype=np.float64)
        if self.scale_ms > 0:
            delays += rng.exponential(self.scale_ms, size)
        if self.max_ms is not None:
            delays = np.minimum(delays, self.max_ms)
        return delays / 1000.0


@dataclass(frozen=True)
class ClockSpec:
    hz: int
    boot_epoch: float
    skew_ppm: float = 0.0
    variable: VariableComponent = None
    jitter: JitterSpec = JitterSpec()
    seed: int = 0
    randomized: bool = False

    def __post_init__(self) -> None:
        if self.hz < 1:
            raise ValueError("hz must be at least 1")


def _stream(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream])))


def elapsed_seconds(spec: ClockSpec, t: float) -> float:
    """Time shown by the host clock since boot, including skew and corrections."""
    since_boot = t - spec.boot_epoch
    elapsed = since_boot * (1.0 + spec.skew_ppm * 1e-6)
    variable = spec.variable
    if isinstance(variable, Sinusoid):
        elapsed += variable.amplitude_ms / 1000.0 * math.sin(
            2 * math.pi * t / variable.period_s + variable.phase
        )
    elif isinstance(variable, Steps):
        elapsed += sum(jump for at, jump in variable.steps if at <= t) / 1000.0
    elif isinstance(variable, NtpdRamp):
        current = spec.skew_ppm
        for at, new_ppm in variable.changes:
            if t > at:
                elapsed += (new_ppm - current) * 1e-6 * (t - at)
            current = new_ppm
    return elapsed


def tick_counter(spec: ClockSpec, t: float) -> int:
    """Untruncated tick count of the host clock at time t."""
    return int(math.floor(spec.hz * elapsed_seconds(spec, t)))


def simulate_host(
    spec: ClockSpec,
    sample_times: Sequence[float],
    *,
    ip: str = "192.0.2.1",
    family: Family | str = Family.V4,
    jitter: JitterSpec | None = None,
    stream: int = STREAM_PATH4,
) -> TimestampSeries:
    """
    Read the clock at each sample time and deliver the reading over a jittered path.

    Receive times are rounded to microseconds; a reading that would not arrive
    strictly after its predecessor is dropped.
    """
    times = np.asarray(sample_times, dtype=np.float64)
    if np.any(np.diff(times) < 0):
        raise ValueError("sample_times must be ascending")
    path = jitter if jitter is not None else spec.jitter
    delays = path.draw(_stream(spec.seed, stream), len(times))
    if spec.randomized:
        tsvals = _stream(spec.seed, STREAM_CLOCK).integers(
            0, TSVAL_MODULUS, size=len(times), dtype=np.int64
        )
    else:
        tsvals = [tick_counter(spec, t) % TSVAL_MODULUS for t in times]

    samples: list[TimestampSample] = []
    last = -math.inf
    for t, delay, tsval in zip(times, delays, tsvals):
        recv = round(float(t + delay), 6)
        if recv <= last:
            logger.debug("Dropping out-of-order reading at %.6f for %s", recv, ip)
            continue
        samples.append(TimestampSample(recv_time=recv, tsval=int(tsval)))
        last = recv
    return TimestampSeries(ip, Family(family), tuple(samples))


def simulate_sibling(
    spec: ClockSpec,
    path4_jitter: JitterSpec | None,
    path6_jitter: JitterSpec | None,
    sample_times: Sequence[float],
    *,
    sample_times6: Sequence[float] | None = None,
    pair_id: str = "sim-0",
    ip4: str = "192.0.2.1",
    ip6: str = "2001:db8::1",
    fingerprint: OptionsFingerprint | None = None,
    spec6: ClockSpec | None = None,
    fingerprint6: OptionsFingerprint | None = None,
    group: str | None = None,
) -> CandidatePair:
    """
    Both families read the same clock through separate network paths.

    spec6 and fingerprint6 exist for the misbehaving-sibling cases (per-family Hz,
    per-family options); by default both sides are identical.
    """
    fp = fingerprint or canonicalize_options(COMMON_OPTIONS[0])
    series4 = simulate_host(
        spec, sample_times, ip=ip4, family=Family.V4, jitter=path4_jitter,
        stream=STREAM_PATH4,
    )
    series6 = simulate_host(
        spec6 or spec,
        sample_times if sample_times6 is None else sample_times6,
        ip=ip6,
        family=Family.V6,
        jitter=path6_jitter,
        stream=STREAM_PATH6,
    )
    return CandidatePair(
        id=pair_id,
        ip4=ip4,
        ip6=ip6,
        series4=series4,
        series6=series6,
        fp4=fp,
        fp6=fingerprint6 or fp,
        label=Label.SIBLING,
        group=group,
    )


def leap_second(at: float, jump_ms: float = 1000.0) -> Steps:
    """ntpd-style reaction to a leap second: one full-second step."""
    return Steps(((at, jump_ms),))


def leap_smear(start: float, end: float, base_ppm: float = 0.0) -> NtpdRamp:
    """Absorb one second by slowing the clock between start and end."""
    smear_ppm = 1e6 / (end - start)
    return NtpdRamp(((start, base_ppm - smear_ppm), (end, base_ppm)))


def measurement_times(
    start: float, duration: float, interval: float, phase: float = 0.0
) -> np.ndarray:
    count = int(duration // interval)
    return start + phase + interval * np.arange(count, dtype=np.float64)


def host_address(family: Family, index: int) -> str:
    if family is Family.V4:
        return str(ipaddress.IPv4Address(0x0A000000 + index + 1))
    return str(ipaddress.IPv6Address((0x20010DB8 << 96) + index + 1))


def _variable_component(
    rng: np.random.Generator, start: float, duration: float
) -> VariableComponent:
    kind = rng.integers(3)
    if kind == 0:
        return Sinusoid(
            amplitude_ms=float(rng.uniform(5, 40)),
            period_s=float(rng.uniform(2 * 3600, 12 * 3600)),
            phase=float(rng.uniform(0, 2 * math.pi)),
        )
    if kind == 1:
        count = int(rng.integers(1, 4))
        times = np.sort(rng.uniform(start, start + duration, count))
        jumps = rng.choice([-1, 1], count) * rng.uniform(20, 1000, count)
        return Steps(tuple(zip(times.tolist(), jumps.tolist())))
    count = int(rng.integers(2, 5))
    times = np.sort(rng.uniform(start, start + duration, count))
    ppms = rng.uniform(-5, 5, count)
    return NtpdRamp(tuple(zip(times.tolist(), ppms.tolist())))


def generate_population(
    n: int,
    mix: float,
    seed: int,
    *,
    duration: float = 36000.0,
    interval: float = 60.0,
    start_epoch: float = DEFAULT_START_EPOCH,
    max_jitter_ms: float = 10.0,
) -> list[CandidatePair]:
    """
    Labeled siblings with independent boot epochs spread over three years.

    round(n * mix) hosts keep a constant skew (group "constant"); the rest carry
    a variable component on top of a small base skew (group "variable").
    """
    if n < 2:
        raise ValueError("population needs at least 2 hosts")
    if not 0.0 <= mix <= 1.0:
        raise ValueError("mix must lie in [0, 1]")

    rng = _stream(seed, STREAM_CLOCK)
    n_constant = int(round(n * mix))
    kinds = np.array(["constant"] * n_constant + ["variable"] * (n - n_constant))
    kinds = kinds[rng.permutation(n)]
    fingerprints = [canonicalize_options(opts) for opts in COMMON_OPTIONS]

    pairs: list[CandidatePair] = []
    for index, kind in enumerate(kinds):
        host_seed = int(rng.integers(2**62))
        hz = int(rng.choice(TYPICAL_HZ, p=HZ_WEIGHTS))
        boot = float(rng.uniform(start_epoch - THREE_YEARS, start_epoch - 86400.0))
        if kind == "constant":
            skew = float(rng.uniform(-60, 60))
            variable: VariableComponent = None
        else:
            skew = float(rng.uniform(-2, 2))
            variable = _variable_component(rng, start_epoch, duration)

        def path() -> JitterSpec:
            return JitterSpec(
                min_ms=float(rng.uniform(0.5, 3.0)),
                scale_ms=float(rng.uniform(0.5, 2.0)),
                max_ms=max_jitter_ms,
            )

        spec = ClockSpec(
            hz=hz, boot_epoch=boot, skew_ppm=skew, variable=variable, seed=host_seed
        )
        fp = fingerprints[int(rng.choice(len(fingerprints), p=OPTION_WEIGHTS))]
        phase4, phase6 = rng.uniform(0, 5, 2)
        pairs.append(
            simulate_sibling(
                spec,
                path(),
                path(),
                measurement_times(start_epoch, duration, interval, float(phase4)),
                sample_times6=measurement_times(
                    start_epoch, duration, interval, float(phase6)
                ),
                pair_id=f"sim-{index:05d}",
                ip4=host_address(Family.V4, index),
                ip6=host_address(Family.V6, index),
                fingerprint=fp,
                group=str(kind),
            )
        )
    logger.info(
        "Generated %s siblings (%s constant, %s variable) with seed %s",
        n, n_constant, n - n_constant, seed,
    )
    return pairs


def clock_spec_from_mapping(data: Mapping[str, Any]) -> ClockSpec:
    """
    Build a ClockSpec from a declarative mapping, e.g. one YAML host entry:

        hz: 1000
        boot_epoch: 1479000000
        skew_ppm: 12.5
        variable: {sinusoid: {amplitude_ms: 20, period_s: 14400}}
        jitter: {min_ms: 1, scale_ms: 2, max_ms: 10}
        seed: 3
    """
    variable_data = data.get("variable") or {}
    variable: VariableComponent = None
    if "sinusoid" in variable_data:
        variable = Sinusoid(**variable_data["sinusoid"])
    elif "steps" in variable_data:
        variable = Steps(tuple((float(a), float(b)) for a, b in variable_data["steps"]))
    elif "ntpd_ramp" in variable_data:
        variable = NtpdRamp(
            tuple((float(a), float(b)) for a, b in variable_data["ntpd_ramp"])
        )
    return ClockSpec(
        hz=int(data["hz"]),
        boot_epoch=float(data["boot_epoch"]),
        skew_ppm=float(data.get("skew_ppm", 0.0)),
        variable=variable,
        jitter=JitterSpec(**(data.get("jitter") or {})),
        seed=int(data.get("seed", 0)),
        randomized=bool(data.get("randomized", False)),
    )


def with_seed(spec: ClockSpec, seed: int) -> ClockSpec:
    return replace(spec, seed=seed)


def with_hz(spec: ClockSpec, hz: int) -> ClockSpec:
    """Same clock ticking at another frequency, e.g. a per-family timestamp clock."""
    return replace(spec, hz=hz)
