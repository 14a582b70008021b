"""Domain types shared across the scanner, plus TCP options fingerprinting."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Sequence

TSVAL_MODULUS = 2**32

# TCP option kinds that get a name in fingerprints; everything else is "UNK".
OPTION_NAMES: dict[int, str] = {
    0: "EOL",
    1: "NOP",
    2: "MSS",
    3: "WS",
    4: "SACK",
    8: "TS",
    30: "MPTCP",
    34: "TFO",
}

# Option names as reported by scapy's TCP layer.
_SCAPY_KINDS: dict[str, int] = {
    "EOL": 0,
    "NOP": 1,
    "MSS": 2,
    "WScale": 3,
    "SAckOK": 4,
    "SAck": 5,
    "Timestamp": 8,
    "MPTCP": 30,
    "TFO": 34,
}


class Family(str, Enum):
    V4 = "4"
    V6 = "6"


class Label(str, Enum):
    SIBLING = "sibling"
    NONSIBLING = "nonsibling"


class Verdict(str, Enum):
    SIBLING = "sibling"
    NONSIBLING = "nonsibling"
    UNKNOWN = "unknown"
    ERROR = "error"


class Reason(str, Enum):
    OPTIONS_DIFFER = "OptionsDiffer"
    HZ_FIT_FAILED = "HzFitFailed"
    HZ_DIFFER = "HzDiffer"
    HZ_TOO_SMALL = "HzTooSmall"
    RAW_TS_DELTA = "RawTsDelta"
    SKEW_SIGN = "SkewSign"
    LINEAR_SKEW = "LinearSkew"
    SKEW_FIT_DIFFER = "SkewFitDiffer"
    RANGE_DIFFER = "RangeDiffer"
    SPLINE_AREA = "SplineArea"
    GUARD_INTERVAL = "GuardInterval"
    TIMESTAMP_BEHAVIOR = "TimestampBehavior"
    SKEW_ANGLE = "SkewAngle"
    MISSING_FEATURE = "MissingFeature"


@dataclass(frozen=True)
class TimestampSample:
    recv_time: float
    tsval: int

    def __post_init__(self) -> None:
        if not 0 <= self.tsval < TSVAL_MODULUS:
            raise ValueError(f"tsval out of 32-bit range: {self.tsval}")
        if not math.isfinite(self.recv_time) or self.recv_time <= 0:
            raise ValueError(f"recv_time must be positive: {self.recv_time}")


@dataclass(frozen=True)
class TimestampSeries:
    """Observations of one address, sorted strictly ascending by receive time."""

    ip: str
    family: Family
    samples: tuple[TimestampSample, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "samples", tuple(self.samples))
        for prev, cur in zip(self.samples, self.samples[1:]):
            if cur.recv_time <= prev.recv_time:
                raise ValueError(
                    f"samples for {self.ip} are not strictly ascending "
                    f"({prev.recv_time} -> {cur.recv_time})"
                )

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def recv_times(self) -> list[float]:
        return [s.recv_time for s in self.samples]

    @property
    def tsvals(self) -> list[int]:
        return [s.tsval for s in self.samples]

    @classmethod
    def from_unsorted(
        cls, ip: str, family: Family | str, samples: Iterable[TimestampSample]
    ) -> "TimestampSeries":
        return cls(ip, Family(family), tuple(sorted(samples, key=lambda s: s.recv_time)))


@dataclass(frozen=True)
class OptionsFingerprint:
    canonical: str

    def __str__(self) -> str:
        return self.canonical


@dataclass(frozen=True)
class CandidatePair:
    id: str
    ip4: str
    ip6: str
    series4: TimestampSeries
    series6: TimestampSeries
    fp4: OptionsFingerprint
    fp6: OptionsFingerprint
    label: Label | None = None
    group: str | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.series4.family is not Family.V4:
            raise ValueError(f"series4 of {self.id} is not an IPv4 series")
        if self.series6.family is not Family.V6:
            raise ValueError(f"series6 of {self.id} is not an IPv6 series")


@dataclass(frozen=True)
class Decision:
    verdict: Verdict
    reason: Reason

    @property
    def is_sibling(self) -> bool:
        return self.verdict is Verdict.SIBLING


def canonicalize_options(
    raw_options: Sequence[tuple[int, bytes | None]],
) -> OptionsFingerprint:
    """
    Build the canonical fingerprint of a handshake's TCP options.

    Option names keep wire order and NOP padding. MSS is recorded by presence only;
    the window-scale shift count is appended as two decimal digits.
    """
    parts: list[str] = []
    for kind, value in raw_options:
        name = OPTION_NAMES.get(kind, "UNK")
        if name == "WS":
            shift = value[0] if value else 0
            name = f"WS{shift:02d}"
        parts.append(name)
    return OptionsFingerprint("-".join(parts))


def options_diff(fp4: OptionsFingerprint, fp6: OptionsFingerprint) -> bool:
    return fp4.canonical != fp6.canonical


def options_from_scapy(options: Iterable[tuple[Any, Any]]) -> list[tuple[int, bytes]]:
    """Translate scapy TCP option tuples into (kind, value-bytes) pairs."""
    raw: list[tuple[int, bytes]] = []
    for name, value in options:
        kind = name if isinstance(name, int) else _SCAPY_KINDS.get(name, 255)
        if kind == 3:
            payload = bytes([int(value) & 0xFF])
        elif kind == 2:
            payload = struct.pack("!H", int(value) & 0xFFFF)
        elif kind == 8 and isinstance(value, tuple):
            payload = struct.pack("!II", *(int(v) for v in value))
        elif isinstance(value, (bytes, bytearray)):
            payload = bytes(value)
        else:
            payload = b""
        raw.append((kind, payload))
    return raw
