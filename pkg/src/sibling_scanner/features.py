"""Per-pair clock features: frequency, raw timestamp delta, offsets, skew, range, splines."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Any, Iterable, Sequence

import numpy as np
from scipy import stats
from scipy.interpolate import LSQUnivariateSpline

from sibling_scanner.models import (
    TSVAL_MODULUS,
    CandidatePair,
    TimestampSeries,
    options_diff,
)

logger = logging.getLogger(__name__)

MIN_R2_HZ = 0.9
MAX_WRAPS = 3
TRIM_FRACTION = 0.025
SPLINE_KNOTS = 13
SPLINE_GRID_POINTS = 1000
RNG_EPSILON = 1e-6


class FeatureError(Exception):
    """Raised when a feature cannot be computed from the given data."""


class TooFewSamples(FeatureError):
    pass


class DegenerateX(FeatureError):
    pass


class NoOverlap(FeatureError):
    pass


class FeatureStatus(str, Enum):
    COMPUTED = "computed"
    FAILED = "failed"
    SKIPPED = "skipped"


@dataclass(frozen=True, eq=False)
class OffsetArray:
    """Clock offsets y (ms) against relative receive time x (s) for one series."""

    x: np.ndarray
    y: np.ndarray
    hz: float
    r2_hz: float
    origin: float = 0.0

    def __len__(self) -> int:
        return len(self.x)

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.x.tolist(), self.y.tolist()))

    def shifted(self, delta_ms: float) -> "OffsetArray":
        return OffsetArray(self.x, self.y + delta_ms, self.hz, self.r2_hz, self.origin)


def nominal_hz(hz: float | None) -> int | None:
    """Round an estimated frequency to the integer used for comparisons."""
    if hz is None or not np.isfinite(hz):
        return None
    return int(round(hz))


def _unwrap(tsvals: Sequence[int]) -> tuple[np.ndarray, int]:
    counter = np.asarray(tsvals, dtype=np.int64)
    wrapped = np.diff(counter) < 0
    corrections = np.concatenate(([0], np.cumsum(wrapped))) * TSVAL_MODULUS
    return counter - counter[0] + corrections, int(wrapped.sum())


def unwrap_and_relativize(series: TimestampSeries) -> tuple[np.ndarray, np.ndarray]:
    """
    Return (x, v): seconds since the first packet and ticks since the first TSval.

    Every decrease of the counter is treated as a 32-bit wrap and corrected by adding
    2**32 cumulatively.
    """
    if len(series) < 2:
        raise TooFewSamples(f"{series.ip}: need at least 2 samples, got {len(series)}")
    recv = np.asarray(series.recv_times, dtype=np.float64)
    v, _ = _unwrap(series.tsvals)
    return recv - recv[0], v


def estimate_hz(x: np.ndarray, v: np.ndarray) -> tuple[float, float]:
    """Least-squares slope of ticks over seconds and its coefficient of determination."""
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if len(x) < 2 or np.ptp(x) == 0:
        raise DegenerateX("all receive times are equal")
    if np.ptp(v) == 0:
        return 0.0, 0.0
    fit = stats.linregress(x, v)
    return float(fit.slope), float(fit.rvalue**2)


def delta_tcpraw(
    series4: TimestampSeries,
    series6: TimestampSeries,
    hz4: float,
    hz6: float,
) -> float:
    """Absolute difference of the two counters' origins in seconds (Eq. 1)."""
    first4, first6 = series4.samples[0], series6.samples[0]
    delta_tcp = first4.tsval / hz4 - first6.tsval / hz6
    delta_rec = first4.recv_time - first6.recv_time
    return abs(delta_tcp - delta_rec)


def offsets(
    x: np.ndarray,
    v: np.ndarray,
    hz: float,
    r2_hz: float = 1.0,
    origin: float = 0.0,
) -> OffsetArray:
    x = np.asarray(x, dtype=np.float64)
    y = (np.asarray(v, dtype=np.float64) / hz - x) * 1000.0
    return OffsetArray(x=x, y=y, hz=float(hz), r2_hz=float(r2_hz), origin=origin)


def _r_squared(x: np.ndarray, y: np.ndarray, slope: float, intercept: float) -> float:
    residual = y - (slope * x + intercept)
    ss_res = float(np.sum(residual**2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return 1.0 - ss_res / ss_tot


def robust_skew(off: OffsetArray) -> tuple[float, float]:
    """Theil-Sen skew (ms/s) of an offset array and the R^2 of that line."""
    if len(off) < 3:
        raise TooFewSamples(f"need at least 3 offset points, got {len(off)}")
    # joint: intercept is median(y - slope * x)
    slope, intercept, _, _ = stats.theilslopes(off.y, off.x, method="joint")
    return float(slope), _r_squared(off.x, off.y, float(slope), float(intercept))


def dynamic_range(off: OffsetArray) -> float:
    """Spread of the offsets after pruning 2.5% of the points from each tail."""
    n = len(off)
    if n < 2:
        raise TooFewSamples(f"need at least 2 offset points, got {n}")
    trim = int(np.floor(TRIM_FRACTION * n))
    kept = np.sort(off.y)[trim : n - trim]
    return float(kept[-1] - kept[0])


def _fit_spline(u: np.ndarray, y: np.ndarray, span: float) -> LSQUnivariateSpline:
    interior = np.linspace(0.0, span, SPLINE_KNOTS)[1:-1]
    try:
        return LSQUnivariateSpline(u, y, interior, k=3, bbox=[0.0, span])
    except ValueError as exc:
        raise FeatureError(f"spline fit failed: {exc}") from exc


def spline_curves(
    off4: OffsetArray,
    off6: OffsetArray,
    grid_points: int = SPLINE_GRID_POINTS,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Fit least-squares cubic splines with 13 equidistant knots over the common time
    range of both arrays and sample them on a dense grid.

    Returns (absolute grid times, spline4 samples, spline6 samples).
    """
    abs4 = off4.x + off4.origin
    abs6 = off6.x + off6.origin
    lo = max(abs4[0], abs6[0])
    hi = min(abs4[-1], abs6[-1])
    if hi <= lo:
        raise NoOverlap("offset arrays do not overlap in time")

    span = hi - lo
    samples = []
    for abs_x, off in ((abs4, off4), (abs6, off6)):
        mask = (abs_x >= lo) & (abs_x <= hi)
        if int(mask.sum()) < SPLINE_KNOTS:
            raise TooFewSamples(
                f"need {SPLINE_KNOTS} points in the common range, got {int(mask.sum())}"
            )
        spline = _fit_spline(abs_x[mask] - lo, off.y[mask], span)
        samples.append(spline)

    grid = np.linspace(0.0, span, grid_points)
    return grid + lo, samples[0](grid), samples[1](grid)


def spline_pair(
    off4: OffsetArray,
    off6: OffsetArray,
    grid_points: int = SPLINE_GRID_POINTS,
) -> tuple[float, float | None]:
    """
    Minimal mean absolute gap between the two offset splines over a constant shift.

    The L1-optimal shift is the median of the pointwise differences. The scaled
    value divides by rng_diff and is None when rng_diff is below RNG_EPSILON.
    """
    _, s4, s6 = spline_curves(off4, off6, grid_points)
    diff = s4 - s6
    spl_diff = float(np.mean(np.abs(diff - np.median(diff))))
    rng_diff = abs(dynamic_range(off4) - dynamic_range(off6))
    if rng_diff <= RNG_EPSILON:
        return spl_diff, None
    return spl_diff, spl_diff / rng_diff


@dataclass(frozen=True, eq=False)
class SideFeatures:
    """Per-series intermediates, computed once and shared by every pair using it."""

    ip: str
    n: int
    wraps: int = 0
    erratic: bool = False
    hz: float | None = None
    r2_hz: float | None = None
    hz_status: FeatureStatus = FeatureStatus.SKIPPED
    offsets: OffsetArray | None = None
    alpha: float | None = None
    r2_skew: float | None = None
    skew_status: FeatureStatus = FeatureStatus.SKIPPED
    rng: float | None = None
    range_status: FeatureStatus = FeatureStatus.SKIPPED

    @property
    def hz_ok(self) -> bool:
        return self.hz_status is FeatureStatus.COMPUTED


def compute_side(series: TimestampSeries) -> SideFeatures:
    n = len(series)
    if n < 2:
        return SideFeatures(ip=series.ip, n=n, hz_status=FeatureStatus.FAILED)

    recv = np.asarray(series.recv_times, dtype=np.float64)
    x = recv - recv[0]
    v, wraps = _unwrap(series.tsvals)
    erratic = wraps > MAX_WRAPS
    if erratic:
        # too many wraps for a real clock; fit the uncorrected counter instead
        fit_v = np.asarray(series.tsvals, dtype=np.int64) - series.tsvals[0]
    else:
        fit_v = v

    try:
        hz, r2_hz = estimate_hz(x, fit_v)
    except DegenerateX:
        return SideFeatures(
            ip=series.ip, n=n, wraps=wraps, hz_status=FeatureStatus.FAILED
        )

    hz_failed = erratic or r2_hz < MIN_R2_HZ
    base = dict(ip=series.ip, n=n, wraps=wraps, erratic=erratic, hz=hz, r2_hz=r2_hz)
    if hz_failed:
        return SideFeatures(**base, hz_status=FeatureStatus.FAILED)

    rounded = nominal_hz(hz)
    if rounded is None or rounded < 1:
        return SideFeatures(**base, hz_status=FeatureStatus.COMPUTED)

    off = offsets(x, v, rounded, r2_hz=r2_hz, origin=float(recv[0]))
    try:
        alpha, r2_skew = robust_skew(off)
        skew_status = FeatureStatus.COMPUTED
    except FeatureError:
        alpha, r2_skew, skew_status = None, None, FeatureStatus.FAILED
    return SideFeatures(
        **base,
        hz_status=FeatureStatus.COMPUTED,
        offsets=off,
        alpha=alpha,
        r2_skew=r2_skew,
        skew_status=skew_status,
        rng=dynamic_range(off),
        range_status=FeatureStatus.COMPUTED,
    )


@dataclass(frozen=True)
class FeatureVector:
    pair_id: str
    opts_diff: bool
    hz4: float | None = None
    hz6: float | None = None
    hz_diff: int | None = None
    r2_hz4: float | None = None
    r2_hz6: float | None = None
    delta_tcpraw: float | None = None
    alpha4: float | None = None
    alpha6: float | None = None
    alpha_diff: float | None = None
    r2_skew4: float | None = None
    r2_skew6: float | None = None
    r2_skewdiff: float | None = None
    rng4: float | None = None
    rng6: float | None = None
    rng_diff: float | None = None
    rng_avg: float | None = None
    rng_diff_rel: float | None = None
    spl_diff: float | None = None
    spl_diff_scaled: float | None = None
    status: dict[str, FeatureStatus] = field(default_factory=dict, hash=False)

    def computed(self, *names: str) -> bool:
        return all(self.status.get(n) is FeatureStatus.COMPUTED for n in names)


def _pair_vector(
    pair: CandidatePair, side4: SideFeatures, side6: SideFeatures
) -> FeatureVector:
    status: dict[str, FeatureStatus] = {"options": FeatureStatus.COMPUTED}
    values: dict[str, Any] = {
        "hz4": side4.hz,
        "hz6": side6.hz,
        "r2_hz4": side4.r2_hz,
        "r2_hz6": side6.r2_hz,
        "alpha4": side4.alpha,
        "alpha6": side6.alpha,
        "r2_skew4": side4.r2_skew,
        "r2_skew6": side6.r2_skew,
        "rng4": side4.rng,
        "rng6": side6.rng,
    }
    status["hz4"] = side4.hz_status
    status["hz6"] = side6.hz_status
    status["skew4"] = side4.skew_status
    status["skew6"] = side6.skew_status
    status["range4"] = side4.range_status
    status["range6"] = side6.range_status

    hz4, hz6 = nominal_hz(side4.hz), nominal_hz(side6.hz)
    if side4.hz_ok and side6.hz_ok:
        values["hz_diff"] = abs(hz4 - hz6)
    # pair-level features need one shared, usable frequency
    comparable = (
        side4.hz_ok and side6.hz_ok and hz4 == hz6 and hz4 is not None and hz4 >= 1
    )

    pair_keys = ("delta_tcpraw", "skew_diff", "range_diff", "spline")
    if not comparable:
        status.update({key: FeatureStatus.SKIPPED for key in pair_keys})
        return FeatureVector(
            pair_id=pair.id, opts_diff=options_diff(pair.fp4, pair.fp6), status=status,
            **values,
        )

    values["delta_tcpraw"] = delta_tcpraw(pair.series4, pair.series6, hz4, hz6)
    status["delta_tcpraw"] = FeatureStatus.COMPUTED

    if side4.alpha is not None and side6.alpha is not None:
        values["alpha_diff"] = side4.alpha - side6.alpha
        values["r2_skewdiff"] = side4.r2_skew - side6.r2_skew
        status["skew_diff"] = FeatureStatus.COMPUTED
    else:
        status["skew_diff"] = FeatureStatus.SKIPPED

    rng_diff = abs(side4.rng - side6.rng)
    rng_avg = (side4.rng + side6.rng) / 2
    values["rng_diff"] = rng_diff
    values["rng_avg"] = rng_avg
    values["rng_diff_rel"] = rng_diff / rng_avg if rng_avg > RNG_EPSILON else None
    status["range_diff"] = FeatureStatus.COMPUTED

    try:
        spl_diff, spl_scaled = spline_pair(side4.offsets, side6.offsets)
        values["spl_diff"] = spl_diff
        values["spl_diff_scaled"] = spl_scaled
        status["spline"] = FeatureStatus.COMPUTED
    except FeatureError as exc:
        logger.debug("Spline features failed for %s: %s", pair.id, exc)
        status["spline"] = FeatureStatus.FAILED

    return FeatureVector(
        pair_id=pair.id, opts_diff=options_diff(pair.fp4, pair.fp6), status=status,
        **values,
    )


class FeatureExtractor:
    """Extracts feature vectors for many pairs, computing each series only once."""

    def __init__(self, workers: int = 1) -> None:
        self.workers = max(1, int(workers))
        self._sides: dict[int, tuple[TimestampSeries, SideFeatures]] = {}

    def side(self, series: TimestampSeries) -> SideFeatures:
        cached = self._sides.get(id(series))
        if cached is not None and cached[0] is series:
            return cached[1]
        result = compute_side(series)
        self._sides[id(series)] = (series, result)
        return result

    def _prefetch(self, pairs: Sequence[CandidatePair]) -> None:
        pending: dict[int, TimestampSeries] = {}
        for pair in pairs:
            for series in (pair.series4, pair.series6):
                if id(series) not in self._sides:
                    pending[id(series)] = series
        if not pending:
            return
        ordered = list(pending.values())
        with ProcessPoolExecutor(max_workers=self.workers) as pool:
            results = list(pool.map(compute_side, ordered, chunksize=16))
        for series, result in zip(ordered, results):
            self._sides[id(series)] = (series, result)

    def extract(self, pair: CandidatePair) -> FeatureVector:
        return _pair_vector(pair, self.side(pair.series4), self.side(pair.series6))

    def extract_all(self, pairs: Iterable[CandidatePair]) -> list[FeatureVector]:
        pairs = list(pairs)
        if self.workers > 1:
            self._prefetch(pairs)
        vectors = [self.extract(pair) for pair in pairs]
        logger.info("Extracted features for %s pairs", len(vectors))
        return vectors


def extract_features(
    pair: CandidatePair, extractor: FeatureExtractor | None = None
) -> FeatureVector:
    """Compute every feature of a pair; data problems end up in the status flags."""
    return (extractor or FeatureExtractor()).extract(pair)


def feature_row(fv: FeatureVector) -> dict[str, Any]:
    """Flatten a feature vector into a CSV-friendly mapping."""
    row: dict[str, Any] = {}
    for f in fields(fv):
        if f.name == "status":
            continue
        value = getattr(fv, f.name)
        row[f.name] = "" if value is None else value
    for key, value in fv.status.items():
        row[f"status_{key}"] = value.value
    return row
