"""Sibling decision models: first-order filters, hand-tuned rules, ML1 stump, skew-angle baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

from sibling_scanner.features import MIN_R2_HZ, FeatureVector, nominal_hz
from sibling_scanner.models import Decision, Reason, Verdict


class MissingFeature(Exception):
    """Raised when a decision needs a feature that was not computed."""

    def __init__(self, name: str) -> None:
        super().__init__(f"feature '{name}' is not available")
        self.name = name


@dataclass(frozen=True)
class HtThresholds:
    z1: float = 1.0
    z2: float = 0.81
    z3: float = 0.2
    z4: float = 0.00005
    z5: float = 1.5
    z6: float = 0.47
    z7: float = 14.0
    y1: float = 2.3
    y2: float = 0.6
    y3: float = 4.0

    def __post_init__(self) -> None:
        if not self.y2 < self.y3:
            raise ValueError("y2 must be smaller than y3")
        if not 0 < self.z2 < 1:
            raise ValueError("z2 must lie in (0, 1)")


@dataclass(frozen=True)
class Ml1Model:
    tcpraw_threshold: float = 0.2557

    def __post_init__(self) -> None:
        if self.tcpraw_threshold <= 0:
            raise ValueError("tcpraw_threshold must be positive")


@dataclass(frozen=True)
class BeverlyParams:
    angle_tolerance: float = 0.01  # degrees
    min_r2_hz: float = MIN_R2_HZ


PASS = None


def _sibling(reason: Reason) -> Decision:
    return Decision(Verdict.SIBLING, reason)


def _nonsibling(reason: Reason) -> Decision:
    return Decision(Verdict.NONSIBLING, reason)


def _require(fv: FeatureVector, *names: str) -> None:
    for name in names:
        if getattr(fv, name) is None:
            raise MissingFeature(name)


def first_order_filter(fv: FeatureVector) -> Decision | None:
    """Cheap falsifying checks shared by all models; None means the pair passes."""
    if fv.opts_diff:
        return _nonsibling(Reason.OPTIONS_DIFFER)
    if not fv.computed("hz4", "hz6"):
        return _nonsibling(Reason.HZ_FIT_FAILED)
    if fv.r2_hz4 < MIN_R2_HZ or fv.r2_hz6 < MIN_R2_HZ:
        return _nonsibling(Reason.HZ_FIT_FAILED)
    hz4, hz6 = nominal_hz(fv.hz4), nominal_hz(fv.hz6)
    if hz4 != hz6:
        return _nonsibling(Reason.HZ_DIFFER)
    if hz4 < 1:
        return _nonsibling(Reason.HZ_TOO_SMALL)
    return PASS


def _ht_rules(fv: FeatureVector, th: HtThresholds) -> Decision:
    _require(fv, "delta_tcpraw")
    if fv.delta_tcpraw > th.z1:
        return _nonsibling(Reason.RAW_TS_DELTA)

    # linear testing
    _require(fv, "r2_skew4", "r2_skew6", "alpha4", "alpha6")
    fit4 = fv.r2_skew4 >= th.z2
    fit6 = fv.r2_skew6 >= th.z2
    if fit4 and fit6:
        if math.copysign(1, fv.alpha4) != math.copysign(1, fv.alpha6):
            return _nonsibling(Reason.SKEW_SIGN)
        _require(fv, "alpha_diff")
        if abs(fv.alpha_diff) <= th.z4:
            return _sibling(Reason.LINEAR_SKEW)
    elif fit4 != fit6:
        _require(fv, "r2_skewdiff")
        if abs(fv.r2_skewdiff) >= th.z3:
            return _nonsibling(Reason.SKEW_FIT_DIFFER)

    # non-linear testing
    _require(fv, "rng4", "rng6")
    if fv.rng4 <= th.z5 and fv.rng6 <= th.z5:
        return Decision(Verdict.UNKNOWN, Reason.GUARD_INTERVAL)
    if (fv.rng4 >= th.z5) != (fv.rng6 >= th.z5):
        _require(fv, "rng_diff")
        if fv.rng_diff >= th.z6:
            return _nonsibling(Reason.RANGE_DIFFER)
    _require(fv, "spl_diff")
    if fv.rng4 >= th.z7 and fv.rng6 >= th.z7:
        if fv.spl_diff <= th.y1:
            return _sibling(Reason.SPLINE_AREA)
        return _nonsibling(Reason.SPLINE_AREA)
    if fv.spl_diff <= th.y2:
        return _sibling(Reason.SPLINE_AREA)
    if fv.spl_diff > th.y3:
        return _nonsibling(Reason.SPLINE_AREA)
    return Decision(Verdict.UNKNOWN, Reason.GUARD_INTERVAL)


def _guarded(rules: Callable[[], Decision]) -> Decision:
    try:
        return rules()
    except MissingFeature:
        return Decision(Verdict.ERROR, Reason.MISSING_FEATURE)


def classify_ht(fv: FeatureVector, th: HtThresholds | None = None) -> Decision:
    """Hand-tuned decision rules; the first-order filter is the first step."""
    th = th or HtThresholds()
    filtered = first_order_filter(fv)
    if filtered is not None:
        return filtered
    return _guarded(lambda: _ht_rules(fv, th))


def classify_ml1(fv: FeatureVector, m: Ml1Model | None = None) -> Decision:
    """Single threshold on the raw timestamp delta, after the first-order filter."""
    m = m or Ml1Model()
    filtered = first_order_filter(fv)
    if filtered is not None:
        return filtered
    if fv.delta_tcpraw is None:
        return Decision(Verdict.ERROR, Reason.MISSING_FEATURE)
    if fv.delta_tcpraw > m.tcpraw_threshold:
        return _nonsibling(Reason.RAW_TS_DELTA)
    return _sibling(Reason.RAW_TS_DELTA)


def skew_angle(alpha: float) -> float:
    """Angle in degrees of a constant skew line in the (s, ms) offset plane."""
    return math.degrees(math.atan(alpha))


def classify_beverly(fv: FeatureVector, params: BeverlyParams | None = None) -> Decision:
    """
    Constant-skew baseline: options check, timestamp behaviour check via the
    frequency fit, then comparison of both skew angles within a fixed tolerance.
    """
    params = params or BeverlyParams()
    if fv.opts_diff:
        return _nonsibling(Reason.OPTIONS_DIFFER)
    for r2 in (fv.r2_hz4, fv.r2_hz6):
        if r2 is None or r2 < params.min_r2_hz:
            return _nonsibling(Reason.TIMESTAMP_BEHAVIOR)
    if fv.alpha4 is None or fv.alpha6 is None:
        return Decision(Verdict.ERROR, Reason.MISSING_FEATURE)
    gap = abs(skew_angle(fv.alpha4) - skew_angle(fv.alpha6))
    if gap <= params.angle_tolerance:
        return _sibling(Reason.SKEW_ANGLE)
    return _nonsibling(Reason.SKEW_ANGLE)


CLASSIFIER_NAMES = ("ht", "ml1", "beverly")


@dataclass(frozen=True)
class ClassifierSuite:
    """Parameters of all three models, as loaded from settings/overrides."""

    ht: HtThresholds = HtThresholds()
    ml1: Ml1Model = Ml1Model()
    beverly: BeverlyParams = BeverlyParams()

    def classify(self, name: str, fv: FeatureVector) -> Decision:
        if name == "ht":
            return classify_ht(fv, self.ht)
        if name == "ml1":
            return classify_ml1(fv, self.ml1)
        if name == "beverly":
            return classify_beverly(fv, self.beverly)
        raise ValueError(f"Unknown classifier '{name}'")

    def classify_all(self, fv: FeatureVector) -> dict[str, Decision]:
        return {name: self.classify(name, fv) for name in CLASSIFIER_NAMES}
