"""Data quality summary over extracted feature vectors."""

from __future__ import annotations

from collections.abc import Iterable, Mapping
from typing import Any, Dict, List

from sibling_scanner.features import FeatureStatus, FeatureVector


def summarize_feature_status(vectors: Iterable[FeatureVector]) -> Dict[str, Any]:
    """
    Count computed / failed / skipped per feature status key.

    Returns a mapping with total_pairs, features, status_counts and
    usable_pairs (pairs whose delta_tcpraw was computed).
    """
    vectors_list: List[FeatureVector] = list(vectors)
    total_pairs = len(vectors_list)

    if total_pairs == 0:
        return {
            "total_pairs": 0,
            "features": [],
            "status_counts": {},
            "usable_pairs": 0,
        }

    keys: set[str] = set()
    for fv in vectors_list:
        keys.update(fv.status.keys())
    features_sorted = sorted(keys)

    status_counts: Dict[str, Dict[str, int]] = {
        key: {status.value: 0 for status in FeatureStatus} for key in features_sorted
    }
    for fv in vectors_list:
        for key in features_sorted:
            status = fv.status.get(key, FeatureStatus.SKIPPED)
            status_counts[key][status.value] += 1

    return {
        "total_pairs": total_pairs,
        "features": features_sorted,
        "status_counts": status_counts,
        "usable_pairs": sum(1 for fv in vectors_list if fv.computed("delta_tcpraw")),
    }


def format_quality_report(summary: Mapping[str, Any]) -> str:
    """
    Render a human-readable quality report from the summarize_feature_status summary.
    """
    lines = [
        f"total_pairs: {summary.get('total_pairs', 0)}",
        f"usable_pairs: {summary.get('usable_pairs', 0)}",
        "status_counts:",
    ]

    status_counts = summary.get("status_counts", {}) or {}
    for feature, counts in status_counts.items():
        rendered = ", ".join(f"{name}={count}" for name, count in counts.items())
        lines.append(f"  {feature}: {rendered}")

    return "\n".join(lines)
