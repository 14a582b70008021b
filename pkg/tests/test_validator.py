from sibling_scanner.features import FeatureStatus, FeatureVector
from sibling_scanner.validator import format_quality_report, summarize_feature_status

COMPUTED = FeatureStatus.COMPUTED
FAILED = FeatureStatus.FAILED
SKIPPED = FeatureStatus.SKIPPED


def _vector(pair_id, **status):
    return FeatureVector(pair_id=pair_id, opts_diff=False, status=status)


def test_summarize_feature_status_counts_per_key():
    vectors = [
        _vector("a", hz4=COMPUTED, delta_tcpraw=COMPUTED),
        _vector("b", hz4=FAILED, delta_tcpraw=SKIPPED),
        _vector("c", hz4=COMPUTED),  # delta_tcpraw missing
    ]

    summary = summarize_feature_status(vectors)

    assert summary["total_pairs"] == 3
    assert summary["features"] == ["delta_tcpraw", "hz4"]
    assert summary["status_counts"]["hz4"] == {"computed": 2, "failed": 1, "skipped": 0}
    assert summary["status_counts"]["delta_tcpraw"] == {
        "computed": 1,
        "failed": 0,
        "skipped": 2,
    }
    assert summary["usable_pairs"] == 1


def test_summarize_feature_status_empty():
    summary = summarize_feature_status([])

    assert summary["total_pairs"] == 0
    assert summary["features"] == []
    assert summary["status_counts"] == {}
    assert summary["usable_pairs"] == 0


def test_format_quality_report_contains_expected_text():
    summary = summarize_feature_status(
        [_vector("a", spline=FAILED), _vector("b", spline=FAILED)]
    )

    report = format_quality_report(summary)

    assert report.splitlines()[0] == "total_pairs: 2"
    assert "usable_pairs: 0" in report
    assert "status_counts:" in report
    assert "  spline: computed=0, failed=2, skipped=0" in report
