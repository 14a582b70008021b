"""Writers for feature dumps, reports and offset plots; every file is replaced atomically."""

from __future__ import annotations

import contextlib
import csv
import json
import os
import tempfile
from collections import OrderedDict
from pathlib import Path
from typing import IO, Any, Iterable, Iterator, Mapping


@contextlib.contextmanager
def atomic_output(
    path: str | Path, newline: str | None = None
) -> Iterator[IO[str]]:
    """Open a temp file next to path and rename it over path on success."""
    output_path = Path(path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(
        prefix=f".{output_path.name}.", dir=output_path.parent
    )
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline=newline) as f:
            yield f
        os.replace(tmp_name, output_path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp_name)
        raise


def export_to_csv(records: Iterable[Mapping[str, Any]], path: str | Path) -> None:
    """Export records to CSV using a stable union of keys across all records."""
    iterator = iter(records)
    try:
        first = next(iterator)
    except StopIteration:
        with atomic_output(path, newline=""):
            pass
        return

    ordered_keys: "OrderedDict[str, None]" = OrderedDict()
    for key in first.keys():
        ordered_keys[key] = None

    buffered_records = [first]
    for record in iterator:
        buffered_records.append(record)
        for key in record.keys():
            if key not in ordered_keys:
                ordered_keys[key] = None

    headers = list(ordered_keys.keys())
    with atomic_output(path, newline="") as f:
        writer = csv.DictWriter(f, fieldnames=headers)
        writer.writeheader()
        for record in buffered_records:
            writer.writerow({key: record.get(key, "") for key in headers})


def export_to_json(data: Any, path: str | Path) -> None:
    with atomic_output(path) as f:
        json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")


def export_to_jsonl(records: Iterable[Mapping[str, Any]], path: str | Path) -> None:
    with atomic_output(path) as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def export_text(text: str, path: str | Path) -> None:
    with atomic_output(path) as f:
        f.write(text if text.endswith("\n") else text + "\n")


def plot_offsets(
    pair_id: str,
    series: Mapping[str, tuple[Any, Any]],
    curves: tuple[Any, Any, Any] | None,
    path: str | Path,
) -> None:
    """
    Scatter both offset arrays (absolute time vs. ms) and overlay the fitted splines.

    series maps a legend name ("IPv4", "IPv6") to (times, offsets); curves is the
    (grid, spline4, spline6) triple from features.spline_curves, or None.
    """
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:  # pragma: no cover - optional dependency
        raise ImportError(
            "matplotlib is required for plot_offsets; please install it via "
            "'pip install .[plots]'"
        ) from exc

    output_path = Path(path)
    output_path.parent.mkdir(parents=True, exist_ok=True)

    fig, ax = plt.subplots(figsize=(8, 4))
    for name, (times, offsets) in series.items():
        ax.scatter(times, offsets, s=4, label=name)
    if curves is not None:
        grid, spline4, spline6 = curves
        ax.plot(grid, spline4, linewidth=1.5, label="IPv4 spline")
        ax.plot(grid, spline6, linewidth=1.5, label="IPv6 spline")
    ax.set_title(pair_id)
    ax.set_xlabel("receive time [s]")
    ax.set_ylabel("offset [ms]")
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(output_path, dpi=120)
    plt.close(fig)
