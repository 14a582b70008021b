"""
File formats for measurement batches.

traces.jsonl  {"id": "...", "family": "4", "ip": "...", "tsval": 1, "recv_time": 1.000000}
options.jsonl {"id": "...", "family": "6", "fingerprint": "MSS-SACK-TS-NOP-WS07"}
labels.csv    ip4,ip6,label,group
targets.csv   id,ip4,ip6
"""

from __future__ import annotations

import csv
import ipaddress
import json
import logging
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

from sibling_scanner.exporter import atomic_output
from sibling_scanner.models import (
    CandidatePair,
    Family,
    Label,
    OptionsFingerprint,
    TimestampSample,
    TimestampSeries,
)

logger = logging.getLogger(__name__)

LABEL_FIELDS = ["ip4", "ip6", "label", "group"]
TARGET_FIELDS = ["id", "ip4", "ip6"]


class IngestError(Exception):
    """Base class for batch file problems."""


class MalformedRecord(IngestError):
    def __init__(self, path: str | Path, line: int, detail: str) -> None:
        super().__init__(f"{path}:{line}: malformed record ({detail})")
        self.path = str(path)
        self.line = line


class DuplicateLabel(IngestError):
    def __init__(self, ip4: str, ip6: str) -> None:
        super().__init__(f"duplicate label for ({ip4}, {ip6})")


class MissingSeries(IngestError):
    def __init__(self, candidate_id: str, family: str) -> None:
        super().__init__(f"candidate {candidate_id} has no IPv{family} series")
        self.candidate_id = candidate_id


def _jsonl(path: Path) -> Iterator[tuple[int, dict[str, Any]]]:
    with path.open("r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(path, number, exc.msg) from exc
            if not isinstance(record, dict):
                raise MalformedRecord(path, number, "not an object")
            yield number, record


def trace_line(candidate_id: str, family: Family, sample: TimestampSample, ip: str) -> str:
    """One traces.jsonl line; recv_time keeps exactly six fractional digits."""
    head = json.dumps(
        {"id": candidate_id, "family": family.value, "ip": ip, "tsval": sample.tsval}
    )
    return f'{head[:-1]}, "recv_time": {sample.recv_time:.6f}}}'


def options_line(candidate_id: str, family: Family, fp: OptionsFingerprint) -> str:
    return json.dumps(
        {"id": candidate_id, "family": family.value, "fingerprint": fp.canonical}
    )


def _read_traces(
    path: Path,
) -> dict[tuple[str, Family], tuple[str, list[TimestampSample]]]:
    series: dict[tuple[str, Family], tuple[str, list[TimestampSample]]] = {}
    seen: dict[tuple[str, Family], set[float]] = {}
    for number, record in _jsonl(path):
        try:
            key = (str(record["id"]), Family(str(record["family"])))
            ip = str(record["ip"])
            tsval = record["tsval"]
            if isinstance(tsval, bool) or not isinstance(tsval, int):
                raise ValueError(f"tsval must be an integer: {tsval!r}")
            sample = TimestampSample(recv_time=float(record["recv_time"]), tsval=tsval)
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedRecord(path, number, str(exc)) from exc
        entry = series.setdefault(key, (ip, []))
        if entry[0] != ip:
            raise MalformedRecord(path, number, f"ip changed within {key[0]}")
        times = seen.setdefault(key, set())
        if sample.recv_time in times:
            raise MalformedRecord(
                path, number, f"duplicate recv_time for {key[0]}/IPv{key[1].value}"
            )
        times.add(sample.recv_time)
        entry[1].append(sample)
    return series


def _read_options(path: Path) -> dict[tuple[str, Family], OptionsFingerprint]:
    options: dict[tuple[str, Family], OptionsFingerprint] = {}
    for number, record in _jsonl(path):
        try:
            key = (str(record["id"]), Family(str(record["family"])))
            options[key] = OptionsFingerprint(str(record["fingerprint"]))
        except (KeyError, ValueError) as exc:
            raise MalformedRecord(path, number, str(exc)) from exc
    return options


def load_labels(path: str | Path) -> dict[tuple[str, str], tuple[Label, str | None]]:
    labels_path = Path(path)
    labels: dict[tuple[str, str], tuple[Label, str | None]] = {}
    with labels_path.open("r", newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        for number, row in enumerate(reader, start=2):
            try:
                key = (row["ip4"].strip(), row["ip6"].strip())
                label = Label(row["label"].strip().lower())
            except (KeyError, AttributeError, ValueError) as exc:
                raise MalformedRecord(labels_path, number, str(exc)) from exc
            if key in labels:
                raise DuplicateLabel(*key)
            group = (row.get("group") or "").strip() or None
            labels[key] = (label, group)
    return labels


def load_batch(
    trace_path: str | Path,
    options_path: str | Path,
    labels_path: str | Path | None = None,
    strict: bool = False,
) -> list[CandidatePair]:
    """
    Assemble candidate pairs from trace, options and (optional) label files.

    Candidates missing a family's series or fingerprint are logged and skipped,
    or raise MissingSeries when strict is set.
    """
    traces = _read_traces(Path(trace_path))
    options = _read_options(Path(options_path))
    labels = load_labels(labels_path) if labels_path else {}

    candidate_ids = sorted({cid for cid, _ in traces} | {cid for cid, _ in options})
    pairs: list[CandidatePair] = []
    for cid in candidate_ids:
        missing = [
            fam.value
            for fam in (Family.V4, Family.V6)
            if (cid, fam) not in traces or (cid, fam) not in options
        ]
        if missing:
            if strict:
                raise MissingSeries(cid, missing[0])
            logger.warning(
                "Skipping candidate %s: no series/fingerprint for IPv%s",
                cid, "/IPv".join(missing),
            )
            continue
        ip4, samples4 = traces[(cid, Family.V4)]
        ip6, samples6 = traces[(cid, Family.V6)]
        label, group = labels.get((ip4, ip6), (None, None))
        pairs.append(
            CandidatePair(
                id=cid,
                ip4=ip4,
                ip6=ip6,
                series4=TimestampSeries.from_unsorted(ip4, Family.V4, samples4),
                series6=TimestampSeries.from_unsorted(ip6, Family.V6, samples6),
                fp4=options[(cid, Family.V4)],
                fp6=options[(cid, Family.V6)],
                label=label,
                group=group,
            )
        )
    logger.info("Loaded %s candidate pairs from %s", len(pairs), trace_path)
    return pairs


def save_batch(
    pairs: Sequence[CandidatePair],
    trace_path: str | Path,
    options_path: str | Path,
    labels_path: str | Path | None = None,
) -> None:
    """Write pairs in the format read by load_batch; each file is replaced atomically."""
    with atomic_output(trace_path) as f:
        for pair in pairs:
            for family, series in ((Family.V4, pair.series4), (Family.V6, pair.series6)):
                for sample in series.samples:
                    f.write(trace_line(pair.id, family, sample, series.ip) + "\n")

    with atomic_output(options_path) as f:
        for pair in pairs:
            f.write(options_line(pair.id, Family.V4, pair.fp4) + "\n")
            f.write(options_line(pair.id, Family.V6, pair.fp6) + "\n")

    if labels_path is None:
        return
    with atomic_output(labels_path, newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LABEL_FIELDS)
        writer.writeheader()
        for pair in pairs:
            if pair.label is None:
                continue
            writer.writerow(
                {
                    "ip4": pair.ip4,
                    "ip6": pair.ip6,
                    "label": pair.label.value,
                    "group": pair.group or "",
                }
            )


def synthesize_nonsiblings(siblings: Sequence[CandidatePair]) -> list[CandidatePair]:
    """
    Mix the IPv4 side of sibling j with the IPv6 side of sibling i for all i != j.

    Both orderings are produced, n * (n - 1) pairs in total; the group is kept
    only when both sources share it.
    """
    pairs: list[CandidatePair] = []
    for donor4 in siblings:
        for donor6 in siblings:
            if donor4 is donor6:
                continue
            pairs.append(
                CandidatePair(
                    id=f"{donor4.id}/{donor6.id}",
                    ip4=donor4.ip4,
                    ip6=donor6.ip6,
                    series4=donor4.series4,
                    series6=donor6.series6,
                    fp4=donor4.fp4,
                    fp6=donor6.fp6,
                    label=Label.NONSIBLING,
                    group=donor4.group if donor4.group == donor6.group else None,
                )
            )
    return pairs


def load_targets(path: str | Path) -> list[dict[str, str]]:
    """Read the candidate list (id, ip4, ip6) to probe."""
    targets_path = Path(path)
    targets: list[dict[str, str]] = []
    with targets_path.open("r", newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        for number, row in enumerate(reader, start=2):
            try:
                target = {key: row[key].strip() for key in TARGET_FIELDS}
                ipaddress.IPv4Address(target["ip4"])
                ipaddress.IPv6Address(target["ip6"])
            except (KeyError, AttributeError, ValueError) as exc:
                raise MalformedRecord(targets_path, number, str(exc)) from exc
            targets.append(target)
    return targets


def load_blacklist(
    path: str | Path,
) -> list[ipaddress.IPv4Network | ipaddress.IPv6Network]:
    """One address or CIDR network per line; '#' starts a comment."""
    networks: list[ipaddress.IPv4Network | ipaddress.IPv6Network] = []
    blacklist_path = Path(path)
    with blacklist_path.open("r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            entry = line.split("#", 1)[0].strip()
            if not entry:
                continue
            try:
                networks.append(ipaddress.ip_network(entry, strict=False))
            except ValueError as exc:
                raise MalformedRecord(blacklist_path, number, str(exc)) from exc
    return networks


def is_blacklisted(
    ip: str, networks: Iterable[ipaddress.IPv4Network | ipaddress.IPv6Network]
) -> bool:
    address = ipaddress.ip_address(ip)
    return any(address.version == net.version and address in net for net in networks)
