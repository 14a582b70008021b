"""
Active measurement: keep-alive HTTP probes plus passive capture of the replies.

Each target address gets its own requests.Session (one outstanding request at a
time). The TSval of the reply is read from the inbound segment seen by a scapy
sniffer filtered on the probed port; recv_time is the capture-layer timestamp,
which carries the usual libpcap jitter of tens of microseconds.
"""

from __future__ import annotations

import contextlib
import logging
import random
import threading
import time
from collections import defaultdict, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

import requests

from sibling_scanner.exporter import atomic_output
from sibling_scanner.ingest import (
    is_blacklisted,
    load_blacklist,
    options_line,
    trace_line,
)
from sibling_scanner.models import (
    Family,
    OptionsFingerprint,
    TimestampSample,
    canonicalize_options,
    options_from_scapy,
)

logger = logging.getLogger(__name__)

DEFAULT_USER_AGENT = (
    "sibling-scanner/0.1 (research measurement; see /research_scan for opt-out)"
)
CLOCK_DRIFT_TOLERANCE = 0.05


class ProbeError(Exception):
    """Per-target measurement failure; recorded, never aborts a batch."""

    def __init__(self, ip: str, detail: str = "") -> None:
        message = f"{type(self).__name__}({ip})"
        super().__init__(f"{message}: {detail}" if detail else message)
        self.ip = ip


class ConnectTimeout(ProbeError):
    pass


class NoTimestampOption(ProbeError):
    pass


class ResetByPeer(ProbeError):
    pass


@dataclass(frozen=True)
class ProbeConfig:
    duration: float = 36000.0
    min_sample_interval: float = 60.0
    batch_size: int = 10000
    request_path: str = "/research_scan"
    user_agent: str = DEFAULT_USER_AGENT
    port: int = 80
    max_parallel_connections: int = 256
    timeout: float = 10.0
    max_retries: int = 3
    retry_backoff_seconds: float = 1.0
    retry_backoff_multiplier: float = 2.0
    retry_jitter_seconds: float = 0.5
    capture_wait: float = 2.0
    interface: str | None = None
    blacklist: str | None = None

    def __post_init__(self) -> None:
        if self.min_sample_interval <= 0:
            raise ValueError("min_sample_interval must be positive")
        if self.duration < 2 * self.min_sample_interval:
            raise ValueError("duration must be at least 2 * min_sample_interval")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_parallel_connections < 1:
            raise ValueError("max_parallel_connections must be >= 1")
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")
        if not self.request_path.startswith("/"):
            raise ValueError("request_path must start with '/'")

    @property
    def samples_per_target(self) -> int:
        return int(self.duration // self.min_sample_interval)


@dataclass(frozen=True)
class Segment:
    """An inbound TCP segment as seen by the capture."""

    time: float
    tsval: int | None
    options: tuple[tuple[int, bytes], ...]
    syn_ack: bool


class Capture(Protocol):
    def start(self) -> None: ...

    def stop(self) -> None: ...

    def next_segment(self, ip: str, after: float, timeout: float) -> Segment | None: ...

    def handshakes(self, ip: str) -> list[OptionsFingerprint]: ...


class PacketCapture:
    """scapy AsyncSniffer keeping, per remote address, the segments it sent us."""

    def __init__(self, port: int, interface: str | None = None) -> None:
        self.port = port
        self.interface = interface
        self._segments: dict[str, deque[Segment]] = defaultdict(deque)
        self._handshakes: dict[str, list[OptionsFingerprint]] = defaultdict(list)
        self._cond = threading.Condition()
        self._sniffer: Any = None

    def start(self) -> None:
        try:
            from scapy.sendrecv import AsyncSniffer
        except ImportError as exc:  # pragma: no cover - scapy is a core dependency
            raise ImportError(
                "scapy is required for live probing; please install it via "
                "'pip install scapy'"
            ) from exc
        self._sniffer = AsyncSniffer(
            iface=self.interface,
            filter=f"tcp src port {self.port}",
            prn=self._on_packet,
            store=False,
        )
        self._sniffer.start()
        logger.info(
            "Capture started on %s (port %s)", self.interface or "default", self.port
        )

    def stop(self) -> None:
        if self._sniffer is not None:
            with contextlib.suppress(Exception):
                self._sniffer.stop()
            self._sniffer = None

    def _on_packet(self, pkt: Any) -> None:
        from scapy.layers.inet import IP, TCP
        from scapy.layers.inet6 import IPv6

        if TCP not in pkt:
            return
        layer = pkt[IP] if IP in pkt else pkt[IPv6] if IPv6 in pkt else None
        if layer is None:
            return
        tcp = pkt[TCP]
        self.record(
            layer.src,
            Segment(
                time=float(pkt.time),
                tsval=_scapy_tsval(tcp.options),
                options=tuple(options_from_scapy(tcp.options)),
                syn_ack=(int(tcp.flags) & 0x12) == 0x12,
            ),
        )

    def record(self, ip: str, segment: Segment) -> None:
        with self._cond:
            if segment.syn_ack:
                self._handshakes[ip].append(canonicalize_options(segment.options))
            self._segments[ip].append(segment)
            self._cond.notify_all()

    def next_segment(self, ip: str, after: float, timeout: float) -> Segment | None:
        """First queued segment from ip captured at or after `after`."""
        deadline = time.monotonic() + timeout
        with self._cond:
            while True:
                queue = self._segments[ip]
                while queue:
                    segment = queue.popleft()
                    if segment.time >= after:
                        return segment
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return None
                self._cond.wait(remaining)

    def handshakes(self, ip: str) -> list[OptionsFingerprint]:
        with self._cond:
            return list(self._handshakes[ip])


def _scapy_tsval(options: Iterable[tuple[Any, Any]]) -> int | None:
    for name, value in options:
        if name == "Timestamp" and isinstance(value, tuple):
            return int(value[0])
    return None


class TraceAppender:
    """Serializes trace and options lines from all probe threads into two files."""

    def __init__(self, trace_path: str | Path, options_path: str | Path) -> None:
        self._stack = contextlib.ExitStack()
        self._trace = self._stack.enter_context(atomic_output(trace_path))
        self._options = self._stack.enter_context(atomic_output(options_path))
        self._lock = threading.Lock()

    def sample(
        self, candidate_id: str, family: Family, ip: str, sample: TimestampSample
    ) -> None:
        line = trace_line(candidate_id, family, sample, ip)
        with self._lock:
            self._trace.write(line + "\n")

    def fingerprint(
        self, candidate_id: str, family: Family, fp: OptionsFingerprint
    ) -> None:
        line = options_line(candidate_id, family, fp)
        with self._lock:
            self._options.write(line + "\n")

    def close(self) -> None:
        self._stack.close()

    def __enter__(self) -> "TraceAppender":
        return self

    def __exit__(self, exc_type: Any, exc: Any, tb: Any) -> None:
        if exc_type is None:
            self._stack.close()
        else:
            self._stack.__exit__(exc_type, exc, tb)


class ClockDriftMonitor:
    """Detects steps of the local wall clock against the monotonic clock."""

    def __init__(
        self,
        tolerance: float = CLOCK_DRIFT_TOLERANCE,
        wall: Callable[[], float] = time.time,
        monotonic: Callable[[], float] = time.monotonic,
    ) -> None:
        self.tolerance = tolerance
        self._wall = wall
        self._monotonic = monotonic
        self._base = wall() - monotonic()
        self.adjusted = False

    def check(self) -> float:
        drift = (self._wall() - self._monotonic()) - self._base
        if abs(drift) > self.tolerance and not self.adjusted:
            self.adjusted = True
            logger.warning(
                "Local clock moved by %.3f s during measurement; disable the clock "
                "discipline daemon (ntpd/chronyd) while probing",
                drift,
            )
        return drift


@dataclass
class TargetState:
    """Connection state for one probed address."""

    ip: str
    family: Family
    config: ProbeConfig
    capture: Capture
    session: requests.Session
    fingerprint: OptionsFingerprint | None = None
    handshakes_seen: int = 0
    anomalies: list[str] = field(default_factory=list)
    last_recv: float = 0.0

    @property
    def url(self) -> str:
        host = f"[{self.ip}]" if self.family is Family.V6 else self.ip
        return f"http://{host}:{self.config.port}{self.config.request_path}"

    def update_fingerprint(self) -> None:
        seen = self.capture.handshakes(self.ip)
        for fp in seen[self.handshakes_seen :]:
            if self.fingerprint is None:
                self.fingerprint = fp
            elif fp != self.fingerprint:
                self.anomalies.append(fp.canonical)
                logger.warning(
                    "Options fingerprint of %s changed on reconnect: %s -> %s",
                    self.ip, self.fingerprint.canonical, fp.canonical,
                )
        self.handshakes_seen = len(seen)


def _is_reset(exc: requests.exceptions.ConnectionError) -> bool:
    text = str(exc).lower()
    return "reset" in text or "aborted" in text or "remotedisconnected" in text


def elicit_sample(state: TargetState, ip: str | None = None) -> TimestampSample:
    """
    Send one request over the keep-alive session and return the timestamp of the
    reply segment. requests reopens the connection if the peer closed it.
    """
    ip = ip or state.ip
    sent_at = time.time()
    try:
        response = state.session.get(
            state.url,
            timeout=state.config.timeout,
            headers={"User-Agent": state.config.user_agent},
        )
        response.close()
    except requests.exceptions.ConnectTimeout as exc:
        raise ConnectTimeout(ip, str(exc)) from exc
    except requests.exceptions.Timeout as exc:
        raise ConnectTimeout(ip, str(exc)) from exc
    except requests.exceptions.ConnectionError as exc:
        if _is_reset(exc):
            raise ResetByPeer(ip, str(exc)) from exc
        raise ConnectTimeout(ip, str(exc)) from exc

    state.update_fingerprint()
    segment = state.capture.next_segment(ip, sent_at, state.config.capture_wait)
    if segment is None:
        raise ConnectTimeout(ip, "no reply segment captured")
    if segment.tsval is None:
        raise NoTimestampOption(ip)
    return TimestampSample(recv_time=round(segment.time, 6), tsval=segment.tsval)


@dataclass
class ProbeResult:
    samples: dict[str, int] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)
    anomalies: dict[str, list[str]] = field(default_factory=dict)
    clock_adjusted: bool = False

    @property
    def complete(self) -> bool:
        return not self.errors

    def to_dict(self) -> dict[str, Any]:
        return {
            "samples": dict(sorted(self.samples.items())),
            "errors": dict(sorted(self.errors.items())),
            "skipped": sorted(self.skipped),
            "anomalies": dict(sorted(self.anomalies.items())),
            "clock_adjusted": self.clock_adjusted,
        }


class Prober:
    """Runs probe_batch's per-target loops; clock and sleep are injectable."""

    def __init__(
        self,
        config: ProbeConfig,
        capture: Capture,
        appender: TraceAppender,
        session_factory: Callable[[], requests.Session] = requests.Session,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
        drift: ClockDriftMonitor | None = None,
    ) -> None:
        self.config = config
        self.capture = capture
        self.appender = appender
        self.session_factory = session_factory
        self.clock = clock
        self.sleep = sleep
        self.drift = drift

    def _sleep_backoff(self, attempt: int) -> None:
        if self.config.retry_backoff_seconds <= 0:
            return
        backoff = self.config.retry_backoff_seconds * (
            self.config.retry_backoff_multiplier ** (attempt - 1)
        )
        if self.config.retry_jitter_seconds > 0:
            backoff += random.uniform(0, self.config.retry_jitter_seconds)
        self.sleep(backoff)

    def _sample_with_retry(self, state: TargetState) -> TimestampSample:
        for attempt in range(1, self.config.max_retries + 1):
            try:
                return elicit_sample(state)
            except NoTimestampOption:
                raise
            except ProbeError:
                if attempt == self.config.max_retries:
                    raise
                logger.debug("Retrying %s (attempt %s)", state.ip, attempt)
                self._sleep_backoff(attempt)
        raise ProbeError(state.ip, "retries exhausted")  # pragma: no cover

    def probe_target(
        self, candidate_id: str, family: Family, ip: str, result: ProbeResult
    ) -> None:
        session = self.session_factory()
        state = TargetState(ip, family, self.config, self.capture, session)
        count = 0
        fp_written = False
        start = self.clock()
        try:
            for k in range(self.config.samples_per_target):
                wait = start + k * self.config.min_sample_interval - self.clock()
                if wait > 0:
                    self.sleep(wait)
                sample = self._sample_with_retry(state)
                if state.fingerprint is not None and not fp_written:
                    self.appender.fingerprint(candidate_id, family, state.fingerprint)
                    fp_written = True
                if sample.recv_time <= state.last_recv:
                    continue
                state.last_recv = sample.recv_time
                self.appender.sample(candidate_id, family, ip, sample)
                count += 1
                if self.drift is not None:
                    self.drift.check()
        except ProbeError as exc:
            logger.warning("Target %s of %s: %s", ip, candidate_id, exc)
            result.errors[ip] = type(exc).__name__
        finally:
            session.close()
            result.samples[ip] = count
            if state.anomalies:
                result.anomalies[ip] = list(state.anomalies)
        if count and state.fingerprint is None:
            logger.warning("No SYN-ACK captured for %s; fingerprint missing", ip)

    def run(self, targets: Sequence[Mapping[str, str]], result: ProbeResult) -> None:
        jobs = [
            (t["id"], family, t[key])
            for t in targets
            for family, key in ((Family.V4, "ip4"), (Family.V6, "ip6"))
        ]
        workers = min(self.config.max_parallel_connections, max(len(jobs), 1))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(self.probe_target, *job, result) for job in jobs]
            for future in futures:
                future.result()


def probe_batch(
    targets: Sequence[Mapping[str, str]],
    config: ProbeConfig,
    trace_path: str | Path,
    options_path: str | Path,
    capture: Capture | None = None,
    session_factory: Callable[[], requests.Session] = requests.Session,
    clock: Callable[[], float] = time.monotonic,
    sleep: Callable[[float], None] = time.sleep,
) -> ProbeResult:
    """
    Probe every (id, ip4, ip6) target for config.duration and write
    traces.jsonl / options.jsonl. Pairs with a blacklisted address are skipped;
    more than batch_size pairs run as consecutive batches.
    """
    networks = load_blacklist(config.blacklist) if config.blacklist else []
    result = ProbeResult()
    allowed: list[Mapping[str, str]] = []
    for target in targets:
        blocked = [
            ip
            for ip in (target["ip4"], target["ip6"])
            if is_blacklisted(ip, networks)
        ]
        if blocked:
            logger.warning(
                "Skipping %s: blacklisted address %s", target["id"], ", ".join(blocked)
            )
            result.skipped.append(target["id"])
            continue
        allowed.append(target)

    capture = capture or PacketCapture(config.port, config.interface)
    drift = ClockDriftMonitor()
    capture.start()
    try:
        with TraceAppender(trace_path, options_path) as appender:
            prober = Prober(
                config, capture, appender, session_factory, clock, sleep, drift
            )
            for offset in range(0, len(allowed), config.batch_size):
                batch = allowed[offset : offset + config.batch_size]
                logger.info(
                    "Probing batch of %s pairs (%s s, every %s s)",
                    len(batch), config.duration, config.min_sample_interval,
                )
                prober.run(batch, result)
    finally:
        capture.stop()
    result.clock_adjusted = drift.adjusted
    return result
