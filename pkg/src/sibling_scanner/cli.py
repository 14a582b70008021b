"""Command-line interface: simulate, probe, extract, classify and evaluate."""

from __future__ import annotations

import argparse
import logging
import os
import re
import sys
from pathlib import Path
from typing import Any, Mapping, Sequence

from dotenv import load_dotenv

from sibling_scanner.classifiers import CLASSIFIER_NAMES, ClassifierSuite
from sibling_scanner.config import (
    ConfigError,
    load_host_specs,
    load_settings_config,
    load_thresholds,
    probe_config_from_settings,
)
from sibling_scanner.evaluation import (
    EvalReport,
    Evaluator,
    SingleClass,
    combine_reports,
    tally_verdicts,
)
from sibling_scanner.exporter import (
    export_text,
    export_to_csv,
    export_to_json,
    export_to_jsonl,
    plot_offsets,
)
from sibling_scanner.features import (
    FeatureError,
    FeatureExtractor,
    feature_row,
    spline_curves,
)
from sibling_scanner.ingest import IngestError, load_batch, load_targets, save_batch
from sibling_scanner.models import CandidatePair, Family, OptionsFingerprint
from sibling_scanner.prober import probe_batch
from sibling_scanner.simulator import (
    generate_population,
    host_address,
    measurement_times,
    simulate_sibling,
)
from sibling_scanner.validator import format_quality_report, summarize_feature_status


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_PARTIAL_PROBE = 3

DEFAULT_SETTINGS = "config/settings.yml"
SETTINGS_ENV = "SIBLING_SCANNER_SETTINGS"

TRACES = "traces.jsonl"
OPTIONS = "options.jsonl"
LABELS = "labels.csv"


def _resolve_output_dir(
    arg_output: str | None, settings: Mapping[str, Any] | None
) -> Path:
    """CLI arg first, then settings.output.directory, then sample_output."""
    if arg_output:
        return Path(arg_output)
    output_settings = (settings or {}).get("output", {}) or {}
    return Path(output_settings.get("directory") or "sample_output")


def configure_logging(
    settings: Mapping[str, Any] | None, override: str | None = None
) -> None:
    """
    Configure basic logging from --log-level, else settings['logging']['level'].

    - Default level is INFO when nothing is specified.
    - If the level string is invalid, fall back to INFO.
    """
    logging_config = (settings or {}).get("logging", {}) or {}
    level_name = str(override or logging_config.get("level", "INFO")).upper()
    level = getattr(logging, level_name, logging.INFO)
    if not isinstance(level, int):
        level = logging.INFO
    logging.basicConfig(level=level)


def _workers(args: argparse.Namespace, settings: Mapping[str, Any]) -> int:
    if args.workers is not None:
        return max(1, args.workers)
    return max(1, int(settings.get("workers", 1) or 1))


def _input(path: str | None, output_dir: Path, name: str) -> Path:
    return Path(path) if path else output_dir / name


def _load(
    args: argparse.Namespace, output_dir: Path, labels: Path | None = None
) -> list[CandidatePair]:
    traces = _input(args.traces, output_dir, TRACES)
    options = _input(args.options, output_dir, OPTIONS)
    for path, what in ((traces, "trace"), (options, "options")):
        if not path.exists():
            raise FileNotFoundError(f"{what} file not found: {path}")
    return load_batch(traces, options, labels)


def _safe_name(pair_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", pair_id)


def cmd_simulate(
    args: argparse.Namespace, settings: Mapping[str, Any], output_dir: Path
) -> int:
    if args.hosts:
        hosts = load_host_specs(args.hosts, seed=args.seed)
        times = measurement_times(args.start, args.duration, args.interval)
        pairs = [
            simulate_sibling(
                host["spec"],
                None,
                None,
                times,
                pair_id=host["id"],
                ip4=host_address(Family.V4, index),
                ip6=host_address(Family.V6, index),
                spec6=host["spec6"],
                fingerprint6=(
                    OptionsFingerprint(host["fingerprint6"])
                    if host["fingerprint6"]
                    else None
                ),
                group=host["group"],
            )
            for index, host in enumerate(hosts)
        ]
    else:
        if args.n < 1:
            print("--n must be at least 1.", file=sys.stderr)
            return EXIT_USAGE
        population = generate_population(
            max(args.n, 2),
            args.mix,
            args.seed,
            duration=args.duration,
            interval=args.interval,
            start_epoch=args.start,
        )
        pairs = population[: args.n]

    if len(pairs) < 2:
        logger.warning(
            "Only %s sibling simulated; no non-siblings can be synthesized", len(pairs)
        )
    save_batch(
        pairs, output_dir / TRACES, output_dir / OPTIONS, output_dir / LABELS
    )
    logger.info("Wrote %s simulated pairs to %s", len(pairs), output_dir)
    return EXIT_OK


def cmd_probe(
    args: argparse.Namespace, settings: Mapping[str, Any], output_dir: Path
) -> int:
    config = probe_config_from_settings(
        settings,
        duration=args.duration,
        min_sample_interval=args.interval,
        batch_size=args.batch_size,
        port=args.port,
        max_parallel_connections=args.max_parallel,
        interface=args.interface,
        blacklist=args.blacklist,
        request_path=args.request_path,
        user_agent=args.user_agent,
    )
    targets = load_targets(args.targets)
    result = probe_batch(targets, config, output_dir / TRACES, output_dir / OPTIONS)
    export_to_json(result.to_dict(), output_dir / "probe_summary.json")
    if result.clock_adjusted:
        print(
            "warning: the local clock was adjusted during the run; offsets may "
            "contain artificial steps",
            file=sys.stderr,
        )
    if not result.complete:
        print(
            f"{len(result.errors)} target(s) failed; see probe_summary.json",
            file=sys.stderr,
        )
        return EXIT_PARTIAL_PROBE
    return EXIT_OK


def cmd_extract(
    args: argparse.Namespace, settings: Mapping[str, Any], output_dir: Path
) -> int:
    pairs = _load(args, output_dir)
    extractor = FeatureExtractor(workers=_workers(args, settings))
    vectors = extractor.extract_all(pairs)
    export_to_csv((feature_row(fv) for fv in vectors), output_dir / "features.csv")

    report = format_quality_report(summarize_feature_status(vectors))
    print(report)
    export_text(report, output_dir / "quality.txt")

    if args.emit_plots:
        plot_dir = output_dir / "plots"
        for pair in pairs:
            off4 = extractor.side(pair.series4).offsets
            off6 = extractor.side(pair.series6).offsets
            series = {
                name: (off.x + off.origin, off.y)
                for name, off in (("IPv4", off4), ("IPv6", off6))
                if off is not None
            }
            curves = None
            if off4 is not None and off6 is not None:
                try:
                    curves = spline_curves(off4, off6)
                except FeatureError as exc:
                    logger.debug("No spline overlay for %s: %s", pair.id, exc)
            target = plot_dir / f"{_safe_name(pair.id)}.png"
            plot_offsets(pair.id, series, curves, target)
        logger.info("Wrote %s offset plots to %s", len(pairs), plot_dir)
    return EXIT_OK


def cmd_classify(
    args: argparse.Namespace,
    settings: Mapping[str, Any],
    output_dir: Path,
    suite: ClassifierSuite,
) -> int:
    pairs = _load(args, output_dir)
    names = list(CLASSIFIER_NAMES) if args.model == "all" else [args.model]
    vectors = FeatureExtractor(workers=_workers(args, settings)).extract_all(pairs)

    records = []
    decisions: dict[str, list] = {name: [] for name in names}
    for fv in vectors:
        record: dict[str, Any] = {"id": fv.pair_id}
        for name in names:
            decision = suite.classify(name, fv)
            decisions[name].append(decision)
            record[name] = decision.verdict.value
            record[f"{name}_reason"] = decision.reason.value
        records.append(record)

    export_to_jsonl(records, output_dir / "verdicts.jsonl")
    summary = {name: tally_verdicts(decisions[name]) for name in names}
    export_to_json(summary, output_dir / "verdict_summary.json")

    verdicts = list(next(iter(summary.values())).keys()) if summary else []
    print(f"{'':<12}" + "".join(f"{name:>10}" for name in names))
    for verdict in verdicts:
        print(
            f"{verdict:<12}"
            + "".join(f"{summary[name][verdict]:>10}" for name in names)
        )
    return EXIT_OK


def cmd_evaluate(
    args: argparse.Namespace,
    settings: Mapping[str, Any],
    output_dir: Path,
    suite: ClassifierSuite,
) -> int:
    labels = _input(args.labels, output_dir, LABELS)
    if not labels.exists():
        print(
            f"Labels file not found: {labels}. Evaluation needs ground truth; "
            "run 'simulate' or pass --labels.",
            file=sys.stderr,
        )
        return EXIT_DATA

    extractor = FeatureExtractor(workers=_workers(args, settings))
    evaluator = Evaluator(suite, extractor, dataset=args.dataset)
    pairs = _load(args, output_dir, labels)
    report = evaluator.evaluate(pairs, k=args.k, seed=args.seed)

    payload: dict[str, Any] = report.to_dict()
    reports: list[EvalReport] = [report]
    for extra in args.extra_batch or []:
        extra_dir = Path(extra)
        extra_pairs = load_batch(
            extra_dir / TRACES, extra_dir / OPTIONS, extra_dir / LABELS
        )
        reports.append(
            Evaluator(suite, FeatureExtractor(extractor.workers), extra_dir.name)
            .evaluate(extra_pairs, k=args.k, seed=args.seed)
        )
    if len(reports) > 1:
        payload["batch_means"] = combine_reports(reports)

    export_to_json(payload, output_dir / "report.json")
    table = report.format_table()
    export_text(table, output_dir / "report.txt")
    print(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Detect IPv4/IPv6 sibling addresses from TCP timestamp clocks."
    )
    parser.add_argument(
        "--settings",
        default=None,
        help=f"Path to YAML settings (default: ${SETTINGS_ENV} or {DEFAULT_SETTINGS}).",
    )
    parser.add_argument(
        "--thresholds", default=None, help="YAML file overriding classifier thresholds."
    )
    parser.add_argument("--output-dir", default=None, help="Directory for all outputs.")
    parser.add_argument("--log-level", default=None, help="Logging level, e.g. DEBUG.")
    parser.add_argument("--seed", type=int, default=0, help="Seed for all randomness.")
    parser.add_argument(
        "--workers", type=int, default=None, help="Processes for feature extraction."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    simulate = sub.add_parser("simulate", help="Write a synthetic labeled batch.")
    simulate.add_argument("--n", type=int, default=200, help="Number of siblings.")
    simulate.add_argument(
        "--mix", type=float, default=0.3, help="Fraction of constant-skew hosts."
    )
    simulate.add_argument("--duration", type=float, default=36000.0)
    simulate.add_argument("--interval", type=float, default=60.0)
    simulate.add_argument("--start", type=float, default=1_480_000_000.0)
    simulate.add_argument("--hosts", default=None, help="YAML file of host clock specs.")

    probe = sub.add_parser("probe", help="Measure live targets.")
    probe.add_argument("--targets", required=True, help="CSV with id,ip4,ip6.")
    probe.add_argument("--duration", type=float, default=None)
    probe.add_argument("--interval", type=float, default=None)
    probe.add_argument("--batch-size", type=int, default=None)
    probe.add_argument("--port", type=int, default=None)
    probe.add_argument("--max-parallel", type=int, default=None)
    probe.add_argument("--interface", default=None)
    probe.add_argument("--blacklist", default=None)
    probe.add_argument("--request-path", default=None)
    probe.add_argument("--user-agent", default=None)

    for name, help_text in (
        ("extract", "Dump features and a quality report."),
        ("classify", "Classify every pair of a batch."),
        ("evaluate", "Score all classifiers against labels."),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--traces", default=None)
        cmd.add_argument("--options", default=None)
        if name == "extract":
            cmd.add_argument("--emit-plots", action="store_true")
        if name == "classify":
            cmd.add_argument(
                "--model", choices=[*CLASSIFIER_NAMES, "all"], default="all"
            )
        if name == "evaluate":
            cmd.add_argument("--labels", default=None)
            cmd.add_argument("--k", type=int, default=10)
            cmd.add_argument("--dataset", default="batch")
            cmd.add_argument(
                "--extra-batch",
                action="append",
                help="Directory with another traces/options/labels set to average over.",
            )
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    load_dotenv()

    settings_path = args.settings or os.environ.get(SETTINGS_ENV) or DEFAULT_SETTINGS
    try:
        settings = load_settings_config(settings_path)
        suite = load_thresholds(settings, args.thresholds)
    except Exception as exc:  # noqa: BLE001
        print(f"Failed to load settings: {exc}", file=sys.stderr)
        return EXIT_USAGE

    configure_logging(settings, args.log_level)
    output_dir = _resolve_output_dir(args.output_dir, settings)

    try:
        if args.command == "simulate":
            return cmd_simulate(args, settings, output_dir)
        if args.command == "probe":
            return cmd_probe(args, settings, output_dir)
        if args.command == "extract":
            return cmd_extract(args, settings, output_dir)
        if args.command == "classify":
            return cmd_classify(args, settings, output_dir, suite)
        return cmd_evaluate(args, settings, output_dir, suite)
    except ConfigError as exc:
        print(f"Invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"Invalid arguments: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestError, SingleClass, OSError) as exc:
        print(f"Data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    raise SystemExit(main())
