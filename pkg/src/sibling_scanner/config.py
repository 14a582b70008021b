"""Configuration loading helpers: YAML settings, threshold overrides, probe settings."""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Dict, Mapping

import yaml

from sibling_scanner.classifiers import (
    BeverlyParams,
    ClassifierSuite,
    HtThresholds,
    Ml1Model,
)
from sibling_scanner.prober import ProbeConfig
from sibling_scanner.simulator import clock_spec_from_mapping, with_hz, with_seed


class ConfigError(Exception):
    """Raised when settings or threshold overrides are invalid."""


def load_settings_config(path: str | Path) -> Dict[str, Any]:
    """
    Load an optional YAML settings file.

    Returns an empty dict if the file does not exist or is empty.
    Raises ConfigError if the top-level YAML object is not a mapping.
    """
    settings_path = Path(path)
    if not settings_path.exists():
        return {}
    with settings_path.open("r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{settings_path} must be a mapping at the top level.")
    return data


def _numbers(section: Any, allowed: set[str], where: str) -> dict[str, float]:
    if section is None:
        return {}
    if not isinstance(section, dict):
        raise ConfigError(f"'{where}' must be a mapping.")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"Unknown keys in '{where}': {', '.join(unknown)}")
    values: dict[str, float] = {}
    for key, value in section.items():
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{where}.{key}' must be a number, got {value!r}")
        values[key] = float(value)
    return values


def _field_names(cls: type) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def suite_from_config(
    thresholds: Mapping[str, Any] | None,
    base: ClassifierSuite | None = None,
) -> ClassifierSuite:
    """
    Apply a thresholds mapping (sections ht, ml1, beverly) on top of base.

    Example:
        ht: {z1: 1.0, y3: 4.0}
        ml1: {tcpraw_threshold: 0.2557}
        beverly: {angle_tolerance: 0.01}
    """
    base = base or ClassifierSuite()
    thresholds = thresholds or {}
    if not isinstance(thresholds, Mapping):
        raise ConfigError("Thresholds must be a mapping.")
    unknown = sorted(set(thresholds) - {"ht", "ml1", "beverly"})
    if unknown:
        raise ConfigError(f"Unknown threshold sections: {', '.join(unknown)}")

    try:
        ht = dataclasses.replace(
            base.ht,
            **_numbers(thresholds.get("ht"), _field_names(HtThresholds), "ht"),
        )
        ml1 = dataclasses.replace(
            base.ml1,
            **_numbers(thresholds.get("ml1"), _field_names(Ml1Model), "ml1"),
        )
        beverly = dataclasses.replace(
            base.beverly,
            **_numbers(
                thresholds.get("beverly"), _field_names(BeverlyParams), "beverly"
            ),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return ClassifierSuite(ht=ht, ml1=ml1, beverly=beverly)


def load_thresholds(
    settings: Mapping[str, Any] | None, override_path: str | Path | None = None
) -> ClassifierSuite:
    """Thresholds from settings['thresholds'], then from the override file."""
    suite = suite_from_config((settings or {}).get("thresholds"))
    if override_path:
        override = load_settings_config(override_path)
        if not override and not Path(override_path).exists():
            raise ConfigError(f"Threshold file not found: {override_path}")
        suite = suite_from_config(override, base=suite)
    return suite


_PROBE_INT_FIELDS = {"batch_size", "port", "max_parallel_connections", "max_retries"}
_PROBE_STR_FIELDS = {"request_path", "user_agent", "interface", "blacklist"}


def probe_config_from_settings(
    settings: Mapping[str, Any] | None, **overrides: Any
) -> ProbeConfig:
    """
    Build a ProbeConfig from settings['probe'] plus non-None CLI overrides.
    """
    section = dict((settings or {}).get("probe", {}) or {})
    section.update({k: v for k, v in overrides.items() if v is not None})
    allowed = _field_names(ProbeConfig)
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"Unknown keys in 'probe': {', '.join(unknown)}")

    values: dict[str, Any] = {}
    for key, value in section.items():
        try:
            if key in _PROBE_STR_FIELDS:
                values[key] = None if value is None else str(value)
            elif key in _PROBE_INT_FIELDS:
                values[key] = int(value)
            else:
                values[key] = float(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"'probe.{key}' has invalid value {value!r}") from exc
    try:
        return ProbeConfig(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_host_specs(path: str | Path, seed: int = 0) -> list[dict[str, Any]]:
    """
    Read a YAML list of simulated hosts.

    Each entry holds the ClockSpec mapping understood by
    simulator.clock_spec_from_mapping plus optional id, group, hz6 and
    fingerprint6 keys. Entries without a seed get one derived from `seed`.
    """
    hosts_path = Path(path)
    if not hosts_path.exists():
        raise ConfigError(f"Host file not found: {hosts_path}")
    with hosts_path.open("r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    entries = data.get("hosts") if isinstance(data, dict) else data
    if not isinstance(entries, list) or not entries:
        raise ConfigError(f"{hosts_path} must contain a non-empty 'hosts' list.")

    hosts: list[dict[str, Any]] = []
    for index, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise ConfigError(f"Host #{index} must be a mapping.")
        try:
            spec = clock_spec_from_mapping(entry)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"Host #{index} is invalid: {exc}") from exc
        if "seed" not in entry:
            spec = with_seed(spec, seed * 1_000_003 + index)
        spec6 = with_hz(spec, int(entry["hz6"])) if "hz6" in entry else None
        hosts.append(
            {
                "id": str(entry.get("id", f"host-{index:05d}")),
                "group": entry.get("group"),
                "spec": spec,
                "spec6": spec6,
                "fingerprint6": entry.get("fingerprint6"),
            }
        )
    return hosts
