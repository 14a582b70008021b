from pathlib import Path

import pytest

from sibling_scanner.classifiers import ClassifierSuite
from sibling_scanner.config import (
    ConfigError,
    load_host_specs,
    load_settings_config,
    load_thresholds,
    probe_config_from_settings,
    suite_from_config,
)

CONFIG_DIR = Path(__file__).resolve().parents[1] / "config"


def test_load_settings_config_missing_file_returns_empty(tmp_path):
    assert load_settings_config(tmp_path / "missing.yml") == {}


def test_load_settings_config_non_mapping_raises(tmp_path):
    path = tmp_path / "settings.yml"
    path.write_text("- just\n- a list\n", encoding="utf-8")

    with pytest.raises(ConfigError):
        load_settings_config(path)


def test_example_settings_are_valid():
    settings = load_settings_config(CONFIG_DIR / "settings.example.yml")

    suite = load_thresholds(settings, CONFIG_DIR / "thresholds.example.yml")
    config = probe_config_from_settings(settings)

    assert suite == ClassifierSuite()
    assert config.request_path == "/research_scan"
    assert config.port == 80


def test_suite_from_config_overrides_only_named_values():
    suite = suite_from_config({"ht": {"z1": 2}, "ml1": {"tcpraw_threshold": 0.5}})

    assert suite.ht.z1 == 2.0
    assert suite.ht.y3 == ClassifierSuite().ht.y3
    assert suite.ml1.tcpraw_threshold == 0.5
    assert suite.beverly == ClassifierSuite().beverly


@pytest.mark.parametrize(
    "thresholds",
    [
        {"cart": {"depth": 3}},
        {"ht": {"z99": 1.0}},
        {"ht": {"z1": "large"}},
        {"ml1": {"tcpraw_threshold": True}},
        {"ht": ["z1", 1.0]},
        {"ht": {"y2": 5.0, "y3": 4.0}},
        {"ml1": {"tcpraw_threshold": -1}},
    ],
)
def test_suite_from_config_rejects_invalid_values(thresholds):
    with pytest.raises(ConfigError):
        suite_from_config(thresholds)


def test_load_thresholds_applies_file_on_top_of_settings(tmp_path):
    override = tmp_path / "thresholds.yml"
    override.write_text("ml1:\n  tcpraw_threshold: 0.3\n", encoding="utf-8")
    settings = {"thresholds": {"ml1": {"tcpraw_threshold": 0.1}, "ht": {"z1": 3}}}

    suite = load_thresholds(settings, override)

    assert suite.ml1.tcpraw_threshold == 0.3
    assert suite.ht.z1 == 3.0


def test_load_thresholds_missing_override_file(tmp_path):
    with pytest.raises(ConfigError):
        load_thresholds({}, tmp_path / "missing.yml")


def test_probe_config_from_settings_applies_overrides():
    settings = {"probe": {"duration": 7200, "port": "8080", "interface": "eth0"}}

    config = probe_config_from_settings(settings, port=None, min_sample_interval=30)

    assert config.duration == 7200.0
    assert config.port == 8080
    assert config.min_sample_interval == 30.0
    assert config.interface == "eth0"


@pytest.mark.parametrize(
    "probe",
    [{"colour": "red"}, {"port": "eighty"}, {"duration": 10, "min_sample_interval": 60}],
)
def test_probe_config_from_settings_invalid(probe):
    with pytest.raises(ConfigError):
        probe_config_from_settings({"probe": probe})


def test_load_host_specs(tmp_path):
    path = tmp_path / "hosts.yml"
    path.write_text(
        "hosts:\n"
        "  - id: web\n"
        "    group: constant\n"
        "    hz: 1000\n"
        "    boot_epoch: 1479000000\n"
        "    skew_ppm: 12.5\n"
        "  - hz: 250\n"
        "    boot_epoch: 1479500000\n"
        "    hz6: 100\n"
        "    seed: 4\n",
        encoding="utf-8",
    )

    hosts = load_host_specs(path, seed=2)

    assert [h["id"] for h in hosts] == ["web", "host-00001"]
    assert hosts[0]["spec"].skew_ppm == 12.5
    assert hosts[0]["spec"].seed == 2 * 1_000_003
    assert hosts[0]["spec6"] is None
    assert hosts[1]["spec"].seed == 4
    assert hosts[1]["spec6"].hz == 100


def test_example_hosts_load():
    hosts = load_host_specs(CONFIG_DIR / "hosts.example.yml")

    assert hosts
    assert all(h["spec"].hz > 0 for h in hosts)


@pytest.mark.parametrize(
    "content", ["hosts: []\n", "hosts:\n  - 3\n", "hosts:\n  - skew_ppm: 1\n"]
)
def test_load_host_specs_invalid(tmp_path, content):
    path = tmp_path / "hosts.yml"
    path.write_text(content, encoding="utf-8")

    with pytest.raises(ConfigError):
        load_host_specs(path)


def test_load_host_specs_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_host_specs(tmp_path / "nope.yml")
