"""Configuration parsing and validation."""

import pytest

from qmesh.config import (ConfigError, parse_config, parse_duration_ns,
                          parse_sampling)

LEGACY_DOC = """\
IPAddresses
-  front: 10.243.2.*:80
-  back: 10.244.2.*; 10.245.2.*:1064

samples: 8 per minute
recordTimeout: 15 seconds
propagateTimeout: 0.1 seconds
answerQualityFunction: default
"""


def test_legacy_document_parses_with_documented_defaults():
    cfg = parse_config(LEGACY_DOC)
    assert cfg.sampling.per_minute == 8.0
    assert cfg.record_timeout_ns == 15_000_000_000
    assert cfg.propagate_timeout_ns == 100_000_000
    assert cfg.quality_function == "tpr"
    assert cfg.front_addresses == ("10.243.2.*:80",)
    assert cfg.back_addresses == ("10.244.2.*", "10.245.2.*:1064")
    assert cfg.cache_capacity_bytes == 1 << 30


def test_empty_document_requires_front_addresses():
    with pytest.raises(ConfigError, match="front"):
        parse_config("")


def test_timeout_ordering_violation_rejected():
    doc = "front: a:1\nrecordTimeout: 0.05\npropagateTimeout: 0.1\n"
    with pytest.raises(ConfigError, match="recordTimeout"):
        parse_config(doc)


def test_malformed_document_reports_line():
    bad = "front: a:1\nsamples: [unclosed\n"
    with pytest.raises(ConfigError) as err:
        parse_config(bad)
    assert "line" in str(err.value)


def test_negative_timeout_rejected():
    with pytest.raises(ConfigError):
        parse_config("front: a:1\nrecordTimeout: -3\n")


def test_duration_forms():
    assert parse_duration_ns("15 seconds", "k") == 15_000_000_000
    assert parse_duration_ns("0.1 seconds", "k") == 100_000_000
    assert parse_duration_ns("100 ms", "k") == 100_000_000
    assert parse_duration_ns(2, "k") == 2_000_000_000
    assert parse_duration_ns("1 minute", "k") == 60_000_000_000
    with pytest.raises(ConfigError):
        parse_duration_ns("soon", "k")


def test_sampling_forms():
    assert parse_sampling("8 per minute").per_minute == 8.0
    assert parse_sampling("20%").fraction == 0.2
    assert parse_sampling(0.2).fraction == 0.2
    assert parse_sampling(1.0).fraction == 1.0
    assert parse_sampling(12).per_minute == 12.0
    with pytest.raises(ConfigError):
        parse_sampling("sometimes")
    with pytest.raises(ConfigError):
        parse_sampling(-1)


def test_extension_keys():
    doc = (
        "front: a:1\n"
        "cacheCapacityBytes: 1048576\n"
        "cacheTtlSeconds: 30\n"
        "rngSeed: 99\n"
        "timeMode: virtual\n"
    )
    cfg = parse_config(doc)
    assert cfg.cache_capacity_bytes == 1048576
    assert cfg.cache_ttl_ns == 30_000_000_000
    assert cfg.rng_seed == 99
    assert cfg.time_mode == "virtual"


def test_unknown_service_kind_rejected():
    with pytest.raises(ConfigError, match="kind"):
        parse_config("front: a:1\nservice: {kind: quantum}\n")


def test_config_hash_stable_and_sensitive():
    a = parse_config(LEGACY_DOC)
    b = parse_config(LEGACY_DOC)
    c = parse_config(LEGACY_DOC.replace("15 seconds", "16 seconds"))
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()


def test_ttl_must_exceed_record_timeout():
    with pytest.raises(ConfigError, match="cacheTtlSeconds"):
        parse_config("front: a:1\ncacheTtlSeconds: 10\n")
