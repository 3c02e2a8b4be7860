"""Run configuration: parsing, defaults, validation.

The external document is YAML with the legacy keys (`front`, `back`,
`samples`, `recordTimeout`, `propagateTimeout`, `answerQualityFunction`)
plus camelCase extensions. A quirky but supported top-level form groups
the address keys under a bare `IPAddresses` header with `- front: ...`
items; a pre-normalization pass folds that into plain keys before the
YAML parse.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field, asdict
from typing import Optional

import yaml

from .timebase import seconds_to_ns

DEFAULT_RECORD_TIMEOUT_S = 15.0
DEFAULT_PROPAGATE_TIMEOUT_S = 0.1
DEFAULT_CACHE_CAPACITY = 1 << 30
DEFAULT_CACHE_TTL_S = 60.0
DEFAULT_RECOMMENDER_TIMEOUT_S = 0.5


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass
class SamplingSpec:
    """Either a per-minute budget (token bucket) or a fractional rate."""

    per_minute: Optional[float] = None
    fraction: Optional[float] = None

    def scaled(self, factor: float) -> "SamplingSpec":
        if self.per_minute is not None:
            return SamplingSpec(per_minute=self.per_minute * factor)
        if self.fraction is not None:
            return SamplingSpec(fraction=self.fraction * factor)
        return SamplingSpec()

    def is_zero(self) -> bool:
        if self.per_minute is not None:
            return self.per_minute <= 0
        if self.fraction is not None:
            return self.fraction <= 0
        return True


@dataclass
class LatencyModel:
    """Service-time draw: lognormal body with an optional Pareto tail."""

    distribution: str = "lognormal"  # lognormal | pareto
    mean_s: float = 0.2
    sigma: float = 0.45
    tail_probability: float = 0.05
    tail_alpha: float = 1.6
    tail_scale_s: float = 0.0  # 0 -> 3x mean

    def mean_ns(self) -> int:
        return seconds_to_ns(self.mean_s)


@dataclass
class ServiceConfig:
    kind: str = "sharded-search"  # sharded-search | recommender
    # sharded search
    shard_count: int = 6
    docs_per_shard: int = 200
    score_skew: float = 1.1
    answer_size: int = 10
    middle_tier: bool = False
    online_timeout_ns: int = seconds_to_ns(0.5)
    service_time: LatencyModel = field(default_factory=LatencyModel)
    heavy_factor: float = 3.0
    back_workers: int = 2
    middle_workers: int = 4
    front_workers: int = 8
    # recommender
    small_db_latency: LatencyModel = field(default_factory=lambda: LatencyModel(mean_s=0.12, sigma=0.35))
    large_db_latency: LatencyModel = field(default_factory=lambda: LatencyModel(mean_s=0.38, sigma=0.45))
    telemetry: bool = False
    telemetry_timeout_ns: int = seconds_to_ns(0.25)
    catalog_size: int = 400


@dataclass
class TraceConfig:
    duration_ns: int = seconds_to_ns(60)
    arrival_rate: float = 10.0  # queries per second at profile multiplier 1.0
    utilization: Optional[float] = None  # overrides arrival_rate when set
    high_priority_fraction: float = 1.0
    heavy_fraction: float = 0.1
    diurnal_profile: tuple = ((0.0, 1.0),)  # (fraction of duration, multiplier)
    mix_shifts: tuple = ()  # (fraction of duration, new heavy fraction)
    csv_path: Optional[str] = None


@dataclass
class ControllerConfig:
    target_quality: float = 0.9
    kp: float = 0.8
    ki: float = 0.2
    kd: float = 0.1
    integral_limit: float = 2.0
    evaluation_interval: int = 100
    window_samples: int = 20
    proxy_target: float = 0.9


@dataclass
class TuningConfig:
    """Transport and interposition cost constants (all overridable)."""

    net_latency_ns: int = seconds_to_ns(0.0002)
    datagram_latency_ns: int = seconds_to_ns(0.0001)
    datagram_loss: float = 0.0
    datagram_handling_cost_ns: int = seconds_to_ns(0.001)
    datagram_send_cost_ns: int = seconds_to_ns(0.0004)
    record_write_cost_ns: int = seconds_to_ns(0.0006)
    cache_read_latency_ns: int = seconds_to_ns(0.0003)
    dispatch_cost_ns: int = seconds_to_ns(0.0002)
    aggregate_cost_ns: int = seconds_to_ns(0.0004)
    settle_window_ns: int = 0  # 0 -> 2x mean back service time
    front_margin_fraction: float = 0.05
    low_samples_factor: float = 0.25
    toggle_factor: float = 4.0


@dataclass
class RunConfig:
    front_addresses: tuple = ()
    back_addresses: tuple = ()
    sampling: SamplingSpec = field(default_factory=SamplingSpec)
    record_timeout_ns: int = seconds_to_ns(DEFAULT_RECORD_TIMEOUT_S)
    propagate_timeout_ns: int = seconds_to_ns(DEFAULT_PROPAGATE_TIMEOUT_S)
    quality_function: str = "tpr"
    cache_capacity_bytes: int = DEFAULT_CACHE_CAPACITY
    cache_ttl_ns: int = seconds_to_ns(DEFAULT_CACHE_TTL_S)
    rng_seed: int = 0
    time_mode: str = "virtual"  # virtual | real
    service: ServiceConfig = field(default_factory=ServiceConfig)
    trace: TraceConfig = field(default_factory=TraceConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    tuning: TuningConfig = field(default_factory=TuningConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.blake2b(self.canonical_json().encode(), digest_size=16).hexdigest()


_DURATION_RE = re.compile(
    r"^\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*"
    r"(ns|nanoseconds?|us|microseconds?|ms|milliseconds?|s|secs?|seconds?|m|mins?|minutes?)?\s*$"
)
_DURATION_SCALE = {
    None: 1.0,
    "ns": 1e-9, "nanosecond": 1e-9, "nanoseconds": 1e-9,
    "us": 1e-6, "microsecond": 1e-6, "microseconds": 1e-6,
    "ms": 1e-3, "millisecond": 1e-3, "milliseconds": 1e-3,
    "s": 1.0, "sec": 1.0, "secs": 1.0, "second": 1.0, "seconds": 1.0,
    "m": 60.0, "min": 60.0, "mins": 60.0, "minute": 60.0, "minutes": 60.0,
}


def parse_duration_ns(value, key: str) -> int:
    """Accepts bare seconds or strings like '15 seconds', '0.1 seconds', '100 ms'."""
    if isinstance(value, bool):
        raise ConfigError(f"{key}: expected a duration, got a boolean")
    if isinstance(value, (int, float)):
        return seconds_to_ns(float(value))
    if isinstance(value, str):
        m = _DURATION_RE.match(value)
        if m:
            number = float(m.group(1))
            unit = m.group(2)
            if unit is not None:
                unit = unit.lower()
                if unit not in _DURATION_SCALE:
                    unit = unit.rstrip("s") + "s" if unit.endswith("s") else unit
            return seconds_to_ns(number * _DURATION_SCALE[unit])
    raise ConfigError(f"{key}: cannot parse duration from {value!r}")


_PER_MINUTE_RE = re.compile(r"^\s*([0-9]*\.?[0-9]+)\s*(?:per\s+min(?:ute)?|/\s*min(?:ute)?)\s*$", re.I)
_PERCENT_RE = re.compile(r"^\s*([0-9]*\.?[0-9]+)\s*%\s*$")


def parse_sampling(value) -> SamplingSpec:
    """'8 per minute' -> budget; '20%' or a number in [0,1] -> fraction."""
    if isinstance(value, str):
        m = _PER_MINUTE_RE.match(value)
        if m:
            return SamplingSpec(per_minute=float(m.group(1)))
        m = _PERCENT_RE.match(value)
        if m:
            return SamplingSpec(fraction=float(m.group(1)) / 100.0)
        try:
            value = float(value)
        except ValueError:
            raise ConfigError(f"samples: cannot parse rate from {value!r}") from None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"samples: cannot parse rate from {value!r}")
    value = float(value)
    if value < 0:
        raise ConfigError("samples: rate must be >= 0")
    if value <= 1.0:
        return SamplingSpec(fraction=value)
    return SamplingSpec(per_minute=value)


def parse_addresses(value, key: str) -> tuple:
    """Split 'a; b; c' patterns; also accepts a YAML list."""
    if value is None:
        return ()
    if isinstance(value, str):
        parts = [p.strip() for p in value.split(";")]
        return tuple(p for p in parts if p)
    if isinstance(value, (list, tuple)):
        out = []
        for item in value:
            out.extend(parse_addresses(item, key))
        return tuple(out)
    raise ConfigError(f"{key}: expected address pattern string or list, got {value!r}")


_IPADDR_HEADER_RE = re.compile(r"^\s*IPAddresses\s*:?\s*$")
_IPADDR_ITEM_RE = re.compile(r"^\s*-\s+((?:front|back)\s*:.*)$")


def _normalize_document(text: str) -> str:
    """Fold the 'IPAddresses' block form into top-level front/back keys."""
    lines = text.splitlines()
    out = []
    in_block = False
    for line in lines:
        if _IPADDR_HEADER_RE.match(line):
            in_block = True
            continue
        if in_block:
            m = _IPADDR_ITEM_RE.match(line)
            if m:
                out.append(m.group(1))
                continue
            if line.strip():
                in_block = False
        out.append(line)
    return "\n".join(out)


def _load_yaml(text: str) -> dict:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        line = None
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            line = mark.line + 1
        raise ConfigError(f"malformed configuration document: {exc}", line=line) from None
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("configuration document must be a mapping")
    return doc


def _get(doc: dict, *names, default=None):
    for name in names:
        if name in doc:
            return doc[name]
    return default


def _parse_latency_model(doc, key: str, base: LatencyModel) -> LatencyModel:
    if doc is None:
        return base
    if not isinstance(doc, dict):
        raise ConfigError(f"{key}: expected a mapping")
    model = LatencyModel(
        distribution=str(_get(doc, "distribution", default=base.distribution)),
        mean_s=float(_get(doc, "mean", default=base.mean_s)),
        sigma=float(_get(doc, "sigma", default=base.sigma)),
        tail_probability=float(_get(doc, "tailProbability", default=base.tail_probability)),
        tail_alpha=float(_get(doc, "tailAlpha", default=base.tail_alpha)),
        tail_scale_s=float(_get(doc, "tailScale", default=base.tail_scale_s)),
    )
    if model.distribution not in ("lognormal", "pareto"):
        raise ConfigError(f"{key}: unknown distribution {model.distribution!r}")
    if model.mean_s <= 0:
        raise ConfigError(f"{key}: mean must be positive")
    return model


def _parse_profile(value, key: str) -> tuple:
    if value is None:
        return ()
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"{key}: expected a list of [fraction, value] pairs")
    out = []
    last = -1.0
    for pair in value:
        if not isinstance(pair, (list, tuple)) or len(pair) != 2:
            raise ConfigError(f"{key}: expected [fraction, value] pairs")
        frac, val = float(pair[0]), float(pair[1])
        if not 0.0 <= frac <= 1.0:
            raise ConfigError(f"{key}: fractions must lie in [0, 1]")
        if frac <= last:
            raise ConfigError(f"{key}: fractions must be strictly increasing")
        last = frac
        out.append((frac, val))
    return tuple(out)


def _parse_service(doc) -> ServiceConfig:
    svc = ServiceConfig()
    if doc is None:
        return svc
    if not isinstance(doc, dict):
        raise ConfigError("service: expected a mapping")
    svc.kind = str(_get(doc, "kind", default=svc.kind))
    if svc.kind not in ("sharded-search", "recommender"):
        raise ConfigError(f"service.kind: unknown service {svc.kind!r}")
    svc.shard_count = int(_get(doc, "shardCount", default=svc.shard_count))
    svc.docs_per_shard = int(_get(doc, "docsPerShard", default=svc.docs_per_shard))
    svc.score_skew = float(_get(doc, "scoreSkew", default=svc.score_skew))
    svc.answer_size = int(_get(doc, "answerSize", default=svc.answer_size))
    svc.middle_tier = bool(_get(doc, "middleTier", default=svc.middle_tier))
    default_timeout = svc.online_timeout_ns if svc.kind == "sharded-search" \
        else seconds_to_ns(DEFAULT_RECOMMENDER_TIMEOUT_S)
    raw_timeout = _get(doc, "onlineTimeout")
    svc.online_timeout_ns = parse_duration_ns(raw_timeout, "service.onlineTimeout") \
        if raw_timeout is not None else default_timeout
    svc.service_time = _parse_latency_model(_get(doc, "serviceTime"), "service.serviceTime", svc.service_time)
    svc.heavy_factor = float(_get(doc, "heavyFactor", default=svc.heavy_factor))
    svc.back_workers = int(_get(doc, "backWorkers", default=svc.back_workers))
    svc.middle_workers = int(_get(doc, "middleWorkers", default=svc.middle_workers))
    svc.front_workers = int(_get(doc, "frontWorkers", default=svc.front_workers))
    svc.small_db_latency = _parse_latency_model(
        _get(doc, "smallDbLatency"), "service.smallDbLatency", svc.small_db_latency)
    svc.large_db_latency = _parse_latency_model(
        _get(doc, "largeDbLatency"), "service.largeDbLatency", svc.large_db_latency)
    svc.telemetry = bool(_get(doc, "telemetry", default=svc.telemetry))
    raw_tel = _get(doc, "telemetryTimeout")
    if raw_tel is not None:
        svc.telemetry_timeout_ns = parse_duration_ns(raw_tel, "service.telemetryTimeout")
    svc.catalog_size = int(_get(doc, "catalogSize", default=svc.catalog_size))
    if svc.kind == "sharded-search":
        if svc.shard_count < 1:
            raise ConfigError("service.shardCount: must be >= 1")
        if svc.answer_size < 1:
            raise ConfigError("service.answerSize: must be >= 1")
        if svc.docs_per_shard < svc.answer_size:
            raise ConfigError("service.docsPerShard: must hold at least answerSize documents")
    if svc.online_timeout_ns <= 0:
        raise ConfigError("service.onlineTimeout: must be positive")
    return svc


def _parse_trace(doc) -> TraceConfig:
    trace = TraceConfig()
    if doc is None:
        return trace
    if not isinstance(doc, dict):
        raise ConfigError("trace: expected a mapping")
    raw = _get(doc, "duration")
    if raw is not None:
        trace.duration_ns = parse_duration_ns(raw, "trace.duration")
    trace.arrival_rate = float(_get(doc, "arrivalRate", default=trace.arrival_rate))
    util = _get(doc, "utilization")
    trace.utilization = float(util) if util is not None else None
    trace.high_priority_fraction = float(
        _get(doc, "highPriorityFraction", default=trace.high_priority_fraction))
    trace.heavy_fraction = float(_get(doc, "heavyFraction", default=trace.heavy_fraction))
    profile = _parse_profile(_get(doc, "diurnalProfile"), "trace.diurnalProfile")
    if profile:
        trace.diurnal_profile = profile
    trace.mix_shifts = _parse_profile(_get(doc, "mixShifts"), "trace.mixShifts")
    csv_path = _get(doc, "csvPath")
    trace.csv_path = str(csv_path) if csv_path is not None else None
    if trace.duration_ns <= 0:
        raise ConfigError("trace.duration: must be positive")
    if trace.arrival_rate < 0:
        raise ConfigError("trace.arrivalRate: must be >= 0")
    if not 0.0 <= trace.high_priority_fraction <= 1.0:
        raise ConfigError("trace.highPriorityFraction: must lie in [0, 1]")
    if not 0.0 <= trace.heavy_fraction <= 1.0:
        raise ConfigError("trace.heavyFraction: must lie in [0, 1]")
    if trace.utilization is not None and trace.utilization <= 0:
        raise ConfigError("trace.utilization: must be positive")
    return trace


def _parse_controller(doc) -> ControllerConfig:
    ctl = ControllerConfig()
    if doc is None:
        return ctl
    if not isinstance(doc, dict):
        raise ConfigError("controller: expected a mapping")
    ctl.target_quality = float(_get(doc, "targetQuality", default=ctl.target_quality))
    ctl.kp = float(_get(doc, "kp", default=ctl.kp))
    ctl.ki = float(_get(doc, "ki", default=ctl.ki))
    ctl.kd = float(_get(doc, "kd", default=ctl.kd))
    ctl.integral_limit = float(_get(doc, "integralLimit", default=ctl.integral_limit))
    ctl.evaluation_interval = int(_get(doc, "evaluationInterval", default=ctl.evaluation_interval))
    ctl.window_samples = int(_get(doc, "windowSamples", default=ctl.window_samples))
    ctl.proxy_target = float(_get(doc, "proxyTarget", default=ctl.proxy_target))
    if ctl.evaluation_interval < 1:
        raise ConfigError("controller.evaluationInterval: must be >= 1")
    if ctl.window_samples < 1:
        raise ConfigError("controller.windowSamples: must be >= 1")
    if not 0.0 <= ctl.target_quality <= 1.0:
        raise ConfigError("controller.targetQuality: must lie in [0, 1]")
    return ctl


def _parse_tuning(doc) -> TuningConfig:
    tun = TuningConfig()
    if doc is None:
        return tun
    if not isinstance(doc, dict):
        raise ConfigError("tuning: expected a mapping")
    duration_keys = {
        "netLatency": "net_latency_ns",
        "datagramLatency": "datagram_latency_ns",
        "datagramHandlingCost": "datagram_handling_cost_ns",
        "datagramSendCost": "datagram_send_cost_ns",
        "recordWriteCost": "record_write_cost_ns",
        "cacheReadLatency": "cache_read_latency_ns",
        "dispatchCost": "dispatch_cost_ns",
        "aggregateCost": "aggregate_cost_ns",
        "settleWindow": "settle_window_ns",
    }
    for key, attr in duration_keys.items():
        raw = _get(doc, key)
        if raw is not None:
            setattr(tun, attr, parse_duration_ns(raw, f"tuning.{key}"))
    tun.datagram_loss = float(_get(doc, "datagramLoss", default=tun.datagram_loss))
    tun.front_margin_fraction = float(
        _get(doc, "frontMarginFraction", default=tun.front_margin_fraction))
    tun.low_samples_factor = float(_get(doc, "lowSamplesFactor", default=tun.low_samples_factor))
    tun.toggle_factor = float(_get(doc, "toggleFactor", default=tun.toggle_factor))
    if not 0.0 <= tun.datagram_loss <= 1.0:
        raise ConfigError("tuning.datagramLoss: must lie in [0, 1]")
    if tun.toggle_factor < 1.0:
        raise ConfigError("tuning.toggleFactor: must be >= 1")
    return tun


def parse_config(text: str) -> RunConfig:
    """Parse and validate a configuration document. Raises ConfigError."""
    doc = _load_yaml(_normalize_document(text))

    # Legacy nested form: IPAddresses parsed as a real YAML key.
    nested = doc.pop("IPAddresses", None)
    if isinstance(nested, list):
        for item in nested:
            if isinstance(item, dict):
                doc.update(item)
    elif isinstance(nested, dict):
        doc.update(nested)

    cfg = RunConfig()
    cfg.front_addresses = parse_addresses(_get(doc, "front"), "front")
    cfg.back_addresses = parse_addresses(_get(doc, "back"), "back")
    raw_samples = _get(doc, "samples")
    if raw_samples is not None:
        cfg.sampling = parse_sampling(raw_samples)
    raw = _get(doc, "recordTimeout")
    if raw is not None:
        cfg.record_timeout_ns = parse_duration_ns(raw, "recordTimeout")
    raw = _get(doc, "propagateTimeout")
    if raw is not None:
        cfg.propagate_timeout_ns = parse_duration_ns(raw, "propagateTimeout")
    quality_fn = _get(doc, "answerQualityFunction")
    if quality_fn is not None:
        cfg.quality_function = str(quality_fn)
        if cfg.quality_function == "default":
            cfg.quality_function = "tpr"
    raw = _get(doc, "cacheCapacityBytes")
    if raw is not None:
        cfg.cache_capacity_bytes = int(raw)
    raw = _get(doc, "cacheTtlSeconds")
    if raw is not None:
        cfg.cache_ttl_ns = parse_duration_ns(raw, "cacheTtlSeconds")
    raw = _get(doc, "rngSeed")
    if raw is not None:
        cfg.rng_seed = int(raw)
    raw = _get(doc, "timeMode")
    if raw is not None:
        cfg.time_mode = str(raw).lower()

    cfg.service = _parse_service(_get(doc, "service"))
    cfg.trace = _parse_trace(_get(doc, "trace"))
    cfg.controller = _parse_controller(_get(doc, "controller"))
    cfg.tuning = _parse_tuning(_get(doc, "tuning"))

    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    if not cfg.front_addresses:
        raise ConfigError("front: at least one front address is required")
    if cfg.record_timeout_ns <= 0 or cfg.propagate_timeout_ns <= 0:
        raise ConfigError("timeouts must be positive")
    if cfg.record_timeout_ns <= cfg.propagate_timeout_ns:
        raise ConfigError("recordTimeout must exceed propagateTimeout")
    if cfg.sampling.per_minute is not None and cfg.sampling.per_minute < 0:
        raise ConfigError("samples: rate must be >= 0")
    if cfg.sampling.fraction is not None and not 0.0 <= cfg.sampling.fraction <= 1.0:
        raise ConfigError("samples: fractional rate must lie in [0, 1]")
    if cfg.cache_capacity_bytes <= 0:
        raise ConfigError("cacheCapacityBytes: must be positive")
    if cfg.cache_ttl_ns <= 0:
        raise ConfigError("cacheTtlSeconds: must be positive")
    if cfg.cache_ttl_ns <= cfg.record_timeout_ns:
        raise ConfigError("cacheTtlSeconds: must exceed recordTimeout")
    if cfg.time_mode not in ("virtual", "real"):
        raise ConfigError("timeMode: must be 'virtual' or 'real'")


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
