"""Round-trip latency model and the person-tracking feasibility check."""

from __future__ import annotations

import math
import random
import statistics
from dataclasses import dataclass
from typing import Sequence

from ..errors import ConfigurationError

MEASURED = "measured"
COMPOSITE = "composite"


@dataclass(frozen=True)
class LatencyProfile:
    """Either a measured mean round trip, or a composite of transfer,
    propagation and service terms. Both are jittered by a uniform
    multiplicative factor in ``[1 - jitter, 1 + jitter]``."""

    mode: str = MEASURED
    measured_rtt_ms: float = 0.0
    uplink_mbps: float = 0.0
    downlink_mbps: float = 0.0
    propagation_ms: float = 0.0
    service_time_ms: float = 0.0
    result_bytes: int = 0
    jitter_fraction: float = 0.0

    def __post_init__(self):
        if self.mode not in (MEASURED, COMPOSITE):
            raise ConfigurationError(f"unknown latency mode {self.mode!r}")
        for name in ("measured_rtt_ms", "uplink_mbps", "downlink_mbps", "propagation_ms",
                     "service_time_ms", "result_bytes", "jitter_fraction"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or value < 0 or math.isnan(value):
                raise ConfigurationError(f"{name} must be a number >= 0")
        if self.mode == MEASURED and self.measured_rtt_ms <= 0:
            raise ConfigurationError("measured_rtt_ms must be > 0 in measured mode")
        if self.jitter_fraction > 1:
            raise ConfigurationError("jitter_fraction must be <= 1")

    @property
    def mean_ms(self) -> float:
        """Nominal round trip for a zero-byte payload in composite mode."""
        if self.mode == MEASURED:
            return self.measured_rtt_ms
        return self.nominal_ms(0)

    def nominal_ms(self, payload_bytes: int) -> float:
        if self.mode == MEASURED:
            return self.measured_rtt_ms
        return (
            _transfer_ms(payload_bytes, self.uplink_mbps, "uplink")
            + self.propagation_ms
            + self.service_time_ms
            + _transfer_ms(self.result_bytes, self.downlink_mbps, "downlink")
            + self.propagation_ms
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _transfer_ms(nbytes: int, mbps: float, direction: str) -> float:
    if nbytes == 0:
        return 0.0
    if mbps <= 0:
        raise ConfigurationError(f"{direction} rate is zero but {nbytes} bytes must be sent")
    return nbytes * 8 / (mbps * 1e6) * 1000.0


def roundtrip_latency(profile: LatencyProfile, payload_bytes: int, rng: random.Random) -> float:
    """One sampled round trip in milliseconds. Always consumes exactly one
    draw from ``rng`` so request streams stay aligned across profiles."""
    u = rng.uniform(-1.0, 1.0)
    base = profile.nominal_ms(payload_bytes)
    if profile.jitter_fraction == 0:
        return base
    return base * (1.0 + profile.jitter_fraction * u)


@dataclass(frozen=True)
class RttStats:
    count: int
    mean_ms: float
    variance_ms2: float
    p95_ms: float


def rtt_stats(samples: Sequence[float]) -> RttStats:
    """Mean, population variance and nearest-rank 95th percentile."""
    if not samples:
        return RttStats(0, 0.0, 0.0, 0.0)
    xs = sorted(samples)
    rank = max(1, math.ceil(0.95 * len(xs)))
    return RttStats(
        count=len(xs),
        mean_ms=statistics.fmean(samples),
        variance_ms2=statistics.pvariance(samples),
        p95_ms=xs[rank - 1],
    )


@dataclass(frozen=True)
class TrackingResult:
    rtt_ms: float
    displacement_m: float
    feasible: bool


def tracking_feasibility(walk_speed_mps: float, rtt_ms: float, fov_limit_m: float) -> TrackingResult:
    """How far a walking target moves while one inference is in flight, and
    whether it stays inside the camera's usable field of view."""
    if walk_speed_mps < 0 or rtt_ms < 0 or fov_limit_m <= 0:
        raise ConfigurationError("tracking inputs must be non-negative with a positive limit")
    displacement = walk_speed_mps * rtt_ms / 1000.0
    return TrackingResult(rtt_ms, displacement, displacement <= fov_limit_m)
