"""Value types and resource arithmetic shared by the scheduler, placement,
cluster and simulator modules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Optional

from .errors import ConfigurationError, DomainError, ResourceError

DIMENSIONS = ("gpus", "cpu_cores", "memory_mb", "disk_mb", "bandwidth_mbps")

# short names accepted in config files
_ALIASES = {
    "gpu": "gpus",
    "gpus": "gpus",
    "cpu": "cpu_cores",
    "cpus": "cpu_cores",
    "cpu_cores": "cpu_cores",
    "mem": "memory_mb",
    "memory": "memory_mb",
    "memory_mb": "memory_mb",
    "disk": "disk_mb",
    "disk_mb": "disk_mb",
    "bw": "bandwidth_mbps",
    "bandwidth": "bandwidth_mbps",
    "bandwidth_mbps": "bandwidth_mbps",
}

DEFAULT_WEIGHTS = {
    "gpus": 0.5,
    "cpu_cores": 0.25,
    "memory_mb": 0.25,
    "disk_mb": 0.0,
    "bandwidth_mbps": 0.0,
}

_EPS = 1e-9


def canonical_dimension(name: str) -> str:
    try:
        return _ALIASES[name]
    except KeyError:
        raise DomainError(f"unknown resource dimension {name!r}") from None


@dataclass(frozen=True)
class ResourceVector:
    gpus: float = 0
    cpu_cores: float = 0
    memory_mb: float = 0
    disk_mb: float = 0
    bandwidth_mbps: float = 0

    def __post_init__(self):
        for d in DIMENSIONS:
            v = getattr(self, d)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or math.isnan(v):
                raise DomainError(f"{d} must be a number, got {v!r}")
            if v < 0:
                raise ResourceError(f"{d} must be >= 0, got {v}")

    @classmethod
    def from_dict(cls, data: Mapping[str, float]) -> "ResourceVector":
        kwargs = {}
        for key, value in data.items():
            kwargs[canonical_dimension(key)] = value
        return cls(**kwargs)

    @classmethod
    def zero(cls) -> "ResourceVector":
        return cls()

    def to_dict(self) -> dict:
        return {d: getattr(self, d) for d in DIMENSIONS}

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, d) for d in DIMENSIONS)

    def __add__(self, other: "ResourceVector") -> "ResourceVector":
        return ResourceVector(*(a + b for a, b in zip(self.as_tuple(), other.as_tuple())))

    def __sub__(self, other: "ResourceVector") -> "ResourceVector":
        out = []
        for d, a, b in zip(DIMENSIONS, self.as_tuple(), other.as_tuple()):
            v = a - b
            if v < 0:
                # absorb float residue from repeated add/sub
                if v > -_EPS * max(1.0, abs(a), abs(b)):
                    v = 0
                else:
                    raise ResourceError(f"subtraction makes {d} negative ({a} - {b})")
            out.append(v)
        return ResourceVector(*out)

    def scale(self, k: float) -> "ResourceVector":
        if k < 0:
            raise DomainError("scale factor must be >= 0")
        return ResourceVector(*(k * v for v in self.as_tuple()))

    def max_with(self, other: "ResourceVector") -> "ResourceVector":
        return ResourceVector(*(max(a, b) for a, b in zip(self.as_tuple(), other.as_tuple())))

    def is_zero(self) -> bool:
        return all(v == 0 for v in self.as_tuple())


def fits(demand: ResourceVector, free: ResourceVector) -> bool:
    """True iff every component of ``demand`` is at most the matching
    component of ``free``."""
    return all(a <= b + _EPS * max(1.0, abs(b)) for a, b in zip(demand.as_tuple(), free.as_tuple()))


def validate_weights(weights: Mapping[str, float]) -> dict:
    out = {d: 0.0 for d in DIMENSIONS}
    for key, w in weights.items():
        if w < 0:
            raise ConfigurationError(f"weight for {key} must be >= 0")
        out[canonical_dimension(key)] = float(w)
    total = sum(out.values())
    if abs(total - 1.0) > 1e-9:
        raise ConfigurationError(f"weights must sum to 1, got {total}")
    return out


def normalized_demand(
    demand: ResourceVector,
    cluster_capacity: ResourceVector,
    weights: Optional[Mapping[str, float]] = None,
) -> float:
    """Weighted sum of the fraction of cluster capacity ``demand`` takes in
    each dimension."""
    w = validate_weights(DEFAULT_WEIGHTS if weights is None else weights)
    total = 0.0
    for d in DIMENSIONS:
        if w[d] == 0:
            continue
        cap = getattr(cluster_capacity, d)
        if cap <= 0:
            raise ConfigurationError(f"cluster capacity for weighted dimension {d} is zero")
        total += w[d] * (getattr(demand, d) / cap)
    return total


def skewness_factor(layer_param_sizes: Iterable[float]) -> float:
    """Coefficient of variation (population SD / mean) of per-layer
    parameter counts."""
    xs = [float(x) for x in layer_param_sizes]
    if not xs:
        raise DomainError("skewness of an empty layer list is undefined")
    if any(x < 0 for x in xs):
        raise DomainError("layer parameter sizes must be >= 0")
    mean = math.fsum(xs) / len(xs)
    if mean <= 0:
        raise DomainError("skewness undefined for zero mean")
    var = math.fsum((x - mean) ** 2 for x in xs) / len(xs)
    return math.sqrt(var) / mean


class Site(str, Enum):
    CLOUD = "cloud"
    ONPREM = "onprem"


class Device(str, Enum):
    GPU = "gpu"
    CPU = "cpu"


@dataclass(frozen=True)
class ModelProfile:
    model_name: str
    model_size_mb: float = 0.0
    layer_param_sizes: tuple = ()
    skewness: float = 0.0
    # keys are (site, device) string pairs, e.g. ("onprem", "gpu")
    service_time_ms: Mapping[tuple, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layer_param_sizes", tuple(self.layer_param_sizes))
        if self.layer_param_sizes:
            object.__setattr__(self, "skewness", skewness_factor(self.layer_param_sizes))
        elif self.skewness < 0:
            raise DomainError("skewness must be >= 0")
        times = {}
        for key, ms in dict(self.service_time_ms).items():
            site, device = key
            site, device = Site(site).value, Device(device).value
            if not ms > 0:
                raise DomainError(f"service time for {site}/{device} must be > 0")
            times[(site, device)] = float(ms)
        object.__setattr__(self, "service_time_ms", times)

    def __hash__(self):
        return hash((self.model_name, self.model_size_mb, self.layer_param_sizes, self.skewness,
                     tuple(sorted(self.service_time_ms.items()))))

    def service_time(self, site: str, device: str) -> float:
        try:
            return self.service_time_ms[(Site(site).value, Device(device).value)]
        except KeyError:
            raise ConfigurationError(
                f"model {self.model_name} has no service time for {site}/{device}"
            ) from None

    def to_dict(self) -> dict:
        return {
            "model_name": self.model_name,
            "model_size_mb": self.model_size_mb,
            "layer_param_sizes": list(self.layer_param_sizes),
            "skewness": self.skewness,
            "service_time_ms": {f"{s}/{d}": ms for (s, d), ms in sorted(self.service_time_ms.items())},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelProfile":
        times = {}
        for key, ms in dict(data.get("service_time_ms", {})).items():
            site, _, device = key.partition("/")
            times[(site, device)] = ms
        return cls(
            model_name=data["model_name"],
            model_size_mb=data.get("model_size_mb", 0.0),
            layer_param_sizes=tuple(data.get("layer_param_sizes", ())),
            skewness=data.get("skewness", 0.0),
            service_time_ms=times,
        )


class JobKind(str, Enum):
    SERVING = "serving"
    TRAINING = "training"


class JobStatus(str, Enum):
    QUEUED = "queued"
    RUNNING = "running"
    PREEMPTING = "preempting"
    CHECKPOINTED = "checkpointed"
    COMPLETED = "completed"
    FAILED = "failed"


class QueueLevel(int, Enum):
    Q1 = 1
    Q2 = 2


@dataclass(frozen=True)
class JobSpec:
    job_id: str
    required: ResourceVector
    model: ModelProfile
    kind: JobKind = JobKind.TRAINING
    gang_size: int = 1
    locality_tags: frozenset = frozenset()
    latency_threshold_ms: Optional[float] = None
    arrival_time: float = 0.0
    # ground truth for the simulator; stripped before the scheduler sees a spec
    true_duration_s: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", JobKind(self.kind))
        object.__setattr__(self, "locality_tags", frozenset(self.locality_tags))
        if not isinstance(self.gang_size, int) or self.gang_size < 1:
            raise DomainError(f"gang_size must be an integer >= 1, got {self.gang_size!r}")
        if self.arrival_time < 0:
            raise DomainError("arrival_time must be >= 0")
        if self.true_duration_s is not None and self.true_duration_s <= 0:
            raise DomainError("true_duration_s must be > 0")

    @property
    def gang_demand(self) -> ResourceVector:
        return self.required.scale(self.gang_size)

    def without_ground_truth(self) -> "JobSpec":
        if self.true_duration_s is None:
            return self
        return replace(self, true_duration_s=None)

    def to_dict(self) -> dict:
        out = {
            "job_id": self.job_id,
            "kind": self.kind.value,
            "required": self.required.to_dict(),
            "gang_size": self.gang_size,
            "model": self.model.to_dict(),
            "locality_tags": sorted(self.locality_tags),
            "latency_threshold_ms": self.latency_threshold_ms,
            "arrival_time": self.arrival_time,
        }
        if self.true_duration_s is not None:
            out["true_duration_s"] = self.true_duration_s
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "JobSpec":
        model = data.get("model", {"model_name": data.get("model_name", "synthetic")})
        if isinstance(model, str):
            model = {"model_name": model}
        return cls(
            job_id=str(data["job_id"]),
            kind=data.get("kind", "training"),
            required=ResourceVector.from_dict(data.get("required", {})),
            gang_size=data.get("gang_size", 1),
            model=ModelProfile.from_dict(model),
            locality_tags=frozenset(data.get("locality_tags", ())),
            latency_threshold_ms=data.get("latency_threshold_ms"),
            arrival_time=data.get("arrival_time", 0.0),
            true_duration_s=data.get("true_duration_s"),
        )


@dataclass
class JobState:
    spec: JobSpec
    status: JobStatus = JobStatus.QUEUED
    queue_level: QueueLevel = QueueLevel.Q1
    attained_service: float = 0.0
    executed_time_s: float = 0.0
    last_dispatch_time: Optional[float] = None
    waiting_since: float = 0.0
    placement: list = field(default_factory=list)
    checkpoint_version: int = 0
    # normalized gang demand, frozen at arrival so service never shrinks
    # when cluster capacity changes
    normalized_demand: float = 0.0
    # service at the moment the job (re)entered Q1
    demotion_base: float = 0.0
    checkpoint_service: float = 0.0
    checkpoint_executed_s: float = 0.0
    completion_time: Optional[float] = None
    # instant up to which executed_time_s has been accounted
    progress_time: Optional[float] = None

    @property
    def job_id(self) -> str:
        return self.spec.job_id

    def sort_key(self) -> tuple:
        return (self.attained_service, self.spec.arrival_time, self.spec.job_id)

    def workers(self) -> list:
        return sorted({wid for wid, _ in self.placement})


@dataclass(frozen=True)
class WorkerDescriptor:
    worker_id: str
    capacity: ResourceVector
    tags: frozenset = frozenset()
    address: str = ""

    def __post_init__(self):
        object.__setattr__(self, "tags", frozenset(self.tags))
        if not any(v > 0 for v in self.capacity.as_tuple()):
            raise DomainError(f"worker {self.worker_id} has no positive capacity")

    def to_dict(self) -> dict:
        return {
            "worker_id": self.worker_id,
            "capacity": self.capacity.to_dict(),
            "tags": sorted(self.tags),
            "address": self.address,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "WorkerDescriptor":
        return cls(
            worker_id=str(data["worker_id"]),
            capacity=ResourceVector.from_dict(data["capacity"]),
            tags=frozenset(data.get("tags", ())),
            address=data.get("address", ""),
        )


@dataclass
class WorkerRecord:
    """A worker as seen by the control plane: capacity plus live accounting."""

    descriptor: WorkerDescriptor
    allocated: ResourceVector = field(default_factory=ResourceVector)
    running_jobs: set = field(default_factory=set)
    last_heartbeat: float = 0.0
    reported_utilization: dict = field(default_factory=dict)
    alive: bool = True

    @property
    def worker_id(self) -> str:
        return self.descriptor.worker_id

    @property
    def capacity(self) -> ResourceVector:
        return self.descriptor.capacity

    @property
    def tags(self) -> frozenset:
        return self.descriptor.tags

    @property
    def free(self) -> ResourceVector:
        return self.capacity - self.allocated

    def snapshot(self) -> "WorkerRecord":
        return WorkerRecord(
            descriptor=self.descriptor,
            allocated=self.allocated,
            running_jobs=set(self.running_jobs),
            last_heartbeat=self.last_heartbeat,
            reported_utilization=dict(self.reported_utilization),
            alive=self.alive,
        )


def total_capacity(workers: Iterable) -> ResourceVector:
    total = ResourceVector()
    for w in workers:
        cap = w.capacity if hasattr(w, "capacity") else w
        total = total + cap
    return total
