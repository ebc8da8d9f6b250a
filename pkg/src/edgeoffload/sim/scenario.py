"""Scenario files: JSON documents describing a cluster, a job trace, latency
profiles, offload request streams, injected failures and pricing."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from .. import presets
from ..domain import JobSpec, ResourceVector, WorkerDescriptor, fits, total_capacity
from ..errors import EdgeOffloadError, ValidationError
from ..scheduler import SchedulerConfig
from .latency import LatencyProfile

_TOP_LEVEL = {
    "name", "seed", "policy", "scheduler", "cluster", "jobs", "profiles", "profile_presets",
    "offload", "failures", "migrations", "checkpoint_interval_s", "pricing", "tracking",
    "description", "check_invariants",
}


@dataclass(frozen=True)
class OffloadStream:
    profile: str
    count: int
    start_s: float = 0.0
    interval_s: float = 1.0
    payload_bytes: int = presets.PAYLOAD_BYTES


@dataclass(frozen=True)
class WorkerFailure:
    time: float
    worker_id: str
    recover_at: Optional[float] = None


@dataclass(frozen=True)
class Migration:
    time: float
    job_id: str


@dataclass(frozen=True)
class TrackingConfig:
    walk_speed_mps: float = presets.WALK_SPEED_MPS
    fov_limit_m: float = presets.FOV_LIMIT_M
    profiles: tuple = ("tracking_cloud", "tracking_edge")


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    seed: int = 0
    policy: str = "st-las"
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    workers: list = field(default_factory=list)
    jobs: list = field(default_factory=list)
    profiles: dict = field(default_factory=dict)
    offload: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    migrations: list = field(default_factory=list)
    checkpoint_interval_s: Optional[float] = None
    pricing: Optional[dict] = None
    tracking: Optional[TrackingConfig] = None
    check_invariants: bool = True

    @property
    def total_capacity(self) -> ResourceVector:
        return total_capacity(w.capacity for w in self.workers)

    def validate(self) -> None:
        problems = []
        ids = [w.worker_id for w in self.workers]
        if len(set(ids)) != len(ids):
            problems.append("cluster.workers: duplicate worker_id")
        capacity = self.total_capacity
        seen = set()
        for i, job in enumerate(self.jobs):
            if job.job_id in seen:
                problems.append(f"jobs[{i}].job_id: duplicate {job.job_id!r}")
            seen.add(job.job_id)
            if job.true_duration_s is None:
                problems.append(f"jobs[{i}].true_duration_s: required for simulation")
            if not fits(job.gang_demand, capacity):
                problems.append(f"jobs[{i}].required: gang demand exceeds total cluster capacity")
        for i, stream in enumerate(self.offload):
            if stream.profile not in self.profiles:
                problems.append(f"offload[{i}].profile: unknown profile {stream.profile!r}")
        for i, fail in enumerate(self.failures):
            if fail.worker_id not in ids:
                problems.append(f"failures[{i}].worker_id: unknown worker {fail.worker_id!r}")
            if fail.recover_at is not None and fail.recover_at <= fail.time:
                problems.append(f"failures[{i}].recover_at: must be after time")
        for i, mig in enumerate(self.migrations):
            if mig.job_id not in seen:
                problems.append(f"migrations[{i}].job_id: unknown job {mig.job_id!r}")
        if self.tracking is not None:
            for name in self.tracking.profiles:
                if name not in self.profiles:
                    problems.append(f"tracking.profiles: unknown profile {name!r}")
        if problems:
            raise ValidationError(problems)


class _Collector:
    """Accumulates field-level problems instead of failing on the first."""

    def __init__(self):
        self.problems = []

    def run(self, where: str, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ValidationError as exc:
            self.problems.extend(f"{where}: {p}" for p in exc.problems)
        except KeyError as exc:
            self.problems.append(f"{where}: missing field {exc.args[0]!r}")
        except (TypeError, ValueError, EdgeOffloadError) as exc:
            self.problems.append(f"{where}: {exc}")
        return None


def _expect_list(data, key):
    value = data.get(key, [])
    if not isinstance(value, list):
        raise ValidationError(f"{key}: expected a list")
    return value


def parse_scenario(text: str, source: str = "<scenario>") -> ScenarioConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ValidationError(f"{source}: top level must be an object")
    return scenario_from_dict(data)


def scenario_from_dict(data: dict) -> ScenarioConfig:
    c = _Collector()
    unknown = set(data) - _TOP_LEVEL
    if unknown:
        c.problems.append(f"unknown top-level fields: {sorted(unknown)}")

    sc = ScenarioConfig(
        name=str(data.get("name", "scenario")),
        seed=data.get("seed", 0),
        policy=data.get("policy", "st-las"),
        checkpoint_interval_s=data.get("checkpoint_interval_s"),
        check_invariants=bool(data.get("check_invariants", True)),
    )
    if not isinstance(sc.seed, int):
        c.problems.append("seed: must be an integer")
    if sc.checkpoint_interval_s is not None and not (
        isinstance(sc.checkpoint_interval_s, (int, float)) and sc.checkpoint_interval_s > 0
    ):
        c.problems.append("checkpoint_interval_s: must be > 0")

    sched = c.run("scheduler", SchedulerConfig.from_dict, data.get("scheduler", {}))
    if sched is not None:
        sc.scheduler = sched

    cluster = data.get("cluster", {})
    workers = c.run("cluster.workers", _expect_list, cluster, "workers") or []
    for i, w in enumerate(workers):
        wd = c.run(f"cluster.workers[{i}]", WorkerDescriptor.from_dict, w)
        if wd is not None:
            sc.workers.append(wd)

    jobs = c.run("jobs", _expect_list, data, "jobs") or []
    for i, j in enumerate(jobs):
        spec = c.run(f"jobs[{i}]", JobSpec.from_dict, j)
        if spec is not None:
            sc.jobs.append(spec)

    for group in data.get("profile_presets", []):
        factory = presets.PRESET_GROUPS.get(group)
        if factory is None:
            c.problems.append(f"profile_presets: unknown group {group!r}")
        else:
            sc.profiles.update(factory())
    for name, p in sorted(data.get("profiles", {}).items()):
        prof = c.run(f"profiles.{name}", lambda p=p: LatencyProfile(**p))
        if prof is not None:
            sc.profiles[name] = prof

    for i, o in enumerate(c.run("offload", _expect_list, data, "offload") or []):
        s = c.run(f"offload[{i}]", lambda o=o: OffloadStream(**o))
        if s is not None:
            if not isinstance(s.count, int) or s.count < 0:
                c.problems.append(f"offload[{i}].count: must be an integer >= 0")
            elif s.interval_s <= 0 or s.start_s < 0 or s.payload_bytes < 0:
                c.problems.append(f"offload[{i}]: start_s/payload_bytes must be >= 0 and interval_s > 0")
            else:
                sc.offload.append(s)

    for i, f in enumerate(c.run("failures", _expect_list, data, "failures") or []):
        fail = c.run(f"failures[{i}]", lambda f=f: WorkerFailure(**f))
        if fail is not None:
            sc.failures.append(fail)
    for i, m in enumerate(c.run("migrations", _expect_list, data, "migrations") or []):
        mig = c.run(f"migrations[{i}]", lambda m=m: Migration(**m))
        if mig is not None:
            sc.migrations.append(mig)

    if "pricing" in data:
        sc.pricing = data["pricing"]
    if "tracking" in data:
        t = dict(data["tracking"])
        if "profiles" in t:
            t["profiles"] = tuple(t["profiles"])
        sc.tracking = c.run("tracking", lambda: TrackingConfig(**t))

    if c.problems:
        raise ValidationError(c.problems)
    sc.validate()
    return sc


def bundled_names() -> list:
    root = resources.files("edgeoffload") / "fixtures" / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_scenario(path_or_name: str) -> ScenarioConfig:
    """Load a scenario file, or a bundled scenario by bare name."""
    path = Path(path_or_name)
    if path.exists():
        return parse_scenario(path.read_text(encoding="utf-8"), source=str(path))
    bundled = resources.files("edgeoffload") / "fixtures" / "scenarios" / f"{path_or_name}.json"
    if bundled.is_file():
        return parse_scenario(bundled.read_text(encoding="utf-8"), source=path_or_name)
    raise ValidationError(f"no scenario file or bundled scenario named {path_or_name!r}")
