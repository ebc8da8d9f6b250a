"""Control-plane core: leader lease, durable checkpoints, worker membership,
heartbeat liveness, failure rollback, migration and inference routing.

``ControlPlane`` is a synchronous state machine with an injected clock. The
asyncio nodes in ``node.py`` funnel every mutation through it from a single
actor task, and deliver the ``Outbound`` messages it returns.
"""

from __future__ import annotations

import fcntl
import json
import logging
import os
import re
import struct
import time
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional
from urllib.parse import quote, unquote

from . import presets
from .domain import JobKind, JobSpec, JobStatus, ResourceVector, WorkerDescriptor
from .errors import ConfigurationError, ConsistencyError, NoCapacityError, NotLeaderError
from .placement import PlacementPlan, place_gang, worker_load
from .protocol import Message, MessageType, b64encode
from .scheduler import (
    COMPLETE,
    DISPATCH,
    MIGRATE,
    PREEMPT,
    REQUEUE,
    RESUME,
    Scheduler,
    SchedulerConfig,
)
from .sim.latency import LatencyProfile

log = logging.getLogger(__name__)

HEARTBEAT_PERIOD_S = 2.0
MISS_TOLERANCE = 3
LEASE_DURATION_S = 6.0
FORWARD_TIMEOUT_S = 10.0
HOST_TAG_PREFIX = "host:"


def host_tag(worker_id: str) -> str:
    """Implicit tag every worker carries; pins per-worker serving jobs."""
    return HOST_TAG_PREFIX + worker_id


def serving_job_id(model_name: str, worker_id: str) -> str:
    return f"serve:{model_name}@{worker_id}"


@dataclass(frozen=True)
class ClusterConfig:
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    heartbeat_period_s: float = HEARTBEAT_PERIOD_S
    miss_tolerance: int = MISS_TOLERANCE
    lease_duration_s: float = LEASE_DURATION_S
    forward_timeout_s: float = FORWARD_TIMEOUT_S
    # demand of a serving job for a model without a bundled size profile;
    # bundled models reserve their own size in memory
    serving_demand: ResourceVector = field(default_factory=lambda: ResourceVector(memory_mb=256))

    def __post_init__(self):
        if self.heartbeat_period_s <= 0 or self.lease_duration_s <= 0 or self.forward_timeout_s <= 0:
            raise ConfigurationError("periods and timeouts must be > 0")
        if not isinstance(self.miss_tolerance, int) or self.miss_tolerance < 1:
            raise ConfigurationError("miss_tolerance must be an integer >= 1")

    @property
    def failure_timeout_s(self) -> float:
        return self.heartbeat_period_s * self.miss_tolerance

    @classmethod
    def from_dict(cls, data: dict) -> "ClusterConfig":
        known = {"scheduler", "heartbeat_period_s", "miss_tolerance", "lease_duration_s",
                 "forward_timeout_s", "serving_demand"}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown server config fields {sorted(unknown)}")
        kwargs = {k: v for k, v in data.items() if k not in ("scheduler", "serving_demand")}
        if "scheduler" in data:
            kwargs["scheduler"] = SchedulerConfig.from_dict(data["scheduler"])
        if "serving_demand" in data:
            kwargs["serving_demand"] = ResourceVector.from_dict(data["serving_demand"])
        return cls(**kwargs)


# -- leader lease ----------------------------------------------------------

@dataclass(frozen=True)
class LeaderLease:
    holder_id: str
    term: int
    expires_at: float
    address: str = ""

    def to_dict(self) -> dict:
        return {"holder_id": self.holder_id, "term": self.term, "expires_at": self.expires_at,
                "address": self.address}

    @classmethod
    def from_dict(cls, data: dict) -> "LeaderLease":
        return cls(str(data["holder_id"]), int(data["term"]), float(data["expires_at"]),
                   str(data.get("address", "")))


class LeaseManager:
    """Single-leader lease persisted in ``<state_dir>/leader.lease``.

    Read-modify-write happens under an flock on a sibling lock file and the
    lease itself is replaced by atomic rename. A holder renews within its
    term; anyone else may take a new term only once the lease has expired.
    """

    def __init__(self, state_dir, holder_id: str, duration_s: float = LEASE_DURATION_S,
                 clock: Callable[[], float] = time.time, address: str = ""):
        self.dir = Path(state_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.path = self.dir / "leader.lease"
        self.lock_path = self.dir / "leader.lease.lock"
        self.holder_id = holder_id
        self.duration_s = duration_s
        self.clock = clock
        self.address = address
        self.current: Optional[LeaderLease] = None

    @contextmanager
    def _locked(self):
        with open(self.lock_path, "a+") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def read(self) -> Optional[LeaderLease]:
        try:
            return LeaderLease.from_dict(json.loads(self.path.read_text(encoding="utf-8")))
        except FileNotFoundError:
            return None
        except (ValueError, KeyError, TypeError) as exc:
            raise ConsistencyError(f"corrupt lease file {self.path}: {exc}") from None

    def _write(self, lease: LeaderLease) -> None:
        tmp = self.path.with_name(f".{self.path.name}.{os.getpid()}.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(lease.to_dict(), fh)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.path)

    def acquire(self) -> Optional[LeaderLease]:
        """Renew or take the lease; None if another holder's lease is live."""
        with self._locked():
            cur = self.read()
            now = self.clock()
            if cur is not None and now < cur.expires_at:
                if cur.holder_id != self.holder_id:
                    self.current = None
                    return None
                new = replace(cur, expires_at=now + self.duration_s, address=self.address)
            else:
                term = cur.term + 1 if cur is not None else 1
                new = LeaderLease(self.holder_id, term, now + self.duration_s, self.address)
            self._write(new)
            self.current = new
            return new

    def release(self) -> None:
        with self._locked():
            cur = self.read()
            if cur is not None and cur.holder_id == self.holder_id:
                self._write(replace(cur, expires_at=min(cur.expires_at, self.clock())))
        self.current = None

    def is_leader(self) -> bool:
        return self.current is not None and self.clock() < self.current.expires_at

    def leader_hint(self) -> Optional[str]:
        cur = self.read()
        if cur is None or self.clock() >= cur.expires_at:
            return None
        return cur.address or cur.holder_id


# -- durable checkpoints ---------------------------------------------------

@dataclass(frozen=True)
class CheckpointRecord:
    job_id: str
    version: int
    attained_service: float
    executed_time_s: float
    blob: bytes
    created_at: float


_CKPT_NAME = re.compile(r"^(?P<job>.+)\.v(?P<version>\d+)\.ckpt$")
_BLOB_LEN = struct.Struct(">I")


class CheckpointStore:
    """``<dir>/<job_id>.v<version>.ckpt``: one JSON header line, a 4-byte
    big-endian blob length, then the blob. Written to a temp name and
    renamed so readers never see a partial record."""

    def __init__(self, directory):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)

    def _path(self, job_id: str, version: int) -> Path:
        return self.dir / f"{quote(job_id, safe='')}.v{version}.ckpt"

    def versions(self, job_id: str) -> list:
        out = []
        for p in self.dir.iterdir():
            m = _CKPT_NAME.match(p.name)
            if m and unquote(m.group("job")) == job_id:
                out.append(int(m.group("version")))
        return sorted(out)

    def write(self, record: CheckpointRecord) -> Path:
        existing = self.versions(record.job_id)
        if existing and record.version <= existing[-1]:
            raise ConsistencyError(
                f"checkpoint v{record.version} for {record.job_id} is not above v{existing[-1]}"
            )
        header = {
            "job_id": record.job_id,
            "version": record.version,
            "executed_time_s": record.executed_time_s,
            "attained_service": record.attained_service,
            "created_at": record.created_at,
        }
        path = self._path(record.job_id, record.version)
        tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
        with open(tmp, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            fh.write(_BLOB_LEN.pack(len(record.blob)))
            fh.write(record.blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
        return path

    def read(self, job_id: str, version: int) -> CheckpointRecord:
        data = self._path(job_id, version).read_bytes()
        nl = data.find(b"\n")
        if nl < 0 or len(data) < nl + 1 + _BLOB_LEN.size:
            raise ConsistencyError(f"corrupt checkpoint {job_id} v{version}")
        header = json.loads(data[:nl].decode("utf-8"))
        (n,) = _BLOB_LEN.unpack_from(data, nl + 1)
        blob = data[nl + 1 + _BLOB_LEN.size:]
        if len(blob) != n:
            raise ConsistencyError(f"checkpoint {job_id} v{version} blob is {len(blob)} bytes, header says {n}")
        return CheckpointRecord(
            job_id=header["job_id"],
            version=header["version"],
            attained_service=header["attained_service"],
            executed_time_s=header["executed_time_s"],
            blob=blob,
            created_at=header["created_at"],
        )

    def latest(self, job_id: str) -> Optional[CheckpointRecord]:
        versions = self.versions(job_id)
        return self.read(job_id, versions[-1]) if versions else None

    def restore(self, job_id: str) -> Optional[tuple]:
        """``(version, attained_service, executed_time_s)`` of the newest
        record, in the shape the scheduler's rollback expects."""
        rec = self.latest(job_id)
        if rec is None:
            return None
        return rec.version, rec.attained_service, rec.executed_time_s


# -- worker profiles -------------------------------------------------------

def load_worker_profiles(data: dict) -> dict:
    """Model name -> LatencyProfile for a worker's synthetic executor.

    Accepts either a preset selector::

        {"preset": "roundtrip", "site": "onprem", "device": "gpu", "jitter_fraction": 0.05}

    or explicit profiles::

        {"models": {"ssd_mobilenet_v1": {"mode": "measured", "measured_rtt_ms": 77}}}
    """
    if not isinstance(data, dict):
        raise ConfigurationError("profiles must be an object")
    unknown = set(data) - {"preset", "site", "device", "jitter_fraction", "models"}
    if unknown:
        raise ConfigurationError(f"unknown profile fields {sorted(unknown)}")
    out = {}
    if "preset" in data:
        if data["preset"] != "roundtrip":
            raise ConfigurationError(f"unknown profile preset {data['preset']!r}")
        site = data.get("site", "onprem")
        device = data.get("device", "gpu")
        if site not in presets.SITES or device not in presets.DEVICES:
            raise ConfigurationError(f"unknown site/device {site}/{device}")
        jitter = data.get("jitter_fraction")
        table = presets.roundtrip_profiles(jitter)
        for key in presets.MODEL_KEYS:
            out[key] = table[presets.profile_name(key, site, device)]
    for name, prof in sorted(data.get("models", {}).items()):
        try:
            out[name] = LatencyProfile(**prof)
        except TypeError as exc:
            raise ConfigurationError(f"models.{name}: {exc}") from None
    if not out:
        raise ConfigurationError("profiles declare no models")
    return out


# -- control plane ---------------------------------------------------------

@dataclass(frozen=True)
class Outbound:
    """A message the server must push to a worker's listen address."""

    worker_id: str
    address: str
    message: Message


class ControlPlane:
    """Leader-side state: scheduler, worker addresses, original job specs.

    Not thread-safe; the owning node serializes calls. Every mutating call
    returns the list of ``Outbound`` messages it produced.
    """

    def __init__(
        self,
        config: Optional[ClusterConfig] = None,
        checkpoints: Optional[CheckpointStore] = None,
        clock: Callable[[], float] = time.monotonic,
        lease: Optional[LeaseManager] = None,
    ):
        self.config = config or ClusterConfig()
        self.checkpoints = checkpoints
        self.clock = clock
        self.lease = lease
        self._epoch = clock()
        self.reset()

    def reset(self) -> None:
        """Forget all soft state (used when a new lease term starts)."""
        self.scheduler = Scheduler(self.config.scheduler)
        self.addresses: dict = {}
        self.serves: dict = {}
        # specs as submitted, including any synthetic duration for the executor
        self.specs: dict = {}
        self.inflight: Counter = Counter()
        self._last_routed: dict = {}
        self._route_seq = 0

    def now(self) -> float:
        return max(self.scheduler.now, self.clock() - self._epoch)

    def _tick(self) -> float:
        now = self.now()
        self.scheduler.set_time(now)
        return now

    def require_leader(self) -> None:
        if self.lease is not None and not self.lease.is_leader():
            raise NotLeaderError("this server does not hold the leader lease", self.lease.leader_hint())

    def _restore(self, job_id: str) -> Optional[tuple]:
        if self.checkpoints is None:
            return None
        return self.checkpoints.restore(job_id)

    # -- membership ---------------------------------------------------------

    def register_worker(self, descriptor: WorkerDescriptor, serves=()) -> list:
        self.require_leader()
        now = self._tick()
        pinned = replace(descriptor, tags=descriptor.tags | {host_tag(descriptor.worker_id)})
        with self._collect() as out:
            self.scheduler.add_worker(pinned, restore=self._restore)
            self.scheduler.workers[descriptor.worker_id].last_heartbeat = now
            self.addresses[descriptor.worker_id] = descriptor.address
            self.serves[descriptor.worker_id] = frozenset(serves)
            for model in sorted(serves):
                jid = serving_job_id(model, descriptor.worker_id)
                if jid in self.scheduler.jobs:
                    continue
                profile = presets.model_profiles().get(model)
                required = self.config.serving_demand
                if profile is not None:
                    required = ResourceVector(memory_mb=profile.model_size_mb)
                spec = JobSpec.from_dict({
                    "job_id": jid,
                    "kind": JobKind.SERVING.value,
                    "model": profile.to_dict() if profile is not None else model,
                    "required": required.to_dict(),
                    "locality_tags": [host_tag(descriptor.worker_id)],
                    "arrival_time": now,
                })
                try:
                    self._submit(spec)
                except Exception as exc:  # noqa: BLE001 - a worker too small to serve is not fatal
                    log.warning("cannot start serving job %s: %s", jid, exc)
            self.scheduler.schedule_pass()
        return out

    def heartbeat(self, worker_id: str, utilization: Optional[dict] = None,
                  progress: Optional[dict] = None) -> tuple:
        """Returns ``(reply_payload, outbound)``. ``progress`` maps job id to
        ``{"delta_s": float, "done": bool}``."""
        self.require_leader()
        w = self.scheduler.workers.get(worker_id)
        if w is None:
            return {"worker_id": worker_id, "reregister": True, "stop": []}, []
        now = self._tick()
        w.last_heartbeat = now
        w.reported_utilization = dict(utilization or {})
        stop = []
        with self._collect() as out:
            for jid, rep in sorted((progress or {}).items()):
                job = self.scheduler.jobs.get(jid)
                if job is None or worker_id not in job.workers():
                    # stale: the server has moved on from this assignment
                    stop.append(jid)
                    continue
                if job.status == JobStatus.PREEMPTING:
                    continue
                if job.status != JobStatus.RUNNING:
                    stop.append(jid)
                    continue
                if job.placement[0][0] != worker_id:
                    continue
                delta = float(rep.get("delta_s", 0.0))
                if delta > 0:
                    self.scheduler.on_progress(jid, delta)
                if rep.get("done") and job.spec.kind == JobKind.TRAINING:
                    self.scheduler.on_job_complete(jid)
            self.scheduler.schedule_pass()
        return {"worker_id": worker_id, "reregister": False, "stop": stop}, out

    def alive(self, worker_id: str) -> bool:
        w = self.scheduler.workers.get(worker_id)
        return w is not None and self.now() - w.last_heartbeat <= self.config.failure_timeout_s

    def detect_failures(self) -> tuple:
        """Drop workers silent for longer than period x tolerance. Returns
        ``(failed_ids, outbound)``."""
        now = self._tick()
        dead = [
            wid for wid, w in sorted(self.scheduler.workers.items())
            if now - w.last_heartbeat > self.config.failure_timeout_s
        ]
        with self._collect() as out:
            for wid in dead:
                self._drop(wid)
            if dead:
                self.scheduler.schedule_pass()
        return dead, out

    def mark_unreachable(self, worker_id: str) -> list:
        """A forward to the worker failed outright; treat it as dead now."""
        if worker_id not in self.scheduler.workers:
            return []
        self._tick()
        with self._collect() as out:
            self._drop(worker_id)
            self.scheduler.schedule_pass()
        return out

    def _drop(self, worker_id: str) -> None:
        log.info("worker %s removed", worker_id)
        self.scheduler.remove_worker(worker_id, restore=self._restore)
        self.addresses.pop(worker_id, None)
        self.serves.pop(worker_id, None)
        self.inflight.pop(worker_id, None)
        self._last_routed.pop(worker_id, None)

    # -- jobs ----------------------------------------------------------------

    def submit_job(self, spec: JobSpec) -> list:
        self.require_leader()
        now = self._tick()
        spec = replace(spec, arrival_time=max(spec.arrival_time, now))
        with self._collect() as out:
            self._submit(spec)
        return out

    def _submit(self, spec: JobSpec) -> None:
        self.scheduler.on_job_arrival(spec)
        self.specs[spec.job_id] = spec

    def checkpoint_done(self, job_id: str, blob: bytes, delta_s: float = 0.0) -> list:
        """The primary member finished writing its checkpoint blob."""
        self.require_leader()
        now = self._tick()
        job = self.scheduler.jobs.get(job_id)
        if job is None or job.status != JobStatus.PREEMPTING:
            raise ConsistencyError(f"no checkpoint pending for job {job_id!r}")
        with self._collect() as out:
            if delta_s > 0:
                self.scheduler.on_progress(job_id, delta_s)
            record = CheckpointRecord(
                job_id=job_id,
                version=job.checkpoint_version + 1,
                attained_service=job.attained_service,
                executed_time_s=job.executed_time_s,
                blob=bytes(blob),
                created_at=now,
            )
            try:
                if self.checkpoints is not None:
                    self.checkpoints.write(record)
            except (OSError, ConsistencyError) as exc:
                log.warning("checkpoint write for %s failed: %s", job_id, exc)
                self.scheduler.abort_checkpoint(job_id)
            else:
                self.scheduler.on_checkpoint_done(job_id)
        return out

    def checkpoint_and_migrate(self, job_id: str, to_plan: Optional[PlacementPlan] = None) -> list:
        """Start moving a running job. Without an explicit plan the job goes
        to the best placement that avoids its current workers."""
        self.require_leader()
        self._tick()
        job = self.scheduler.jobs.get(job_id)
        if job is None or job.status != JobStatus.RUNNING:
            raise ConsistencyError(f"job {job_id!r} is not running")
        if to_plan is None:
            current = set(job.workers())
            view = [w for wid, w in sorted(self.scheduler.workers.items()) if wid not in current]
            to_plan = place_gang(job.spec, view, self.config.scheduler.skew_threshold)
            if to_plan is None:
                raise NoCapacityError(f"no placement available to migrate {job_id!r}")
        with self._collect() as out:
            self.scheduler.begin_migration(job_id, to_plan)
        return out

    def job_status(self, job_id: Optional[str] = None) -> list:
        self.require_leader()
        jobs = self.scheduler.jobs
        ids = [job_id] if job_id is not None else sorted(jobs)
        out = []
        for jid in ids:
            job = jobs.get(jid)
            if job is None:
                raise ConsistencyError(f"unknown job {jid!r}")
            out.append({
                "job_id": jid,
                "status": job.status.value,
                "queue": job.queue_level.name,
                "attained_service": job.attained_service,
                "executed_time_s": job.executed_time_s,
                "workers": job.workers(),
                "checkpoint_version": job.checkpoint_version,
            })
        return out

    # -- inference routing ---------------------------------------------------

    def hosts_for(self, model_name: str) -> list:
        hosts = set()
        for job in self.scheduler.jobs.values():
            if (
                job.status == JobStatus.RUNNING
                and job.spec.kind == JobKind.SERVING
                and job.spec.model.model_name == model_name
            ):
                hosts.update(job.workers())
        return sorted(h for h in hosts if h in self.addresses)

    def route_inference(self, model_name: str, exclude=()) -> tuple:
        """Pick the least-loaded worker running a serving job for the
        model. Returns ``(worker_id, address)`` and counts the request as
        in flight until ``end_forward``."""
        self.require_leader()
        hosts = [h for h in self.hosts_for(model_name) if h not in set(exclude)]
        if not hosts:
            raise NoCapacityError(f"no running serving job for model {model_name!r}")

        def key(wid):
            w = self.scheduler.workers[wid]
            reported = max(w.reported_utilization.values(), default=0.0)
            return (round(reported, 2), self.inflight[wid], worker_load(w),
                    self._last_routed.get(wid, -1), wid)

        wid = min(hosts, key=key)
        self._route_seq += 1
        self._last_routed[wid] = self._route_seq
        self.inflight[wid] += 1
        return wid, self.addresses[wid]

    def end_forward(self, worker_id: str) -> None:
        if self.inflight.get(worker_id, 0) > 0:
            self.inflight[worker_id] -= 1

    # -- scheduler actions -> worker messages ------------------------------------

    @contextmanager
    def _collect(self):
        start = len(self.scheduler.log)
        before = {jid: list(job.placement) for jid, job in self.scheduler.jobs.items()}
        out = []
        try:
            yield out
        finally:
            for action in self.scheduler.log[start:]:
                out.extend(self._translate(action, before))

    def _send(self, worker_id: str, type: MessageType, payload: dict) -> Optional[Outbound]:
        addr = self.addresses.get(worker_id)
        if not addr:
            return None
        return Outbound(worker_id, addr, Message(type, payload))

    def _start_payload(self, job_id: str, worker_id: str, plan: PlacementPlan) -> dict:
        job = self.scheduler.jobs[job_id]
        spec = self.specs.get(job_id, job.spec)
        ckpt = self.checkpoints.latest(job_id) if self.checkpoints is not None else None
        return {
            "job_id": job_id,
            "job": spec.to_dict(),
            "members": sum(1 for wid, _ in plan.assignments if wid == worker_id),
            "primary": plan.assignments[0][0] == worker_id,
            "executed_time_s": job.executed_time_s,
            "checkpoint_version": ckpt.version if ckpt else 0,
            "checkpoint_b64": b64encode(ckpt.blob) if ckpt else None,
            "checkpoint_overhead_s": self.config.scheduler.checkpoint_overhead_s,
        }

    def _translate(self, action, before: dict) -> list:
        kind, jid = action.kind, action.job_id
        msgs = []
        if kind in (DISPATCH, RESUME):
            mtype = MessageType.DISPATCH if kind == DISPATCH else MessageType.RESUME
            plan = action.plan
            for wid in plan.worker_ids():
                msgs.append(self._send(wid, mtype, self._start_payload(jid, wid, plan)))
        elif kind in (PREEMPT, MIGRATE):
            placement = self.scheduler.jobs[jid].placement
            primary = placement[0][0] if placement else None
            for wid in sorted({w for w, _ in placement}):
                msgs.append(self._send(wid, MessageType.PREEMPT, {
                    "job_id": jid,
                    "checkpoint": wid == primary,
                    "migrate": kind == MIGRATE,
                }))
        elif kind in (REQUEUE, COMPLETE):
            # members that are still alive must stop running the old assignment
            for wid in sorted({w for w, _ in before.get(jid, ())}):
                msgs.append(self._send(wid, MessageType.PREEMPT, {
                    "job_id": jid, "checkpoint": False, "discard": True,
                }))
        return [m for m in msgs if m is not None]
