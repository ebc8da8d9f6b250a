"""ST-LAS scheduling over a two-level discretized feedback queue.

A job's attained service is its normalized gang demand times the time it
has executed. New jobs enter Q1; a job whose service grows by more than
``demotion_threshold`` while in Q1 is demoted to Q2, and a Q2 job that has
waited ``promotion_wait_threshold_s`` is promoted back to Q1. Dispatch is
gang (all-or-nothing) and a Q1 job that cannot be placed may preempt
running Q2 jobs.

The scheduler owns the resource ledger of the cluster view (``workers``) so
that allocation accounting lives in one place. Callers drive it with events
(arrival, progress, completion, checkpoint done, worker join/leave) and act
on the returned ``Action`` list.
"""

from __future__ import annotations

import copy
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .domain import (
    DEFAULT_WEIGHTS,
    DIMENSIONS,
    JobSpec,
    JobState,
    JobStatus,
    QueueLevel,
    ResourceVector,
    WorkerDescriptor,
    WorkerRecord,
    fits,
    normalized_demand,
    total_capacity,
    validate_weights,
)
from .errors import ConfigurationError, ConsistencyError, SubmissionError
from .placement import DEFAULT_SKEW_THRESHOLD, PlacementPlan, place_gang

_EPS = 1e-9

DISPATCH = "dispatch"
PREEMPT = "preempt"
DEMOTE = "demote"
PROMOTE = "promote"
MIGRATE = "migrate"
RESUME = "resume"
COMPLETE = "complete"
REQUEUE = "requeue"


@dataclass
class SchedulerConfig:
    num_queues: int = 2
    demotion_threshold: float = 30.0
    promotion_wait_threshold_s: float = 300.0
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    checkpoint_overhead_s: float = 1.0
    tick_interval_s: float = 1.0
    skew_threshold: float = DEFAULT_SKEW_THRESHOLD
    # victim search is exhaustive up to this many Q2 candidates
    max_exact_victims: int = 12

    def __post_init__(self):
        if self.num_queues != 2:
            raise ConfigurationError("num_queues must be 2")
        if not self.demotion_threshold > 0:
            raise ConfigurationError("demotion_threshold must be > 0")
        if not self.promotion_wait_threshold_s > 0:
            raise ConfigurationError("promotion_wait_threshold_s must be > 0")
        if self.checkpoint_overhead_s < 0 or self.tick_interval_s <= 0:
            raise ConfigurationError("checkpoint_overhead_s must be >= 0 and tick_interval_s > 0")
        self.weights = validate_weights(self.weights)

    @classmethod
    def from_dict(cls, data: dict) -> "SchedulerConfig":
        known = {
            "num_queues", "demotion_threshold", "promotion_wait_threshold_s", "weights",
            "checkpoint_overhead_s", "tick_interval_s", "skew_threshold", "max_exact_victims",
        }
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown scheduler fields: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class ServicePriority:
    value: float
    queue_level: QueueLevel


@dataclass(frozen=True)
class Action:
    kind: str
    job_id: str
    time: float
    plan: Optional[PlacementPlan] = None
    # for preempt actions: the job that needed the resources
    cause: Optional[str] = None


def attained_service(
    job: JobState,
    now: float,
    config: SchedulerConfig,
    cluster_capacity: ResourceVector,
) -> float:
    """Normalized gang demand times executed time as of ``now``."""
    if now < job.spec.arrival_time:
        raise ConsistencyError("now precedes job arrival")
    executed = job.executed_time_s
    if job.status == JobStatus.RUNNING and job.progress_time is not None:
        executed += max(0.0, now - job.progress_time)
    if executed == 0:
        return 0.0
    return normalized_demand(job.spec.gang_demand, cluster_capacity, config.weights) * executed


@dataclass
class _Checkpoint:
    version: int
    attained_service: float
    executed_time_s: float


class Scheduler:
    """ST-LAS state machine. Not thread-safe: callers serialize events."""

    policy = "st-las"

    def __init__(
        self,
        config: Optional[SchedulerConfig] = None,
        capacity_reference: Optional[ResourceVector] = None,
    ):
        self.config = config or SchedulerConfig()
        self.capacity_reference = capacity_reference
        self.jobs: dict = {}
        self.queues = {QueueLevel.Q1: [], QueueLevel.Q2: []}
        self.workers: dict = {}
        self.now = 0.0
        self.log: list = []
        self._migration_targets: dict = {}

    # -- clock -----------------------------------------------------------

    def set_time(self, now: float) -> None:
        if now < self.now - _EPS:
            raise ConsistencyError(f"time moved backwards: {now} < {self.now}")
        self.now = max(self.now, now)

    def advance_running(self, now: float) -> None:
        """Accrue execution for every running job up to ``now``."""
        delta = now - self.now
        if delta < -_EPS:
            raise ConsistencyError(f"time moved backwards: {now} < {self.now}")
        if delta > 0:
            for jid in sorted(self.jobs):
                job = self.jobs[jid]
                if job.status == JobStatus.RUNNING:
                    self._accrue(job, delta)
        self.set_time(now)
        for job in self.jobs.values():
            if job.status == JobStatus.RUNNING:
                job.progress_time = self.now

    # -- workers ---------------------------------------------------------

    def cluster_capacity(self) -> ResourceVector:
        if self.capacity_reference is not None:
            return self.capacity_reference
        return total_capacity(w for w in self.workers.values() if w.alive)

    def add_worker(self, descriptor: WorkerDescriptor, restore: Optional[Callable] = None) -> list:
        """Register or re-register a worker. Re-registering with a different
        descriptor fails the worker's jobs first. Returns requeue actions."""
        actions = []
        existing = self.workers.get(descriptor.worker_id)
        if existing is not None:
            if existing.descriptor == descriptor and existing.alive:
                return actions
            actions = self.remove_worker(descriptor.worker_id, restore)
        self.workers[descriptor.worker_id] = WorkerRecord(descriptor=descriptor, last_heartbeat=self.now)
        return actions

    def remove_worker(self, worker_id: str, restore: Optional[Callable] = None) -> list:
        """Drop a worker from the view and requeue every job that had a
        member on it, rolled back to its latest checkpoint.

        ``restore(job_id)`` may return ``(version, attained_service,
        executed_time_s)`` from durable storage; otherwise the scheduler's
        own checkpoint bookkeeping is used.
        """
        if worker_id not in self.workers:
            return []
        affected = []
        for jid in sorted(self.jobs):
            job = self.jobs[jid]
            if job.status not in (JobStatus.RUNNING, JobStatus.PREEMPTING):
                continue
            target = self._migration_targets.get(jid)
            touched = {w for w, _ in job.placement}
            if target is not None:
                touched |= set(target.worker_ids())
            if worker_id in touched:
                affected.append(job)
        actions = []
        for job in affected:
            self._release(job)
            self._rollback(job, restore)
            job.status = JobStatus.QUEUED
            job.waiting_since = self.now
            job.progress_time = None
            self._enqueue(job)
            actions.append(self._emit(REQUEUE, job.job_id))
        del self.workers[worker_id]
        self._sync_running_jobs()
        return actions

    def _rollback(self, job: JobState, restore: Optional[Callable]) -> None:
        ckpt = _Checkpoint(job.checkpoint_version, job.checkpoint_service, job.checkpoint_executed_s)
        if restore is not None:
            found = restore(job.job_id)
            if found is not None:
                ckpt = _Checkpoint(*found)
            else:
                ckpt = _Checkpoint(0, 0.0, 0.0)
        # rollback never increases service
        job.attained_service = min(job.attained_service, ckpt.attained_service)
        job.executed_time_s = min(job.executed_time_s, ckpt.executed_time_s)
        job.checkpoint_version = max(job.checkpoint_version, ckpt.version)
        job.checkpoint_service = job.attained_service
        job.checkpoint_executed_s = job.executed_time_s
        job.demotion_base = min(job.demotion_base, job.attained_service)
        if job.queue_level == QueueLevel.Q2 and not self._crossed(job):
            job.queue_level = QueueLevel.Q1

    # -- job events ------------------------------------------------------

    def on_job_arrival(self, spec: JobSpec) -> list:
        if spec.job_id in self.jobs:
            raise SubmissionError(f"duplicate job id {spec.job_id!r}")
        spec = spec.without_ground_truth()
        capacity = self.cluster_capacity()
        if not fits(spec.gang_demand, capacity):
            raise SubmissionError(
                f"job {spec.job_id!r} gang demand exceeds total cluster capacity"
            )
        job = JobState(
            spec=spec,
            waiting_since=self.now,
            normalized_demand=self._normalize(spec.gang_demand, capacity),
        )
        self.jobs[spec.job_id] = job
        self._enqueue(job)
        return self.schedule_pass()

    def _normalize(self, demand: ResourceVector, capacity: ResourceVector) -> float:
        # dimensions the cluster does not have are dropped and the
        # remaining weights rescaled
        weights = {d: w for d, w in self.config.weights.items() if w > 0 and getattr(capacity, d) > 0}
        total = sum(weights.values())
        if total <= 0:
            raise ConfigurationError("no weighted resource dimension has capacity")
        weights = {d: w / total for d, w in weights.items()}
        weights.update({d: 0.0 for d in DIMENSIONS if d not in weights})
        diff = 1.0 - sum(weights.values())
        if diff:
            top = max(weights, key=weights.get)
            weights[top] += diff
        return normalized_demand(demand, capacity, weights)

    def on_progress(self, job_id: str, delta_s: float) -> None:
        # a preempting job keeps running until its checkpoint is cut
        job = self._job(job_id)
        if job.status not in (JobStatus.RUNNING, JobStatus.PREEMPTING):
            raise ConsistencyError(f"progress reported for {job.status.value} job {job_id}")
        if delta_s < 0:
            raise ConsistencyError("negative progress")
        self._accrue(job, delta_s)
        if job.status == JobStatus.RUNNING:
            job.progress_time = self.now

    def _accrue(self, job: JobState, delta_s: float) -> None:
        job.executed_time_s += delta_s
        job.attained_service = job.normalized_demand * job.executed_time_s

    def on_job_complete(self, job_id: str) -> list:
        job = self._job(job_id)
        if job.status != JobStatus.RUNNING:
            raise ConsistencyError(f"completion for {job.status.value} job {job_id}")
        start = len(self.log)
        self._release(job)
        job.status = JobStatus.COMPLETED
        job.completion_time = self.now
        job.progress_time = None
        self._emit(COMPLETE, job_id)
        self.schedule_pass()
        return self.log[start:]

    def record_checkpoint(self, job_id: str) -> int:
        """Snapshot the accounting of a running job (periodic checkpoint)."""
        job = self._job(job_id)
        if job.status not in (JobStatus.RUNNING, JobStatus.PREEMPTING):
            raise ConsistencyError(f"checkpoint of {job.status.value} job {job_id}")
        job.checkpoint_version += 1
        job.checkpoint_service = job.attained_service
        job.checkpoint_executed_s = job.executed_time_s
        return job.checkpoint_version

    def begin_migration(self, job_id: str, plan: PlacementPlan) -> Action:
        """Reserve ``plan`` and start checkpointing the job off its current
        workers. The move completes in ``on_checkpoint_done``."""
        job = self._job(job_id)
        if job.status != JobStatus.RUNNING:
            raise ConsistencyError(f"cannot migrate {job.status.value} job {job_id}")
        if len(plan.assignments) != job.spec.gang_size:
            raise ConsistencyError("migration plan does not cover the gang")
        for wid, demand in plan.per_worker().items():
            w = self.workers.get(wid)
            if w is None or not fits(w.allocated + demand, w.capacity):
                raise ConsistencyError(f"migration plan does not fit on {wid}")
        self._allocate(job_id, plan.assignments)
        self._migration_targets[job_id] = plan
        job.status = JobStatus.PREEMPTING
        job.progress_time = None
        self._sync_running_jobs()
        return self._emit(MIGRATE, job_id, plan)

    def on_checkpoint_done(self, job_id: str) -> list:
        job = self._job(job_id)
        if job.status != JobStatus.PREEMPTING:
            raise ConsistencyError(f"checkpoint_done for {job.status.value} job {job_id}")
        start = len(self.log)
        self.record_checkpoint(job_id)
        target = self._migration_targets.pop(job_id, None)
        self._free(job_id, job.placement)
        job.placement = []
        if target is not None:
            job.placement = list(target.assignments)
            job.status = JobStatus.RUNNING
            job.last_dispatch_time = self.now
            job.progress_time = self.now
            self._emit(RESUME, job_id, target)
        else:
            job.status = JobStatus.CHECKPOINTED
            job.waiting_since = self.now
            self._enqueue(job)
        self.schedule_pass()
        return self.log[start:]

    def abort_checkpoint(self, job_id: str) -> list:
        """Checkpoint write failed: cancel the move, keep running in place."""
        job = self._job(job_id)
        if job.status != JobStatus.PREEMPTING:
            raise ConsistencyError(f"abort for {job.status.value} job {job_id}")
        start = len(self.log)
        target = self._migration_targets.pop(job_id, None)
        if target is not None:
            self._free(job_id, target.assignments)
        job.status = JobStatus.RUNNING
        job.progress_time = self.now
        self._emit(RESUME, job_id, PlacementPlan(tuple(job.placement)))
        self.schedule_pass()
        return self.log[start:]

    # -- queues ----------------------------------------------------------

    def queue_key(self, job: JobState) -> tuple:
        return job.sort_key()

    def _enqueue(self, job: JobState) -> None:
        q = self.queues[job.queue_level]
        if job.job_id in q:
            raise ConsistencyError(f"{job.job_id} already queued")
        q.append(job.job_id)
        q.sort(key=lambda jid: self.queue_key(self.jobs[jid]))

    def _dequeue(self, job: JobState) -> None:
        self.queues[job.queue_level].remove(job.job_id)

    def priority(self, job_id: str) -> ServicePriority:
        job = self._job(job_id)
        return ServicePriority(job.attained_service, job.queue_level)

    def _crossed(self, job: JobState) -> bool:
        thr = self.config.demotion_threshold
        return job.attained_service - job.demotion_base >= thr - _EPS * max(1.0, thr)

    # -- the scheduling pass ----------------------------------------------

    def schedule_pass(self) -> list:
        start = len(self.log)
        self._apply_demotions()
        self._apply_promotions()
        self._dispatch()
        self._sync_running_jobs()
        return self.log[start:]

    def _apply_demotions(self) -> None:
        for jid in sorted(self.jobs):
            job = self.jobs[jid]
            if job.queue_level != QueueLevel.Q1 or job.status in (JobStatus.COMPLETED, JobStatus.FAILED):
                continue
            if not self._crossed(job):
                continue
            queued = job.job_id in self.queues[QueueLevel.Q1]
            if queued:
                self._dequeue(job)
            job.queue_level = QueueLevel.Q2
            if queued:
                self._enqueue(job)
            self._emit(DEMOTE, jid)

    def _apply_promotions(self) -> None:
        wait = self.config.promotion_wait_threshold_s
        for jid in list(self.queues[QueueLevel.Q2]):
            job = self.jobs[jid]
            if self.now - job.waiting_since >= wait - _EPS * max(1.0, wait):
                self._dequeue(job)
                job.queue_level = QueueLevel.Q1
                job.demotion_base = job.attained_service
                job.waiting_since = self.now
                self._enqueue(job)
                self._emit(PROMOTE, jid)

    def _dispatch(self) -> None:
        # ``virtual`` is the allocation once in-flight checkpoints land,
        # plus reservations made for jobs waiting on them
        virtual = self._allocations_after_pending_releases()
        for level in (QueueLevel.Q1, QueueLevel.Q2):
            for jid in list(self.queues[level]):
                job = self.jobs[jid]
                effective = {
                    wid: w.allocated.max_with(virtual[wid]) for wid, w in self.workers.items()
                }
                plan = place_gang(job.spec, self._view(effective), self.config.skew_threshold)
                if plan is not None:
                    self._start(job, plan)
                    self._reserve(virtual, plan)
                    continue
                if level != QueueLevel.Q1:
                    continue
                self._wait_or_preempt(job, virtual, self._q2_running())

    def _wait_or_preempt(self, job: JobState, virtual: dict, candidates: list) -> None:
        plan = place_gang(job.spec, self._view(virtual), self.config.skew_threshold)
        if plan is not None:
            self._reserve(virtual, plan)
            return
        victims = self.select_preemption_victims(job, candidates, virtual)
        if not victims:
            return
        for victim in victims:
            self._preempt(victim, cause=job.job_id)
            for wid, demand in victim.placement:
                virtual[wid] = virtual[wid] - demand
        plan = place_gang(job.spec, self._view(virtual), self.config.skew_threshold)
        if plan is None:
            raise ConsistencyError("victim set did not free enough resources")
        self._reserve(virtual, plan)

    def _q2_running(self) -> list:
        return [
            self.jobs[jid]
            for jid in sorted(self.jobs)
            if self.jobs[jid].status == JobStatus.RUNNING and self.jobs[jid].queue_level == QueueLevel.Q2
        ]

    def victim_order(self, job: JobState) -> tuple:
        return (-job.attained_service, -job.spec.arrival_time, job.job_id)

    def select_preemption_victims(
        self,
        pending: JobState,
        running_q2: Iterable[JobState],
        allocations: Optional[dict] = None,
    ) -> Optional[list]:
        """Smallest set of running candidates whose release lets ``pending``
        be placed, preferring the highest attained service. None if even
        releasing every candidate is not enough."""
        if allocations is None:
            allocations = self._allocations_after_pending_releases()
        cands = sorted(running_q2, key=self.victim_order)
        if not cands:
            return None

        def placeable(subset) -> bool:
            alloc = dict(allocations)
            for v in subset:
                for wid, demand in v.placement:
                    alloc[wid] = alloc[wid] - demand
            return place_gang(pending.spec, self._view(alloc), self.config.skew_threshold) is not None

        if not placeable(cands):
            return None
        if len(cands) <= self.config.max_exact_victims:
            for k in range(1, len(cands) + 1):
                for subset in itertools.combinations(cands, k):
                    if placeable(subset):
                        return list(subset)
            return None
        # large candidate sets: shortest sufficient prefix, then prune
        chosen = []
        for v in cands:
            chosen.append(v)
            if placeable(chosen):
                break
        for v in reversed(list(chosen)):
            trial = [c for c in chosen if c is not v]
            if trial and placeable(trial):
                chosen = trial
        return chosen

    def _start(self, job: JobState, plan: PlacementPlan) -> None:
        self._dequeue(job)
        self._allocate(job.job_id, plan.assignments)
        job.placement = list(plan.assignments)
        job.status = JobStatus.RUNNING
        job.last_dispatch_time = self.now
        job.progress_time = self.now
        self._emit(DISPATCH, job.job_id, plan)

    def _preempt(self, job: JobState, cause: str) -> None:
        job.status = JobStatus.PREEMPTING
        job.progress_time = None
        self._emit(PREEMPT, job.job_id, cause=cause)

    # -- resource ledger -------------------------------------------------

    def _allocate(self, job_id: str, assignments) -> None:
        for wid, demand in assignments:
            w = self.workers[wid]
            new = w.allocated + demand
            if not fits(new, w.capacity):
                raise ConsistencyError(f"over-allocation on {wid}")
            w.allocated = new

    def _free(self, job_id: str, assignments) -> None:
        for wid, demand in assignments:
            w = self.workers.get(wid)
            if w is None:
                continue
            w.allocated = w.allocated - demand

    def _sync_running_jobs(self) -> None:
        for w in self.workers.values():
            w.running_jobs = set()
        for jid, job in self.jobs.items():
            held = list(job.placement)
            if jid in self._migration_targets:
                held += list(self._migration_targets[jid].assignments)
            for wid, _ in held:
                if wid in self.workers:
                    self.workers[wid].running_jobs.add(jid)

    def _release(self, job: JobState) -> None:
        target = self._migration_targets.pop(job.job_id, None)
        if target is not None:
            self._free(job.job_id, target.assignments)
        self._free(job.job_id, job.placement)
        job.placement = []

    def _allocations_after_pending_releases(self) -> dict:
        alloc = {wid: w.allocated for wid, w in self.workers.items()}
        for jid in sorted(self.jobs):
            job = self.jobs[jid]
            if job.status == JobStatus.PREEMPTING:
                for wid, demand in job.placement:
                    if wid in alloc:
                        alloc[wid] = alloc[wid] - demand
        return alloc

    def _reserve(self, virtual: dict, plan: PlacementPlan) -> None:
        for wid, demand in plan.assignments:
            virtual[wid] = virtual[wid] + demand

    def _view(self, allocations: dict) -> list:
        out = []
        for wid in sorted(self.workers):
            w = self.workers[wid]
            out.append(WorkerRecord(descriptor=w.descriptor, allocated=allocations.get(wid, w.allocated), alive=w.alive))
        return out

    # -- introspection ---------------------------------------------------

    def _job(self, job_id: str) -> JobState:
        try:
            return self.jobs[job_id]
        except KeyError:
            raise ConsistencyError(f"unknown job {job_id!r}") from None

    def _emit(self, kind: str, job_id: str, plan: Optional[PlacementPlan] = None, cause: Optional[str] = None) -> Action:
        action = Action(kind, job_id, self.now, plan, cause)
        self.log.append(action)
        return action

    def snapshot(self) -> dict:
        """Immutable-by-convention deep copy of the job table."""
        return copy.deepcopy(self.jobs)

    def next_decision_time(self) -> Optional[float]:
        """Earliest future instant at which a demotion or promotion falls
        due, assuming no other event intervenes."""
        best = math.inf
        thr = self.config.demotion_threshold
        for job in self.jobs.values():
            if job.status == JobStatus.RUNNING and job.queue_level == QueueLevel.Q1 and job.normalized_demand > 0:
                remaining = job.demotion_base + thr - job.attained_service
                best = min(best, self.now + max(0.0, remaining) / job.normalized_demand)
        for jid in self.queues[QueueLevel.Q2]:
            best = min(best, self.jobs[jid].waiting_since + self.config.promotion_wait_threshold_s)
        return None if best == math.inf else best

    def check_invariants(self) -> None:
        """Raise ConsistencyError if any structural invariant is broken."""
        queued_ids = {}
        for level, q in self.queues.items():
            keys = [self.queue_key(self.jobs[jid]) for jid in q]
            if keys != sorted(keys):
                raise ConsistencyError(f"{level.name} is not sorted")
            for jid in q:
                if jid in queued_ids:
                    raise ConsistencyError(f"{jid} appears in two queues")
                queued_ids[jid] = level
        expected = {wid: ResourceVector() for wid in self.workers}
        for jid, job in self.jobs.items():
            st = job.status
            if st in (JobStatus.RUNNING, JobStatus.PREEMPTING):
                if len(job.placement) != job.spec.gang_size:
                    raise ConsistencyError(f"gang atomicity broken for {jid}")
                if jid in queued_ids:
                    raise ConsistencyError(f"running job {jid} is queued")
                held = list(job.placement)
                if jid in self._migration_targets:
                    held += list(self._migration_targets[jid].assignments)
                for wid, demand in held:
                    if wid not in expected:
                        raise ConsistencyError(f"{jid} placed on unknown worker {wid}")
                    expected[wid] = expected[wid] + demand
            elif st in (JobStatus.QUEUED, JobStatus.CHECKPOINTED):
                if job.placement:
                    raise ConsistencyError(f"queued job {jid} holds a placement")
                if queued_ids.get(jid) != job.queue_level:
                    raise ConsistencyError(f"queued job {jid} not in its queue")
                if (
                    job.queue_level == QueueLevel.Q2
                    and self.now - job.waiting_since > self.config.promotion_wait_threshold_s + 1e-6
                ):
                    raise ConsistencyError(f"{jid} starved in Q2")
            elif jid in queued_ids or job.placement:
                raise ConsistencyError(f"finished job {jid} still holds queue slot or resources")
        for wid, w in self.workers.items():
            if not fits(w.allocated, w.capacity):
                raise ConsistencyError(f"{wid} over-allocated")
            for a, b in zip(w.allocated.as_tuple(), expected[wid].as_tuple()):
                if abs(a - b) > 1e-6 * max(1.0, abs(b)):
                    raise ConsistencyError(f"accounting mismatch on {wid}")


class FifoScheduler(Scheduler):
    """Arrival-order baseline: single queue, head-of-line blocking, no
    demotion, promotion or preemption."""

    policy = "fifo"

    def queue_key(self, job: JobState) -> tuple:
        return (job.spec.arrival_time, job.job_id)

    def schedule_pass(self) -> list:
        start = len(self.log)
        for jid in list(self.queues[QueueLevel.Q1]):
            job = self.jobs[jid]
            plan = place_gang(job.spec, self._view({}), self.config.skew_threshold)
            if plan is None:
                break
            self._start(job, plan)
        self._sync_running_jobs()
        return self.log[start:]

    def next_decision_time(self) -> Optional[float]:
        return None


class SrsfOracleScheduler(Scheduler):
    """Shortest-remaining-service-first with perfect knowledge of job
    durations: priority is GPUs times remaining time, preemptive.

    Only the simulator constructs this, handing it the ground-truth
    durations it withholds from the ST-LAS scheduler.
    """

    policy = "srsf-oracle"

    def __init__(self, durations: dict, config: Optional[SchedulerConfig] = None,
                 capacity_reference: Optional[ResourceVector] = None):
        super().__init__(config, capacity_reference)
        self._durations = dict(durations)

    def remaining(self, job: JobState) -> float:
        return max(0.0, self._durations[job.job_id] - job.executed_time_s)

    def queue_key(self, job: JobState) -> tuple:
        rem = self.remaining(job)
        return (job.spec.gang_demand.gpus * rem, rem, job.spec.arrival_time, job.job_id)

    def victim_order(self, job: JobState) -> tuple:
        key = self.queue_key(job)
        return (-key[0], -key[1], -job.spec.arrival_time, job.job_id)

    def schedule_pass(self) -> list:
        start = len(self.log)
        virtual = self._allocations_after_pending_releases()
        for jid in list(self.queues[QueueLevel.Q1]):
            job = self.jobs[jid]
            effective = {wid: w.allocated.max_with(virtual[wid]) for wid, w in self.workers.items()}
            plan = place_gang(job.spec, self._view(effective), self.config.skew_threshold)
            if plan is not None:
                self._start(job, plan)
                self._reserve(virtual, plan)
                continue
            mine = self.queue_key(job)
            cands = [
                self.jobs[r]
                for r in sorted(self.jobs)
                if self.jobs[r].status == JobStatus.RUNNING and self.queue_key(self.jobs[r]) > mine
            ]
            self._wait_or_preempt(job, virtual, cands)
        self._sync_running_jobs()
        return self.log[start:]

    def next_decision_time(self) -> Optional[float]:
        return None
