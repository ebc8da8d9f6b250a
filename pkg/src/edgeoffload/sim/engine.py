"""Discrete-event engine that drives the scheduler state machines in virtual
time and collects job completion and round-trip statistics."""

from __future__ import annotations

import csv
import heapq
import io
import random
import statistics
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Optional

from ..domain import JobStatus
from ..errors import ConfigurationError, EdgeOffloadError
from ..placement import place_gang
from ..scheduler import (
    COMPLETE,
    DEMOTE,
    DISPATCH,
    MIGRATE,
    PREEMPT,
    PROMOTE,
    REQUEUE,
    RESUME,
    FifoScheduler,
    Scheduler,
    SrsfOracleScheduler,
)
from .latency import roundtrip_latency, rtt_stats, tracking_feasibility
from .scenario import ScenarioConfig

ARRIVAL = "arrival"
PROGRESS_TICK = "progress_tick"
COMPLETION = "completion"
HEARTBEAT = "heartbeat"
WORKER_FAIL = "worker_fail"
WORKER_JOIN = "worker_join"
CHECKPOINT_DONE = "checkpoint_done"
OFFLOAD_REQUEST = "offload_request"
MIGRATION = "migration"

POLICIES = ("st-las", "fifo", "srsf-oracle")

# order of events that share a timestamp: work that finishes at an instant
# is settled before anything new competes for it
_RANK = {
    COMPLETION: 0,
    CHECKPOINT_DONE: 1,
    WORKER_FAIL: 2,
    WORKER_JOIN: 3,
    MIGRATION: 4,
    ARRIVAL: 5,
    PROGRESS_TICK: 6,
    OFFLOAD_REQUEST: 7,
    HEARTBEAT: 8,
}


class SimulationError(EdgeOffloadError):
    pass


def normalize_policy(name: str) -> str:
    p = name.strip().lower().replace("_", "-")
    if p not in POLICIES:
        raise ConfigurationError(f"unknown policy {name!r}; expected one of {POLICIES}")
    return p


@dataclass(frozen=True, order=True)
class Event:
    time: float
    rank: int
    seq: int
    kind: str = field(compare=False)
    subject: str = field(compare=False)
    data: Optional[dict] = field(default=None, compare=False)


@dataclass(frozen=True)
class JobResult:
    job_id: str
    arrival_s: float
    completion_s: Optional[float]
    jct_s: Optional[float]
    preemptions: int


@dataclass
class TraceReport:
    policy: str
    seed: int
    scenario: str = ""
    jobs: list = field(default_factory=list)
    average_jct_s: Optional[float] = None
    counts: dict = field(default_factory=dict)
    rtt: dict = field(default_factory=dict)
    tracking: dict = field(default_factory=dict)
    unfinished: list = field(default_factory=list)
    end_time_s: float = 0.0

    def completions(self) -> dict:
        return {j.job_id: j.completion_s for j in self.jobs if j.completion_s is not None}

    def to_rows(self) -> list:
        rows = [("summary", self.scenario, "policy", self.policy), ("summary", self.scenario, "seed", str(self.seed))]
        rows.append(("summary", self.scenario, "average_jct_s", _fmt(self.average_jct_s)))
        rows.append(("summary", self.scenario, "end_time_s", _fmt(self.end_time_s)))
        for k in sorted(self.counts):
            rows.append(("count", k, "value", str(self.counts[k])))
        for j in self.jobs:
            rows.append(("job", j.job_id, "arrival_s", _fmt(j.arrival_s)))
            rows.append(("job", j.job_id, "completion_s", _fmt(j.completion_s)))
            rows.append(("job", j.job_id, "jct_s", _fmt(j.jct_s)))
            rows.append(("job", j.job_id, "preemptions", str(j.preemptions)))
        for name in sorted(self.rtt):
            s = self.rtt[name]
            rows.append(("rtt", name, "count", str(s.count)))
            rows.append(("rtt", name, "mean_ms", _fmt(s.mean_ms)))
            rows.append(("rtt", name, "variance_ms2", _fmt(s.variance_ms2)))
            rows.append(("rtt", name, "p95_ms", _fmt(s.p95_ms)))
        for name in sorted(self.tracking):
            t = self.tracking[name]
            rows.append(("tracking", name, "rtt_ms", _fmt(t.rtt_ms)))
            rows.append(("tracking", name, "displacement_m", _fmt(t.displacement_m)))
            rows.append(("tracking", name, "feasible", str(t.feasible).lower()))
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("section", "name", "metric", "value"))
        w.writerows(self.to_rows())
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"scenario {self.scenario}  policy {self.policy}  seed {self.seed}"]
        if self.jobs:
            lines.append("")
            lines.append(_align(
                ("job", "arrival_s", "completion_s", "jct_s", "preemptions"),
                [(j.job_id, _fmt(j.arrival_s), _fmt(j.completion_s), _fmt(j.jct_s), str(j.preemptions)) for j in self.jobs],
            ))
            lines.append("")
            lines.append(f"average JCT: {_fmt(self.average_jct_s)} s")
        if self.unfinished:
            lines.append(f"unfinished: {', '.join(self.unfinished)}")
        lines.append("counts: " + ", ".join(f"{k}={self.counts[k]}" for k in sorted(self.counts)))
        if self.rtt:
            lines.append("")
            lines.append(_align(
                ("profile", "n", "mean_ms", "variance_ms2", "p95_ms"),
                [(n, str(s.count), _fmt(s.mean_ms), _fmt(s.variance_ms2), _fmt(s.p95_ms)) for n, s in sorted(self.rtt.items())],
            ))
        if self.tracking:
            lines.append("")
            lines.append(_align(
                ("tracking", "rtt_ms", "displacement_m", "feasible"),
                [(n, _fmt(t.rtt_ms), _fmt(t.displacement_m), "yes" if t.feasible else "no") for n, t in sorted(self.tracking.items())],
            ))
        return "\n".join(lines)


def _fmt(x) -> str:
    if x is None:
        return ""
    return f"{x:.6f}"


def _align(header, rows) -> str:
    widths = [max([len(h)] + [len(r[i]) for r in rows]) for i, h in enumerate(header)]
    out = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    out.append("  ".join("-" * w for w in widths))
    out.extend("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows)
    return "\n".join(out)


class Simulation:
    def __init__(self, scenario: ScenarioConfig, policy: Optional[str] = None, seed: Optional[int] = None,
                 max_events: int = 1_000_000):
        self.scenario = scenario
        self.policy = normalize_policy(policy or scenario.policy)
        self.seed = scenario.seed if seed is None else seed
        self.rng = random.Random(self.seed)
        self.max_events = max_events
        # ground truth stays here; ST-LAS and FIFO never see it
        self._durations = {j.job_id: j.true_duration_s for j in scenario.jobs}
        self._specs = {j.job_id: j for j in scenario.jobs}
        self._descriptors = {w.worker_id: w for w in scenario.workers}
        cap = scenario.total_capacity
        if self.policy == "fifo":
            self.sched = FifoScheduler(scenario.scheduler, cap)
        elif self.policy == "srsf-oracle":
            self.sched = SrsfOracleScheduler(self._durations, scenario.scheduler, cap)
        else:
            self.sched = Scheduler(scenario.scheduler, cap)
        for w in scenario.workers:
            self.sched.add_worker(w)
        self.now = 0.0
        self._heap = []
        self._seq = 0
        self._epoch = Counter()
        self._ticks = set()
        self._rtts = defaultdict(list)
        self._preemptions = Counter()

    def _push(self, time: float, kind: str, subject: str = "", data: Optional[dict] = None) -> None:
        if time < self.now:
            raise SimulationError(f"{kind} event scheduled in the past ({time} < {self.now})")
        self._seq += 1
        heapq.heappush(self._heap, Event(time, _RANK[kind], self._seq, kind, subject, data))

    def run(self) -> TraceReport:
        sc = self.scenario
        for spec in sorted(sc.jobs, key=lambda j: (j.arrival_time, j.job_id)):
            self._push(spec.arrival_time, ARRIVAL, spec.job_id)
        for f in sc.failures:
            self._push(f.time, WORKER_FAIL, f.worker_id)
            if f.recover_at is not None:
                self._push(f.recover_at, WORKER_JOIN, f.worker_id)
        for m in sc.migrations:
            self._push(m.time, MIGRATION, m.job_id)
        for i, stream in enumerate(sc.offload):
            for k in range(stream.count):
                self._push(stream.start_s + k * stream.interval_s, OFFLOAD_REQUEST, stream.profile,
                           {"payload_bytes": stream.payload_bytes})

        handlers = {
            ARRIVAL: self._on_arrival,
            PROGRESS_TICK: self._on_tick,
            COMPLETION: self._on_completion,
            WORKER_FAIL: self._on_worker_fail,
            WORKER_JOIN: self._on_worker_join,
            CHECKPOINT_DONE: self._on_checkpoint_done,
            OFFLOAD_REQUEST: self._on_offload,
            MIGRATION: self._on_migration,
        }
        processed = 0
        while self._heap:
            ev = heapq.heappop(self._heap)
            processed += 1
            if processed > self.max_events:
                raise SimulationError(f"event budget of {self.max_events} exhausted")
            self.now = ev.time
            self.sched.advance_running(ev.time)
            actions = handlers[ev.kind](ev)
            self._apply(actions or [])
            if sc.check_invariants:
                self.sched.check_invariants()
            self._schedule_tick()
        return self._report()

    # -- handlers --------------------------------------------------------

    def _on_arrival(self, ev: Event) -> list:
        return self.sched.on_job_arrival(self._specs[ev.subject])

    def _on_tick(self, ev: Event) -> list:
        self._ticks.discard(ev.time)
        return self.sched.schedule_pass()

    def _on_completion(self, ev: Event) -> list:
        job = self.sched.jobs[ev.subject]
        if job.status != JobStatus.RUNNING or ev.data["epoch"] != self._epoch[ev.subject]:
            return []
        return self.sched.on_job_complete(ev.subject)

    def _on_worker_fail(self, ev: Event) -> list:
        actions = self.sched.remove_worker(ev.subject)
        for a in actions:
            self._epoch[a.job_id] += 1
        return self.sched.schedule_pass()

    def _on_worker_join(self, ev: Event) -> list:
        self.sched.add_worker(self._descriptors[ev.subject])
        return self.sched.schedule_pass()

    def _on_checkpoint_done(self, ev: Event) -> list:
        jid = ev.subject
        job = self.sched.jobs[jid]
        if ev.data["epoch"] != self._epoch[jid]:
            return []
        if ev.data.get("periodic"):
            if job.status == JobStatus.RUNNING:
                self.sched.record_checkpoint(jid)
                self._push(self.now + self.scenario.checkpoint_interval_s, CHECKPOINT_DONE, jid,
                           {"epoch": self._epoch[jid], "periodic": True})
            return []
        if job.status != JobStatus.PREEMPTING:
            return []
        return self.sched.on_checkpoint_done(jid)

    def _on_offload(self, ev: Event) -> list:
        profile = self.scenario.profiles[ev.subject]
        self._rtts[ev.subject].append(roundtrip_latency(profile, ev.data["payload_bytes"], self.rng))
        return []

    def _on_migration(self, ev: Event) -> list:
        job = self.sched.jobs.get(ev.subject)
        if job is None or job.status != JobStatus.RUNNING:
            return []
        current = set(job.workers())
        view = [w for wid, w in sorted(self.sched.workers.items()) if wid not in current]
        plan = place_gang(job.spec, view, self.sched.config.skew_threshold)
        if plan is None:
            return []
        return [self.sched.begin_migration(ev.subject, plan)]

    # -- actions ---------------------------------------------------------

    def _apply(self, actions: list) -> None:
        overhead = self.sched.config.checkpoint_overhead_s
        for a in actions:
            if a.kind in (DISPATCH, RESUME):
                self._epoch[a.job_id] += 1
                job = self.sched.jobs[a.job_id]
                remaining = max(0.0, self._durations[a.job_id] - job.executed_time_s)
                self._push(self.now + remaining, COMPLETION, a.job_id, {"epoch": self._epoch[a.job_id]})
                if self.scenario.checkpoint_interval_s:
                    self._push(self.now + self.scenario.checkpoint_interval_s, CHECKPOINT_DONE, a.job_id,
                               {"epoch": self._epoch[a.job_id], "periodic": True})
            elif a.kind in (PREEMPT, MIGRATE):
                self._epoch[a.job_id] += 1
                if a.kind == PREEMPT:
                    self._preemptions[a.job_id] += 1
                self._push(self.now + overhead, CHECKPOINT_DONE, a.job_id, {"epoch": self._epoch[a.job_id]})

    def _schedule_tick(self) -> None:
        t = self.sched.next_decision_time()
        if t is None or t <= self.now or t in self._ticks:
            return
        self._ticks.add(t)
        self._push(t, PROGRESS_TICK)

    def _report(self) -> TraceReport:
        results = []
        jcts = []
        unfinished = []
        for spec in sorted(self.scenario.jobs, key=lambda j: (j.arrival_time, j.job_id)):
            job = self.sched.jobs.get(spec.job_id)
            done = job is not None and job.status == JobStatus.COMPLETED
            completion = job.completion_time if done else None
            jct = completion - spec.arrival_time if done else None
            if done:
                jcts.append(jct)
            else:
                unfinished.append(spec.job_id)
            results.append(JobResult(spec.job_id, spec.arrival_time, completion, jct, self._preemptions[spec.job_id]))
        kinds = Counter(a.kind for a in self.sched.log)
        counts = {
            "dispatches": kinds[DISPATCH],
            "preemptions": kinds[PREEMPT],
            "migrations": kinds[MIGRATE],
            "promotions": kinds[PROMOTE],
            "demotions": kinds[DEMOTE],
            "requeues": kinds[REQUEUE],
            "completions": kinds[COMPLETE],
        }
        rtt = {name: rtt_stats(xs) for name, xs in self._rtts.items()}
        tracking = {}
        if self.scenario.tracking is not None:
            tc = self.scenario.tracking
            for name in tc.profiles:
                tracking[name] = tracking_feasibility(tc.walk_speed_mps, self.scenario.profiles[name].mean_ms, tc.fov_limit_m)
        return TraceReport(
            policy=self.policy,
            seed=self.seed,
            scenario=self.scenario.name,
            jobs=results,
            average_jct_s=statistics.fmean(jcts) if jcts else None,
            counts=counts,
            rtt=rtt,
            tracking=tracking,
            unfinished=unfinished,
            end_time_s=self.now,
        )


def run_scenario(scenario: ScenarioConfig, policy: Optional[str] = None, seed: Optional[int] = None) -> TraceReport:
    """Run one scenario under one policy. Deterministic in
    (scenario, policy, seed)."""
    return Simulation(scenario, policy, seed).run()
