"""Gang placement: feasibility filtering, min-load ranking and consolidation
of skewed models onto a single worker.

All functions here read a cluster view (a sequence of ``WorkerRecord``) and
never mutate it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .domain import DIMENSIONS, JobSpec, ResourceVector, WorkerRecord, fits

DEFAULT_SKEW_THRESHOLD = 1.0


@dataclass(frozen=True)
class PlacementPlan:
    assignments: tuple  # ((worker_id, ResourceVector), ...)
    consolidated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "assignments", tuple(self.assignments))

    def worker_ids(self) -> list:
        return sorted({wid for wid, _ in self.assignments})

    def per_worker(self) -> dict:
        """Aggregate demand per worker id."""
        out: dict = {}
        for wid, demand in self.assignments:
            out[wid] = out.get(wid, ResourceVector()) + demand
        return out


def intrusiveness(worker: WorkerRecord, demand: ResourceVector, allocated: Optional[ResourceVector] = None) -> float:
    """Max-dimension utilization the worker would reach after taking
    ``demand``. Values above 1.0 are inadmissible."""
    alloc = worker.allocated if allocated is None else allocated
    score = 0.0
    for d in DIMENSIONS:
        cap = getattr(worker.capacity, d)
        need = getattr(alloc, d) + getattr(demand, d)
        if cap <= 0:
            if need > 0:
                return math.inf
            continue
        score = max(score, need / cap)
    return score


def worker_load(worker: WorkerRecord) -> float:
    return intrusiveness(worker, ResourceVector())


def _eligible(job: JobSpec, worker: WorkerRecord) -> bool:
    return worker.alive and job.locality_tags <= worker.tags


def _admissible(worker: WorkerRecord, allocated: ResourceVector, demand: ResourceVector) -> bool:
    return fits(allocated + demand, worker.capacity) and intrusiveness(worker, demand, allocated) <= 1.0 + 1e-9


def feasible_workers(job: JobSpec, workers: Sequence[WorkerRecord]) -> list:
    """Ids of workers that can host one gang member right now."""
    return [
        w.worker_id
        for w in workers
        if _eligible(job, w) and _admissible(w, w.allocated, job.required)
    ]


def place_gang(
    job: JobSpec,
    workers: Sequence[WorkerRecord],
    skew_threshold: float = DEFAULT_SKEW_THRESHOLD,
) -> Optional[PlacementPlan]:
    """All-or-nothing placement of ``job.gang_size`` members.

    Skewed models only get single-worker plans. Otherwise each member goes
    to the feasible worker with the lowest post-assignment load, ties broken
    by worker id.
    """
    candidates = sorted((w for w in workers if _eligible(job, w)), key=lambda w: w.worker_id)
    member = job.required

    if job.model.skewness > skew_threshold:
        whole = member.scale(job.gang_size)
        best = None
        for w in candidates:
            if not _admissible(w, w.allocated, whole):
                continue
            score = intrusiveness(w, whole)
            if best is None or score < best[0]:
                best = (score, w.worker_id)
        if best is None:
            return None
        return PlacementPlan(tuple((best[1], member) for _ in range(job.gang_size)), consolidated=True)

    allocated = {w.worker_id: w.allocated for w in candidates}
    assignments = []
    for _ in range(job.gang_size):
        best = None
        for w in candidates:
            alloc = allocated[w.worker_id]
            if not _admissible(w, alloc, member):
                continue
            score = intrusiveness(w, member, alloc)
            if best is None or score < best[0]:
                best = (score, w.worker_id)
        if best is None:
            return None
        wid = best[1]
        allocated[wid] = allocated[wid] + member
        assignments.append((wid, member))
    return PlacementPlan(tuple(assignments))


def plan_is_valid(
    job: JobSpec,
    plan: PlacementPlan,
    workers: Sequence[WorkerRecord],
    skew_threshold: float = DEFAULT_SKEW_THRESHOLD,
) -> bool:
    """Independent re-check of a plan against the view it was made for."""
    if len(plan.assignments) != job.gang_size:
        return False
    by_id = {w.worker_id: w for w in workers}
    for wid, demand in plan.per_worker().items():
        w = by_id.get(wid)
        if w is None or not w.alive or not job.locality_tags <= w.tags:
            return False
        if not fits(w.allocated + demand, w.capacity):
            return False
    if (plan.consolidated or job.model.skewness > skew_threshold) and len(plan.worker_ids()) != 1:
        return False
    return True


def max_load_after(plan: PlacementPlan, workers: Sequence[WorkerRecord]) -> float:
    """Highest post-assignment load over the workers a plan touches."""
    by_id = {w.worker_id: w for w in workers}
    return max(intrusiveness(by_id[wid], demand) for wid, demand in plan.per_worker().items())
