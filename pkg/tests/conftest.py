import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from edgeoffload.domain import JobSpec, ModelProfile, ResourceVector, WorkerDescriptor, WorkerRecord


def rv(**kw) -> ResourceVector:
    return ResourceVector.from_dict(kw)


def worker(wid: str, tags=(), **cap) -> WorkerDescriptor:
    return WorkerDescriptor(wid, rv(**cap), frozenset(tags))


def record(wid: str, allocated=None, tags=(), **cap) -> WorkerRecord:
    return WorkerRecord(descriptor=worker(wid, tags, **cap), allocated=allocated or ResourceVector())


def job(jid: str, gang: int = 1, arrival: float = 0.0, layers=(), tags=(), duration=None,
        kind: str = "training", **req) -> JobSpec:
    return JobSpec(
        job_id=jid,
        required=rv(**req),
        model=ModelProfile("m-" + jid, layer_param_sizes=tuple(layers)),
        kind=kind,
        gang_size=gang,
        locality_tags=frozenset(tags),
        arrival_time=arrival,
        true_duration_s=duration,
    )


class FakeClock:
    def __init__(self, t: float = 0.0):
        self.t = t

    def __call__(self) -> float:
        return self.t

    def advance(self, dt: float) -> float:
        self.t += dt
        return self.t


@pytest.fixture
def clock():
    return FakeClock(1000.0)
