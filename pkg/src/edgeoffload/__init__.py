"""Edge inference offload: an ST-LAS gang scheduler, a live control plane
with synthetic workers, and a discrete-event simulator for the same state
machines."""

from .domain import JobSpec, JobState, ModelProfile, ResourceVector, WorkerDescriptor
from .placement import PlacementPlan, place_gang
from .scheduler import FifoScheduler, Scheduler, SchedulerConfig, SrsfOracleScheduler

__version__ = "0.1.0"

__all__ = [
    "FifoScheduler",
    "JobSpec",
    "JobState",
    "ModelProfile",
    "PlacementPlan",
    "ResourceVector",
    "Scheduler",
    "SchedulerConfig",
    "SrsfOracleScheduler",
    "WorkerDescriptor",
    "place_gang",
]
