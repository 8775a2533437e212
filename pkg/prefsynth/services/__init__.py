"""Services module exports."""
from prefsynth.services.orchestrator import ManifestRecorder, RunDirectory, run_parallel
from prefsynth.services.pipeline import Pipeline, UserContext
from prefsynth.services.reflection import ReflectionTrainer

__all__ = [
    "ManifestRecorder",
    "RunDirectory",
    "run_parallel",
    "Pipeline",
    "UserContext",
    "ReflectionTrainer",
]
