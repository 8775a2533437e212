"""
PrefSynth - Base Stage Classes
Every CLI subcommand is a stage deriving from BaseStage: artifact stages
work inside one run directory, experiment stages fan out over seeds.
"""
import json
from abc import ABC, abstractmethod
from functools import partial
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel

from prefsynth.core import get_logger, get_settings, log_context
from prefsynth.core.errors import ConfigError
from prefsynth.schemas import ExperimentReport, ObservationRecord, RunConfig
from prefsynth.services.experiments import experiment_frame, summarize
from prefsynth.services.orchestrator import (
    ManifestRecorder,
    RunDirectory,
    run_parallel,
    write_json,
    write_jsonl,
)

logger = get_logger(__name__)


class StageConfig(BaseModel):
    """Static description of a stage."""
    name: str
    description: str


class BaseStage(ABC):
    """
    Base class for CLI stages.

    Holds the run configuration, resolves the output root and worker count,
    and runs the stage body with the stage's log context bound.
    """

    def __init__(self, config: StageConfig, run_config: RunConfig) -> None:
        self.config = config
        self.run_config = run_config

    @property
    def output_root(self) -> Path:
        return Path(self.run_config.output_dir or get_settings().output_root)

    @property
    def jobs(self) -> int:
        return self.run_config.jobs or get_settings().jobs

    def validate_input(self) -> None:
        """Raise ConfigError on configurations the stage cannot run."""

    def log_fields(self) -> dict[str, Any]:
        return {"stage": self.config.name, "run": self.run_config.name, "seed": self.run_config.seed}

    def run(self) -> dict[str, Any]:
        with log_context(**self.log_fields()):
            return self._run()

    @abstractmethod
    def _run(self) -> dict[str, Any]:
        """Stage body; returns the JSON result printed by the CLI."""


class ArtifactStage(BaseStage):
    """
    A stage that produces artifacts in one run directory.

    It:
    - validates its configuration and resolves upstream artifacts
    - skips itself when an identical completed manifest exists
    - writes a manifest before producing results and completes it after
    - returns a JSON-serialisable summary
    """

    def run_directory(self) -> RunDirectory:
        return RunDirectory.for_run(self.run_config.name, self.run_config.seed, self.output_root)

    def inputs(self, run_dir: RunDirectory) -> dict[str, Path]:
        """Upstream artifacts, checksummed into the manifest."""
        return {}

    @abstractmethod
    def execute(
        self, run_dir: RunDirectory, inputs: dict[str, Path]
    ) -> tuple[list[Path], dict[str, Any]]:
        """Produce outputs inside ``run_dir``; return (paths written, summary)."""

    def summary_path(self, run_dir: RunDirectory) -> Path:
        return run_dir.path(f"summaries/{self.config.name}.json")

    def _run(self) -> dict[str, Any]:
        name = self.config.name
        logger.info("running stage")
        self.validate_input()
        run_dir = self.run_directory()
        inputs = self.inputs(run_dir)
        recorder = ManifestRecorder(run_dir, name, self.run_config, self.run_config.seed, inputs)

        if recorder.is_noop():
            logger.info("stage is up to date", run_dir=str(run_dir.root))
            summary = json.loads(self.summary_path(run_dir).read_text(encoding="utf-8"))
            return self._result("noop", run_dir, recorder.manifest.outputs, summary)

        recorder.begin()
        outputs, summary = self.execute(run_dir, inputs)
        summary_file = write_json(self.summary_path(run_dir), summary)
        manifest = recorder.complete([*outputs, summary_file])
        logger.info("stage completed", run_dir=str(run_dir.root))
        return self._result("completed", run_dir, manifest.outputs, summary)

    def _result(
        self, status: str, run_dir: RunDirectory, outputs: dict[str, str], summary: dict[str, Any]
    ) -> dict[str, Any]:
        return {
            "command": self.config.name,
            "status": status,
            "run_dir": str(run_dir.root),
            "outputs": outputs,
            "summary": summary,
        }


class ExperimentStage(BaseStage):
    """
    A stage that runs once per experiment seed in out/<experiment>/<seed>/
    and aggregates the seeds into out/<experiment>/report.{json,csv}.
    """

    def experiment_name(self) -> str:
        return f"{self.run_config.name}.{self.config.name}"

    def log_fields(self) -> dict[str, Any]:
        return {"stage": self.config.name, "experiment": self.experiment_name()}

    @abstractmethod
    def arm_order(self) -> list[str]:
        """Arms in report order."""

    def arm_values(self) -> Optional[dict[str, float]]:
        return None

    @abstractmethod
    def observe(self, seed: int) -> list[ObservationRecord]:
        """Run one seed and return its observations."""

    def seed_inputs(self) -> dict[str, Path]:
        if self.run_config.corpus_path:
            path = Path(self.run_config.corpus_path)
            if not path.is_file():
                raise ConfigError(f"corpus_path {path} does not exist")
            return {"corpus": path}
        return {}

    def run_seed(self, seed: int) -> list[ObservationRecord]:
        with log_context(stage=self.config.name, experiment=self.experiment_name(), seed=seed):
            return self._run_seed(seed)

    def _run_seed(self, seed: int) -> list[ObservationRecord]:
        run_dir = RunDirectory.for_run(self.experiment_name(), seed, self.output_root)
        recorder = ManifestRecorder(run_dir, self.config.name, self.run_config, seed, self.seed_inputs())
        obs_path = run_dir.path("observations.jsonl")
        if recorder.is_noop():
            logger.info("seed is up to date")
            lines = obs_path.read_text(encoding="utf-8").splitlines()
            return [ObservationRecord.model_validate_json(line) for line in lines if line]
        recorder.begin()
        observations = self.observe(seed)
        recorder.complete([write_jsonl(obs_path, observations)])
        return observations

    def _run(self) -> dict[str, Any]:
        name = self.config.name
        seeds = self.run_config.experiment.seeds
        logger.info("running experiment", seeds=len(seeds), jobs=self.jobs)
        self.validate_input()
        per_seed = run_parallel([partial(self.run_seed, s) for s in seeds], self.jobs)
        observations = [obs for batch in per_seed for obs in batch]
        report = summarize(self.experiment_name(), observations, self.arm_order(), self.arm_values())
        paths = self.write_report(report)
        return {
            "command": name,
            "status": "completed",
            "experiment": report.experiment,
            "outputs": {k: str(v) for k, v in paths.items()},
            "arms": {arm.arm: arm.metrics for arm in report.arms},
            "comparisons": [c.model_dump(mode="json") for c in report.comparisons],
        }

    def write_report(self, report: ExperimentReport) -> dict[str, Path]:
        folder = self.output_root / report.experiment
        json_path = write_json(folder / "report.json", report)
        csv_path = folder / "report.csv"
        experiment_frame(report).to_csv(csv_path, index=False)
        return {"report": json_path, "csv": csv_path}
