"""
PrefSynth - Evaluation Stage
"""
from pathlib import Path
from typing import Any

from prefsynth.schemas import RunConfig
from prefsynth.services.checkpoints import load_calibrator, load_rank_model
from prefsynth.services.corpus import load_corpus
from prefsynth.services.metrics import METRIC_FIELDS, evaluate_run, report_frame
from prefsynth.services.orchestrator import RunDirectory, write_json
from prefsynth.services.pipeline import Pipeline
from stages.base import ArtifactStage, StageConfig


class EvaluateStage(ArtifactStage):
    """Computes the per-user metric family for the trained calibrator."""

    def __init__(self, run_config: RunConfig) -> None:
        super().__init__(
            StageConfig(name="eval", description="Evaluate generated images against the run corpus"),
            run_config,
        )

    def inputs(self, run_dir: RunDirectory) -> dict[str, Path]:
        return {
            "corpus": run_dir.require("corpus.jsonl", self.run_config.corpus_path),
            "rank_model": run_dir.require("rank_model.json"),
            "calibrator": run_dir.require("calibrator.json"),
        }

    def execute(self, run_dir: RunDirectory, inputs: dict[str, Path]) -> tuple[list[Path], dict[str, Any]]:
        corpus = load_corpus(inputs["corpus"])
        rm = load_rank_model(inputs["rank_model"])
        params = load_calibrator(inputs["calibrator"])
        pipeline = Pipeline(self.run_config, corpus)
        report = evaluate_run(corpus, params, rm, pipeline, jobs=self.jobs)

        json_path = write_json(run_dir.path("metrics.json"), report)
        csv_path = run_dir.path("metrics.csv")
        report_frame(report).to_csv(csv_path, index=False)
        return [json_path, csv_path], {name: getattr(report, name) for name in METRIC_FIELDS}
