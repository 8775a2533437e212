"""
PrefSynth - Reflection Stage
"""
from pathlib import Path
from typing import Any

import numpy as np

from prefsynth.schemas import RunConfig
from prefsynth.services.checkpoints import load_rank_model, save_calibrator
from prefsynth.services.corpus import load_corpus
from prefsynth.services.orchestrator import RunDirectory, write_jsonl
from prefsynth.services.pipeline import Pipeline
from prefsynth.services.reflection import ReflectionTrainer
from stages.base import ArtifactStage, StageConfig


class ReflectStage(ArtifactStage):
    """Trains the calibrator by rank-guided reflection over every user."""

    def __init__(self, run_config: RunConfig) -> None:
        super().__init__(
            StageConfig(name="reflect", description="Train the calibrator with rank-guided reflection"),
            run_config,
        )

    def inputs(self, run_dir: RunDirectory) -> dict[str, Path]:
        return {
            "corpus": run_dir.require("corpus.jsonl", self.run_config.corpus_path),
            "rank_model": run_dir.require("rank_model.json"),
        }

    def execute(self, run_dir: RunDirectory, inputs: dict[str, Path]) -> tuple[list[Path], dict[str, Any]]:
        corpus = load_corpus(inputs["corpus"])
        rm = load_rank_model(inputs["rank_model"])
        pipeline = Pipeline(self.run_config, corpus)
        trainer = ReflectionTrainer(pipeline, rm)
        result = trainer.reflect_corpus(corpus.users, pipeline.init_params())

        params_path = save_calibrator(result.params, run_dir.path("calibrator.json"))
        log_path = write_jsonl(run_dir.path("reflection_steps.jsonl"), result.logs)
        penalties = [log.mean_penalty for log in result.logs]
        window = min(len(penalties), len(corpus.users))
        return [params_path, log_path], {
            "steps": len(result.logs),
            "users": len(corpus.users),
            "first_mean_penalty": float(np.mean(penalties[:window])) if penalties else None,
            "last_mean_penalty": float(np.mean(penalties[-window:])) if penalties else None,
            "calibrator_checksum": result.params.checksum(),
        }
