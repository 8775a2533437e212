"""
PrefSynth - Ranking Model Training Stage
"""
from pathlib import Path
from typing import Any

from prefsynth.schemas import RunConfig
from prefsynth.services.checkpoints import save_rank_model
from prefsynth.services.corpus import load_corpus
from prefsynth.services.orchestrator import RunDirectory, write_json
from prefsynth.services.pipeline import Pipeline
from prefsynth.services.ranker import evaluate_recommendations, train_rank_model
from stages.base import ArtifactStage, StageConfig


class TrainRankModelStage(ArtifactStage):
    """Trains the ranking model on the run corpus and records Recall/NDCG."""

    def __init__(self, run_config: RunConfig) -> None:
        super().__init__(
            StageConfig(name="train-rm", description="Train the pairwise ranking model"),
            run_config,
        )

    def inputs(self, run_dir: RunDirectory) -> dict[str, Path]:
        return {"corpus": run_dir.require("corpus.jsonl", self.run_config.corpus_path)}

    def execute(self, run_dir: RunDirectory, inputs: dict[str, Path]) -> tuple[list[Path], dict[str, Any]]:
        cfg = self.run_config
        corpus = load_corpus(inputs["corpus"])
        pipeline = Pipeline(cfg, corpus)
        rm = train_rank_model(corpus, cfg.ranker, pipeline.encoder, cfg.seed)
        rec = evaluate_recommendations(corpus, rm, pipeline.encoder, cfg.metrics, cfg.seed)
        model_path = save_rank_model(rm, run_dir.path("rank_model.json"))
        rec_path = write_json(run_dir.path("recommendations.json"), rec)
        return [model_path, rec_path], {
            "final_auc": rm.training_auc[-1] if rm.training_auc else None,
            "recall": {str(k): v for k, v in rec.recall.items()},
            "ndcg": {str(k): v for k, v in rec.ndcg.items()},
        }
