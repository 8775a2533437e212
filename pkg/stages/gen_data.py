"""
PrefSynth - Corpus Generation Stage
"""
from pathlib import Path
from typing import Any

from prefsynth.core import get_logger
from prefsynth.schemas import RunConfig
from prefsynth.services.corpus import generate_corpus, save_corpus
from prefsynth.services.orchestrator import RunDirectory, sha256_file
from stages.base import ArtifactStage, StageConfig

logger = get_logger(__name__)


class GenDataStage(ArtifactStage):
    """Generates the synthetic corpus for the run seed."""

    def __init__(self, run_config: RunConfig) -> None:
        super().__init__(
            StageConfig(name="gen-data", description="Generate a synthetic interaction corpus"),
            run_config,
        )

    def execute(self, run_dir: RunDirectory, inputs: dict[str, Path]) -> tuple[list[Path], dict[str, Any]]:
        corpus = generate_corpus(self.run_config.corpus, self.run_config.seed)
        path = save_corpus(corpus, run_dir.path("corpus.jsonl"))
        return [path], {
            "users": len(corpus.users),
            "items": len(corpus.items),
            "categories": len(corpus.category_prototypes),
            "corpus_sha256": sha256_file(path),
        }
