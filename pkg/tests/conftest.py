"""
PrefSynth - Test Configuration
"""
from typing import Generator

import pytest
import structlog

from prefsynth.core.config import get_settings
from prefsynth.schemas import (
    CorpusConfig,
    EncoderConfig,
    ExperimentConfig,
    KeywordExtractorConfig,
    MetricProtocolConfig,
    ModelDims,
    RankTrainConfig,
    ReflectionConfig,
    RetrievalConfig,
    RunConfig,
)
from prefsynth.services.corpus import Corpus, generate_corpus
from prefsynth.services.pipeline import Pipeline
from prefsynth.services.ranker import RankModelParams, train_rank_model


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path, monkeypatch) -> Generator[None, None, None]:
    """Point the default output root at a temp dir and reset cached settings."""
    monkeypatch.setenv("PREFSYNTH_OUTPUT_ROOT", str(tmp_path / "out"))
    monkeypatch.delenv("PREFSYNTH_KEYWORD_ENDPOINT_URL", raising=False)
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()
    # loggers configured by the CLI hold the captured stderr of the test that ran it
    structlog.reset_defaults()


@pytest.fixture(scope="session")
def small_corpus_config() -> CorpusConfig:
    return CorpusConfig(
        n_users=6,
        history_length=10,
        n_categories=4,
        items_per_category=8,
        visual_dim=12,
        held_out_per_user=3,
        pixel_size=8,
    )


@pytest.fixture(scope="session")
def small_run_config(small_corpus_config: CorpusConfig) -> RunConfig:
    """Small dims and short schedules so pipeline tests run in seconds."""
    return RunConfig(
        name="test",
        seed=7,
        corpus=small_corpus_config,
        encoder=EncoderConfig(dim=16),
        keywords=KeywordExtractorConfig(min_count=1, n=6),
        dims=ModelDims(
            n_img_tokens=2, n_queries=2, mapper_depth=2, mapper_dim=4, attn_dim=4, lift_rows=2
        ),
        retrieval=RetrievalConfig(k=3),
        ranker=RankTrainConfig(repr_dim=8, epochs=10, auc_negatives=5),
        reflection=ReflectionConfig(steps=10, steps_per_user=2, epochs=1),
        metrics=MetricProtocolConfig(
            pool_size=5, eval_negatives=20, cutoffs=[5, 10], ssim_window=4
        ),
        experiment=ExperimentConfig(seeds=[0, 1], max_users=3),
    )


@pytest.fixture(scope="session")
def small_corpus(small_corpus_config: CorpusConfig) -> Corpus:
    return generate_corpus(small_corpus_config, seed=3)


@pytest.fixture(scope="session")
def small_pipeline(small_run_config: RunConfig, small_corpus: Corpus) -> Pipeline:
    return Pipeline(small_run_config, small_corpus)


@pytest.fixture(scope="session")
def toy_ranker(
    small_corpus: Corpus, small_run_config: RunConfig, small_pipeline: Pipeline
) -> RankModelParams:
    return train_rank_model(small_corpus, small_run_config.ranker, small_pipeline.encoder, seed=0)

