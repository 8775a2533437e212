"""
PrefSynth - Pipeline Wiring

Builds the shared components of a run (encoder, projector, renderer,
generator) from a RunConfig and prepares the per-user quantities that stay
fixed while the calibrator trains: retrieval result, keywords, text and
global embeddings, and the reference/global candidate images and scores.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from prefsynth.core.errors import ConfigError, DomainError
from prefsynth.core.numerics import spawn_rng
from prefsynth.schemas import KeywordsOver, Provenance, RunConfig
from prefsynth.services.corpus import Corpus, PixelRenderer, UserSequence
from prefsynth.services.encoders import (
    KeywordSet,
    SemanticEncoder,
    SemanticProjector,
    extract_keywords,
)
from prefsynth.services.generator import GeneratedImage, Generator
from prefsynth.services.preference import CalibratorParams, build_global, forward
from prefsynth.services.ranker import RankModelParams, score_candidates
from prefsynth.services.retrieval import RetrievalResult, retrieve


@dataclass(eq=False)
class UserContext:
    user: UserSequence
    retrieval: Optional[RetrievalResult]
    keywords: KeywordSet
    e_txt: np.ndarray
    e_g: np.ndarray
    e_sem_ref: np.ndarray
    v_ref: GeneratedImage
    v_glob: GeneratedImage
    rho_ref: float
    rho_glob: float

    @property
    def p_ret(self) -> Optional[np.ndarray]:
        return self.retrieval.p_ret if self.retrieval is not None else None

    def preference_anchor(self) -> np.ndarray:
        """p_ret, or the mean history feature when retrieval is disabled."""
        if self.retrieval is not None:
            return self.retrieval.p_ret
        return self.user.history_features().mean(axis=0)


class Pipeline:
    """Shared, read-only components for one run configuration."""

    def __init__(self, config: RunConfig, corpus: Optional[Corpus] = None) -> None:
        self.config = config
        visual_dim = corpus.visual_dim if corpus is not None else config.corpus.visual_dim
        corpus_cfg = config.corpus
        if corpus is not None and corpus.generation_config is not None:
            corpus_cfg = corpus.generation_config
        if corpus_cfg.visual_dim != visual_dim:
            corpus_cfg = corpus_cfg.updated(visual_dim=visual_dim)
        self.visual_dim = visual_dim
        self.encoder = SemanticEncoder(config.encoder)
        self.projector = SemanticProjector(config.encoder.dim, config.encoder.table_seed)
        self.renderer = PixelRenderer.from_config(corpus_cfg)
        self.generator = Generator(visual_dim, config.encoder.dim, self.renderer, config.generator)

    def init_params(self, seed: Optional[int] = None) -> CalibratorParams:
        return CalibratorParams.initialize(
            self.config.dims, self.config.encoder.dim, self.visual_dim, seed
        )

    def retrieval_for(self, user: UserSequence, k: Optional[int] = None) -> Optional[RetrievalResult]:
        rcfg = self.config.retrieval
        k = rcfg.k if k is None else k
        if k == 0:
            return None
        if k > len(user.history):
            raise ConfigError(f"retrieval k={k} exceeds history length {len(user.history)}")
        rng = spawn_rng(self.config.seed, "retrieval", user.user_id)
        return retrieve(user, k, self.encoder, rcfg.strategy, rng, rcfg.score_temperature)

    def keywords_for(self, user: UserSequence, retrieval: Optional[RetrievalResult]) -> KeywordSet:
        kcfg = self.config.keywords
        if retrieval is None or kcfg.keywords_over == KeywordsOver.FULL:
            items = list(user.history)
        else:
            items = [user.history[i] for i in retrieval.indices]
        if kcfg.min_count > len(items):
            kcfg = kcfg.updated(min_count=len(items))
        keywords = extract_keywords(items, kcfg)
        if keywords.is_empty():
            raise DomainError(f"user {user.user_id}: no keywords survived filtering")
        return keywords

    def prepare_user(
        self, user: UserSequence, rm: RankModelParams, k: Optional[int] = None
    ) -> UserContext:
        retrieval = self.retrieval_for(user, k)
        keywords = self.keywords_for(user, retrieval)
        e_txt = self.encoder.encode(keywords.keywords, source_item=user.user_id).vec
        e_g = build_global(keywords, self.encoder)
        v_ref = self.generator.make_reference_image(user.reference)
        v_glob = self.generator.make_global_image(e_g)
        # the generated slot only fills the candidate set here
        outcome = score_candidates(
            user,
            [v_ref, v_glob, GeneratedImage(v_ref.feature, v_ref.pixels, Provenance.GENERATED)],
            rm,
            self.encoder,
        )
        return UserContext(
            user=user,
            retrieval=retrieval,
            keywords=keywords,
            e_txt=e_txt,
            e_g=e_g,
            e_sem_ref=self.encoder.encode_item(user.reference).vec,
            v_ref=v_ref,
            v_glob=v_glob,
            rho_ref=outcome.scores[Provenance.REFERENCE],
            rho_glob=outcome.scores[Provenance.GLOBAL],
        )

    def generate_for(self, ctx: UserContext, params: CalibratorParams) -> tuple[np.ndarray, GeneratedImage]:
        trace = forward(params, ctx.e_txt, ctx.e_g)
        return trace.p_gen, self.generator.generate(trace.p_gen)
