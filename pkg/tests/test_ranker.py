"""
Tests for the ranking model and recommendation metrics
"""
import itertools
import math

import numpy as np
import pytest

from prefsynth.core.errors import ConfigError, DomainError
from prefsynth.core.numerics import check_gradient, spawn_rng
from prefsynth.schemas import PROVENANCE_PRIORITY, CorpusConfig, Provenance, RankTrainConfig
from prefsynth.services.corpus import generate_corpus
from prefsynth.services.encoders import SemanticEncoder
from prefsynth.services.generator import GeneratedImage
from prefsynth.services.ranker import (
    PairwiseBatch,
    RankModelParams,
    evaluate_recommendations,
    init_rank_params,
    ndcg_at_k,
    pairwise_loss_and_grads,
    rank_scores,
    recall_at_k,
    score_candidates,
    train_rank_model,
)


def test_rank_scores_matches_sort_oracle():
    """Every score pattern over a small alphabet, ties included."""
    for values in itertools.product([0.0, 0.5, 1.0], repeat=3):
        scores = dict(zip(PROVENANCE_PRIORITY, values))
        ranks = rank_scores(scores)
        assert sorted(ranks.values()) == [1, 2, 3]
        for a, b in itertools.permutations(PROVENANCE_PRIORITY, 2):
            if scores[a] > scores[b]:
                assert ranks[a] < ranks[b]
            elif scores[a] == scores[b]:
                earlier = PROVENANCE_PRIORITY.index(a) < PROVENANCE_PRIORITY.index(b)
                assert (ranks[a] < ranks[b]) == earlier


def test_rank_scores_tie_priority():
    ranks = rank_scores({Provenance.GENERATED: 1.0, Provenance.GLOBAL: 1.0, Provenance.REFERENCE: 1.0})
    assert ranks == {Provenance.REFERENCE: 1, Provenance.GLOBAL: 2, Provenance.GENERATED: 3}


def test_recall_and_ndcg_hand_values():
    ranked = ["a", "b", "c", "d"]
    positives = ["b", "d"]
    assert recall_at_k(ranked, positives, 2) == pytest.approx(0.5)
    assert recall_at_k(ranked, positives, 4) == pytest.approx(1.0)
    ideal = 1.0 + 1.0 / math.log2(3)
    assert ndcg_at_k(ranked, positives, 2) == pytest.approx((1.0 / math.log2(3)) / ideal)
    assert ndcg_at_k(ranked, positives, 4) == pytest.approx(
        (1.0 / math.log2(3) + 1.0 / math.log2(5)) / ideal
    )
    assert ndcg_at_k(["b", "d", "a"], positives, 3) == pytest.approx(1.0)
    with pytest.raises(DomainError):
        recall_at_k(ranked, positives, 0)
    with pytest.raises(DomainError):
        ndcg_at_k(ranked, [], 2)


def test_params_validation():
    good = np.eye(3)
    with pytest.raises(DomainError):
        RankModelParams(good, good, good, fusion_weight=1.5)
    with pytest.raises(DomainError):
        RankModelParams(good, np.eye(2, 3), good)
    with pytest.raises(DomainError):
        RankModelParams(good, np.eye(3, 4), good)


def test_pairwise_gradients_match_finite_differences():
    rng = spawn_rng(0, "pairwise")
    cfg = RankTrainConfig(repr_dim=3, init_jitter=0.5)
    params = init_rank_params(4, 5, cfg, seed=1)
    batch = PairwiseBatch(
        users=rng.normal(size=(6, 4)),
        pos_features=rng.normal(size=(6, 4)),
        pos_semantics=rng.normal(size=(6, 5)),
        neg_features=rng.normal(size=(6, 4)),
        neg_semantics=rng.normal(size=(6, 5)),
    )
    names = ("user_proj", "item_proj_visual", "item_proj_text")
    shapes = [getattr(params, n).shape for n in names]
    sizes = [int(np.prod(s)) for s in shapes]

    def unflatten(flat: np.ndarray) -> RankModelParams:
        parts = np.split(flat, np.cumsum(sizes)[:-1])
        arrays = {n: p.reshape(s) for n, p, s in zip(names, parts, shapes)}
        return RankModelParams(**arrays, fusion_weight=params.fusion_weight)

    flat = np.concatenate([getattr(params, n).ravel() for n in names])
    _, grads = pairwise_loss_and_grads(params, batch)
    analytic = np.concatenate([grads[n].ravel() for n in names])
    report = check_gradient(lambda f: pairwise_loss_and_grads(unflatten(f), batch)[0], analytic, flat)
    assert report.passed(1e-4), report.max_relative_error


def test_training_is_deterministic(small_corpus, small_pipeline, small_run_config):
    a = train_rank_model(small_corpus, small_run_config.ranker, small_pipeline.encoder, seed=4)
    b = train_rank_model(small_corpus, small_run_config.ranker, small_pipeline.encoder, seed=4)
    assert a == b
    assert a.training_auc == b.training_auc
    assert len(a.training_auc) == small_run_config.ranker.epochs


def test_rank_model_separates_reference_from_negatives():
    """On the default corpus the trained model ranks the reference above
    out-of-history items in at least 80% of sampled pairs."""
    corpus = generate_corpus(CorpusConfig(), seed=0)
    params = train_rank_model(corpus, RankTrainConfig(), SemanticEncoder(), seed=0)
    assert params.training_auc[-1] >= 0.8


def test_training_requires_users_and_held_out(small_corpus_config):
    corpus = generate_corpus(small_corpus_config, seed=1)
    with pytest.raises(ConfigError):
        train_rank_model(corpus.subset(0))


def test_score_candidates_ranks_and_checks_provenance(small_pipeline, small_corpus, toy_ranker):
    user = small_corpus.users[0]
    gen = small_pipeline.generator
    ref = gen.make_reference_image(user.reference)
    glob = gen.make_global_image(np.ones(small_pipeline.config.encoder.dim) / 4.0)
    made = gen.generate(user.reference.visual_feature)
    outcome = score_candidates(user, [ref, glob, made], toy_ranker, small_pipeline.encoder)
    assert set(outcome.scores) == set(PROVENANCE_PRIORITY)
    assert outcome.ranks == rank_scores(outcome.scores)

    duplicate = GeneratedImage(ref.feature, ref.pixels, Provenance.REFERENCE)
    with pytest.raises(DomainError):
        score_candidates(user, [ref, duplicate, made], toy_ranker, small_pipeline.encoder)
    with pytest.raises(DomainError):
        score_candidates(user, [ref, made], toy_ranker, small_pipeline.encoder)


def test_evaluate_recommendations(small_corpus, small_pipeline, small_run_config, toy_ranker):
    cfg = small_run_config.metrics
    report = evaluate_recommendations(small_corpus, toy_ranker, small_pipeline.encoder, cfg, seed=0)
    assert set(report.recall) == set(cfg.cutoffs)
    assert len(report.per_user) == len(small_corpus.users)
    for k in cfg.cutoffs:
        assert 0.0 <= report.recall[k] <= 1.0
        assert 0.0 <= report.ndcg[k] <= 1.0
    # recall can only grow with the cutoff
    assert report.recall[10] >= report.recall[5]
    again = evaluate_recommendations(small_corpus, toy_ranker, small_pipeline.encoder, cfg, seed=0)
    assert again.recall == report.recall
