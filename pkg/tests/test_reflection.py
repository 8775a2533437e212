"""
Tests for the reflection losses and training loop
"""
import math

import numpy as np
import pytest

from prefsynth.core.errors import ConfigError, DomainError, ReflectionStepError
from prefsynth.core.numerics import spawn_rng
from prefsynth.schemas import (
    ModelDims,
    ReflectionConfig,
    ReflectionStepLog,
    RewardMode,
    RunConfig,
    UserMetrics,
)
from prefsynth.services.corpus import generate_corpus
from prefsynth.services.experiments import seeded_config
from prefsynth.services.metrics import evaluate_run
from prefsynth.services.pipeline import Pipeline
from prefsynth.services.preference import forward
from prefsynth.services.ranker import train_rank_model
from prefsynth.services.reflection import (
    ReflectionTrainer,
    calibrator_loss,
    joint_loss,
    rank_loss,
    rank_penalty,
    reflect,
    reflect_corpus,
    semantic_loss,
    smooth_objective,
)


def test_rank_penalty_hand_values():
    assert rank_penalty(0.8, 0.5, 0.6, 0.1) == pytest.approx(0.3)
    assert rank_penalty(0.8, 0.9, 0.1, 0.0) == pytest.approx(1.5)
    # generated image above both: only the margin remains
    assert rank_penalty(0.2, 0.3, 0.9, 0.1) == pytest.approx(0.1)


def test_rank_penalty_never_below_margin():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        rho = rng.normal(size=3)
        delta = float(rng.uniform(0.0, 1.0))
        assert rank_penalty(*rho, delta) >= delta


def test_rank_loss_hand_values():
    p = np.zeros(2)
    eps = np.array([[1.0, 0.0], [0.0, 1.0]])
    log_p = -math.log(2 * math.pi) - 0.5
    loss, grad = rank_loss(p, eps, [1.0, 2.0], sigma=1.0)
    assert loss == pytest.approx(0.5 * 3.0 * log_p, abs=1e-12)
    np.testing.assert_allclose(grad, [0.5, 1.0])

    literal_loss, literal_grad = rank_loss(p, eps, [1.0, 2.0], 1.0, RewardMode.PAPER_LITERAL)
    assert literal_loss == pytest.approx(-loss)
    np.testing.assert_allclose(literal_grad, -grad)

    _, centred = rank_loss(p, eps, [1.0, 2.0], 1.0, baseline_subtraction=True)
    np.testing.assert_allclose(centred, [-0.25, 0.25])


def test_rank_loss_gradient_scales_with_sigma():
    eps = np.array([[0.2, -0.1, 0.0]])
    _, g1 = rank_loss(np.ones(3), eps, [2.0], sigma=1.0)
    _, g2 = rank_loss(np.ones(3), eps, [2.0], sigma=0.5)
    np.testing.assert_allclose(g2, 4.0 * g1)


def test_rank_loss_validation():
    with pytest.raises(DomainError):
        rank_loss(np.zeros(2), np.ones((1, 2)), [1.0], sigma=0.0)
    with pytest.raises(DomainError):
        rank_loss(np.zeros(2), np.ones((2, 2)), [1.0], sigma=1.0)
    with pytest.raises(DomainError):
        rank_loss(np.zeros(2), np.ones((1, 3)), [1.0], sigma=1.0)


def test_joint_and_component_losses():
    cfg = ReflectionConfig(alpha=0.2, beta=0.5, gamma=0.3)
    assert joint_loss(1.0, 2.0, 3.0, cfg) == pytest.approx(2.1)
    assert calibrator_loss([1.0, 2.0], [0.0, 0.0]) == pytest.approx(5.0)
    assert semantic_loss([1.0, 1.0], [1.0, 0.0]) == pytest.approx(1.0)


def test_reflection_config_validation():
    with pytest.raises(ConfigError):
        ReflectionConfig(alpha=0.0, beta=0.0, gamma=0.0)
    assert ReflectionConfig().effective_lr == pytest.approx(1e-2)


def test_reflect_is_deterministic(small_pipeline, small_corpus, toy_ranker):
    user = small_corpus.users[0]
    cfg = small_pipeline.config.reflection
    start = small_pipeline.init_params()
    a, logs_a = reflect(user, start, toy_ranker, cfg, small_pipeline)
    b, logs_b = reflect(user, start, toy_ranker, cfg, small_pipeline)
    assert a == b
    assert [log.model_dump() for log in logs_a] == [log.model_dump() for log in logs_b]
    assert a.checksum() != start.checksum()
    assert [log.step for log in logs_a] == list(range(cfg.steps))
    for log in logs_a:
        assert log.mean_penalty >= cfg.delta
        assert len(log.penalties) == cfg.r
        assert set(log.ranks) == {"reference", "global", "generated"}
        assert -log.ranks["generated"] < log.delta_r < 1.0


def test_zero_steps_returns_params_unchanged(small_pipeline, small_corpus, toy_ranker):
    trainer = ReflectionTrainer(small_pipeline, toy_ranker)
    start = small_pipeline.init_params()
    result = trainer.reflect(small_corpus.users[0], start, steps=0)
    assert result.params is start
    assert result.logs == []


def test_reflect_corpus_step_indices(small_pipeline, small_corpus, toy_ranker):
    cfg = small_pipeline.config.reflection
    users = small_corpus.users[:3]
    seen = []
    trainer = ReflectionTrainer(small_pipeline, toy_ranker, log_sink=seen.append)
    result = trainer.reflect_corpus(users, small_pipeline.init_params())
    expected = cfg.epochs * len(users) * cfg.steps_per_user
    assert len(result.logs) == expected
    assert [log.step for log in result.logs] == list(range(expected))
    assert seen == result.logs
    again = reflect_corpus(small_corpus, small_pipeline.init_params(), toy_ranker, cfg, small_pipeline, 3)
    assert again.params == result.params


def test_step_failure_is_wrapped(small_pipeline, small_corpus, toy_ranker, monkeypatch):
    trainer = ReflectionTrainer(small_pipeline, toy_ranker)
    user = small_corpus.users[1]
    trainer.context(user)

    def broken(*args, **kwargs):
        raise FloatingPointError("generator exploded")

    monkeypatch.setattr(small_pipeline.generator, "generate", broken)
    with pytest.raises(ReflectionStepError) as exc:
        trainer.reflect(user, small_pipeline.init_params(), steps=3, step_offset=4)
    assert exc.value.step == 4
    assert "generator exploded" in str(exc.value)
    assert exc.value.details() == {"step": 4}


def test_step_uses_the_smooth_objective(small_pipeline, small_corpus, toy_ranker):
    """Without the rank term a step is exactly one SGD step on smooth_objective."""
    cfg = small_pipeline.config.reflection.updated(alpha=0.0)
    trainer = ReflectionTrainer(small_pipeline, toy_ranker, cfg)
    ctx = trainer.context(small_corpus.users[0])
    params = small_pipeline.init_params()
    loss, grads = smooth_objective(params, ctx, small_pipeline.projector, cfg)
    updated, log = trainer.step(ctx, params, spawn_rng(0, "step"), 0)
    assert cfg.beta * log.l_cal + cfg.gamma * log.l_sem == pytest.approx(loss, rel=1e-12)
    assert updated == params.step(grads, cfg.effective_lr)


def test_reflection_leaves_the_generator_untouched(small_pipeline, small_corpus, toy_ranker):
    before = small_pipeline.generator.checksum()
    cfg = small_pipeline.config.reflection
    reflect(small_corpus.users[2], small_pipeline.init_params(), toy_ranker, cfg, small_pipeline)
    assert small_pipeline.generator.checksum() == before


def test_score_function_gradient_is_unbiased():
    """Monte-Carlo mean of the estimator matches the true gradient within 4 standard errors."""
    n, d, sigma = 100_000, 8, 0.1
    eps = spawn_rng(5, "score-function").normal(0.0, sigma, size=(n, d))

    # constant penalty: the expected gradient is zero
    _, grad = rank_loss(np.zeros(d), eps, np.full(n, 2.0), sigma)
    se = 2.0 / (sigma * math.sqrt(n))
    assert np.all(np.abs(grad) < 4.0 * se)

    # linear penalty w . eps: the expected gradient is w
    w = np.linspace(-1.0, 1.0, d)
    _, grad = rank_loss(np.zeros(d), eps, eps @ w / sigma, sigma)
    se = np.sqrt(w @ w + w * w) / (sigma * math.sqrt(n))
    assert np.all(np.abs(grad - w / sigma) < 4.0 * se)


def test_calibrator_term_alone_pulls_p_gen_to_p_ret(small_run_config, small_corpus, toy_ranker):
    config = small_run_config.updated(
        dims=ModelDims(), reflection=ReflectionConfig(alpha=0.0, gamma=0.0)
    )
    pipeline = Pipeline(config, small_corpus)
    trainer = ReflectionTrainer(pipeline, toy_ranker)
    user = small_corpus.users[0]
    ctx = trainer.context(user)
    start = pipeline.init_params()
    result = trainer.reflect(user, start)
    assert len(result.logs) == 200

    def distance(params):
        return float(np.linalg.norm(forward(params, ctx.e_txt, ctx.e_g).p_gen - ctx.p_ret))

    assert distance(result.params) < 0.1 * distance(start)


def _toy_run(seed: int) -> tuple[list[ReflectionStepLog], UserMetrics]:
    """Reflect the first user of a default corpus for the default step count."""
    config = seeded_config(RunConfig(), seed)
    corpus = generate_corpus(config.corpus, seed)
    pipeline = Pipeline(config, corpus)
    rm = train_rank_model(corpus, config.ranker, pipeline.encoder, seed)
    params, logs = reflect(corpus.users[0], pipeline.init_params(), rm, config.reflection, pipeline)
    report = evaluate_run(corpus, params, rm, pipeline, max_users=1)
    return logs, report.per_user[0]


@pytest.mark.slow
def test_reflection_lowers_penalty_and_outranks_the_reference():
    improved = 0
    for seed in range(20):
        logs, metrics = _toy_run(seed)
        assert len(logs) == 200
        first = np.mean([log.mean_penalty for log in logs[:20]])
        last = np.mean([log.mean_penalty for log in logs[-20:]])
        assert last < first, f"seed {seed}: penalty rose from {first:.4f} to {last:.4f}"
        improved += metrics.delta_r > 0
    assert improved >= 16
