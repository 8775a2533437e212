"""
PrefSynth - Reflection

Rank-guided training of the calibrator. Each step is one generation episode:
generate from p_gen, score r Gaussian perturbations of p_gen with the ranking
model, turn the scores into penalties, and take a single SGD step on

    L = alpha * L_rank + beta * L_cal + gamma * L_sem

L_rank uses the score-function estimator, so no gradient ever flows through
the generator.
"""
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from prefsynth.core.errors import DomainError, ReflectionStepError
from prefsynth.core.logging import get_logger
from prefsynth.core.numerics import as_vector, gaussian_log_density, spawn_rng, squared_l2
from prefsynth.schemas import (
    Provenance,
    ReflectionConfig,
    ReflectionStepLog,
    RewardMode,
)
from prefsynth.services.corpus import Corpus, UserSequence
from prefsynth.services.encoders import SemanticProjector
from prefsynth.services.generator import GeneratedImage
from prefsynth.services.metrics import delta_r
from prefsynth.services.pipeline import Pipeline, UserContext
from prefsynth.services.preference import (
    CalibratorParams,
    PreferenceTrace,
    calibrator_gradients,
    forward,
)
from prefsynth.services.ranker import RankModelParams, score_candidates

logger = get_logger(__name__)


# =============================================================================
# Loss terms
# =============================================================================

def rank_penalty(rho_ref: float, rho_glob: float, rho_gen: float, delta: float) -> float:
    """Hinge gap of the generated score below the reference and global scores,
    plus the margin. Never below delta."""
    return max(0.0, rho_ref - rho_gen) + max(0.0, rho_glob - rho_gen) + delta


def rank_loss(
    p_gen: np.ndarray,
    perturbations: np.ndarray,
    penalties: Sequence[float],
    sigma: float,
    mode: RewardMode = RewardMode.PENALTY_DESCENT,
    baseline_subtraction: bool = False,
) -> tuple[float, np.ndarray]:
    """Score-function loss over perturbed preferences and its gradient in p_gen.

    penalty_descent: L = +(1/r) sum log N(p+eps_t; p, s^2 I) R_t
    paper_literal:   L = -(1/r) sum log N(p+eps_t; p, s^2 I) R_t
    The gradient treats R_t as constants: sign * (1/r) sum R_t eps_t / s^2.
    """
    if sigma <= 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    p_gen = as_vector(p_gen, "p_gen")
    eps = np.atleast_2d(np.asarray(perturbations, dtype=np.float64))
    rewards = np.asarray(penalties, dtype=np.float64)
    if eps.shape[0] != rewards.size or eps.shape[0] < 1:
        raise DomainError(
            f"need one penalty per perturbation, got {eps.shape[0]} perturbations "
            f"and {rewards.size} penalties"
        )
    if eps.shape[1] != p_gen.size:
        raise DomainError(f"perturbations have dim {eps.shape[1]}, p_gen has {p_gen.size}")
    if baseline_subtraction:
        rewards = rewards - rewards.mean()
    sign = 1.0 if mode == RewardMode.PENALTY_DESCENT else -1.0
    r = rewards.size
    log_probs = np.array([gaussian_log_density(p_gen + e, p_gen, sigma) for e in eps])
    loss = sign * float(np.sum(log_probs * rewards)) / r
    grad = sign * (rewards @ eps) / (r * sigma * sigma)
    return loss, grad


def calibrator_loss(p_gen: np.ndarray, p_ret: np.ndarray) -> float:
    return squared_l2(p_gen, p_ret)


def semantic_loss(
    e_d: np.ndarray, e_sem_ref: np.ndarray, projector: Optional[SemanticProjector] = None
) -> float:
    """Squared distance between the (projected) detailed feature and the
    reference caption embedding."""
    projected = projector.project(e_d) if projector is not None else as_vector(e_d, "e_d")
    return squared_l2(projected, e_sem_ref)


def joint_loss(l_rank: float, l_cal: float, l_sem: float, cfg: ReflectionConfig) -> float:
    return cfg.alpha * l_rank + cfg.beta * l_cal + cfg.gamma * l_sem


# =============================================================================
# Deterministic objective (calibrator + semantic terms)
# =============================================================================

@dataclass
class SmoothTerms:
    """Unweighted L_cal and L_sem with the weighted gradients they send back
    into p_gen and e_d."""

    l_cal: float
    l_sem: float
    grad_p: np.ndarray
    grad_e_d: np.ndarray

    def weighted(self, cfg: ReflectionConfig) -> float:
        return cfg.beta * self.l_cal + cfg.gamma * self.l_sem


def smooth_terms(
    trace: PreferenceTrace,
    ctx: UserContext,
    projector: SemanticProjector,
    cfg: ReflectionConfig,
) -> SmoothTerms:
    """Calibrator and semantic terms for one forward pass. L_cal is zero and
    sends no gradient when the user has no retrieved anchor."""
    l_cal = 0.0
    grad_p = np.zeros_like(trace.p_gen)
    if ctx.p_ret is not None:
        l_cal = calibrator_loss(trace.p_gen, ctx.p_ret)
        grad_p = 2.0 * cfg.beta * (trace.p_gen - ctx.p_ret)
    w_sem = projector.matrix(trace.e_d.size)
    resid = w_sem @ trace.e_d - ctx.e_sem_ref
    return SmoothTerms(
        l_cal=l_cal,
        l_sem=float(resid @ resid),
        grad_p=grad_p,
        grad_e_d=2.0 * cfg.gamma * (w_sem.T @ resid),
    )


def smooth_objective(
    params: CalibratorParams,
    ctx: UserContext,
    projector: SemanticProjector,
    cfg: ReflectionConfig,
) -> tuple[float, dict[str, np.ndarray]]:
    """beta * L_cal + gamma * L_sem and its analytic gradients."""
    trace = forward(params, ctx.e_txt, ctx.e_g)
    terms = smooth_terms(trace, ctx, projector, cfg)
    return terms.weighted(cfg), calibrator_gradients(trace, params, terms.grad_p, terms.grad_e_d)


# =============================================================================
# Training loop
# =============================================================================

@dataclass
class ReflectionResult:
    params: CalibratorParams
    logs: list[ReflectionStepLog]


class ReflectionTrainer:
    """Runs reflection for users of one corpus with a fixed ranking model.

    Per-user contexts (retrieval, keywords, reference/global scores) are
    computed once and reused across steps and epochs.
    """

    def __init__(
        self,
        pipeline: Pipeline,
        rm: RankModelParams,
        cfg: Optional[ReflectionConfig] = None,
        log_sink: Optional[Callable[[ReflectionStepLog], None]] = None,
    ) -> None:
        self.pipeline = pipeline
        self.rm = rm
        self.cfg = cfg or pipeline.config.reflection
        self.log_sink = log_sink
        self._contexts: dict[str, UserContext] = {}

    def context(self, user: UserSequence) -> UserContext:
        ctx = self._contexts.get(user.user_id)
        if ctx is None:
            ctx = self.pipeline.prepare_user(user, self.rm)
            self._contexts[user.user_id] = ctx
        return ctx

    def _score(self, ctx: UserContext, image: GeneratedImage) -> tuple[float, dict[Provenance, int]]:
        outcome = score_candidates(ctx.user, [ctx.v_ref, ctx.v_glob, image], self.rm, self.pipeline.encoder)
        return outcome.scores[Provenance.GENERATED], outcome.ranks

    def step(
        self,
        ctx: UserContext,
        params: CalibratorParams,
        rng: np.random.Generator,
        step_index: int,
    ) -> tuple[CalibratorParams, ReflectionStepLog]:
        cfg = self.cfg
        generator = self.pipeline.generator
        trace = forward(params, ctx.e_txt, ctx.e_g)
        p_gen = trace.p_gen

        v_gen = generator.generate(p_gen)
        outcome = score_candidates(ctx.user, [ctx.v_ref, ctx.v_glob, v_gen], self.rm, self.pipeline.encoder)

        eps = rng.normal(0.0, cfg.sigma, size=(cfg.r, p_gen.size))
        penalties = []
        for e in eps:
            rho_t, _ = self._score(ctx, generator.generate(p_gen + e))
            penalties.append(rank_penalty(ctx.rho_ref, ctx.rho_glob, rho_t, cfg.delta))
        l_rank, g_rank = rank_loss(p_gen, eps, penalties, cfg.sigma, cfg.reward_mode, cfg.baseline_subtraction)

        terms = smooth_terms(trace, ctx, self.pipeline.projector, cfg)
        grads = calibrator_gradients(trace, params, cfg.alpha * g_rank + terms.grad_p, terms.grad_e_d)
        updated = params.step(grads, cfg.effective_lr)

        ranks = outcome.ranks
        log = ReflectionStepLog(
            step=step_index,
            user_id=ctx.user.user_id,
            mean_penalty=float(np.mean(penalties)),
            penalties=[float(p) for p in penalties],
            l_rank=l_rank,
            l_cal=terms.l_cal,
            l_sem=terms.l_sem,
            l_total=joint_loss(l_rank, terms.l_cal, terms.l_sem, cfg),
            scores={p.value: s for p, s in outcome.scores.items()},
            ranks={p.value: r for p, r in ranks.items()},
            delta_r=delta_r(ranks[Provenance.REFERENCE], ranks[Provenance.GENERATED]),
        )
        return updated, log

    def reflect(
        self,
        user: UserSequence,
        params: CalibratorParams,
        steps: Optional[int] = None,
        rng: Optional[np.random.Generator] = None,
        step_offset: int = 0,
    ) -> ReflectionResult:
        """``steps`` single-episode updates for one user (default cfg.steps)."""
        steps = self.cfg.steps if steps is None else steps
        rng = rng or spawn_rng(self.cfg.seed, "reflect", user.user_id)
        logs: list[ReflectionStepLog] = []
        if steps == 0:
            return ReflectionResult(params=params, logs=logs)
        ctx = self.context(user)
        for i in range(steps):
            index = step_offset + i
            try:
                params, log = self.step(ctx, params, rng, index)
            except ReflectionStepError:
                raise
            except Exception as exc:
                raise ReflectionStepError(index, exc) from exc
            logs.append(log)
            if self.log_sink is not None:
                self.log_sink(log)
        logger.debug(
            "reflection finished for user",
            user_id=user.user_id,
            steps=steps,
            first_penalty=logs[0].mean_penalty,
            last_penalty=logs[-1].mean_penalty,
        )
        return ReflectionResult(params=params, logs=logs)

    def reflect_corpus(
        self, users: Iterable[UserSequence], params: CalibratorParams
    ) -> ReflectionResult:
        """``epochs`` passes over users, ``steps_per_user`` steps each, one
        shared parameter set."""
        users = list(users)
        cfg = self.cfg
        logger.info(
            "reflection started",
            users=len(users),
            epochs=cfg.epochs,
            steps_per_user=cfg.steps_per_user,
            sigma=cfg.sigma,
            r=cfg.r,
            reward_mode=cfg.reward_mode.value,
            seed=cfg.seed,
        )
        rngs = {u.user_id: spawn_rng(cfg.seed, "reflect", u.user_id) for u in users}
        logs: list[ReflectionStepLog] = []
        offset = 0
        for epoch in range(cfg.epochs):
            for user in users:
                result = self.reflect(user, params, cfg.steps_per_user, rngs[user.user_id], offset)
                params = result.params
                logs.extend(result.logs)
                offset += cfg.steps_per_user
            if logs:
                recent = logs[-len(users) * cfg.steps_per_user :]
                logger.info(
                    "reflection epoch",
                    epoch=epoch,
                    mean_penalty=float(np.mean([log.mean_penalty for log in recent])),
                    mean_l_total=float(np.mean([log.l_total for log in recent])),
                )
        return ReflectionResult(params=params, logs=logs)


def reflect(
    user: UserSequence,
    params: CalibratorParams,
    rm: RankModelParams,
    cfg: ReflectionConfig,
    pipeline: Pipeline,
) -> tuple[CalibratorParams, list[ReflectionStepLog]]:
    """Reflect ``cfg.steps`` steps for a single user."""
    result = ReflectionTrainer(pipeline, rm, cfg).reflect(user, params)
    return result.params, result.logs


def reflect_corpus(
    corpus: Corpus,
    params: CalibratorParams,
    rm: RankModelParams,
    cfg: ReflectionConfig,
    pipeline: Pipeline,
    max_users: Optional[int] = None,
) -> ReflectionResult:
    users = corpus.users if max_users is None else corpus.users[:max_users]
    return ReflectionTrainer(pipeline, rm, cfg).reflect_corpus(users, params)
