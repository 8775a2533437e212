"""
PrefSynth - Experiments

Per-seed bodies of the validation study, the ablation sweeps and the
auxiliary-generation study, and the aggregation of their observations into
an ExperimentReport with paired win-rates over seeds.

Each per-seed function depends only on (config, seed), so seeds can run in
any order or in parallel.
"""
from collections import defaultdict
from itertools import combinations
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from prefsynth.core.errors import ConfigError, DomainError
from prefsynth.core.logging import get_logger
from prefsynth.core.numerics import cosine_similarity, spawn_rng
from prefsynth.schemas import (
    AblationAxis,
    ArmSummary,
    ExperimentReport,
    ObservationRecord,
    PairedComparison,
    RetrievalStrategy,
    RunConfig,
)
from prefsynth.services.corpus import Corpus, generate_corpus, load_corpus
from prefsynth.services.metrics import evaluate_run
from prefsynth.services.pipeline import Pipeline
from prefsynth.services.ranker import (
    RankModelParams,
    evaluate_recommendations,
    train_rank_model,
)
from prefsynth.services.reflection import ReflectionTrainer
from prefsynth.services.retrieval import retrieve

logger = get_logger(__name__)


def seeded_config(config: RunConfig, seed: int) -> RunConfig:
    """The run config with every component seed tied to one experiment seed."""
    return config.updated(
        seed=seed,
        reflection=config.reflection.updated(seed=seed),
        dims=config.dims.updated(init_seed=seed),
    )


def corpus_for_seed(config: RunConfig, seed: int) -> Corpus:
    if config.corpus_path:
        corpus = load_corpus(config.corpus_path)
    else:
        corpus = generate_corpus(config.corpus, seed)
    return corpus.subset(config.experiment.max_users)


def _observe(
    out: list[ObservationRecord], seed: int, arm: str, user_id: str, **metrics: Optional[float]
) -> None:
    for metric, value in metrics.items():
        if value is not None:
            out.append(ObservationRecord(seed=seed, arm=arm, user_id=user_id, metric=metric, value=value))


# =============================================================================
# Retrieval validation
# =============================================================================

def validate_retrieval_seed(config: RunConfig, seed: int) -> list[ObservationRecord]:
    """Preference alignment of each sequence-construction strategy for one seed.

    ``alignment`` is cos(p_ret, planted preference); ``reference_score`` is
    the ranking model's score of the reference item when the user's history
    is replaced by the strategy's k items.
    """
    config = seeded_config(config, seed)
    k = config.retrieval.k
    corpus = corpus_for_seed(config, seed)
    if k < 1:
        raise ConfigError("validate-retrieval needs retrieval.k >= 1")
    for user in corpus.users:
        if 2 * k > len(user.history):
            raise ConfigError(
                f"validate-retrieval needs 2k <= history length (k={k}, "
                f"user {user.user_id} has {len(user.history)})"
            )
    pipeline = Pipeline(config, corpus)
    rm = train_rank_model(corpus, config.ranker, pipeline.encoder, seed)

    observations: list[ObservationRecord] = []
    for user in corpus.users:
        ref_sem = pipeline.encoder.encode_item(user.reference).vec
        for strategy in config.experiment.strategies:
            rng = spawn_rng(seed, "validate", strategy.value, user.user_id)
            result = retrieve(
                user, k, pipeline.encoder, strategy, rng, config.retrieval.score_temperature
            )
            sequence = user.with_history(tuple(user.history[i] for i in result.indices))
            ref_score = float(
                rm.score(sequence, user.reference.visual_feature[None, :], ref_sem[None, :])[0]
            )
            alignment = (
                cosine_similarity(result.p_ret, user.planted_preference)
                if user.planted_preference is not None
                else None
            )
            _observe(
                observations,
                seed,
                strategy.value,
                user.user_id,
                alignment=alignment,
                reference_score=ref_score,
            )
    logger.info("retrieval validation seed done", seed=seed, users=len(corpus.users), k=k)
    return observations


# =============================================================================
# Ablation
# =============================================================================

def ablation_arm(axis: AblationAxis, value: float) -> str:
    return f"{axis.value}={value:g}"


def apply_ablation(config: RunConfig, axis: AblationAxis, value: float) -> RunConfig:
    if axis == AblationAxis.RETRIEVAL_K:
        if value < 0 or value != int(value):
            raise ConfigError(f"retrieval_k values must be non-negative integers, got {value}")
        return config.updated(retrieval=config.retrieval.updated(k=int(value)))
    if axis == AblationAxis.NOISE_R:
        if value < 1 or value != int(value):
            raise ConfigError(f"noise_r values must be positive integers, got {value}")
        return config.updated(reflection=config.reflection.updated(r=int(value)))
    if value not in (0, 1):
        raise ConfigError(f"rank_reward values must be 0 (without) or 1 (with), got {value}")
    alpha = config.reflection.alpha if value else 0.0
    return config.updated(reflection=config.reflection.updated(alpha=alpha))


def ablation_seed(config: RunConfig, seed: int) -> list[ObservationRecord]:
    """Reflect and evaluate once per swept value, sharing corpus and ranker."""
    config = seeded_config(config, seed)
    axis = config.experiment.ablation_axis
    corpus = corpus_for_seed(config, seed)
    base = Pipeline(config, corpus)
    rm = train_rank_model(corpus, config.ranker, base.encoder, seed)

    observations: list[ObservationRecord] = []
    for value in config.experiment.ablation_values:
        arm = ablation_arm(axis, value)
        variant = apply_ablation(config, axis, value)
        pipeline = Pipeline(variant, corpus)
        trainer = ReflectionTrainer(pipeline, rm)
        result = trainer.reflect_corpus(corpus.users, pipeline.init_params())
        final_penalty: dict[str, list[float]] = defaultdict(list)
        tail = len(corpus.users) * variant.reflection.steps_per_user
        for log in result.logs[-tail:] if tail else []:
            final_penalty[log.user_id].append(log.mean_penalty)
        report = evaluate_run(corpus, result.params, rm, pipeline)
        for m in report.per_user:
            penalties = final_penalty.get(m.user_id)
            _observe(
                observations,
                seed,
                arm,
                m.user_id,
                planted_alignment=m.planted_alignment,
                delta_r=m.delta_r,
                cpis=m.cpis,
                final_penalty=float(np.mean(penalties)) if penalties else None,
            )
        logger.info("ablation arm done", seed=seed, arm=arm, delta_r=round(report.delta_r, 6))
    return observations


# =============================================================================
# Auxiliary generation
# =============================================================================

AUXILIARY_ARMS = ("reference", "generated", "global")


def auxiliary_seed(config: RunConfig, seed: int) -> list[ObservationRecord]:
    """Retrain the ranker with reference, reflection-generated and global-image
    features as the positive item, then score held-out recommendations."""
    config = seeded_config(config, seed)
    corpus = corpus_for_seed(config, seed)
    pipeline = Pipeline(config, corpus)
    rm_reference = train_rank_model(corpus, config.ranker, pipeline.encoder, seed)
    trainer = ReflectionTrainer(pipeline, rm_reference)
    params = trainer.reflect_corpus(corpus.users, pipeline.init_params()).params

    generated: dict[str, np.ndarray] = {}
    global_features: dict[str, np.ndarray] = {}
    for user in corpus.users:
        ctx = trainer.context(user)
        _, image = pipeline.generate_for(ctx, params)
        generated[user.user_id] = image.feature
        global_features[user.user_id] = ctx.v_glob.feature

    arms: dict[str, RankModelParams] = {
        "reference": rm_reference,
        "generated": train_rank_model(corpus, config.ranker, pipeline.encoder, seed, generated),
        "global": train_rank_model(corpus, config.ranker, pipeline.encoder, seed, global_features),
    }
    observations: list[ObservationRecord] = []
    for arm, rm in arms.items():
        rec = evaluate_recommendations(corpus, rm, pipeline.encoder, config.metrics, seed)
        for row in rec.per_user:
            user_id = str(row["user_id"])
            metrics = {k.replace("@", "_at_"): float(v) for k, v in row.items() if k != "user_id"}
            _observe(observations, seed, arm, user_id, **metrics)
        logger.info(
            "auxiliary arm done",
            seed=seed,
            arm=arm,
            recall={k: round(v, 4) for k, v in rec.recall.items()},
        )
    return observations


# =============================================================================
# Aggregation
# =============================================================================

def summarize(
    experiment: str,
    observations: Sequence[ObservationRecord],
    arm_order: Sequence[str],
    arm_values: Optional[dict[str, float]] = None,
) -> ExperimentReport:
    """Per-arm means (overall and per seed) and pairwise win-rates over seeds.

    A comparison (a, b) counts a seed as a win when arm a's per-seed mean is
    strictly greater than arm b's.
    """
    cells: dict[tuple[str, int, str], list[float]] = defaultdict(list)
    for obs in observations:
        cells[(obs.arm, obs.seed, obs.metric)].append(obs.value)
    seeds = sorted({obs.seed for obs in observations})
    metric_names = sorted({obs.metric for obs in observations})

    per_seed: dict[str, dict[int, dict[str, float]]] = {arm: {} for arm in arm_order}
    for (arm, seed, metric), values in cells.items():
        if arm not in per_seed:
            raise DomainError(f"observation for unknown arm {arm!r}")
        per_seed[arm].setdefault(seed, {})[metric] = float(np.mean(values))

    arms: list[ArmSummary] = []
    for arm in arm_order:
        by_seed = {s: dict(sorted(per_seed[arm][s].items())) for s in sorted(per_seed[arm])}
        metrics = {
            m: float(np.mean([v[m] for v in by_seed.values() if m in v]))
            for m in metric_names
            if any(m in v for v in by_seed.values())
        }
        arms.append(
            ArmSummary(
                arm=arm,
                value=(arm_values or {}).get(arm),
                metrics=metrics,
                per_seed=by_seed,
            )
        )

    comparisons: list[PairedComparison] = []
    for a, b in combinations(arm_order, 2):
        for metric in metric_names:
            shared = [
                s
                for s in seeds
                if metric in per_seed[a].get(s, {}) and metric in per_seed[b].get(s, {})
            ]
            if not shared:
                continue
            deltas = [per_seed[a][s][metric] - per_seed[b][s][metric] for s in shared]
            wins = sum(1 for d in deltas if d > 0)
            comparisons.append(
                PairedComparison(
                    arm_a=a,
                    arm_b=b,
                    metric=metric,
                    wins=wins,
                    seeds=len(shared),
                    win_rate=wins / len(shared),
                    mean_delta=float(np.mean(deltas)),
                )
            )

    ordered = sorted(observations, key=lambda o: (o.seed, arm_order.index(o.arm), o.user_id, o.metric))
    return ExperimentReport(
        experiment=experiment,
        arms=arms,
        comparisons=comparisons,
        observations=ordered,
    )


def strategy_arms(strategies: Sequence[RetrievalStrategy]) -> list[str]:
    return [s.value for s in strategies]


REPORT_COLUMNS = ["experiment", "arm", "value", "seed", "metric", "mean"]


def experiment_frame(report: ExperimentReport) -> pd.DataFrame:
    """Long-format rows: per-seed means, then one ``seed="mean"`` row per
    (arm, metric)."""
    rows: list[dict[str, object]] = []
    for arm in report.arms:
        for seed, metrics in arm.per_seed.items():
            for metric, value in metrics.items():
                rows.append(
                    {
                        "experiment": report.experiment,
                        "arm": arm.arm,
                        "value": arm.value,
                        "seed": str(seed),
                        "metric": metric,
                        "mean": value,
                    }
                )
        for metric, value in arm.metrics.items():
            rows.append(
                {
                    "experiment": report.experiment,
                    "arm": arm.arm,
                    "value": arm.value,
                    "seed": "mean",
                    "metric": metric,
                    "mean": value,
                }
            )
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)
