"""
PrefSynth - Evaluation Metrics

Rank change on a fixed candidate pool, embedding-cosine alignment metrics,
windowed SSIM over pixel grids, and the per-user evaluation of a trained
calibrator.
"""
from functools import partial
from typing import TYPE_CHECKING, Optional

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from prefsynth.core.errors import DomainError
from prefsynth.core.logging import get_logger
from prefsynth.core.numerics import cosine_similarity, spawn_rng
from prefsynth.schemas import MetricProtocolConfig, MetricsReport, UserMetrics
from prefsynth.services.corpus import Corpus, UserSequence
from prefsynth.services.encoders import KeywordSet, SemanticEncoder, SemanticProjector
from prefsynth.services.generator import GeneratedImage
from prefsynth.services.orchestrator import run_parallel

if TYPE_CHECKING:
    from prefsynth.services.pipeline import Pipeline, UserContext
    from prefsynth.services.preference import CalibratorParams
    from prefsynth.services.ranker import RankModelParams

logger = get_logger(__name__)

METRIC_FIELDS = (
    "delta_r",
    "cps",
    "cpis",
    "cs",
    "cis",
    "ssim_personal",
    "ssim_semantic",
    "planted_alignment",
)


def delta_r(rk_ori: int, rk_gen: int) -> float:
    """(rk_ori - rk_gen) / (1 + rk_ori); positive when the generated image ranks better."""
    if rk_ori < 1 or rk_gen < 1:
        raise DomainError(f"ranks must be >= 1, got rk_ori={rk_ori}, rk_gen={rk_gen}")
    return (rk_ori - rk_gen) / (1 + rk_ori)


def cosine_metric_family(
    generated: GeneratedImage,
    user: UserSequence,
    keywords: KeywordSet,
    anchor: np.ndarray,
    encoder: SemanticEncoder,
    projector: SemanticProjector,
) -> tuple[float, float, float, float]:
    """(CPS, CPIS, CS, CIS).

    Semantic metrics compare the projected generated feature with caption
    embeddings (filtered keywords for CPS, reference caption for CS); image
    metrics compare visual features (``anchor``, normally p_ret, for CPIS;
    the reference feature for CIS).
    """
    projected = projector.project(generated.feature)
    keyword_emb = encoder.encode(keywords.keywords).vec
    reference_emb = encoder.encode_item(user.reference).vec
    cps = cosine_similarity(projected, keyword_emb)
    cpis = cosine_similarity(generated.feature, anchor)
    cs = cosine_similarity(projected, reference_emb)
    cis = cosine_similarity(generated.feature, user.reference.visual_feature)
    return cps, cpis, cs, cis


def ssim(
    x: np.ndarray,
    y: np.ndarray,
    window: int = 8,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean SSIM over all window x window patches (stride 1, uniform weights,
    dynamic range 1)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DomainError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise DomainError(f"ssim expects square 2-D grids, got {x.shape}")
    if window < 1 or window > x.shape[0]:
        raise DomainError(f"window {window} does not fit a {x.shape[0]}x{x.shape[1]} grid")
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2
    wx = sliding_window_view(x, (window, window))
    wy = sliding_window_view(y, (window, window))
    mu_x = wx.mean(axis=(-2, -1))
    mu_y = wy.mean(axis=(-2, -1))
    dx = wx - mu_x[..., None, None]
    dy = wy - mu_y[..., None, None]
    var_x = (dx * dx).mean(axis=(-2, -1))
    var_y = (dy * dy).mean(axis=(-2, -1))
    cov = (dx * dy).mean(axis=(-2, -1))
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


# =============================================================================
# Run evaluation
# =============================================================================

def rank_in_pool(score: float, pool_scores: np.ndarray) -> int:
    """1 + number of pool items scoring strictly higher."""
    return 1 + int(np.sum(pool_scores > score))


def joint_ranks(score_ori: float, score_gen: float, pool_scores: np.ndarray) -> tuple[int, int]:
    """(rk_ori, rk_gen) with both images ranked in one list alongside the pool.

    Equal scores share a rank, so identical images give the same rank and the
    generated image improves on the original exactly when it scores higher.
    """
    rk_ori = rank_in_pool(score_ori, pool_scores) + int(score_gen > score_ori)
    rk_gen = rank_in_pool(score_gen, pool_scores) + int(score_ori > score_gen)
    return rk_ori, rk_gen


def _pool_scores(
    corpus: Corpus,
    user: UserSequence,
    rm: "RankModelParams",
    encoder: SemanticEncoder,
    cfg: MetricProtocolConfig,
) -> np.ndarray:
    """Scores of the user's held-out positives plus same-category catalog items."""
    rng = spawn_rng(cfg.seed, "pool", user.user_id)
    held = list(user.held_out_positives)[: cfg.pool_size]
    same = [
        i
        for i in corpus.out_of_history_ids(user)
        if corpus.items[i].category == user.reference.category
    ]
    need = min(cfg.pool_size - len(held), len(same))
    picks = sorted(rng.choice(len(same), size=need, replace=False)) if need > 0 else []
    pool_ids = held + [same[i] for i in picks]
    if not pool_ids:
        raise DomainError(f"user {user.user_id}: empty evaluation pool")
    items = [corpus.items[i] for i in pool_ids]
    return rm.score(
        user,
        np.stack([it.visual_feature for it in items]),
        np.stack([encoder.encode_item(it).vec for it in items]),
    )


def _candidate_score(user: UserSequence, image: GeneratedImage, rm: "RankModelParams", encoder: SemanticEncoder) -> float:
    sem = encoder.encode_item(user.reference).vec
    return float(rm.score(user, image.feature[None, :], sem[None, :])[0])


def evaluate_user(
    ctx: "UserContext",
    corpus: Corpus,
    params: "CalibratorParams",
    rm: "RankModelParams",
    pipeline: "Pipeline",
    baseline_params: Optional["CalibratorParams"] = None,
) -> UserMetrics:
    cfg = pipeline.config.metrics
    user = ctx.user
    _, v_gen = pipeline.generate_for(ctx, params)
    pool = _pool_scores(corpus, user, rm, pipeline.encoder, cfg)

    if baseline_params is not None:
        _, v_ori = pipeline.generate_for(ctx, baseline_params)
    else:
        v_ori = ctx.v_ref
    rk_ori, rk_gen = joint_ranks(
        _candidate_score(user, v_ori, rm, pipeline.encoder),
        _candidate_score(user, v_gen, rm, pipeline.encoder),
        pool,
    )

    anchor = ctx.preference_anchor()
    cps, cpis, cs, cis = cosine_metric_family(
        v_gen, user, ctx.keywords, anchor, pipeline.encoder, pipeline.projector
    )
    window = min(cfg.ssim_window, v_gen.pixels.shape[0])
    ssim_personal = ssim(v_gen.pixels, pipeline.renderer.render(anchor), window, cfg.ssim_k1, cfg.ssim_k2)
    ssim_semantic = ssim(v_gen.pixels, ctx.v_ref.pixels, window, cfg.ssim_k1, cfg.ssim_k2)
    planted = (
        cosine_similarity(v_gen.feature, user.planted_preference)
        if user.planted_preference is not None
        else None
    )
    return UserMetrics(
        user_id=user.user_id,
        rk_ori=rk_ori,
        rk_gen=rk_gen,
        delta_r=delta_r(rk_ori, rk_gen),
        cps=cps,
        cpis=cpis,
        cs=cs,
        cis=cis,
        ssim_personal=ssim_personal,
        ssim_semantic=ssim_semantic,
        planted_alignment=planted,
    )


def aggregate(per_user: list[UserMetrics]) -> MetricsReport:
    """Means of per-user values; users listed in id order."""
    if not per_user:
        raise DomainError("cannot aggregate an empty evaluation")
    ordered = sorted(per_user, key=lambda m: m.user_id)

    def mean_of(name: str) -> Optional[float]:
        values = [getattr(m, name) for m in ordered]
        if any(v is None for v in values):
            return None
        return float(np.mean(values))

    return MetricsReport(
        delta_r=float(np.mean([m.delta_r for m in ordered])),
        cps=float(np.mean([m.cps for m in ordered])),
        cpis=float(np.mean([m.cpis for m in ordered])),
        cs=float(np.mean([m.cs for m in ordered])),
        cis=float(np.mean([m.cis for m in ordered])),
        ssim_personal=mean_of("ssim_personal"),
        ssim_semantic=mean_of("ssim_semantic"),
        planted_alignment=mean_of("planted_alignment"),
        per_user=ordered,
    )


def evaluate_run(
    corpus: Corpus,
    params: "CalibratorParams",
    rm: "RankModelParams",
    pipeline: "Pipeline",
    baseline_params: Optional["CalibratorParams"] = None,
    max_users: Optional[int] = None,
    jobs: int = 1,
) -> MetricsReport:
    """Evaluate trained params on every user (or the first ``max_users``).

    Users are evaluated in up to ``jobs`` worker slots; the report is the
    same for any slot count.

    Without ``baseline_params`` the original rank is the reference image's
    rank in the pool; with them it is the baseline-generated image's rank.
    """
    users = corpus.users if max_users is None else corpus.users[:max_users]

    def task(user: UserSequence) -> UserMetrics:
        return evaluate_user(pipeline.prepare_user(user, rm), corpus, params, rm, pipeline, baseline_params)

    per_user = run_parallel([partial(task, u) for u in users], jobs)
    report = aggregate(per_user)
    logger.info(
        "evaluation complete",
        users=len(per_user),
        delta_r=round(report.delta_r, 6),
        cpis=round(report.cpis, 6),
    )
    return report


def report_frame(report: MetricsReport) -> pd.DataFrame:
    """One row per user plus a trailing summary row (user_id ``__mean__``)."""
    columns = ["user_id", "rk_ori", "rk_gen", *METRIC_FIELDS]
    rows = [m.model_dump() for m in report.per_user]
    summary = {"user_id": "__mean__", "rk_ori": None, "rk_gen": None}
    summary.update({f: getattr(report, f) for f in METRIC_FIELDS})
    frame = pd.DataFrame(rows + [summary], columns=columns)
    return frame
