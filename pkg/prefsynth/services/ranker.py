"""
PrefSynth - Ranking Model

Two-tower scorer: the user tower projects the mean history feature, the item
tower fuses a projected visual feature with a projected caption embedding.
Trained with a pairwise logistic loss on (reference item, sampled negative).
"""
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from prefsynth.core.errors import ConfigError, DomainError
from prefsynth.core.logging import get_logger
from prefsynth.core.numerics import sgd_step, spawn_rng
from prefsynth.schemas import (
    PROVENANCE_PRIORITY,
    MetricProtocolConfig,
    Provenance,
    RankTrainConfig,
    RecommendationReport,
)
from prefsynth.services.corpus import Corpus, UserSequence
from prefsynth.services.encoders import SemanticEncoder
from prefsynth.services.generator import GeneratedImage

logger = get_logger(__name__)

RANK_ARRAYS = ("user_proj", "item_proj_visual", "item_proj_text")


@dataclass(eq=False)
class RankModelParams:
    user_proj: np.ndarray
    item_proj_visual: np.ndarray
    item_proj_text: np.ndarray
    fusion_weight: float = 0.7
    training_auc: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not 0.0 <= self.fusion_weight <= 1.0:
            raise DomainError(f"fusion_weight must lie in [0, 1], got {self.fusion_weight}")
        d_r = self.user_proj.shape[0]
        if self.item_proj_visual.shape[0] != d_r or self.item_proj_text.shape[0] != d_r:
            raise DomainError("rank model projections must share the representation width")
        if self.item_proj_visual.shape[1] != self.user_proj.shape[1]:
            raise DomainError("user and visual projections must read the same feature width")
        for name in RANK_ARRAYS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise DomainError(f"{name} contains non-finite entries")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RankModelParams):
            return NotImplemented
        return self.fusion_weight == other.fusion_weight and all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in RANK_ARRAYS
        )

    __hash__ = None  # type: ignore[assignment]

    def user_embedding(self, history_features: np.ndarray) -> np.ndarray:
        return self.user_proj @ np.mean(history_features, axis=0)

    def item_embeddings(self, features: np.ndarray, semantics: np.ndarray) -> np.ndarray:
        """Rows of fused item embeddings for (n, d_v) features and (n, d_s) captions."""
        w = self.fusion_weight
        return w * features @ self.item_proj_visual.T + (1.0 - w) * semantics @ self.item_proj_text.T

    def score(self, user: UserSequence, features: np.ndarray, semantics: np.ndarray) -> np.ndarray:
        u = self.user_embedding(user.history_features())
        return self.item_embeddings(np.atleast_2d(features), np.atleast_2d(semantics)) @ u


def init_rank_params(visual_dim: int, semantic_dim: int, cfg: RankTrainConfig, seed: int = 0) -> RankModelParams:
    rng = spawn_rng(seed, "rank-init", cfg.seed)
    d_r = cfg.repr_dim

    def near_identity(cols: int, scale: float) -> np.ndarray:
        return scale * (np.eye(d_r, cols) + cfg.init_jitter * rng.standard_normal((d_r, cols)))

    return RankModelParams(
        user_proj=near_identity(visual_dim, 1.0),
        item_proj_visual=near_identity(visual_dim, 1.0),
        item_proj_text=near_identity(semantic_dim, cfg.text_init_scale),
        fusion_weight=cfg.fusion_weight,
    )


# =============================================================================
# Candidate ranking
# =============================================================================

@dataclass(frozen=True)
class RankOutcome:
    scores: dict[Provenance, float]
    ranks: dict[Provenance, int]


def rank_scores(scores: Mapping[Provenance, float]) -> dict[Provenance, int]:
    """Rank 1 for the highest score; ties follow the declared provenance priority."""
    order = sorted(scores, key=lambda p: (-scores[p], PROVENANCE_PRIORITY.index(p)))
    return {p: i + 1 for i, p in enumerate(order)}


def score_candidates(
    user: UserSequence,
    candidates: Sequence[GeneratedImage],
    params: RankModelParams,
    encoder: SemanticEncoder,
) -> RankOutcome:
    """Score the reference, global and generated images as target items."""
    provenances = [c.provenance for c in candidates]
    if len(set(provenances)) != len(provenances):
        raise DomainError(f"duplicate provenance among candidates: {[p.value for p in provenances]}")
    if set(provenances) != set(PROVENANCE_PRIORITY):
        raise DomainError("candidates must contain exactly one reference, global and generated image")
    sem = encoder.encode_item(user.reference).vec
    features = np.stack([c.feature for c in candidates])
    raw = params.score(user, features, np.tile(sem, (len(candidates), 1)))
    scores = {c.provenance: float(s) for c, s in zip(candidates, raw)}
    return RankOutcome(scores=scores, ranks=rank_scores(scores))


# =============================================================================
# Training
# =============================================================================

@dataclass
class PairwiseBatch:
    users: np.ndarray
    pos_features: np.ndarray
    pos_semantics: np.ndarray
    neg_features: np.ndarray
    neg_semantics: np.ndarray


def pairwise_loss_and_grads(params: RankModelParams, batch: PairwiseBatch) -> tuple[float, dict[str, np.ndarray]]:
    """Mean -log sigmoid(s_pos - s_neg) and its gradients."""
    w = params.fusion_weight
    u = batch.users @ params.user_proj.T
    g_pos = params.item_embeddings(batch.pos_features, batch.pos_semantics)
    g_neg = params.item_embeddings(batch.neg_features, batch.neg_semantics)
    margin = np.sum(u * (g_pos - g_neg), axis=1)
    n = margin.size
    loss = float(np.mean(np.logaddexp(0.0, -margin)))
    coef = (-0.5 * (1.0 - np.tanh(0.5 * margin)) / n)[:, None]
    grads = {
        "user_proj": (coef * (g_pos - g_neg)).T @ batch.users,
        "item_proj_visual": w * (coef * u).T @ (batch.pos_features - batch.neg_features),
        "item_proj_text": (1.0 - w) * (coef * u).T @ (batch.pos_semantics - batch.neg_semantics),
    }
    return loss, grads


def pairwise_auc(params: RankModelParams, batch: PairwiseBatch) -> float:
    u = batch.users @ params.user_proj.T
    s_pos = np.sum(u * params.item_embeddings(batch.pos_features, batch.pos_semantics), axis=1)
    s_neg = np.sum(u * params.item_embeddings(batch.neg_features, batch.neg_semantics), axis=1)
    return float(np.mean((s_pos > s_neg) + 0.5 * (s_pos == s_neg)))


class _TrainingData:
    """Per-user tensors and negative pools for pairwise training."""

    def __init__(
        self,
        corpus: Corpus,
        encoder: SemanticEncoder,
        positive_features: Optional[Mapping[str, np.ndarray]] = None,
    ) -> None:
        ids = corpus.item_ids
        index = {item_id: i for i, item_id in enumerate(ids)}
        self.features = np.stack([corpus.items[i].visual_feature for i in ids])
        self.semantics = np.stack([encoder.encode_item(corpus.items[i]).vec for i in ids])
        self.users = np.stack([u.history_features().mean(axis=0) for u in corpus.users])
        overrides = positive_features or {}
        self.pos_features = np.stack(
            [overrides.get(u.user_id, u.reference.visual_feature) for u in corpus.users]
        )
        self.pos_semantics = np.stack([encoder.encode_item(u.reference).vec for u in corpus.users])
        self.pools = [
            np.array([index[i] for i in corpus.out_of_history_ids(u)], dtype=int) for u in corpus.users
        ]
        if any(pool.size == 0 for pool in self.pools):
            raise ConfigError("every user needs at least one out-of-history negative")

    def sample(self, rng: np.random.Generator, per_positive: int) -> PairwiseBatch:
        neg = np.array(
            [pool[rng.integers(pool.size)] for pool in self.pools for _ in range(per_positive)],
            dtype=int,
        )
        rep = np.repeat(np.arange(len(self.pools)), per_positive)
        return PairwiseBatch(
            users=self.users[rep],
            pos_features=self.pos_features[rep],
            pos_semantics=self.pos_semantics[rep],
            neg_features=self.features[neg],
            neg_semantics=self.semantics[neg],
        )


def train_rank_model(
    corpus: Corpus,
    cfg: Optional[RankTrainConfig] = None,
    encoder: Optional[SemanticEncoder] = None,
    seed: int = 0,
    positive_features: Optional[Mapping[str, np.ndarray]] = None,
) -> RankModelParams:
    """Pairwise logistic training; ``positive_features`` replaces the reference
    item's visual feature per user (auxiliary-generation arms)."""
    cfg = cfg or RankTrainConfig()
    encoder = encoder or SemanticEncoder()
    if not corpus.users:
        raise ConfigError("cannot train a ranking model on a corpus without users")
    if any(not u.held_out_positives for u in corpus.users):
        raise ConfigError("every user needs held_out_positives for the evaluation split")

    data = _TrainingData(corpus, encoder, positive_features)
    params = init_rank_params(data.features.shape[1], data.semantics.shape[1], cfg, seed)
    auc_batch = data.sample(spawn_rng(seed, "rank-auc", cfg.seed), cfg.auc_negatives)
    rng = spawn_rng(seed, "rank-train", cfg.seed)

    history: list[float] = []
    for epoch in range(cfg.epochs):
        batch = data.sample(rng, cfg.negatives_per_positive)
        loss, grads = pairwise_loss_and_grads(params, batch)
        params = RankModelParams(
            user_proj=sgd_step(params.user_proj, grads["user_proj"], cfg.lr),
            item_proj_visual=sgd_step(params.item_proj_visual, grads["item_proj_visual"], cfg.lr),
            item_proj_text=sgd_step(params.item_proj_text, grads["item_proj_text"], cfg.lr),
            fusion_weight=params.fusion_weight,
        )
        auc = pairwise_auc(params, auc_batch)
        history.append(auc)
        logger.debug("rank model epoch", epoch=epoch, loss=round(loss, 6), auc=round(auc, 4))

    params.training_auc = history
    logger.info(
        "rank model trained",
        epochs=cfg.epochs,
        users=len(corpus.users),
        final_auc=history[-1] if history else None,
    )
    return params


# =============================================================================
# Recommendation metrics
# =============================================================================

def _check_topk(positives: Sequence[str], k: int) -> None:
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    if not positives:
        raise DomainError("recommendation metrics need at least one positive")


def recall_at_k(ranked: Sequence[str], positives: Sequence[str], k: int) -> float:
    _check_topk(positives, k)
    pos = set(positives)
    return sum(1 for item in ranked[:k] if item in pos) / len(pos)


def ndcg_at_k(ranked: Sequence[str], positives: Sequence[str], k: int) -> float:
    """Binary-relevance NDCG with a log2 discount."""
    _check_topk(positives, k)
    pos = set(positives)
    dcg = sum(1.0 / math.log2(i + 2) for i, item in enumerate(ranked[:k]) if item in pos)
    ideal = sum(1.0 / math.log2(i + 2) for i in range(min(k, len(pos))))
    return dcg / ideal


def evaluate_recommendations(
    corpus: Corpus,
    params: RankModelParams,
    encoder: SemanticEncoder,
    cfg: Optional[MetricProtocolConfig] = None,
    seed: int = 0,
) -> RecommendationReport:
    """Recall/NDCG of held-out positives ranked against sampled negatives."""
    cfg = cfg or MetricProtocolConfig()
    recall: dict[int, list[float]] = {k: [] for k in cfg.cutoffs}
    ndcg: dict[int, list[float]] = {k: [] for k in cfg.cutoffs}
    per_user: list[dict[str, object]] = []
    for user in corpus.users:
        positives = list(user.held_out_positives)
        pool = corpus.out_of_history_ids(user)
        rng = spawn_rng(seed, "eval-negatives", cfg.seed, user.user_id)
        n_neg = min(cfg.eval_negatives, len(pool))
        negatives = [pool[i] for i in sorted(rng.choice(len(pool), size=n_neg, replace=False))]
        candidates = positives + negatives
        items = [corpus.items[i] for i in candidates]
        scores = params.score(
            user,
            np.stack([it.visual_feature for it in items]),
            np.stack([encoder.encode_item(it).vec for it in items]),
        )
        order = np.argsort(-scores, kind="stable")
        ranked = [candidates[i] for i in order]
        row: dict[str, object] = {"user_id": user.user_id}
        for k in cfg.cutoffs:
            r, n = recall_at_k(ranked, positives, k), ndcg_at_k(ranked, positives, k)
            recall[k].append(r)
            ndcg[k].append(n)
            row[f"recall@{k}"] = r
            row[f"ndcg@{k}"] = n
        per_user.append(row)
    return RecommendationReport(
        recall={k: float(np.mean(v)) for k, v in recall.items()},
        ndcg={k: float(np.mean(v)) for k, v in ndcg.items()},
        per_user=per_user,
    )
