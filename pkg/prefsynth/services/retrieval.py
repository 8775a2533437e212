"""
PrefSynth - Retrieval Service

Scores a user's history against the reference caption, selects a k-item
sequence (top-k, the next k, or uniformly random) and fuses the selected
visual features into the retrieval-augmented preference.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from prefsynth.core.errors import DomainError
from prefsynth.core.numerics import cosine_similarity, softmax_weights
from prefsynth.schemas import RetrievalStrategy
from prefsynth.services.corpus import UserSequence
from prefsynth.services.encoders import SemanticEncoder


@dataclass(frozen=True, eq=False)
class RetrievalResult:
    selected: tuple[tuple[int, float], ...]
    weights: np.ndarray
    p_ret: np.ndarray
    strategy: RetrievalStrategy

    @property
    def indices(self) -> list[int]:
        return [i for i, _ in self.selected]


def score_history(user: UserSequence, encoder: SemanticEncoder) -> np.ndarray:
    """Cosine between each history caption and the reference caption."""
    ref = encoder.encode_item(user.reference).vec
    scores = np.empty(len(user.history))
    for idx, item in enumerate(user.history):
        try:
            emb = encoder.encode_item(item).vec
        except DomainError as exc:
            raise DomainError(f"history item {idx} ({item.item_id}): {exc}") from exc
        scores[idx] = cosine_similarity(emb, ref)
    return scores


def ranking_order(scores: np.ndarray) -> np.ndarray:
    """Indices sorted by score descending, ties by lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.size), -scores))


def select(
    scores: np.ndarray,
    k: int,
    strategy: RetrievalStrategy = RetrievalStrategy.RET,
    rng: Optional[np.random.Generator] = None,
) -> list[int]:
    """Pick k history indices with the given strategy.

    Raises:
        DomainError: if k violates the strategy's bound or Random lacks an rng.
    """
    n = len(scores)
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    if strategy == RetrievalStrategy.EXP_RET:
        if 2 * k > n:
            raise DomainError(f"ExpRet needs 2k <= history length ({2 * k} > {n})")
    elif k > n:
        raise DomainError(f"k must be <= history length ({k} > {n})")

    if strategy == RetrievalStrategy.RANDOM:
        if rng is None:
            raise DomainError("Random selection requires an rng")
        return [int(i) for i in rng.choice(n, size=k, replace=False)]

    order = ranking_order(scores)
    if strategy == RetrievalStrategy.RET:
        return [int(i) for i in order[:k]]
    return [int(i) for i in order[k : 2 * k]]


def fuse(
    user: UserSequence,
    selected: list[int],
    scores: np.ndarray,
    strategy: RetrievalStrategy = RetrievalStrategy.RET,
    temperature: float = 1.0,
) -> RetrievalResult:
    """Softmax-weighted sum of the selected items' visual features."""
    if not selected:
        raise DomainError("fuse requires at least one selected item")
    scores = np.asarray(scores, dtype=np.float64)
    chosen = np.asarray(selected, dtype=int)
    order = np.lexsort((chosen, -scores[chosen]))
    chosen = chosen[order]
    weights = softmax_weights(scores[chosen] / temperature)
    features = np.stack([user.history[i].visual_feature for i in chosen])
    return RetrievalResult(
        selected=tuple((int(i), float(scores[i])) for i in chosen),
        weights=weights,
        p_ret=weights @ features,
        strategy=strategy,
    )


def retrieve(
    user: UserSequence,
    k: int,
    encoder: SemanticEncoder,
    strategy: RetrievalStrategy = RetrievalStrategy.RET,
    rng: Optional[np.random.Generator] = None,
    temperature: float = 1.0,
) -> RetrievalResult:
    scores = score_history(user, encoder)
    return fuse(user, select(scores, k, strategy, rng), scores, strategy, temperature)
