"""
PrefSynth - Surrogate Encoders

Stand-ins for the captioner/text encoder and the keyword-extracting language
model. Captions become unit-norm bag-of-token embeddings; item texts become
per-item keyword lists, filtered into a ranked top-n set.
"""
import hashlib
import math
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from prefsynth.core.errors import DomainError, KeywordParseError, KeywordServiceError
from prefsynth.core.keyword_client import KeywordClient
from prefsynth.core.logging import get_logger
from prefsynth.core.numerics import as_vector, spawn_rng
from prefsynth.schemas import EncoderConfig, KeywordExtractorConfig, KeywordMode
from prefsynth.services.corpus import Item
from prefsynth.services.lexicon import load_lexicon, load_stopwords

logger = get_logger(__name__)


def tokenize(caption: str | Sequence[str]) -> list[str]:
    if isinstance(caption, str):
        return [t for t in caption.lower().split() if t]
    return [t.strip().lower() for t in caption if t.strip()]


# =============================================================================
# Semantic embeddings
# =============================================================================

@dataclass(frozen=True, eq=False)
class SemanticEmbedding:
    vec: np.ndarray
    source_item: str = ""

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SemanticEmbedding):
            return NotImplemented
        return self.source_item == other.source_item and bool(np.array_equal(self.vec, other.vec))

    __hash__ = None  # type: ignore[assignment]


class SemanticEncoder:
    """Bag-of-tokens encoder over a fixed token table.

    Lexicon tokens get mutually orthogonal rows (when the dimension allows);
    any other token gets a unit vector drawn from a generator keyed by a
    blake2b hash of (table_seed, token), so the table is identical everywhere.
    """

    def __init__(self, config: Optional[EncoderConfig] = None) -> None:
        self.config = config or EncoderConfig()
        self.dim = self.config.dim
        self.stopwords = load_stopwords(self.config.stopwords)
        self._table: dict[str, np.ndarray] = {}
        self._item_cache: dict[str, SemanticEmbedding] = {}
        self._init_lexicon_rows()

    def _init_lexicon_rows(self) -> None:
        tokens = load_lexicon().tokens
        rng = spawn_rng(self.config.table_seed, "lexicon-table")
        gauss = rng.standard_normal((self.dim, len(tokens)))
        if len(tokens) <= self.dim:
            q, _ = np.linalg.qr(gauss)
            rows = q.T
        else:
            rows = (gauss / np.linalg.norm(gauss, axis=0)).T
        for token, row in zip(tokens, rows):
            self._table[token] = np.ascontiguousarray(row)

    def _hashed_vector(self, token: str) -> np.ndarray:
        digest = hashlib.blake2b(
            f"{self.config.table_seed}:{token}".encode("utf-8"), digest_size=8
        ).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def token_vector(self, token: str) -> np.ndarray:
        vec = self._table.get(token)
        if vec is None:
            vec = self._hashed_vector(token)
            self._table[token] = vec
        return vec

    def content_tokens(self, caption: str | Sequence[str]) -> list[str]:
        return [t for t in tokenize(caption) if t not in self.stopwords]

    def encode(self, caption: str | Sequence[str], source_item: str = "") -> SemanticEmbedding:
        """Unit-norm sum of token vectors after stopword removal.

        Raises:
            DomainError: if nothing is left after filtering or the sum cancels.
        """
        tokens = self.content_tokens(caption)
        if not tokens:
            raise DomainError(f"caption of {source_item or 'input'} is empty after stopword removal")
        total = np.sum([self.token_vector(t) for t in tokens], axis=0)
        norm = float(np.linalg.norm(total))
        if norm == 0.0:
            raise DomainError(f"caption of {source_item or 'input'} encodes to the zero vector")
        return SemanticEmbedding(vec=total / norm, source_item=source_item)

    def encode_item(self, item: Item) -> SemanticEmbedding:
        cached = self._item_cache.get(item.item_id)
        if cached is None:
            cached = self.encode(item.caption, source_item=item.item_id)
            self._item_cache[item.item_id] = cached
        return cached


@lru_cache(maxsize=1)
def default_encoder() -> SemanticEncoder:
    return SemanticEncoder()


def encode_semantic(caption: str | Sequence[str], encoder: Optional[SemanticEncoder] = None) -> SemanticEmbedding:
    """Encode a caption with ``encoder`` or the default token table."""
    return (encoder or default_encoder()).encode(caption)


class SemanticProjector:
    """Fixed seeded linear maps from any feature width into the semantic width.

    One definition serves both the semantic loss (detailed feature to d_s) and
    the CS/CPS metrics (visual feature to d_s); equal input widths give the
    same matrix.
    """

    def __init__(self, out_dim: int, seed: int) -> None:
        self.out_dim = out_dim
        self.seed = seed
        self._matrices: dict[int, np.ndarray] = {}

    def matrix(self, in_dim: int) -> np.ndarray:
        m = self._matrices.get(in_dim)
        if m is None:
            rng = spawn_rng(self.seed, "semantic-projector", in_dim)
            m = rng.standard_normal((self.out_dim, in_dim)) / math.sqrt(in_dim)
            self._matrices[in_dim] = m
        return m

    def project(self, v: np.ndarray) -> np.ndarray:
        v = as_vector(v, "projected vector")
        return self.matrix(v.size) @ v


# =============================================================================
# Keywords
# =============================================================================

@dataclass(frozen=True)
class KeywordSet:
    per_item: dict[str, tuple[str, ...]]
    filtered: tuple[tuple[str, int], ...]

    @property
    def keywords(self) -> list[str]:
        return [w for w, _ in self.filtered]

    def is_empty(self) -> bool:
        return not self.filtered


def _dedupe(tokens: Iterable[str], stopwords: frozenset[str]) -> tuple[str, ...]:
    seen: dict[str, None] = {}
    for t in tokens:
        t = t.strip().lower()
        if t and t not in stopwords:
            seen.setdefault(t, None)
    return tuple(seen)


def filter_keywords(
    per_item: dict[str, tuple[str, ...]], min_count: int, n: int
) -> tuple[tuple[str, int], ...]:
    """Count across items, drop rare ones, rank by (count desc, word asc)."""
    counts: Counter[str] = Counter()
    for words in per_item.values():
        counts.update(set(words))
    surviving = [(w, c) for w, c in counts.items() if c >= min_count]
    surviving.sort(key=lambda wc: (-wc[1], wc[0]))
    return tuple(surviving[:n])


def _external_keywords(items: Sequence[Item], cfg: KeywordExtractorConfig) -> list[list[str]]:
    client = KeywordClient(
        url=cfg.endpoint_url,
        timeout=cfg.timeout_seconds,
        retry_attempts=cfg.retry_attempts,
        backoff_seconds=cfg.backoff_seconds,
        max_inflight=cfg.max_inflight,
        batch_size=cfg.batch_size,
    )
    texts = [" ".join(item.text or item.caption) for item in items]
    return client.extract_sync(texts)


def extract_keywords(
    items: Sequence[Item],
    cfg: Optional[KeywordExtractorConfig] = None,
    external: Optional[Callable[[Sequence[Item], KeywordExtractorConfig], list[list[str]]]] = None,
) -> KeywordSet:
    """Per-item keyword lists plus the filtered top-n set.

    ``external`` replaces the HTTP call in external mode (it receives the items
    and config and returns one keyword list per item).
    """
    cfg = cfg or KeywordExtractorConfig()
    if not items:
        raise DomainError("extract_keywords requires at least one item")
    stopwords = load_stopwords(cfg.stopwords)

    raw_lists: Optional[list[list[str]]] = None
    if cfg.mode == KeywordMode.EXTERNAL:
        fetch = external or _external_keywords
        try:
            raw_lists = fetch(items, cfg)
        except (KeywordServiceError, KeywordParseError) as exc:
            if not cfg.fallback_to_deterministic:
                raise
            logger.warning("keyword endpoint failed, using deterministic keywords", error=str(exc))
            raw_lists = None
        if raw_lists is not None and len(raw_lists) != len(items):
            raise KeywordParseError(
                f"expected {len(items)} keyword lists, got {len(raw_lists)}"
            )

    per_item: dict[str, tuple[str, ...]] = {}
    for idx, item in enumerate(items):
        if raw_lists is None:
            tokens: Iterable[str] = [*tokenize(item.caption), *tokenize(item.text)]
        else:
            tokens = raw_lists[idx]
        per_item[item.item_id] = _dedupe(tokens, stopwords)

    return KeywordSet(per_item=per_item, filtered=filter_keywords(per_item, cfg.min_count, cfg.n))
