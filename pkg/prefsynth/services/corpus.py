"""
PrefSynth - Corpus Service

Synthetic multi-modal interaction corpora with planted preferences, and the
JSON Lines corpus format through which real data can be substituted.

File layout: one header record, then item records, then user records. Each
line is a JSON object with a ``record_type`` field.
"""
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from pydantic import ValidationError

from prefsynth.core.errors import ConfigError, CorpusParseError
from prefsynth.core.logging import get_logger
from prefsynth.core.numerics import spawn_rng
from prefsynth.schemas import (
    CORPUS_SCHEMA_VERSION,
    CorpusConfig,
    CorpusHeaderRecord,
    ItemRecord,
    ReferenceMode,
    UserRecord,
)
from prefsynth.services.lexicon import COLOR_WORDS, load_lexicon, load_stopwords

logger = get_logger(__name__)


def _opt_array_equal(a: Optional[np.ndarray], b: Optional[np.ndarray]) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and bool(np.array_equal(a, b))


# =============================================================================
# Domain types
# =============================================================================

@dataclass(frozen=True, eq=False)
class Item:
    item_id: str
    caption: tuple[str, ...]
    text: tuple[str, ...]
    visual_feature: np.ndarray
    category: str
    pixel_grid: Optional[np.ndarray] = None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Item):
            return NotImplemented
        return (
            self.item_id == other.item_id
            and self.caption == other.caption
            and self.text == other.text
            and self.category == other.category
            and _opt_array_equal(self.visual_feature, other.visual_feature)
            and _opt_array_equal(self.pixel_grid, other.pixel_grid)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class UserSequence:
    user_id: str
    history: tuple[Item, ...]
    reference: Item
    held_out_positives: tuple[str, ...] = ()
    planted_preference: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if not self.history:
            raise ConfigError(f"user {self.user_id} has an empty history")
        if any(item.item_id == self.reference.item_id for item in self.history):
            raise ConfigError(f"user {self.user_id}: reference item is part of the history")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, UserSequence):
            return NotImplemented
        return (
            self.user_id == other.user_id
            and self.history == other.history
            and self.reference == other.reference
            and self.held_out_positives == other.held_out_positives
            and _opt_array_equal(self.planted_preference, other.planted_preference)
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def history_ids(self) -> tuple[str, ...]:
        return tuple(item.item_id for item in self.history)

    def history_features(self) -> np.ndarray:
        return np.stack([item.visual_feature for item in self.history])

    def with_history(self, history: tuple[Item, ...]) -> "UserSequence":
        return UserSequence(
            user_id=self.user_id,
            history=history,
            reference=self.reference,
            held_out_positives=self.held_out_positives,
            planted_preference=self.planted_preference,
        )


@dataclass(eq=False)
class Corpus:
    items: dict[str, Item]
    users: list[UserSequence]
    generation_config: Optional[CorpusConfig] = None
    seed: Optional[int] = None
    category_prototypes: dict[str, np.ndarray] = field(default_factory=dict)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        if list(self.items) != list(other.items) or self.users != other.users:
            return False
        if self.seed != other.seed or self.generation_config != other.generation_config:
            return False
        if list(self.category_prototypes) != list(other.category_prototypes):
            return False
        return all(
            self.items[k] == other.items[k] for k in self.items
        ) and all(
            np.array_equal(v, other.category_prototypes[k])
            for k, v in self.category_prototypes.items()
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def item_ids(self) -> list[str]:
        return list(self.items)

    @property
    def visual_dim(self) -> int:
        return int(next(iter(self.items.values())).visual_feature.size)

    def item(self, item_id: str) -> Item:
        return self.items[item_id]

    def user(self, user_id: str) -> UserSequence:
        for u in self.users:
            if u.user_id == user_id:
                return u
        raise KeyError(user_id)

    def out_of_history_ids(self, user: UserSequence, exclude_held_out: bool = True) -> list[str]:
        """Items the user never interacted with, in corpus order."""
        excluded = set(user.history_ids) | {user.reference.item_id}
        if exclude_held_out:
            excluded |= set(user.held_out_positives)
        return [item_id for item_id in self.items if item_id not in excluded]

    def subset(self, max_users: Optional[int]) -> "Corpus":
        if max_users is None or max_users >= len(self.users):
            return self
        return Corpus(
            items=self.items,
            users=self.users[:max_users],
            generation_config=self.generation_config,
            seed=self.seed,
            category_prototypes=self.category_prototypes,
        )


# =============================================================================
# Rendering
# =============================================================================

class PixelRenderer:
    """Deterministic raster for a feature vector: clamp(0.5 + W f) on a grid."""

    def __init__(self, visual_dim: int, size: int = 16, scale: float = 0.25, seed: int = 1234):
        rng = spawn_rng(seed, "render")
        self.size = size
        self.matrix = scale * rng.standard_normal((size * size, visual_dim))

    @classmethod
    def from_config(cls, config: CorpusConfig) -> "PixelRenderer":
        return cls(config.visual_dim, config.pixel_size, config.render_scale, config.render_seed)

    def render(self, feature: np.ndarray) -> np.ndarray:
        flat = np.clip(0.5 + self.matrix @ feature, 0.0, 1.0)
        return flat.reshape(self.size, self.size)


# =============================================================================
# Generation
# =============================================================================

def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def category_prototypes(config: CorpusConfig, seed: int) -> np.ndarray:
    """Unit prototypes on a ring: a shared circular part plus a private part.

    Adjacent categories have cosine ``ring_affinity * cos(2*pi/C)``.
    """
    rng = spawn_rng(seed, "prototypes")
    d, c = config.visual_dim, config.n_categories
    basis, _ = np.linalg.qr(rng.standard_normal((d, c + 2)))
    ring, private = basis[:, :2], basis[:, 2:]
    theta = 2.0 * math.pi * np.arange(c) / c
    circle = np.stack([np.cos(theta), np.sin(theta)], axis=1) @ ring.T
    rho = config.ring_affinity
    return math.sqrt(rho) * circle + math.sqrt(1.0 - rho) * private.T


class _ItemFactory:
    def __init__(
        self,
        config: CorpusConfig,
        prototypes: np.ndarray,
        renderer: Optional[PixelRenderer],
    ) -> None:
        self.config = config
        self.prototypes = prototypes
        self.renderer = renderer
        self.lexicon = load_lexicon()
        self.stopwords = sorted(load_stopwords())
        self.items: dict[str, Item] = {}

    def caption(self, category: int, rng: np.random.Generator) -> tuple[tuple[str, ...], tuple[str, ...]]:
        lex = self.lexicon
        before, after = lex.bridge_words(category, self.config.n_categories)
        own = lex.own_words[category][int(rng.integers(2))]
        stop = self.stopwords[int(rng.integers(len(self.stopwords)))]
        content = [before, own, lex.names[category], after]
        caption = (stop, *content)
        color = COLOR_WORDS[int(rng.integers(len(COLOR_WORDS)))]
        text = (color, *content)
        return caption, text

    def make(
        self,
        item_id: str,
        category: int,
        rng: np.random.Generator,
        preference: Optional[np.ndarray] = None,
    ) -> Item:
        d = self.config.visual_dim
        raw = self.prototypes[category] + self.config.feature_noise * rng.standard_normal(d) / math.sqrt(d)
        if preference is not None:
            raw = raw + self.config.preference_offset * preference
        feature = _normalize(raw)
        caption, text = self.caption(category, rng)
        item = Item(
            item_id=item_id,
            caption=caption,
            text=text,
            visual_feature=feature,
            category=self.lexicon.category_label(category),
            pixel_grid=self.renderer.render(feature) if self.renderer else None,
        )
        self.items[item_id] = item
        return item


def generate_corpus(config: CorpusConfig, seed: int) -> Corpus:
    """Generate a synthetic corpus; identical (config, seed) gives identical output."""
    lexicon = load_lexicon()
    if config.n_categories > lexicon.n_categories:
        raise ConfigError(
            f"n_categories ({config.n_categories}) exceeds the shipped lexicon "
            f"({lexicon.n_categories} categories)"
        )

    c_count, d = config.n_categories, config.visual_dim
    protos = category_prototypes(config, seed)
    renderer = PixelRenderer.from_config(config) if config.with_pixels else None
    factory = _ItemFactory(config, protos, renderer)

    catalog_rng = spawn_rng(seed, "catalog")
    for c in range(c_count):
        for j in range(config.items_per_category):
            factory.make(f"c{c}-i{j:03d}", c, catalog_rng)

    users: list[UserSequence] = []
    n_relevant = config.relevant_count
    for u in range(config.n_users):
        rng = spawn_rng(seed, "user", u)
        primary = int(rng.integers(c_count))
        pref = protos[primary].copy()
        if rng.random() < config.secondary_probability:
            neighbour = (primary + (1 if rng.random() < 0.5 else -1)) % c_count
            pref = pref + config.secondary_weight * protos[neighbour]
        pref = _normalize(pref + config.preference_noise * rng.standard_normal(d) / math.sqrt(d))

        if config.reference_mode == ReferenceMode.IN_CLUSTER:
            ref_category = primary
        else:
            others = [c for c in range(c_count) if c != primary]
            ref_category = others[int(rng.integers(len(others)))]

        uid = f"u{u:03d}"
        history: list[Item] = []
        for j in range(config.history_length):
            if j < n_relevant:
                category = primary
            else:
                category = int(rng.integers(c_count - 1))
                category = category + 1 if category >= primary else category
            history.append(factory.make(f"{uid}-h{j:02d}", category, rng, pref))
        order = rng.permutation(len(history))
        history = [history[i] for i in order]

        reference = factory.make(f"{uid}-ref", ref_category, rng, pref)
        held_out = [
            factory.make(f"{uid}-o{j}", primary, rng, pref).item_id
            for j in range(config.held_out_per_user)
        ]
        users.append(
            UserSequence(
                user_id=uid,
                history=tuple(history),
                reference=reference,
                held_out_positives=tuple(held_out),
                planted_preference=pref,
            )
        )

    logger.info(
        "corpus generated",
        seed=seed,
        users=len(users),
        items=len(factory.items),
        categories=c_count,
    )
    return Corpus(
        items=factory.items,
        users=users,
        generation_config=config,
        seed=seed,
        category_prototypes={
            lexicon.category_label(c): protos[c] for c in range(c_count)
        },
    )


# =============================================================================
# Persistence
# =============================================================================

def _item_record(item: Item) -> dict[str, object]:
    return ItemRecord(
        item_id=item.item_id,
        caption=list(item.caption),
        text=list(item.text),
        visual_feature=item.visual_feature.tolist(),
        pixel_grid=item.pixel_grid.tolist() if item.pixel_grid is not None else None,
        category=item.category,
    ).model_dump(mode="json")


def iter_corpus_records(corpus: Corpus) -> Iterator[dict[str, object]]:
    yield CorpusHeaderRecord(
        schema_version=CORPUS_SCHEMA_VERSION,
        seed=corpus.seed,
        generation_config=(
            corpus.generation_config.model_dump(mode="json")
            if corpus.generation_config is not None
            else None
        ),
        category_prototypes={k: v.tolist() for k, v in corpus.category_prototypes.items()},
    ).model_dump(mode="json")
    for item in corpus.items.values():
        yield _item_record(item)
    for user in corpus.users:
        yield UserRecord(
            user_id=user.user_id,
            history_ids=list(user.history_ids),
            reference_id=user.reference.item_id,
            held_out_ids=list(user.held_out_positives),
            planted_preference=(
                user.planted_preference.tolist()
                if user.planted_preference is not None
                else None
            ),
        ).model_dump(mode="json")


def dump_corpus(corpus: Corpus) -> str:
    """Serialize to JSON Lines text (floats written with repr precision)."""
    return "".join(
        json.dumps(record, separators=(",", ":"), allow_nan=False) + "\n"
        for record in iter_corpus_records(corpus)
    )


def save_corpus(corpus: Corpus, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_corpus(corpus), encoding="utf-8")
    logger.info("corpus saved", path=str(path), users=len(corpus.users))
    return path


def _parse_error(exc: ValidationError, line: int) -> CorpusParseError:
    err = exc.errors()[0]
    loc = err.get("loc", ())
    field_name = str(loc[0]) if loc else None
    return CorpusParseError(err.get("msg", "invalid record"), line=line, field=field_name)


def load_corpus(path: str | Path) -> Corpus:
    """Load a JSON Lines corpus; malformed records raise CorpusParseError."""
    path = Path(path)
    header: Optional[CorpusHeaderRecord] = None
    items: dict[str, Item] = {}
    user_records: list[tuple[int, UserRecord]] = []

    with path.open("r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                data = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise CorpusParseError(f"invalid JSON: {exc.msg}", line=line_no) from exc
            if not isinstance(data, dict):
                raise CorpusParseError("record must be a JSON object", line=line_no)
            kind = data.get("record_type")
            try:
                if kind == "header":
                    if header is not None or items or user_records:
                        raise CorpusParseError(
                            "header must be the first record", line=line_no, field="record_type"
                        )
                    header = CorpusHeaderRecord.model_validate(data)
                elif kind == "item":
                    rec = ItemRecord.model_validate(data)
                    if rec.item_id in items:
                        raise CorpusParseError(
                            f"duplicate item_id {rec.item_id!r}", line=line_no, field="item_id"
                        )
                    items[rec.item_id] = Item(
                        item_id=rec.item_id,
                        caption=tuple(rec.caption),
                        text=tuple(rec.text),
                        visual_feature=np.asarray(rec.visual_feature, dtype=np.float64),
                        category=rec.category,
                        pixel_grid=(
                            np.asarray(rec.pixel_grid, dtype=np.float64)
                            if rec.pixel_grid is not None
                            else None
                        ),
                    )
                elif kind == "user":
                    user_records.append((line_no, UserRecord.model_validate(data)))
                else:
                    raise CorpusParseError(
                        f"unknown record_type {kind!r}", line=line_no, field="record_type"
                    )
            except ValidationError as exc:
                raise _parse_error(exc, line_no) from exc

    if header is None:
        raise CorpusParseError("missing header record", line=1, field="record_type")

    users: list[UserSequence] = []
    for line_no, rec in user_records:
        def resolve(item_id: str, field_name: str) -> Item:
            try:
                return items[item_id]
            except KeyError:
                raise CorpusParseError(
                    f"unknown item id {item_id!r}", line=line_no, field=field_name
                ) from None

        history = tuple(resolve(i, "history_ids") for i in rec.history_ids)
        reference = resolve(rec.reference_id, "reference_id")
        if rec.reference_id in rec.history_ids:
            raise CorpusParseError(
                "reference item is part of the history", line=line_no, field="reference_id"
            )
        for held in rec.held_out_ids:
            resolve(held, "held_out_ids")
        users.append(
            UserSequence(
                user_id=rec.user_id,
                history=history,
                reference=reference,
                held_out_positives=tuple(rec.held_out_ids),
                planted_preference=(
                    np.asarray(rec.planted_preference, dtype=np.float64)
                    if rec.planted_preference is not None
                    else None
                ),
            )
        )

    config = (
        CorpusConfig(**header.generation_config)
        if header.generation_config is not None
        else None
    )
    return Corpus(
        items=items,
        users=users,
        generation_config=config,
        seed=header.seed,
        category_prototypes={
            k: np.asarray(v, dtype=np.float64) for k, v in header.category_prototypes.items()
        },
    )
