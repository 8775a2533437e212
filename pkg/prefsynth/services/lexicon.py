"""
PrefSynth - Shipped Vocabulary

The lexicon file lists, in order: one name per category, two own words per
category, and one bridge word per adjacent category pair on the ring.
"""
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Optional, Sequence

from prefsynth.core.errors import ConfigError

COLOR_WORDS: tuple[str, ...] = ("red", "blue", "green", "black", "white", "grey")


def _read_data_file(name: str) -> list[str]:
    text = resources.files("prefsynth.data").joinpath(name).read_text(encoding="utf-8")
    return [line.strip().lower() for line in text.splitlines() if line.strip()]


@dataclass(frozen=True)
class Lexicon:
    names: tuple[str, ...]
    own_words: tuple[tuple[str, str], ...]
    bridges: tuple[str, ...]

    @property
    def n_categories(self) -> int:
        return len(self.names)

    @property
    def tokens(self) -> tuple[str, ...]:
        own = tuple(w for pair in self.own_words for w in pair)
        return self.names + own + self.bridges

    def category_label(self, c: int) -> str:
        return self.names[c]

    def bridge_words(self, c: int, n_categories: int) -> tuple[str, str]:
        """Bridges shared with the previous and the next category on the ring."""
        return self.bridges[(c - 1) % n_categories], self.bridges[c]


@lru_cache
def load_lexicon() -> Lexicon:
    tokens = _read_data_file("lexicon.txt")
    if len(tokens) % 4 != 0:
        raise ConfigError(f"lexicon must hold 4 tokens per category, got {len(tokens)}")
    c = len(tokens) // 4
    names = tuple(tokens[:c])
    own = tuple((tokens[c + 2 * i], tokens[c + 2 * i + 1]) for i in range(c))
    bridges = tuple(tokens[3 * c :])
    return Lexicon(names=names, own_words=own, bridges=bridges)


@lru_cache
def _default_stopwords() -> frozenset[str]:
    return frozenset(_read_data_file("stopwords.txt"))


def load_stopwords(extra: Optional[Sequence[str]] = None) -> frozenset[str]:
    """Shipped stopword list, or ``extra`` when a config overrides it."""
    if extra is not None:
        return frozenset(w.strip().lower() for w in extra if w.strip())
    return _default_stopwords()
