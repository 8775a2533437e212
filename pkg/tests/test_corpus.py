"""
Tests for the corpus service
"""
import json
import math

import numpy as np
import pytest

from prefsynth.core.errors import ConfigError, CorpusParseError
from prefsynth.core.numerics import cosine_similarity
from prefsynth.schemas import CorpusConfig, ReferenceMode
from prefsynth.services.corpus import (
    PixelRenderer,
    dump_corpus,
    generate_corpus,
    load_corpus,
    save_corpus,
)


def test_generation_is_deterministic(small_corpus_config):
    """Same (config, seed) gives an identical corpus; another seed does not."""
    a = generate_corpus(small_corpus_config, seed=11)
    b = generate_corpus(small_corpus_config, seed=11)
    c = generate_corpus(small_corpus_config, seed=12)
    assert a == b
    assert dump_corpus(a) == dump_corpus(b)
    assert a != c


def test_generated_structure(small_corpus, small_corpus_config):
    cfg = small_corpus_config
    assert len(small_corpus.users) == cfg.n_users
    catalog = [i for i in small_corpus.item_ids if i.startswith("c")]
    assert len(catalog) == cfg.n_categories * cfg.items_per_category

    for user in small_corpus.users:
        assert len(user.history) == cfg.history_length
        assert user.reference.item_id not in user.history_ids
        assert len(user.held_out_positives) == cfg.held_out_per_user
        assert np.linalg.norm(user.planted_preference) == pytest.approx(1.0)
        # in-cluster: exactly the relevant items share the reference category
        same = sum(1 for item in user.history if item.category == user.reference.category)
        assert same == cfg.relevant_count

    for item in small_corpus.items.values():
        assert np.linalg.norm(item.visual_feature) == pytest.approx(1.0)
        assert item.pixel_grid.shape == (cfg.pixel_size, cfg.pixel_size)
        assert item.pixel_grid.min() >= 0.0 and item.pixel_grid.max() <= 1.0


def test_out_of_cluster_reference(small_corpus_config):
    cfg = small_corpus_config.updated(reference_mode=ReferenceMode.OUT_OF_CLUSTER)
    corpus = generate_corpus(cfg, seed=3)
    for user in corpus.users:
        held_category = corpus.items[user.held_out_positives[0]].category
        assert user.reference.category != held_category


def test_ring_prototypes_have_expected_adjacent_cosine():
    cfg = CorpusConfig(n_users=1, n_categories=6, visual_dim=12, items_per_category=2)
    corpus = generate_corpus(cfg, seed=0)
    protos = list(corpus.category_prototypes.values())
    expected = cfg.ring_affinity * math.cos(2 * math.pi / 6)
    for c in range(6):
        a, b = protos[c], protos[(c + 1) % 6]
        assert np.linalg.norm(a) == pytest.approx(1.0)
        assert float(a @ b) == pytest.approx(expected, abs=1e-9)


def test_captions_share_bridge_words_between_neighbours(small_corpus):
    by_category: dict[str, set[str]] = {}
    for item in small_corpus.items.values():
        by_category.setdefault(item.category, set()).update(item.caption)
    names = list(small_corpus.category_prototypes)
    for c in range(len(names)):
        here, there = by_category[names[c]], by_category[names[(c + 1) % len(names)]]
        assert names[c] in here
        assert here & there - {names[c]}


def test_config_validation():
    with pytest.raises(ConfigError):
        CorpusConfig(n_categories=1)
    with pytest.raises(ConfigError):
        CorpusConfig(relevant_fraction=1.5)
    with pytest.raises(ConfigError):
        CorpusConfig(n_categories=20, visual_dim=12)
    with pytest.raises(ConfigError):
        CorpusConfig(unknown_key=1)


def test_too_many_categories_for_lexicon():
    with pytest.raises(ConfigError):
        generate_corpus(CorpusConfig(n_users=1, n_categories=9, visual_dim=12), seed=0)


def test_save_load_round_trip(small_corpus, tmp_path):
    path = save_corpus(small_corpus, tmp_path / "corpus.jsonl")
    loaded = load_corpus(path)
    assert loaded == small_corpus
    assert dump_corpus(loaded) == path.read_text(encoding="utf-8")


def _lines(corpus) -> list[str]:
    return dump_corpus(corpus).splitlines()


def _write(tmp_path, lines: list[str]):
    path = tmp_path / "bad.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def test_load_reports_line_numbers(small_corpus, tmp_path):
    lines = _lines(small_corpus)

    # Missing header
    with pytest.raises(CorpusParseError) as exc:
        load_corpus(_write(tmp_path, lines[1:]))
    assert exc.value.line == 1

    # Broken JSON on line 3
    broken = lines.copy()
    broken[2] = "{not json"
    with pytest.raises(CorpusParseError) as exc:
        load_corpus(_write(tmp_path, broken))
    assert exc.value.line == 3

    # Duplicate item id
    duplicated = lines[:2] + [lines[1]] + lines[2:]
    with pytest.raises(CorpusParseError) as exc:
        load_corpus(_write(tmp_path, duplicated))
    assert exc.value.line == 3
    assert exc.value.field == "item_id"


def test_load_rejects_bad_fields(small_corpus, tmp_path):
    lines = _lines(small_corpus)

    # Pixel outside [0, 1]
    item = json.loads(lines[1])
    item["pixel_grid"][0][0] = 1.5
    with pytest.raises(CorpusParseError) as exc:
        load_corpus(_write(tmp_path, [lines[0], json.dumps(item), *lines[2:]]))
    assert exc.value.field == "pixel_grid"

    # Zero visual feature
    item = json.loads(lines[1])
    item["visual_feature"] = [0.0] * len(item["visual_feature"])
    with pytest.raises(CorpusParseError) as exc:
        load_corpus(_write(tmp_path, [lines[0], json.dumps(item), *lines[2:]]))
    assert exc.value.field == "visual_feature"

    # Unknown history item
    user = json.loads(lines[-1])
    user["history_ids"][0] = "does-not-exist"
    with pytest.raises(CorpusParseError) as exc:
        load_corpus(_write(tmp_path, [*lines[:-1], json.dumps(user)]))
    assert exc.value.field == "history_ids"
    assert exc.value.line == len(lines)

    # Reference listed in the history
    user = json.loads(lines[-1])
    user["history_ids"][0] = user["reference_id"]
    with pytest.raises(CorpusParseError):
        load_corpus(_write(tmp_path, [*lines[:-1], json.dumps(user)]))


def test_subset_and_lookup(small_corpus):
    sub = small_corpus.subset(2)
    assert [u.user_id for u in sub.users] == [u.user_id for u in small_corpus.users[:2]]
    assert sub.items is small_corpus.items
    assert small_corpus.subset(None) is small_corpus
    user = small_corpus.users[0]
    assert small_corpus.user(user.user_id) == user
    excluded = set(user.history_ids) | {user.reference.item_id} | set(user.held_out_positives)
    assert excluded.isdisjoint(small_corpus.out_of_history_ids(user))


def test_pixel_renderer_is_deterministic():
    a = PixelRenderer(6, size=4, seed=1)
    b = PixelRenderer(6, size=4, seed=1)
    f = np.linspace(-1.0, 1.0, 6)
    np.testing.assert_array_equal(a.render(f), b.render(f))
    assert a.render(f).shape == (4, 4)


@pytest.fixture(scope="module")
def default_corpus():
    return generate_corpus(CorpusConfig(), seed=0)


def test_planted_preference_is_recoverable(default_corpus):
    """The mean in-cluster history feature points at the planted preference."""
    recovered = 0
    for user in default_corpus.users:
        same = [item.visual_feature for item in user.history if item.category == user.reference.category]
        recovered += cosine_similarity(np.mean(same, axis=0), user.planted_preference) >= 0.6
    assert recovered >= 0.95 * len(default_corpus.users)


def test_categories_are_separated(default_corpus):
    catalog = [default_corpus.items[i] for i in default_corpus.item_ids if i.startswith("c")]
    features = np.stack([item.visual_feature for item in catalog])
    labels = np.array([item.category for item in catalog])
    cos = features @ features.T
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    cross = labels[:, None] != labels[None, :]
    assert cos[same].mean() - cos[cross].mean() >= 0.3
