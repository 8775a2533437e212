"""
Tests for history retrieval and fusion
"""
import numpy as np
import pytest

from prefsynth.core.errors import DomainError
from prefsynth.core.numerics import cosine_similarity, softmax_weights, spawn_rng
from prefsynth.schemas import CorpusConfig, EncoderConfig, RetrievalStrategy
from prefsynth.services.corpus import generate_corpus
from prefsynth.services.encoders import SemanticEncoder
from prefsynth.services.retrieval import fuse, ranking_order, retrieve, score_history, select
from tests.factories import make_item, make_user


@pytest.fixture
def encoder() -> SemanticEncoder:
    return SemanticEncoder(EncoderConfig(dim=32))


@pytest.fixture
def user():
    history = [
        make_item("h0", ("brass", "lantern", "lamp"), [1.0, 0.0, 0.0]),
        make_item("h1", ("sport", "sneaker", "shoe"), [0.0, 1.0, 0.0]),
        make_item("h2", ("vintage", "cap", "hat"), [0.0, 0.0, 1.0]),
        make_item("h3", ("sport", "boot", "shoe"), [0.6, 0.8, 0.0]),
    ]
    reference = make_item("ref", ("sport", "sneaker", "shoe"), [0.0, 1.0, 0.0])
    return make_user(history, reference)


def test_score_history_ranks_shared_captions_first(user, encoder):
    scores = score_history(user, encoder)
    assert scores[1] == pytest.approx(1.0)
    assert scores[3] == pytest.approx(2.0 / 3.0)
    assert scores[0] == pytest.approx(0.0, abs=1e-12)
    assert list(ranking_order(scores)[:2]) == [1, 3]


def test_ranking_order_breaks_ties_by_index():
    assert list(ranking_order(np.array([0.5, 0.9, 0.5, 0.9]))) == [1, 3, 0, 2]


def test_select_strategies():
    scores = np.array([0.1, 0.9, 0.5, 0.7, 0.3, 0.8])
    assert select(scores, 2, RetrievalStrategy.RET) == [1, 5]
    assert select(scores, 2, RetrievalStrategy.EXP_RET) == [3, 2]
    picked = select(scores, 3, RetrievalStrategy.RANDOM, rng=spawn_rng(0, "random-select"))
    assert len(set(picked)) == 3
    assert all(0 <= i < 6 for i in picked)


def test_select_is_disjoint_between_ret_and_expret():
    rng = spawn_rng(4, "select-fuzz")
    for _ in range(500):
        n = int(rng.integers(2, 20))
        k = int(rng.integers(1, n // 2 + 1))
        scores = rng.normal(size=n)
        top = set(select(scores, k, RetrievalStrategy.RET))
        nxt = set(select(scores, k, RetrievalStrategy.EXP_RET))
        assert len(top) == len(nxt) == k
        assert top.isdisjoint(nxt)
        assert min(scores[i] for i in top) >= max(scores[i] for i in nxt)


def test_select_bounds():
    scores = np.zeros(4)
    with pytest.raises(DomainError):
        select(scores, 0)
    with pytest.raises(DomainError):
        select(scores, 5)
    with pytest.raises(DomainError):
        select(scores, 3, RetrievalStrategy.EXP_RET)
    with pytest.raises(DomainError):
        select(scores, 2, RetrievalStrategy.RANDOM)
    # k equal to the history length is allowed
    assert sorted(select(scores, 4)) == [0, 1, 2, 3]


def test_fuse_is_softmax_weighted_mean(user, encoder):
    scores = score_history(user, encoder)
    result = fuse(user, [3, 1], scores, temperature=0.5)
    assert result.indices == [1, 3]
    expected_w = softmax_weights(np.array([scores[1], scores[3]]) / 0.5)
    np.testing.assert_allclose(result.weights, expected_w)
    expected = expected_w[0] * np.array([0.0, 1.0, 0.0]) + expected_w[1] * np.array([0.6, 0.8, 0.0])
    np.testing.assert_allclose(result.p_ret, expected)
    with pytest.raises(DomainError):
        fuse(user, [], scores)


def test_retrieve_k_equals_history_uses_everything(user, encoder):
    result = retrieve(user, 4, encoder)
    assert sorted(result.indices) == [0, 1, 2, 3]
    assert result.weights.sum() == pytest.approx(1.0)
    assert result.strategy == RetrievalStrategy.RET


def test_score_history_reports_bad_item(encoder):
    history = [
        make_item("ok", ("sport", "shoe"), [1.0, 0.0]),
        make_item("bad", ("the", "of"), [0.0, 1.0]),
    ]
    user = make_user(history, make_item("ref", ("shoe",), [1.0, 0.0]))
    with pytest.raises(DomainError, match="history item 1"):
        score_history(user, encoder)


WORDS = (
    "brass", "lantern", "lamp", "sport", "sneaker", "shoe", "vintage", "cap", "hat", "boot",
    "silk", "scarf", "wool", "coat", "denim", "jacket", "linen", "shirt", "leather", "belt",
)


def _random_item(item_id: str, rng: np.random.Generator):
    caption = tuple(str(w) for w in rng.choice(WORDS, size=3, replace=False))
    return make_item(item_id, caption, list(rng.normal(size=4)))


def test_retrieval_ignores_history_order(encoder):
    rng = spawn_rng(9, "shuffle")
    checked = 0
    for _ in range(200):
        n = int(rng.integers(4, 12))
        k = int(rng.integers(1, n))
        user = make_user([_random_item(f"h{i}", rng) for i in range(n)], _random_item("ref", rng))
        scores = np.sort(score_history(user, encoder))[::-1]
        if scores[k - 1] == scores[k]:
            # a tie at the cut is broken by position
            continue
        base = retrieve(user, k, encoder)
        picked = {user.history[i].item_id for i in base.indices}
        order = rng.permutation(n)
        shuffled = retrieve(user.with_history(tuple(user.history[i] for i in order)), k, encoder)
        assert {user.history[order[i]].item_id for i in shuffled.indices} == picked
        np.testing.assert_allclose(shuffled.p_ret, base.p_ret, rtol=0, atol=1e-12)
        checked += 1
    assert checked > 100


def test_p_ret_lies_in_the_hull_of_selected_features(small_corpus):
    encoder = SemanticEncoder(EncoderConfig(dim=16))
    for user in small_corpus.users:
        for k in (1, 3, 10):
            result = retrieve(user, k, encoder)
            selected = user.history_features()[result.indices]
            assert np.all(result.weights >= 0.0)
            assert result.weights.sum() == pytest.approx(1.0)
            assert np.all(result.p_ret >= selected.min(axis=0) - 1e-12)
            assert np.all(result.p_ret <= selected.max(axis=0) + 1e-12)


def test_retrieved_preference_beats_the_history_mean():
    corpus = generate_corpus(CorpusConfig(), seed=0)
    encoder = SemanticEncoder(EncoderConfig())
    wins = 0
    for user in corpus.users:
        p_ret = retrieve(user, 5, encoder).p_ret
        mean = user.history_features().mean(axis=0)
        wins += cosine_similarity(p_ret, user.planted_preference) > cosine_similarity(
            mean, user.planted_preference
        )
    assert wins >= 0.9 * len(corpus.users)
