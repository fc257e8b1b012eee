import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvrseg.lattice import build_lattice, viterbi
from mvrseg.models import (
    BpeModel,
    ModelFormatError,
    UnigramModel,
    count_corpus,
    load_model,
    save_model,
    train_bpe,
    train_unigram,
)


# ---------------------------------------------------------------------------
# corpus statistics
# ---------------------------------------------------------------------------


def test_count_corpus_counts_words_and_chars():
    stats = count_corpus(["ab ab ac"])
    assert stats.word_counts == {"ab": 2, "ac": 1}
    assert stats.chars == {"a", "b", "c"}


def test_count_corpus_merges_lines():
    assert count_corpus(["a a", "a"]).word_counts == {"a": 3}


def test_count_corpus_rejects_empty():
    with pytest.raises(ValueError, match="empty corpus"):
        count_corpus([])
    with pytest.raises(ValueError, match="empty corpus"):
        count_corpus(["   ", ""])


# ---------------------------------------------------------------------------
# BPE training
# ---------------------------------------------------------------------------


def _stats(counts: dict[str, int]):
    return count_corpus([" ".join([w] * c) for w, c in counts.items()])


def test_train_bpe_picks_most_frequent_pair():
    assert train_bpe(_stats({"ab": 2, "ac": 1}), 1).merges == [("a", "b")]


def test_train_bpe_zero_merges():
    model = train_bpe(_stats({"ab": 2, "ac": 1}), 0)
    assert model.merges == []
    assert model.vocabulary == {"a", "b", "c"}


def test_train_bpe_stops_when_best_pair_is_a_singleton():
    # After (a,b) the word is (ab, ab); that pair occurs once, below the floor of 2.
    assert train_bpe(_stats({"abab": 1}), 2).merges == [("a", "b")]


def test_train_bpe_breaks_ties_lexicographically():
    assert train_bpe(_stats({"cd": 2, "ab": 2}), 1).merges == [("a", "b")]


def _naive_apply(word: list[str], pair: tuple[str, str]) -> list[str]:
    out = []
    i = 0
    while i < len(word):
        if i + 1 < len(word) and (word[i], word[i + 1]) == pair:
            out.append(word[i] + word[i + 1])
            i += 2
        else:
            out.append(word[i])
            i += 1
    return out


def _recount(words: dict[tuple[str, ...], int]) -> Counter:
    counts: Counter = Counter()
    for word, freq in words.items():
        for pair in zip(word, word[1:]):
            counts[pair] += freq
    return counts


def _check_greedy_order(counts: dict[str, int], num_merges: int) -> None:
    """Recount pairs from scratch before every merge and compare with the trainer's choice."""
    model = train_bpe(_stats(counts), num_merges)
    words = {tuple(w): c for w, c in counts.items()}
    for merge in model.merges:
        pairs = _recount(words)
        best = max(pairs.values())
        assert best >= 2
        assert merge == min(p for p, c in pairs.items() if c == best)
        words = {tuple(_naive_apply(list(w), merge)): c for w, c in words.items()}
    if len(model.merges) < num_merges:
        pairs = _recount(words)
        assert not pairs or max(pairs.values()) < 2


@settings(max_examples=60, deadline=None)
@given(
    st.dictionaries(st.text(alphabet="abcd", min_size=1, max_size=7), st.integers(1, 5), min_size=1, max_size=8),
    st.integers(0, 15),
)
def test_train_bpe_matches_brute_force_recount(counts, num_merges):
    _check_greedy_order(counts, num_merges)


def test_train_bpe_on_random_corpus_matches_brute_force_recount():
    rng = np.random.default_rng(3)
    counts = {"".join(rng.choice(list("abcdef"), size=rng.integers(2, 9))): int(rng.integers(1, 20)) for _ in range(80)}
    _check_greedy_order(counts, 60)


def test_bpe_model_rejects_duplicate_merges():
    with pytest.raises(ValueError, match="duplicate"):
        BpeModel([("a", "b"), ("a", "b")], frozenset("ab"))


# ---------------------------------------------------------------------------
# Unigram training
# ---------------------------------------------------------------------------


def test_train_unigram_keeps_dominant_whole_word():
    stats = count_corpus(["ab"] * 100)
    model = train_unigram(stats, 3)
    assert len(model) <= 3
    assert viterbi(build_lattice("▁ab", model)).pieces == ("▁ab",)
    assert model.total_mass() == pytest.approx(1.0, abs=1e-9)


def test_train_unigram_single_char_words_give_char_frequencies():
    stats = count_corpus(["a a a b"])
    model = train_unigram(stats, 10, word_marker="")
    assert model.pieces.keys() == {"a", "b"}
    assert model.pieces["a"] == pytest.approx(math.log(0.75), abs=1e-12)
    assert model.pieces["b"] == pytest.approx(math.log(0.25), abs=1e-12)


def test_train_unigram_rejects_target_below_char_inventory():
    with pytest.raises(ValueError, match="character inventory"):
        train_unigram(count_corpus(["abc"]), 1)


def test_train_unigram_never_prunes_training_characters():
    stats = count_corpus(["kappa lambda omega alpha beta gamma delta"] * 3)
    model = train_unigram(stats, len(stats.chars) + 2)
    assert stats.chars <= model.pieces.keys()
    assert len(model) <= len(stats.chars) + 2


def test_train_unigram_em_never_decreases_likelihood():
    rng = np.random.default_rng(0)
    words = ["".join(rng.choice(list("abcde"), size=rng.integers(2, 7))) for _ in range(40)]
    corpus = [" ".join(rng.choice(words, size=5)) for _ in range(100)]
    log: dict[int, list[float]] = {}
    model = train_unigram(count_corpus(corpus), 40, em_iters=3, callback=lambda ph, it, ll: log.setdefault(ph, []).append(ll))
    assert len(log) >= 2
    for values in log.values():
        assert all(b >= a - 1e-9 for a, b in zip(values, values[1:]))
    assert model.total_mass() == pytest.approx(1.0, abs=1e-6)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.text(alphabet="abcxyz", min_size=1, max_size=6), st.integers(1, 6), min_size=1, max_size=10))
def test_bpe_round_trip(tmp_path_factory, counts):
    model = train_bpe(_stats(counts), 10)
    path = tmp_path_factory.mktemp("bpe") / "m.bpe"
    save_model(model, path)
    loaded = load_model(path)
    assert isinstance(loaded, BpeModel)
    assert loaded.merges == model.merges
    assert loaded.alphabet == model.alphabet


@settings(max_examples=40, deadline=None)
@given(
    st.dictionaries(
        st.text(alphabet="ab▁é", min_size=1, max_size=5),
        st.floats(min_value=-50, max_value=0, allow_nan=False),
        min_size=1,
        max_size=12,
    )
)
def test_unigram_round_trip_is_exact(tmp_path_factory, pieces):
    model = UnigramModel(pieces)
    path = tmp_path_factory.mktemp("ulm") / "m.ulm"
    save_model(model, path)
    loaded = load_model(path)
    assert isinstance(loaded, UnigramModel)
    assert loaded.pieces == model.pieces


def test_unigram_file_with_duplicate_piece_reports_line(tmp_path):
    path = tmp_path / "dup.ulm"
    save_model(UnigramModel({"a": math.log(0.5), "b": math.log(0.5)}), path)
    lines = path.read_text(encoding="utf-8").splitlines()
    path.write_text("\n".join([*lines, lines[-1]]) + "\n", encoding="utf-8")
    with pytest.raises(ModelFormatError, match=rf":{len(lines) + 1}:.*duplicate"):
        load_model(path)


def test_bpe_file_with_duplicate_merge_is_rejected(tmp_path):
    path = tmp_path / "dup.bpe"
    save_model(BpeModel([("a", "b")], frozenset("ab")), path)
    path.write_text(path.read_text(encoding="utf-8") + "a b\n", encoding="utf-8")
    with pytest.raises(ModelFormatError, match="duplicate"):
        load_model(path)


@pytest.mark.parametrize(
    "text",
    [
        "",
        "not a model\n",
        "#mvrseg-ulm-v1\na\tnot-a-number\n",
        "#mvrseg-ulm-v1\njust-one-field\n",
        "#mvrseg-bpe-v1\n#alphabet a b\na b c\n",
    ],
)
def test_malformed_files_raise_format_error(tmp_path, text):
    path = tmp_path / "bad"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(ModelFormatError):
        load_model(path)
