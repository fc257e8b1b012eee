import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import brute_force_segmentations, oracle_best, random_unigram
from mvrseg.lattice import (
    LatticeSampler,
    LatticeTooLarge,
    build_lattice,
    enumerate_all,
    forward_log_sums,
    viterbi,
)
from mvrseg.models import UNK_PIECE, UnigramModel

TOY = UnigramModel({"a": math.log(0.4), "b": math.log(0.3), "ab": math.log(0.3)}, word_marker="")


def test_build_lattice_has_one_edge_per_known_substring():
    model = UnigramModel({p: math.log(0.2) for p in ["▁a", "b", "▁ab", "▁", "a"]})
    lattice = build_lattice("▁ab", model)
    spans = {(e.start, e.end, e.piece) for e in lattice.edges}
    assert spans == {(0, 2, "▁a"), (2, 3, "b"), (0, 3, "▁ab"), (0, 1, "▁"), (1, 2, "a")}
    assert len(lattice.edges) == 5


def test_build_lattice_adds_unk_edge_for_unknown_char():
    model = UnigramModel({"▁": math.log(0.5), "a": math.log(0.5)})
    lattice = build_lattice("▁z", model)
    assert [(e.start, e.end, e.piece, e.unk) for e in lattice.edges] == [(0, 1, "▁", False), (1, 2, UNK_PIECE, True)]
    assert lattice.edges[1].log_prob == model.unk_log_prob


def test_build_lattice_rejects_empty_word():
    with pytest.raises(ValueError):
        build_lattice("", TOY)


def test_viterbi_prefers_whole_word():
    seg = viterbi(build_lattice("ab", TOY))
    assert seg.pieces == ("ab",)
    assert seg.log_prob == pytest.approx(math.log(0.3))


def test_viterbi_single_char():
    assert viterbi(build_lattice("a", TOY)).pieces == ("a",)


def test_viterbi_tie_goes_to_fewer_pieces():
    model = UnigramModel({"a": math.log(0.5), "b": math.log(0.5), "ab": math.log(0.25)}, word_marker="")
    lattice = build_lattice("ab", model)
    segs = enumerate_all(lattice)
    assert segs[0].log_prob == segs[1].log_prob
    assert viterbi(lattice).pieces == ("ab",)
    assert segs[0].pieces == ("ab",)


def test_viterbi_tie_between_equal_length_paths_goes_to_longer_first_piece():
    model = UnigramModel({p: -1.0 for p in ["a", "ab", "b", "ba"]}, word_marker="")
    # "aba": (ab, a) and (a, ba) both have two pieces and equal scores.
    assert viterbi(build_lattice("aba", model)).pieces == ("ab", "a")


def test_enumerate_counts():
    assert len(enumerate_all(build_lattice("ab", TOY))) == 2
    assert len(enumerate_all(build_lattice("a", TOY))) == 1


def test_enumerate_is_sorted_best_first():
    segs = enumerate_all(build_lattice("ab", TOY))
    assert [s.pieces for s in segs] == [("ab",), ("a", "b")]
    assert segs[1].log_prob == pytest.approx(math.log(0.12))


def test_enumerate_refuses_huge_lattice():
    model = UnigramModel({"a": -1.0, "aa": -1.0}, word_marker="")
    lattice = build_lattice("a" * 30, model)
    assert lattice.count_paths() > 10**6
    with pytest.raises(LatticeTooLarge, match="lattice too large"):
        enumerate_all(lattice)


def test_forward_sums_examples():
    lattice = build_lattice("ab", TOY)
    assert forward_log_sums(lattice, 1.0)[-1] == pytest.approx(math.log(0.42), abs=1e-12)
    assert forward_log_sums(lattice, 0.0)[-1] == pytest.approx(math.log(2), abs=1e-12)
    single = build_lattice("a", TOY)
    assert forward_log_sums(single, 0.3)[-1] == pytest.approx(0.3 * math.log(0.4), abs=1e-12)


def test_unknown_only_word_still_segments():
    seg = viterbi(build_lattice("zz", TOY))
    assert seg.pieces == (UNK_PIECE, UNK_PIECE)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10**6), st.text(alphabet="abcx", min_size=1, max_size=8))
def test_lattice_agrees_with_brute_force(seed, word):
    model = random_unigram(np.random.default_rng(seed), "abc", 12, max_len=3)
    lattice = build_lattice(word, model)
    oracle = brute_force_segmentations(word, model)
    segs = enumerate_all(lattice)
    assert sorted(s.pieces for s in segs) == sorted(o[0] for o in oracle)
    assert lattice.count_paths() == len(oracle)
    by_pieces = {o[0]: o[1] for o in oracle}
    for s in segs:
        assert s.log_prob == by_pieces[s.pieces]
    assert viterbi(lattice).pieces == oracle_best(word, model) == segs[0].pieces
    for alpha in (0.0, 0.5, 1.0):
        expected = math.log(math.fsum(math.exp(alpha * o[1]) for o in oracle))
        assert forward_log_sums(lattice, alpha)[-1] == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_equal_piece_probabilities_exercise_ties():
    model = UnigramModel({p: -2.0 for p in ["a", "b", "ab", "ba", "aba", "bb"]}, word_marker="")
    for word in ["abab", "abba", "babab", "aabb", "bbbb", "ababab"]:
        lattice = build_lattice(word, model)
        assert viterbi(lattice).pieces == enumerate_all(lattice)[0].pieces == oracle_best(word, model)


def test_segmentations_reconstruct_the_word():
    model = random_unigram(np.random.default_rng(1), "abc", 15, max_len=4)
    for word in ["abcabc", "cccc", "bacab"]:
        for seg in enumerate_all(build_lattice(word, model)):
            assert "".join(seg.pieces) == word


def test_sampler_probabilities_sum_to_one():
    model = random_unigram(np.random.default_rng(2), "ab", 10, max_len=3)
    lattice = build_lattice("abbab", model)
    for alpha in (0.0, 0.4, 1.0):
        sampler = LatticeSampler(lattice, alpha)
        total = math.fsum(sampler.probability(s) for s in enumerate_all(lattice))
        assert total == pytest.approx(1.0, abs=1e-12)


def test_sampler_single_path_is_constant():
    sampler = LatticeSampler(build_lattice("a", TOY), 0.5)
    rng = np.random.default_rng(0)
    assert {sampler.sample(rng).pieces for _ in range(50)} == {("a",)}
