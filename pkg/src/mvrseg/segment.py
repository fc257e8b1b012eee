"""Deterministic and probabilistic segmenters.

* ``bpe_encode``: greedy lowest-rank merging.
* ``bpe_dropout_encode``: the same loop, with each candidate merge dropped
  with probability ``p`` at every iteration.
* ``ulm_encode``: Viterbi over the unigram lattice.
* ``ulm_sample``: exact draw with probability proportional to ``P(x)**alpha``.

Sentences are pre-tokenized on whitespace. BPE marks non-initial pieces with
``##``; the unigram model prefixes each word with ``▁`` before lookup.
"""

from __future__ import annotations

import os
from collections.abc import Iterable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .lattice import LatticeSampler, build_lattice, viterbi
from .models import UNK_PIECE, BpeModel, UnigramModel

_CACHE_LIMIT = 200_000


@dataclass(frozen=True)
class SegmenterConfig:
    dropout_p: float = 0.0
    alpha: float = 1.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError(f"dropout_p must be in [0, 1], got {self.dropout_p}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class TokenSeq:
    """Pieces of a sentence plus, per word, the half-open range of its pieces."""

    pieces: tuple[str, ...]
    word_spans: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.pieces)

    @property
    def num_words(self) -> int:
        return len(self.word_spans)

    def word_pieces(self, i: int) -> tuple[str, ...]:
        start, end = self.word_spans[i]
        return self.pieces[start:end]

    @classmethod
    def from_words(cls, per_word: Iterable[Sequence[str]]) -> TokenSeq:
        pieces: list[str] = []
        spans = []
        for word_pieces in per_word:
            start = len(pieces)
            pieces.extend(word_pieces)
            spans.append((start, len(pieces)))
        return cls(tuple(pieces), tuple(spans))


def example_rng(seed: int, index: int, *extra: int) -> np.random.Generator:
    """Independent RNG stream for one example, keyed by ``(seed, index, *extra)``."""
    return np.random.default_rng([seed, index, *extra])


def _cached(cache: dict, key, compute):
    value = cache.get(key)
    if value is None:
        if len(cache) >= _CACHE_LIMIT:
            cache.clear()
        value = cache[key] = compute()
    return value


# ---------------------------------------------------------------------------
# BPE
# ---------------------------------------------------------------------------


def _bpe_merge_loop(word: str, model: BpeModel, p: float = 0.0, rng: np.random.Generator | None = None):
    alphabet = model.alphabet
    ranks = model.ranks
    # None marks an unknown character; it never takes part in a merge.
    symbols: list[str | None] = [ch if ch in alphabet else None for ch in word]
    while len(symbols) > 1:
        drops = rng.random(len(symbols) - 1).tolist() if p > 0.0 else None
        best_rank = None
        best_pos = -1
        for i in range(len(symbols) - 1):
            left, right = symbols[i], symbols[i + 1]
            if left is None or right is None:
                continue
            rank = ranks.get((left, right))
            if rank is None:
                continue
            if drops is not None and drops[i] < p:
                continue
            if best_rank is None or rank < best_rank:
                best_rank, best_pos = rank, i
        if best_rank is None:
            break
        symbols[best_pos : best_pos + 2] = [symbols[best_pos] + symbols[best_pos + 1]]
    marker = model.continuation_marker
    out = []
    for i, sym in enumerate(symbols):
        if sym is None:
            out.append(UNK_PIECE)
        else:
            out.append(sym if i == 0 else marker + sym)
    return tuple(out)


def bpe_encode(sentence: str, model: BpeModel) -> TokenSeq:
    cache = model._cache.setdefault("encode", {})
    return TokenSeq.from_words(
        _cached(cache, word, lambda w=word: _bpe_merge_loop(w, model)) for word in sentence.split()
    )


def bpe_dropout_encode(
    sentence: str,
    model: BpeModel,
    config: SegmenterConfig,
    rng: np.random.Generator | None = None,
) -> TokenSeq:
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    p = config.dropout_p
    return TokenSeq.from_words(_bpe_merge_loop(word, model, p, rng) for word in sentence.split())


# ---------------------------------------------------------------------------
# Unigram LM
# ---------------------------------------------------------------------------


def _ulm_best(word: str, model: UnigramModel) -> tuple[str, ...]:
    cache = model._cache.setdefault("viterbi", {})
    return _cached(cache, word, lambda: viterbi(build_lattice(model.word_marker + word, model)).pieces)


def _ulm_sampler(word: str, model: UnigramModel, alpha: float) -> LatticeSampler:
    cache = model._cache.setdefault("sampler", {})
    return _cached(
        cache, (word, alpha), lambda: LatticeSampler(build_lattice(model.word_marker + word, model), alpha)
    )


def ulm_encode(sentence: str, model: UnigramModel) -> TokenSeq:
    return TokenSeq.from_words(_ulm_best(word, model) for word in sentence.split())


def ulm_sample(
    sentence: str,
    model: UnigramModel,
    config: SegmenterConfig,
    rng: np.random.Generator | None = None,
) -> TokenSeq:
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    alpha = config.alpha
    return TokenSeq.from_words(
        tuple(e.piece for e in _ulm_sampler(word, model, alpha).sample_edges(rng)) for word in sentence.split()
    )


# ---------------------------------------------------------------------------
# Segmenter objects
# ---------------------------------------------------------------------------


class BpeSegmenter:
    """Deterministic BPE view plus BPE-dropout sampling at ``dropout_p``."""

    family = "bpe"

    def __init__(self, model: BpeModel, dropout_p: float = 0.0):
        self.model = model
        self.config = SegmenterConfig(dropout_p=dropout_p)

    @property
    def dropout_p(self) -> float:
        return self.config.dropout_p

    def with_strength(self, value: float) -> BpeSegmenter:
        return BpeSegmenter(self.model, value)

    def encode(self, sentence: str) -> TokenSeq:
        return bpe_encode(sentence, self.model)

    def sample(self, sentence: str, rng: np.random.Generator) -> TokenSeq:
        return bpe_dropout_encode(sentence, self.model, self.config, rng)

    def detokenize(self, tokens: TokenSeq) -> list[str]:
        marker = self.model.continuation_marker
        words = []
        for i in range(tokens.num_words):
            pieces = tokens.word_pieces(i)
            rest = [p[len(marker) :] if p.startswith(marker) else p for p in pieces[1:]]
            words.append("".join([pieces[0], *rest]))
        return words

    def piece_inventory(self) -> list[str]:
        marker = self.model.continuation_marker
        vocab = sorted(self.model.vocabulary)
        return [*vocab, *(marker + v for v in vocab)]


class UnigramSegmenter:
    """Viterbi view plus exact lattice sampling at temperature ``alpha``."""

    family = "ulm"

    def __init__(self, model: UnigramModel, alpha: float = 1.0):
        self.model = model
        self.config = SegmenterConfig(alpha=alpha)

    @property
    def alpha(self) -> float:
        return self.config.alpha

    def with_strength(self, value: float) -> UnigramSegmenter:
        return UnigramSegmenter(self.model, value)

    def encode(self, sentence: str) -> TokenSeq:
        return ulm_encode(sentence, self.model)

    def sample(self, sentence: str, rng: np.random.Generator) -> TokenSeq:
        return ulm_sample(sentence, self.model, self.config, rng)

    def detokenize(self, tokens: TokenSeq) -> list[str]:
        marker = self.model.word_marker
        words = []
        for i in range(tokens.num_words):
            joined = "".join(tokens.word_pieces(i))
            words.append(joined[len(marker) :] if marker and joined.startswith(marker) else joined)
        return words

    def piece_inventory(self) -> list[str]:
        return sorted(self.model.pieces)


Segmenter = BpeSegmenter | UnigramSegmenter


def make_segmenter(model: BpeModel | UnigramModel, strength: float | None = None) -> Segmenter:
    """Wrap a model; ``strength`` is dropout ``p`` for BPE or ``alpha`` for ULM."""
    if isinstance(model, BpeModel):
        return BpeSegmenter(model, 0.0 if strength is None else strength)
    if isinstance(model, UnigramModel):
        return UnigramSegmenter(model, 1.0 if strength is None else strength)
    raise TypeError(f"no segmenter for {type(model).__name__}")


def _encode_chunk(segmenter: Segmenter, sample: bool, seed: int, start: int, sentences: list[str]):
    if not sample:
        return [segmenter.encode(s) for s in sentences]
    return [segmenter.sample(s, example_rng(seed, start + i)) for i, s in enumerate(sentences)]


def encode_corpus(
    sentences: Sequence[str],
    segmenter: Segmenter,
    sample: bool = False,
    seed: int = 0,
    workers: int | None = None,
    chunk_size: int = 2000,
) -> list[TokenSeq]:
    """Encode many sentences.

    Sampling uses one RNG stream per sentence index, so the result does not
    depend on ``workers`` or chunking.
    """
    if workers is None:
        workers = int(os.environ.get("MVRSEG_THREADS", "1") or 1)
    sentences = list(sentences)
    chunks = [(i, sentences[i : i + chunk_size]) for i in range(0, len(sentences), chunk_size)]
    if workers <= 1 or len(chunks) <= 1:
        out: list[TokenSeq] = []
        for start, chunk in chunks:
            out.extend(_encode_chunk(segmenter, sample, seed, start, chunk))
        return out
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_encode_chunk, segmenter, sample, seed, start, chunk) for start, chunk in chunks]
        return [tok for fut in futures for tok in fut.result()]
