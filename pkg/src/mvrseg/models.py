"""Training, holding and (de)serializing the two segmentation model families.

``BpeModel`` is an ordered merge table; ``UnigramModel`` maps pieces to
natural-log probabilities. Both are built from a ``CorpusStats`` word count
table produced by whitespace pre-tokenization.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

BPE_HEADER = "#mvrseg-bpe-v1"
ULM_HEADER = "#mvrseg-ulm-v1"
ALPHABET_PREFIX = "#alphabet"

CONTINUATION_MARKER = "##"
WORD_MARKER = "\u2581"
UNK_PIECE = "<unk>"
UNK_PENALTY = 10.0
# Keeps required characters reachable when their posterior mass underflows.
_UNDERFLOW_LOG_PROB = math.log(1e-300)


class ModelFormatError(ValueError):
    """Raised when a model file cannot be parsed."""

    def __init__(self, path: str | Path, lineno: int, message: str):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


@dataclass
class CorpusStats:
    word_counts: dict[str, int]
    chars: frozenset[str]

    @property
    def total_words(self) -> int:
        return sum(self.word_counts.values())


def count_corpus(corpus: Iterable[str]) -> CorpusStats:
    """Count whitespace-separated words over an iterable of sentences."""
    counts: Counter[str] = Counter()
    for sentence in corpus:
        counts.update(sentence.split())
    if not counts:
        raise ValueError("empty corpus")
    chars = frozenset(ch for word in counts for ch in word)
    return CorpusStats(word_counts=dict(counts), chars=chars)


# ---------------------------------------------------------------------------
# BPE
# ---------------------------------------------------------------------------


@dataclass
class BpeModel:
    """Ordered merge table plus vocabulary.

    Merges are stored marker-free; rank is the list position. The vocabulary
    holds every single training character plus the output of each merge.
    """

    merges: list[tuple[str, str]]
    alphabet: frozenset[str]
    continuation_marker: str = CONTINUATION_MARKER
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.merges = [tuple(m) for m in self.merges]
        self.alphabet = frozenset(self.alphabet)
        self.ranks: dict[tuple[str, str], int] = {}
        for rank, pair in enumerate(self.merges):
            if pair in self.ranks:
                raise ValueError(f"duplicate merge {pair!r}")
            self.ranks[pair] = rank

    @property
    def vocabulary(self) -> frozenset[str]:
        return self.alphabet | {a + b for a, b in self.merges}

    def check(self) -> None:
        """Validate the structural invariants; raises ``ValueError``."""
        vocab = set(self.alphabet)
        for left, right in self.merges:
            if left not in vocab or right not in vocab:
                raise ValueError(f"merge ({left}, {right}) uses a piece not yet in the vocabulary")
            vocab.add(left + right)


def _pair_counts(words: list[list[str]], freqs: list[int]):
    counts: dict[tuple[str, str], int] = defaultdict(int)
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for idx, (symbols, freq) in enumerate(zip(words, freqs)):
        for pair in zip(symbols, symbols[1:]):
            counts[pair] += freq
            where[pair].add(idx)
    return counts, where


def _merge_word(symbols: list[str], pair: tuple[str, str]) -> list[str]:
    left, right = pair
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == left and symbols[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def train_bpe(stats: CorpusStats, num_merges: int) -> BpeModel:
    """Learn up to ``num_merges`` merges by greedy pair frequency.

    Pair counts are weighted by word frequency. Ties go to the
    lexicographically smallest ``(left, right)``; training stops early once
    the best pair occurs fewer than two times.
    """
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    vocab_words = sorted(stats.word_counts)
    words = [list(w) for w in vocab_words]
    freqs = [stats.word_counts[w] for w in vocab_words]
    counts, where = _pair_counts(words, freqs)

    merges: list[tuple[str, str]] = []
    while len(merges) < num_merges and counts:
        pair = min(counts, key=lambda p: (-counts[p], p))
        if counts[pair] < 2:
            break
        merges.append(pair)
        for idx in sorted(where.pop(pair, ())):
            old = words[idx]
            new = _merge_word(old, pair)
            freq = freqs[idx]
            for p in zip(old, old[1:]):
                counts[p] -= freq
            for p in zip(new, new[1:]):
                counts[p] += freq
                where[p].add(idx)
            words[idx] = new
        for p in [p for p, c in counts.items() if c <= 0]:
            del counts[p]
            where.pop(p, None)
    return BpeModel(merges=merges, alphabet=stats.chars)


# ---------------------------------------------------------------------------
# Unigram LM
# ---------------------------------------------------------------------------


@dataclass
class UnigramModel:
    """Piece -> natural-log probability table for lattice segmentation.

    ``unk_log_prob`` defaults to the smallest piece log-probability minus 10.
    """

    pieces: dict[str, float]
    unk_log_prob: float | None = None
    word_marker: str = WORD_MARKER
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.pieces = dict(self.pieces)
        if not self.pieces:
            raise ValueError("unigram model needs at least one piece")
        if self.unk_log_prob is None:
            self.unk_log_prob = min(self.pieces.values()) - UNK_PENALTY
        self.max_piece_len = max(len(p) for p in self.pieces)

    def __len__(self) -> int:
        return len(self.pieces)

    def total_mass(self) -> float:
        return math.fsum(math.exp(lp) for lp in self.pieces.values())


def _logsumexp(values: Iterable[float]) -> float:
    values = list(values)
    if not values:
        return -math.inf
    m = max(values)
    if m == -math.inf:
        return m
    return m + math.log(math.fsum(math.exp(v - m) for v in values))


def _word_spans(word: str, vocab: Mapping[str, float], max_len: int):
    """Edges (start, end, piece) of the lattice for ``word`` restricted to ``vocab``.

    Positions whose single character is missing from ``vocab`` get an
    unknown edge with ``piece=None``.
    """
    n = len(word)
    spans = []
    for i in range(n):
        if word[i] not in vocab:
            spans.append((i, i + 1, None))
        for j in range(i + 1, min(n, i + max_len) + 1):
            piece = word[i:j]
            if piece in vocab:
                spans.append((i, j, piece))
    return spans


def _forward_backward(n: int, spans, logp: Mapping[str, float], unk_lp: float):
    """Expected piece counts and log partition for one word."""
    fwd = [-math.inf] * (n + 1)
    fwd[0] = 0.0
    by_end: dict[int, list] = defaultdict(list)
    by_start: dict[int, list] = defaultdict(list)
    for span in spans:
        by_end[span[1]].append(span)
        by_start[span[0]].append(span)

    def score(piece):
        return unk_lp if piece is None else logp[piece]

    for t in range(1, n + 1):
        fwd[t] = _logsumexp(fwd[s] + score(p) for s, _, p in by_end[t])
    bwd = [-math.inf] * (n + 1)
    bwd[n] = 0.0
    for t in range(n - 1, -1, -1):
        bwd[t] = _logsumexp(score(p) + bwd[e] for _, e, p in by_start[t])
    log_z = fwd[n]
    expected: dict[str, float] = defaultdict(float)
    for s, e, p in spans:
        if p is None:
            continue
        post = math.exp(fwd[s] + logp[p] + bwd[e] - log_z)
        if post > 0.0:
            expected[p] += post
    return expected, log_z


def _viterbi_pieces(n: int, spans, logp: Mapping[str, float], unk_lp: float) -> list[str | None]:
    best = [-math.inf] * (n + 1)
    back: list[tuple[int, str | None] | None] = [None] * (n + 1)
    best[0] = 0.0
    for s, e, p in sorted(spans, key=lambda sp: (sp[1], sp[0])):
        cand = best[s] + (unk_lp if p is None else logp[p])
        if cand > best[e]:
            best[e] = cand
            back[e] = (s, p)
    out = []
    t = n
    while t > 0:
        s, p = back[t]
        out.append(p)
        t = s
    return out[::-1]


class _UnigramTrainer:
    def __init__(self, stats: CorpusStats, marker: str, unk_lp: float):
        self.required = set(stats.chars)
        self.words = [(marker + w, c) for w, c in sorted(stats.word_counts.items())]
        self.unk_lp = unk_lp

    def e_step(self, logp: Mapping[str, float]):
        max_len = max(len(p) for p in logp)
        totals: dict[str, float] = defaultdict(float)
        loglik = 0.0
        for word, count in self.words:
            spans = _word_spans(word, logp, max_len)
            expected, log_z = _forward_backward(len(word), spans, logp, self.unk_lp)
            loglik += count * log_z
            for piece, value in expected.items():
                totals[piece] += count * value
        return totals, loglik

    def m_step(self, pieces: Iterable[str], expected: Mapping[str, float]) -> dict[str, float]:
        pieces = list(pieces)
        log_total = math.log(math.fsum(expected.get(p, 0.0) for p in pieces))
        out = {}
        for p in pieces:
            c = expected.get(p, 0.0)
            if c > 0.0:
                out[p] = math.log(c) - log_total
            elif p in self.required:
                out[p] = _UNDERFLOW_LOG_PROB
            else:
                out[p] = -math.inf
        return out

    def prune_losses(self, logp: Mapping[str, float], expected: Mapping[str, float], prunable: Iterable[str]):
        """Approximate log-likelihood loss of removing each prunable piece.

        Removing a piece reroutes its expected count through the best
        segmentation of that piece by strictly shorter pieces.
        """
        live = {k: v for k, v in logp.items() if v > -math.inf}
        losses = {}
        for piece in prunable:
            count = expected.get(piece, 0.0)
            if piece not in live or count <= 0.0:
                losses[piece] = 0.0
                continue
            if len(piece) == 1:
                alt_lp = self.unk_lp
            else:
                spans = _word_spans(piece, live, len(piece) - 1)
                alt = _viterbi_pieces(len(piece), spans, live, self.unk_lp)
                alt_lp = math.fsum(self.unk_lp if a is None else live[a] for a in alt)
            losses[piece] = count * (live[piece] - alt_lp)
        return losses


def train_unigram(
    stats: CorpusStats,
    target_vocab_size: int,
    seed_max_len: int = 8,
    prune_fraction: float = 0.25,
    em_iters: int = 2,
    word_marker: str = WORD_MARKER,
    callback: Callable[[int, int, float], None] | None = None,
) -> UnigramModel:
    """Train a unigram LM vocabulary by EM with iterative pruning.

    Seeds are every substring (up to ``seed_max_len``) of the marked words
    occurring at least twice, plus all single characters. Each round runs
    ``em_iters`` EM iterations, then drops the ``prune_fraction`` of
    prunable pieces whose removal costs the least likelihood. Training
    characters are never pruned. A final EM phase runs once the vocabulary
    fits in ``target_vocab_size``.

    ``callback(phase, iteration, loglik)`` is called with the corpus
    log-likelihood at the start of every EM phase (iteration 0) and after
    each M-step.
    """
    if target_vocab_size < len(stats.chars):
        raise ValueError(
            f"target_vocab_size {target_vocab_size} is smaller than the character inventory ({len(stats.chars)})"
        )
    if not 0.0 < prune_fraction < 1.0:
        raise ValueError("prune_fraction must be in (0, 1)")
    if em_iters < 1:
        raise ValueError("em_iters must be >= 1")

    substr: Counter[str] = Counter()
    for word, count in stats.word_counts.items():
        marked = word_marker + word
        for i in range(len(marked)):
            for j in range(i + 2, min(len(marked), i + seed_max_len) + 1):
                substr[marked[i:j]] += count
    chars: Counter[str] = Counter()
    for word, count in stats.word_counts.items():
        for ch in word_marker + word:
            chars[ch] += count
    seeds = {p: c for p, c in substr.items() if c >= 2}
    seeds.update(chars)
    total = sum(seeds.values())
    logp = {p: math.log(c / total) for p, c in seeds.items()}

    # Fixed during training so each EM phase optimises a stationary objective.
    unk_lp = math.log(1.0 / total) - UNK_PENALTY
    trainer = _UnigramTrainer(stats, word_marker, unk_lp)

    def run_em(phase: int, logp: dict[str, float]):
        expected, loglik = trainer.e_step(logp)
        if callback:
            callback(phase, 0, loglik)
        for it in range(1, em_iters + 1):
            logp = trainer.m_step(logp, expected)
            expected, loglik = trainer.e_step(logp)
            if callback:
                callback(phase, it, loglik)
        return logp, expected

    phase = 0
    while True:
        logp, expected = run_em(phase, logp)
        phase += 1
        if len(logp) <= target_vocab_size:
            break
        prunable = [p for p in logp if p not in trainer.required]
        if not prunable:
            break
        losses = trainer.prune_losses(logp, expected, prunable)
        n_drop = max(1, math.ceil(prune_fraction * len(prunable)))
        n_drop = min(n_drop, len(logp) - target_vocab_size)
        ranked = sorted(prunable, key=lambda p: (losses[p], -len(p), p))
        for piece in ranked[:n_drop]:
            del logp[piece]
        logp = trainer.m_step(logp, expected)
        if len(logp) <= target_vocab_size:
            logp, expected = run_em(phase, logp)
            break

    logp = {p: v for p, v in logp.items() if v > -math.inf}
    # Characters left at the underflow floor get a small but usable probability.
    starved = [p for p, v in logp.items() if v <= _UNDERFLOW_LOG_PROB]
    if starved and len(starved) < len(logp):
        base = min(v for v in logp.values() if v > _UNDERFLOW_LOG_PROB) - UNK_PENALTY
        for piece in starved:
            logp[piece] = base
        log_total = math.log(math.fsum(math.exp(v) for v in logp.values()))
        logp = {p: v - log_total for p, v in logp.items()}
    return UnigramModel(pieces=logp, word_marker=word_marker)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_bpe(model: BpeModel, path: str | Path) -> None:
    lines = [BPE_HEADER, " ".join([ALPHABET_PREFIX, *sorted(model.alphabet)])]
    lines += [f"{left} {right}" for left, right in model.merges]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_unigram(model: UnigramModel, path: str | Path) -> None:
    lines = [ULM_HEADER]
    lines += [f"{piece}\t{lp!r}" for piece, lp in model.pieces.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_model(model: BpeModel | UnigramModel, path: str | Path) -> None:
    if isinstance(model, BpeModel):
        save_bpe(model, path)
    elif isinstance(model, UnigramModel):
        save_unigram(model, path)
    else:
        raise TypeError(f"cannot save {type(model).__name__}")


def _parse_bpe(path, lines: list[str]) -> BpeModel:
    alphabet: set[str] = set()
    merges: list[tuple[str, str]] = []
    seen: set[tuple[str, str]] = set()
    start = 1
    if len(lines) > 1 and lines[1].split(" ")[0] == ALPHABET_PREFIX:
        alphabet.update(ch for ch in lines[1].split(" ")[1:] if ch)
        start = 2
    for lineno, line in enumerate(lines[start:], start=start + 1):
        if not line:
            continue
        parts = line.split(" ")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise ModelFormatError(path, lineno, f"expected 'left right', got {line!r}")
        pair = (parts[0], parts[1])
        if pair in seen:
            raise ModelFormatError(path, lineno, f"duplicate merge {line!r}")
        seen.add(pair)
        merges.append(pair)
    if start == 1:
        # No alphabet line: fall back to the characters the merges mention.
        alphabet.update(ch for pair in merges for piece in pair for ch in piece)
    return BpeModel(merges=merges, alphabet=frozenset(alphabet))


def _parse_unigram(path, lines: list[str]) -> UnigramModel:
    pieces: dict[str, float] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0]:
            raise ModelFormatError(path, lineno, f"expected 'piece<TAB>log_prob', got {line!r}")
        piece, raw = parts
        try:
            lp = float(raw)
        except ValueError:
            raise ModelFormatError(path, lineno, f"bad log-probability {raw!r}") from None
        if not math.isfinite(lp):
            raise ModelFormatError(path, lineno, f"non-finite log-probability {raw!r}")
        if piece in pieces:
            raise ModelFormatError(path, lineno, f"duplicate piece {piece!r}")
        pieces[piece] = lp
    if not pieces:
        raise ModelFormatError(path, len(lines), "no pieces")
    return UnigramModel(pieces=pieces)


def load_model(path: str | Path) -> BpeModel | UnigramModel:
    """Load either model family; the header line decides which."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ModelFormatError(path, 1, f"not UTF-8: {exc}") from None
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ModelFormatError(path, 1, "empty file")
    header = lines[0]
    if header == BPE_HEADER:
        return _parse_bpe(path, lines)
    if header == ULM_HEADER:
        return _parse_unigram(path, lines)
    raise ModelFormatError(path, 1, f"unknown header {header!r}")


def load_bpe(path: str | Path) -> BpeModel:
    model = load_model(path)
    if not isinstance(model, BpeModel):
        raise ModelFormatError(path, 1, "not a BPE merges file")
    return model


def load_unigram(path: str | Path) -> UnigramModel:
    model = load_model(path)
    if not isinstance(model, UnigramModel):
        raise ModelFormatError(path, 1, "not a unigram vocabulary file")
    return model
