"""Segmentation lattices over a word under a unigram model.

Nodes are character boundaries ``0..n``; every source-to-sink path is one
segmentation of the word. Supports Viterbi decoding, forward log-sums at a
temperature, exact path sampling and brute-force enumeration.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field
from itertools import accumulate

import numpy as np

from .models import UNK_PIECE, UnigramModel

DEFAULT_ENUMERATION_CAP = 10**6


class LatticeTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class Edge:
    start: int
    end: int
    piece: str
    log_prob: float
    unk: bool = False


@dataclass(frozen=True)
class Segmentation:
    pieces: tuple[str, ...]
    log_prob: float

    def __len__(self) -> int:
        return len(self.pieces)


@dataclass
class SegmentationLattice:
    word: str
    edges: list[Edge]
    incoming: list[list[Edge]] = field(init=False, repr=False)
    outgoing: list[list[Edge]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        n = len(self.word)
        self.incoming = [[] for _ in range(n + 1)]
        self.outgoing = [[] for _ in range(n + 1)]
        for edge in self.edges:
            self.incoming[edge.end].append(edge)
            self.outgoing[edge.start].append(edge)

    @property
    def num_nodes(self) -> int:
        return len(self.word) + 1

    def count_paths(self) -> int:
        counts = [0] * self.num_nodes
        counts[0] = 1
        for t in range(1, self.num_nodes):
            counts[t] = sum(counts[e.start] for e in self.incoming[t])
        return counts[-1]


def build_lattice(word: str, model: UnigramModel) -> SegmentationLattice:
    """One edge per in-vocabulary substring; unknown characters get an unk edge."""
    if not word:
        raise ValueError("cannot build a lattice for an empty word")
    pieces = model.pieces
    n = len(word)
    edges = []
    for i in range(n):
        if word[i] not in pieces:
            edges.append(Edge(i, i + 1, UNK_PIECE, model.unk_log_prob, unk=True))
        for j in range(i + 1, min(n, i + model.max_piece_len) + 1):
            lp = pieces.get(word[i:j])
            if lp is not None:
                edges.append(Edge(i, j, word[i:j], lp))
    return SegmentationLattice(word, edges)


def _rank_key(score: float, lengths: tuple[int, ...]):
    # Larger is better: probability, then fewer pieces, then longer early pieces.
    return (score, -len(lengths), lengths)


def viterbi(lattice: SegmentationLattice) -> Segmentation:
    n = len(lattice.word)
    best: list[tuple | None] = [None] * (n + 1)
    back: list[Edge | None] = [None] * (n + 1)
    best[0] = _rank_key(0.0, ())
    for t in range(1, n + 1):
        for edge in lattice.incoming[t]:
            prev = best[edge.start]
            if prev is None:
                continue
            cand = _rank_key(prev[0] + edge.log_prob, prev[2] + (edge.end - edge.start,))
            if best[t] is None or cand > best[t]:
                best[t] = cand
                back[t] = edge
    pieces = []
    t = n
    while t > 0:
        edge = back[t]
        pieces.append(edge.piece)
        t = edge.start
    return Segmentation(tuple(reversed(pieces)), best[n][0])


def enumerate_all(lattice: SegmentationLattice, cap: int = DEFAULT_ENUMERATION_CAP) -> list[Segmentation]:
    """Every segmentation with its exact log-probability, best first.

    Raises ``LatticeTooLarge`` when the path count exceeds ``cap``.
    """
    total = lattice.count_paths()
    if total > cap:
        raise LatticeTooLarge(f"lattice too large: {total} paths exceeds cap {cap}")
    n = len(lattice.word)
    found = []
    stack: list[tuple[int, float, tuple[Edge, ...]]] = [(0, 0.0, ())]
    while stack:
        node, score, path = stack.pop()
        if node == n:
            found.append((score, path))
            continue
        for edge in lattice.outgoing[node]:
            stack.append((edge.end, score + edge.log_prob, path + (edge,)))

    def key(item):
        score, path = item
        return _rank_key(score, tuple(e.end - e.start for e in path))

    found.sort(key=key, reverse=True)
    return [Segmentation(tuple(e.piece for e in path), score) for score, path in found]


def _logsumexp(values: list[float]) -> float:
    m = max(values)
    if m == -math.inf:
        return m
    return m + math.log(sum(math.exp(v - m) for v in values))


def forward_log_sums(lattice: SegmentationLattice, alpha: float = 1.0) -> list[float]:
    """``out[t] = log sum over paths 0->t of exp(alpha * path log-prob)``."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    n = len(lattice.word)
    fwd = [-math.inf] * (n + 1)
    fwd[0] = 0.0
    for t in range(1, n + 1):
        terms = [fwd[e.start] + alpha * e.log_prob for e in lattice.incoming[t]]
        if terms:
            fwd[t] = _logsumexp(terms)
    return fwd


class LatticeSampler:
    """Exact sampler over lattice paths with probability proportional to P(x)**alpha.

    Runs the forward pass once, then draws each path backwards from the sink,
    choosing incoming edges in proportion to ``exp(fwd[start] + alpha * lp)``.
    Reuse one sampler for many draws of the same word.
    """

    def __init__(self, lattice: SegmentationLattice, alpha: float = 1.0):
        self.lattice = lattice
        self.alpha = alpha
        self.fwd = forward_log_sums(lattice, alpha)
        self._choices: list[tuple[list[Edge], list[float]]] = []
        for t, edges in enumerate(lattice.incoming):
            if t == 0 or not edges:
                self._choices.append(([], []))
                continue
            weights = [math.exp(self.fwd[e.start] + alpha * e.log_prob - self.fwd[t]) for e in edges]
            cum = list(accumulate(weights))
            self._choices.append((edges, cum))

    def probability(self, seg: Segmentation) -> float:
        return math.exp(self.alpha * seg.log_prob - self.fwd[-1])

    def sample_edges(self, rng: np.random.Generator) -> list[Edge]:
        t = len(self.lattice.word)
        # A path has at most n edges; one batch of uniforms covers it.
        draws = rng.random(t).tolist()
        path = []
        k = 0
        while t > 0:
            edges, cum = self._choices[t]
            i = bisect_right(cum, draws[k] * cum[-1])
            edge = edges[min(i, len(edges) - 1)]
            path.append(edge)
            t = edge.start
            k += 1
        path.reverse()
        return path

    def sample(self, rng: np.random.Generator) -> Segmentation:
        path = self.sample_edges(rng)
        score = 0.0
        for e in path:
            score += e.log_prob
        return Segmentation(tuple(e.piece for e in path), score)
