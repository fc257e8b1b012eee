"""Fine-tuning objectives on a small mean-pooled softmax model.

Three training modes share one loop:

* ``baseline``: cross-entropy on the deterministic segmentation.
* ``SR``: cross-entropy on a freshly sampled segmentation.
* ``MVR``: ``0.5 * CE(det) + 0.5 * CE(sampled) + lam * KL(flat(p_det) || p_sampled)``,
  where ``flat`` is a temperature-``tau`` softmax over the deterministic logits.

The model embeds pieces, mean-pools them (over the whole sentence for
classification, per word for tagging) and applies one linear layer. All
gradients are analytic.
"""

from __future__ import annotations

import json
import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .models import UNK_PIECE
from .segment import Segmenter, TokenSeq, example_rng

MODES = ("baseline", "SR", "MVR")
TASKS = ("clf", "tag")
LOSS_TERMS = ("det_ce", "prob_ce", "consistency")
FLATTEN_TARGETS = ("det_only", "both")
KL_EPS = 1e-12

# Defaults: SR samples with p=0.1 / alpha=0.6; MVR uses (lam=0.2, p=0.2) for
# BPE and (lam=0.6, alpha=0.2) for the unigram family.
_STRENGTH_DEFAULTS = {
    ("SR", "bpe"): 0.1,
    ("SR", "ulm"): 0.6,
    ("MVR", "bpe"): 0.2,
    ("MVR", "ulm"): 0.2,
}
_LAMBDA_DEFAULTS = {"bpe": 0.2, "ulm": 0.6}


class SkippedExample(ValueError):
    """The example has no usable positions after truncation."""


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "MVR"
    task: str = "clf"
    lam: float | None = None
    tau: float = 1.0
    dropout_p: float | None = None
    alpha: float | None = None
    flatten_target: str = "det_only"
    ablate: frozenset[str] = frozenset()
    detach_target: bool = False
    lr: float = 0.5
    momentum: float = 0.0
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    max_pieces: int | None = None
    embed_dim: int = 16
    init_scale: float = 0.1

    def __post_init__(self) -> None:
        object.__setattr__(self, "ablate", frozenset(self.ablate))
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.flatten_target not in FLATTEN_TARGETS:
            raise ValueError(f"flatten_target must be one of {FLATTEN_TARGETS}")
        unknown = self.ablate - set(LOSS_TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms to ablate: {sorted(unknown)}")
        if self.ablate and self.mode != "MVR":
            raise ValueError("ablations are only valid in MVR mode")
        if self.max_pieces is not None and self.max_pieces < 0:
            raise ValueError("max_pieces must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.embed_dim < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and embed_dim >= 1 required")

    @property
    def tagging(self) -> bool:
        return self.task == "tag"

    def resolved(self, family: str) -> TrainConfig:
        """Fill unset ``lam`` / sampling strength with the defaults for ``family``."""
        changes = {}
        if self.lam is None:
            changes["lam"] = _LAMBDA_DEFAULTS[family] if self.mode == "MVR" else 0.0
        if self.mode != "baseline":
            default = _STRENGTH_DEFAULTS[(self.mode, family)]
            if family == "bpe" and self.dropout_p is None:
                changes["dropout_p"] = default
            if family == "ulm" and self.alpha is None:
                changes["alpha"] = default
        return replace(self, **changes)

    def strength(self, family: str) -> float | None:
        return self.dropout_p if family == "bpe" else self.alpha


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ToyModel:
    pieces: list[str]
    embeddings: np.ndarray
    weights: np.ndarray
    bias: np.ndarray
    task: str = "clf"
    labels: list[str] | None = None

    def __post_init__(self) -> None:
        self.pieces = list(self.pieces)
        if UNK_PIECE not in self.pieces:
            raise ValueError(f"piece vocabulary must contain {UNK_PIECE}")
        self.piece_ids = {p: i for i, p in enumerate(self.pieces)}
        self.unk_id = self.piece_ids[UNK_PIECE]
        v, d = self.embeddings.shape
        if v != len(self.pieces) or self.weights.shape[0] != d or self.bias.shape != (self.weights.shape[1],):
            raise ValueError("inconsistent parameter shapes")
        if d < 1 or self.num_classes < 2:
            raise ValueError("need embed dim >= 1 and at least 2 classes")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def initialize(
        cls,
        pieces: Iterable[str],
        num_classes: int,
        dim: int,
        rng: np.random.Generator,
        scale: float = 0.1,
        task: str = "clf",
        labels: list[str] | None = None,
    ) -> ToyModel:
        vocab = [UNK_PIECE, *sorted(set(pieces) - {UNK_PIECE})]
        return cls(
            pieces=vocab,
            embeddings=rng.normal(0.0, scale, size=(len(vocab), dim)),
            weights=rng.normal(0.0, scale, size=(dim, num_classes)),
            bias=np.zeros(num_classes),
            task=task,
            labels=labels,
        )

    def ids(self, pieces: Iterable[str]) -> np.ndarray:
        get = self.piece_ids.get
        return np.array([get(p, self.unk_id) for p in pieces], dtype=np.int64)

    def params(self) -> list[np.ndarray]:
        return [self.embeddings, self.weights, self.bias]

    def copy(self) -> ToyModel:
        return replace(
            self,
            embeddings=self.embeddings.copy(),
            weights=self.weights.copy(),
            bias=self.bias.copy(),
            labels=None if self.labels is None else list(self.labels),
        )

    def save(self, path: str | Path, **metadata) -> None:
        meta = {"task": self.task, "labels": self.labels, **metadata}
        with open(path, "wb") as fh:
            np.savez(
                fh,
                pieces=np.array(self.pieces, dtype=object).astype(str),
                embeddings=self.embeddings,
                weights=self.weights,
                bias=self.bias,
                meta=np.array(json.dumps(meta)),
            )

    @classmethod
    def load(cls, path: str | Path) -> tuple[ToyModel, dict]:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            model = cls(
                pieces=[str(p) for p in data["pieces"]],
                embeddings=data["embeddings"].copy(),
                weights=data["weights"].copy(),
                bias=data["bias"].copy(),
                task=meta.get("task", "clf"),
                labels=meta.get("labels"),
            )
        return model, meta


@dataclass
class Grads:
    embeddings: np.ndarray
    weights: np.ndarray
    bias: np.ndarray

    @classmethod
    def zeros_like(cls, model: ToyModel) -> Grads:
        return cls(np.zeros_like(model.embeddings), np.zeros_like(model.weights), np.zeros_like(model.bias))

    def arrays(self) -> list[np.ndarray]:
        return [self.embeddings, self.weights, self.bias]

    def add_(self, other: Grads, scale: float = 1.0) -> None:
        for mine, theirs in zip(self.arrays(), other.arrays()):
            mine += scale * theirs


@dataclass
class ExampleViews:
    det: TokenSeq
    prob: TokenSeq
    label: int | tuple[int, ...]


# ---------------------------------------------------------------------------
# Numerics
# ---------------------------------------------------------------------------


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def flatten(logits: np.ndarray, tau: float) -> np.ndarray:
    """Temperature softmax ``softmax(logits / tau)``; infinite ``tau`` gives uniform."""
    if not tau > 0:
        raise ValueError("tau must be > 0")
    logits = np.asarray(logits, dtype=float)
    if math.isinf(tau):
        return np.full(logits.shape, 1.0 / logits.shape[-1])
    return softmax(logits / tau)


def kl_divergence(p: np.ndarray, q: np.ndarray, eps: float = KL_EPS) -> float | np.ndarray:
    """``sum p * ln(p / q)`` over the last axis, with ``q`` clamped below at ``eps``."""
    p = np.asarray(p, dtype=float)
    q = np.maximum(np.asarray(q, dtype=float), eps)
    safe_p = np.where(p > 0, p, 1.0)
    terms = np.where(p > 0, p * (np.log(safe_p) - np.log(q)), 0.0)
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def entropy(p: np.ndarray) -> float | np.ndarray:
    p = np.asarray(p, dtype=float)
    safe_p = np.where(p > 0, p, 1.0)
    out = -(np.where(p > 0, p * np.log(safe_p), 0.0)).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def _kl_and_grads(z_target: np.ndarray, z_pred: np.ndarray, tau: float, flatten_both: bool):
    """Row-wise ``KL(softmax(z_t/tau) || softmax(z_p / (tau or 1)))`` and its logit gradients."""
    tau_pred = tau if flatten_both else 1.0
    log_p = log_softmax(z_target / tau)
    p = np.exp(log_p)
    log_q_raw = log_softmax(z_pred / tau_pred)
    q = np.exp(log_q_raw)
    clamped = q < KL_EPS
    log_q = np.where(clamped, math.log(KL_EPS), log_q_raw)
    kl = (p * (log_p - log_q)).sum(axis=-1)

    g = log_p - log_q
    d_target = p * (g - (p * g).sum(axis=-1, keepdims=True)) / tau
    # Clamped entries of q are constants, so they drop out of the gradient.
    p_live = np.where(clamped, 0.0, p)
    d_pred = (q * p_live.sum(axis=-1, keepdims=True) - p_live) / tau_pred
    return kl, d_target, d_pred


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


@dataclass
class _View:
    """Pooled rows of one segmented input: a single row, or one per kept word."""

    rows: list[np.ndarray]  # piece ids per row
    words: list[int]  # word index per row (0 for classification)
    hidden: np.ndarray = field(init=False)
    logits: np.ndarray = field(init=False)

    def run(self, model: ToyModel) -> _View:
        self.hidden = np.stack([model.embeddings[ids].mean(axis=0) for ids in self.rows])
        self.logits = self.hidden @ model.weights + model.bias
        return self

    def subset(self, keep: Sequence[int]) -> _View:
        pos = {w: i for i, w in enumerate(self.words)}
        idx = [pos[w] for w in keep]
        view = _View([self.rows[i] for i in idx], list(keep))
        view.hidden = self.hidden[idx]
        view.logits = self.logits[idx]
        return view

    def backward(self, model: ToyModel, d_logits: np.ndarray, grads: Grads) -> None:
        grads.weights += self.hidden.T @ d_logits
        grads.bias += d_logits.sum(axis=0)
        d_hidden = d_logits @ model.weights.T
        for ids, dh in zip(self.rows, d_hidden):
            np.add.at(grads.embeddings, ids, dh / len(ids))


def _make_view(model: ToyModel, tokens: TokenSeq, max_pieces: int | None) -> _View:
    limit = len(tokens) if max_pieces is None else min(max_pieces, len(tokens))
    if model.task == "clf":
        if limit == 0:
            raise ValueError("input is empty after truncation")
        return _View([model.ids(tokens.pieces[:limit])], [0]).run(model)
    rows, words = [], []
    for w, (start, end) in enumerate(tokens.word_spans):
        if end <= limit and end > start:
            rows.append(model.ids(tokens.pieces[start:end]))
            words.append(w)
    if not rows:
        raise SkippedExample("no word survives truncation")
    return _View(rows, words).run(model)


def forward(model: ToyModel, tokens: TokenSeq, max_pieces: int | None = None) -> np.ndarray:
    """Class probabilities: shape ``(C,)`` for classification, ``(words, C)`` for tagging."""
    view = _make_view(model, tokens, max_pieces)
    probs = softmax(view.logits)
    return probs[0] if model.task == "clf" else probs


def _targets(label, words: list[int]) -> np.ndarray:
    if isinstance(label, (int, np.integer)):
        return np.array([int(label)] * len(words))
    return np.array([label[w] for w in words])


def _ce_and_grad(view: _View, targets: np.ndarray):
    log_p = log_softmax(view.logits)
    rows = np.arange(len(targets))
    ce = -log_p[rows, targets].mean()
    d = np.exp(log_p)
    d[rows, targets] -= 1.0
    return float(ce), d / len(targets)


@dataclass
class LossTerms:
    loss: float
    grads: Grads
    ce_det: float | None = None
    ce_prob: float | None = None
    kl: float | None = None


def _term_weights(config: TrainConfig) -> tuple[float, float, float]:
    use_det = "det_ce" not in config.ablate
    use_prob = "prob_ce" not in config.ablate
    n_ce = use_det + use_prob
    w_ce = 1.0 / n_ce if n_ce else 0.0
    lam = 0.0 if "consistency" in config.ablate else (config.lam or 0.0)
    return (w_ce if use_det else 0.0, w_ce if use_prob else 0.0, lam)


def loss_terms(model: ToyModel, views: ExampleViews, config: TrainConfig) -> LossTerms:
    """Objective value, analytic gradients and the individual terms for one example.

    Raises ``SkippedExample`` for tagging inputs with no usable word.
    """
    grads = Grads.zeros_like(model)
    if config.mode == "baseline":
        view = _make_view(model, views.det, config.max_pieces)
        ce, d = _ce_and_grad(view, _targets(views.label, view.words))
        view.backward(model, d, grads)
        return LossTerms(ce, grads, ce_det=ce)
    if config.mode == "SR":
        view = _make_view(model, views.prob, config.max_pieces)
        ce, d = _ce_and_grad(view, _targets(views.label, view.words))
        view.backward(model, d, grads)
        return LossTerms(ce, grads, ce_prob=ce)

    det = _make_view(model, views.det, config.max_pieces)
    prob = _make_view(model, views.prob, config.max_pieces)
    if model.task == "tag":
        shared = sorted(set(det.words) & set(prob.words))
        if not shared:
            raise SkippedExample("no word survives truncation in both views")
        det, prob = det.subset(shared), prob.subset(shared)
    targets = _targets(views.label, det.words)
    w_det, w_prob, lam = _term_weights(config)

    ce_det, d_det = _ce_and_grad(det, targets)
    ce_prob, d_prob = _ce_and_grad(prob, targets)
    kl_rows, d_target, d_pred = _kl_and_grads(
        det.logits, prob.logits, config.tau, config.flatten_target == "both"
    )
    kl = float(kl_rows.mean())
    n = len(targets)
    d_det = w_det * d_det
    d_prob = w_prob * d_prob + lam * d_pred / n
    if not config.detach_target:
        d_det = d_det + lam * d_target / n
    det.backward(model, d_det, grads)
    prob.backward(model, d_prob, grads)
    loss = w_det * ce_det + w_prob * ce_prob + lam * kl
    return LossTerms(loss, grads, ce_det=ce_det, ce_prob=ce_prob, kl=kl)


def mvr_loss(model: ToyModel, views: ExampleViews, config: TrainConfig) -> tuple[float, Grads]:
    if config.mode != "MVR":
        config = replace(config, mode="MVR")
    terms = loss_terms(model, views, config)
    return terms.loss, terms.grads


def sr_loss(model: ToyModel, views: ExampleViews, config: TrainConfig) -> tuple[float, Grads]:
    terms = loss_terms(model, views, replace(config, mode="SR", ablate=frozenset()))
    return terms.loss, terms.grads


def baseline_loss(model: ToyModel, views: ExampleViews, config: TrainConfig) -> tuple[float, Grads]:
    terms = loss_terms(model, views, replace(config, mode="baseline", ablate=frozenset()))
    return terms.loss, terms.grads


# ---------------------------------------------------------------------------
# Training and inference
# ---------------------------------------------------------------------------


@dataclass
class Example:
    text: str
    label: int | tuple[int, ...]
    id: str = ""
    group: str = "all"


def _check_labels(examples: Sequence[Example], num_classes: int, tagging: bool) -> None:
    for ex in examples:
        labels = ex.label if tagging else (ex.label,)
        if tagging:
            if isinstance(ex.label, (int, np.integer)):
                raise ValueError(f"example {ex.id!r}: tagging needs one label per word")
            if len(ex.label) != len(ex.text.split()):
                raise ValueError(f"example {ex.id!r}: {len(ex.label)} tags for {len(ex.text.split())} words")
        for y in labels:
            if not 0 <= int(y) < num_classes:
                raise ValueError(f"example {ex.id!r}: label {y} out of range [0, {num_classes})")


def predict(model: ToyModel, sentence: str, segmenter: Segmenter):
    """Label(s) and probabilities from the deterministic segmentation only."""
    probs = forward(model, segmenter.encode(sentence))
    labels = probs.argmax(axis=-1)
    return (int(labels), probs) if model.task == "clf" else (labels.tolist(), probs)


def evaluate(model: ToyModel, examples: Sequence[Example], segmenter: Segmenter) -> float:
    """Accuracy (per sentence, or per word for tagging)."""
    correct = total = 0
    for ex in examples:
        labels, _ = predict(model, ex.text, segmenter)
        if model.task == "clf":
            correct += int(labels == ex.label)
            total += 1
        else:
            correct += sum(int(a == b) for a, b in zip(labels, ex.label))
            total += len(ex.label)
    return correct / total if total else float("nan")


def _mean(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def train(
    dataset: Sequence[Example],
    segmenter: Segmenter,
    config: TrainConfig,
    dev: Sequence[Example] | None = None,
    num_classes: int | None = None,
    labels: list[str] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[ToyModel, list[dict]]:
    """Minibatch SGD (optional momentum) on ``dataset``.

    Deterministic views are encoded once; sampled views are redrawn for
    every step from an RNG stream keyed on ``(seed, example index, step)``.
    Returns the trained model and one metrics dict per epoch.
    """
    if not dataset:
        raise ValueError("empty dataset")
    family = segmenter.family
    config = config.resolved(family)
    tagging = config.tagging
    if num_classes is None:
        flat = [y for ex in dataset for y in (ex.label if tagging else (ex.label,))]
        num_classes = max(2, int(max(flat)) + 1)
    _check_labels(dataset, num_classes, tagging)
    if dev:
        _check_labels(dev, num_classes, tagging)

    strength = config.strength(family)
    sampler = segmenter.with_strength(strength) if strength is not None else segmenter
    model = ToyModel.initialize(
        segmenter.piece_inventory(),
        num_classes,
        config.embed_dim,
        np.random.default_rng([config.seed, 0]),
        scale=config.init_scale,
        task=config.task,
        labels=labels,
    )
    det_views = [segmenter.encode(ex.text) for ex in dataset]
    needs_sample = config.mode != "baseline"
    velocity = [np.zeros_like(p) for p in model.params()]
    history: list[dict] = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, 1, epoch]).permutation(len(dataset))
        losses, ce_det, ce_prob, kls = [], [], [], []
        skipped = 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            total = Grads.zeros_like(model)
            used = 0
            for idx in batch.tolist():
                ex = dataset[idx]
                prob_view = (
                    sampler.sample(ex.text, example_rng(config.seed, idx, step)) if needs_sample else det_views[idx]
                )
                views = ExampleViews(det_views[idx], prob_view, ex.label)
                try:
                    terms = loss_terms(model, views, config)
                except SkippedExample:
                    skipped += 1
                    continue
                total.add_(terms.grads)
                used += 1
                losses.append(terms.loss)
                for bucket, value in ((ce_det, terms.ce_det), (ce_prob, terms.ce_prob), (kls, terms.kl)):
                    if value is not None:
                        bucket.append(value)
            step += 1
            if not used:
                continue
            for param, vel, grad in zip(model.params(), velocity, total.arrays()):
                vel *= config.momentum
                vel -= config.lr * grad / used
                param += vel
        record = {
            "epoch": epoch,
            "loss": _mean(losses),
            "ce_det": _mean(ce_det),
            "ce_prob": _mean(ce_prob),
            "kl": _mean(kls),
            "train_acc": evaluate(model, dataset, segmenter),
            "dev_acc": evaluate(model, dev, segmenter) if dev else None,
            "skipped": skipped,
        }
        history.append(record)
        if on_epoch:
            on_epoch(record)
    return model, history
