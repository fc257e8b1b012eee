"""Readers and writers for the on-disk formats.

* corpus: one sentence per line
* classification: ``label<TAB>text`` (an optional third column names a group)
* tagging: ``word<TAB>tag`` lines, sentences separated by a blank line
* predictions: JSON lines ``{"id", "group", "gold", "probs"}``
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path

from .trainer import Example


class DataFormatError(ValueError):
    def __init__(self, path: str | Path, lineno: int, message: str):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


@dataclass
class RawExample:
    id: str
    text: str
    label: str | tuple[str, ...]
    group: str = "all"


@dataclass
class Prediction:
    id: str
    group: str
    gold: int
    probs: list[float]

    @property
    def predicted(self) -> int:
        return max(range(len(self.probs)), key=self.probs.__getitem__)


def read_corpus(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


def read_classification(path: str | Path) -> list[RawExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3) or not parts[0]:
                raise DataFormatError(path, lineno, "expected 'label<TAB>text[<TAB>group]'")
            group = parts[2] if len(parts) == 3 else "all"
            out.append(RawExample(id=str(len(out)), text=parts[1], label=parts[0], group=group))
    return out


def read_tagging(path: str | Path) -> list[RawExample]:
    out = []
    words: list[str] = []
    tags: list[str] = []

    def flush():
        if words:
            out.append(RawExample(id=str(len(out)), text=" ".join(words), label=tuple(tags)))
            words.clear()
            tags.clear()

    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                flush()
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1] or any(ch.isspace() for ch in parts[0]):
                raise DataFormatError(path, lineno, "expected 'word<TAB>tag'")
            words.append(parts[0])
            tags.append(parts[1])
    flush()
    return out


def label_space(raw: Iterable[RawExample]) -> list[str]:
    labels = set()
    for ex in raw:
        labels.update(ex.label if isinstance(ex.label, tuple) else (ex.label,))
    return sorted(labels)


def to_examples(raw: Sequence[RawExample], labels: Sequence[str]) -> list[Example]:
    index = {lab: i for i, lab in enumerate(labels)}

    def lookup(lab: str) -> int:
        if lab not in index:
            raise ValueError(f"label {lab!r} not in label space {list(labels)}")
        return index[lab]

    out = []
    for ex in raw:
        if isinstance(ex.label, tuple):
            label = tuple(lookup(t) for t in ex.label)
        else:
            label = lookup(ex.label)
        out.append(Example(text=ex.text, label=label, id=ex.id, group=ex.group))
    return out


def write_predictions(records: Iterable[Prediction], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec), ensure_ascii=False) + "\n")


def read_predictions(path: str | Path) -> list[Prediction]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(
                    Prediction(
                        id=str(obj["id"]),
                        group=str(obj.get("group", "all")),
                        gold=int(obj["gold"]),
                        probs=[float(p) for p in obj["probs"]],
                    )
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise DataFormatError(path, lineno, f"bad prediction record: {exc}") from None
    return out
