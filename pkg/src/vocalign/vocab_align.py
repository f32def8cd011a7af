"""Concept-expanded vocabularies and folding concept probabilities back to classes."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .model import Vocabulary
from .numerics import ShapeError, Tensor, softmax


class ConceptMapError(ValueError):
    """Invalid concept map; ``location`` names the offending key or line."""

    def __init__(self, message: str, location: str | None = None):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


@dataclass(frozen=True)
class ConceptMap:
    entries: tuple[tuple[str, tuple[str, ...]], ...] = ()

    @classmethod
    def from_dict(cls, mapping: Mapping[str, list[str]] | None) -> "ConceptMap":
        if not mapping:
            return cls()
        return cls(tuple((k, tuple(v)) for k, v in mapping.items()))

    def as_dict(self) -> dict[str, list[str]]:
        return {k: list(v) for k, v in self.entries}

    def __len__(self) -> int:
        return sum(len(v) for _, v in self.entries)

    def validate(self, vocab: Vocabulary) -> None:
        classes = set(vocab.classes)
        seen = set(vocab.classes)
        for key, concepts in self.entries:
            if key not in classes:
                raise ConceptMapError(f"unknown class {key!r}", key)
            for c in concepts:
                if not isinstance(c, str) or not c.strip():
                    raise ConceptMapError("concepts must be nonempty strings", key)
                if c in seen:
                    raise ConceptMapError(f"concept {c!r} duplicates a class or another concept", key)
                seen.add(c)


def load_concepts(path: str | Path) -> ConceptMap:
    """Read a UTF-8 JSON object ``{class: [concept, ...]}`` with strict checks."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text, object_pairs_hook=_reject_duplicate_keys)
    except json.JSONDecodeError as exc:
        raise ConceptMapError(exc.msg, f"line {exc.lineno} column {exc.colno}") from None
    if not isinstance(raw, dict):
        raise ConceptMapError("top level must be a JSON object", "line 1")
    for key, value in raw.items():
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConceptMapError(f"value must be an array of strings (line {_line_of(text, key)})", key)
    return ConceptMap.from_dict(raw)


def save_concepts(cm: ConceptMap, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cm.as_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def _reject_duplicate_keys(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise ConceptMapError("duplicate key", k)
        out[k] = v
    return out


def _line_of(text: str, key: str) -> int:
    idx = text.find(json.dumps(key))
    return text.count("\n", 0, idx) + 1 if idx >= 0 else 0


@dataclass(frozen=True)
class ExpandedVocabulary:
    vocab: Vocabulary          # n_tot names, originals first
    owner: tuple[int, ...]     # expanded index -> original class index
    num_original: int

    @property
    def n_tot(self) -> int:
        return len(self.owner)

    @property
    def expanded_classes(self) -> tuple[str, ...]:
        return self.vocab.classes


def expand_vocabulary(vocab: Vocabulary, cm: ConceptMap | None) -> ExpandedVocabulary:
    """Append concepts after the original classes, grouped by owner in map order."""
    cm = cm or ConceptMap()
    cm.validate(vocab)
    names = list(vocab.classes)
    owner = list(range(len(vocab.classes)))
    index = {c: i for i, c in enumerate(vocab.classes)}
    for key, concepts in cm.entries:
        for c in concepts:
            names.append(c)
            owner.append(index[key])
    return ExpandedVocabulary(Vocabulary(tuple(names), vocab.templates), tuple(owner), len(vocab.classes))


def owner_matrix(ev: ExpandedVocabulary) -> np.ndarray:
    """``[n_tot, N_c]`` 0/1 matrix sending each expanded class to its owner."""
    m = np.zeros((ev.n_tot, ev.num_original))
    m[np.arange(ev.n_tot), ev.owner] = 1.0
    return m


def aggregate_concepts(logits: Tensor, ev: ExpandedVocabulary) -> Tensor:
    """Softmax over all ``n_tot`` entries, then sum each owner's group.

    Each original class is a member of its own group.
    """
    if logits.shape[-1] != ev.n_tot:
        raise ShapeError(f"logits have {logits.shape[-1]} classes, expanded vocabulary has {ev.n_tot}")
    probs = softmax(logits, axis=-1)
    if ev.n_tot == ev.num_original:
        return probs
    lead = probs.shape[:-1]
    folded = probs.reshape(-1, ev.n_tot) @ owner_matrix(ev)
    return folded.reshape(*lead, ev.num_original)
