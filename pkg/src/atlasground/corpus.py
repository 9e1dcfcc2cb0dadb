"""Documents, synthetic corpus generation, term matching and splits.

Corpus files are JSON lines, one document per line::

    {"id": "doc000001", "tokens": ["the", "lung", ...], "annotations": [1, 2]}
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .atlas import Atlas, OrganRegistry


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Document:
    id: str
    tokens: tuple[str, ...]
    annotations: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        if not self.tokens:
            raise CorpusError(f"document {self.id} has no tokens")
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "annotations", frozenset(int(a) for a in self.annotations))

    def to_record(self) -> dict:
        return {"id": self.id, "tokens": list(self.tokens), "annotations": sorted(self.annotations)}

    def with_annotations(self, annotations: Iterable[int]) -> "Document":
        return Document(self.id, self.tokens, frozenset(annotations))


@dataclass(frozen=True)
class CorpusSpec:
    docs_per_organ_single: int = 500
    docs_per_organ_multi: int = 500
    generic_vocab: int = 200
    context_words_per_organ: int = 8
    context_fraction: float = 0.5
    tokens_per_doc: int = 16
    bandwidth_mm: float = 40.0
    max_partners: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.docs_per_organ_single, self.docs_per_organ_multi) < 1:
            raise CorpusError("document counts must be >= 1")
        if not self.bandwidth_mm > 0:
            raise CorpusError("bandwidth_mm must be positive")
        if self.max_partners < 1 or self.tokens_per_doc < 0 or self.generic_vocab < 1:
            raise CorpusError("invalid corpus spec")
        if not 0.0 <= self.context_fraction <= 1.0:
            raise CorpusError("context_fraction must be in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def organ_centroids_mm(atlas: Atlas) -> dict[int, np.ndarray]:
    return {oid: atlas.registry[oid].voxels.mean(axis=0) * atlas.resolution_mm for oid in atlas.registry.ids}


def partner_log_weights(atlas: Atlas, oid: int, bandwidth_mm: float) -> tuple[list[int], np.ndarray]:
    """Log of the co-mention kernel ``exp(-d^2 / (2 bw^2))`` over the other organs."""
    cents = organ_centroids_mm(atlas)
    others = [j for j in atlas.registry.ids if j != oid]
    d2 = np.array([np.sum((cents[j] - cents[oid]) ** 2) for j in others])
    return others, -d2 / (2.0 * bandwidth_mm**2)


def _sample_partners(rng: np.random.Generator, others: list[int], logw: np.ndarray, k: int) -> list[int]:
    others, logw = list(others), logw.copy()
    chosen = []
    for _ in range(k):
        p = np.exp(logw - logw.max())
        p /= p.sum()
        i = int(rng.choice(len(others), p=p))
        chosen.append(others.pop(i))
        logw = np.delete(logw, i)
    return chosen


def context_vocab(oid: int, n: int) -> list[str]:
    return [f"c{oid}w{i}" for i in range(n)]


def generate_corpus(atlas: Atlas, spec: CorpusSpec) -> list[Document]:
    """Synthesize annotated documents whose co-mentions follow spatial proximity.

    Each organ gets ``docs_per_organ_single`` documents about it alone and
    ``docs_per_organ_multi`` documents that add 1..max_partners partner organs
    drawn without replacement from the proximity kernel. A document is filler
    (generic words plus context words of its first, "focus" organ) with 1-3
    mentions of each annotated organ's name or a synonym spliced in.
    """
    ids = atlas.registry.ids
    if len(ids) < 2:
        raise CorpusError("corpus generation needs an atlas with >= 2 organs")
    rng = np.random.default_rng(spec.seed)
    generic = [f"w{i}" for i in range(spec.generic_vocab)]
    ctx = {oid: context_vocab(oid, spec.context_words_per_organ) for oid in ids}
    kernels = {oid: partner_log_weights(atlas, oid, spec.bandwidth_mm) for oid in ids}
    max_partners = min(spec.max_partners, len(ids) - 1)

    docs: list[Document] = []
    seen: set[tuple[str, ...]] = set()

    def emit(annotated: list[int]) -> None:
        filler = []
        for _ in range(spec.tokens_per_doc):
            focus = ctx[annotated[0]]
            if focus and rng.random() < spec.context_fraction:
                filler.append(focus[int(rng.integers(len(focus)))])
            else:
                filler.append(generic[int(rng.integers(len(generic)))])
        spans = []
        for o in annotated:
            terms = atlas.registry[o].terms
            for _ in range(int(rng.integers(1, 4))):
                spans.append(terms[int(rng.integers(len(terms)))].split())
        # splice each mention at a random gap of the growing token list
        tokens: list[list[str]] = [[t] for t in filler]
        for span in spans:
            tokens.insert(int(rng.integers(len(tokens) + 1)), span)
        flat = tuple(t for chunk in tokens for t in chunk)
        if flat in seen:
            return
        seen.add(flat)
        docs.append(Document(f"doc{len(docs):06d}", flat, frozenset(annotated)))

    for oid in ids:
        for _ in range(spec.docs_per_organ_single):
            emit([oid])
        others, logw = kernels[oid]
        for _ in range(spec.docs_per_organ_multi):
            k = int(rng.integers(1, max_partners + 1))
            emit([oid, *_sample_partners(rng, others, logw, k)])
    return docs


def split_corpus(docs: Sequence[Document], fractions=(0.70, 0.15, 0.15), seed: int = 0):
    """Seeded shuffle into train/val/test.

    Validation and test sizes are ``ceil(fraction * n)`` (so 3 documents
    split 1/1/1); training takes the remainder.
    """
    if len(docs) == 0:
        raise CorpusError("cannot split an empty corpus")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise CorpusError(f"fractions must be 3 nonnegative numbers summing to 1, got {fractions}")
    n = len(docs)
    n_val = min(math.ceil(fractions[1] * n - 1e-9), n)
    n_test = min(math.ceil(fractions[2] * n - 1e-9), n - n_val)
    order = np.random.default_rng(seed).permutation(n)
    val = [docs[i] for i in order[:n_val]]
    test = [docs[i] for i in order[n_val : n_val + n_test]]
    train = [docs[i] for i in order[n_val + n_test :]]
    return train, val, test


def find_term_occurrences(tokens: Sequence[str], registry: OrganRegistry) -> list[tuple[int, tuple[int, int]]]:
    """Left-to-right, longest-match-first, non-overlapping glossary matches.

    Returns ``(organ_id, (start, end))`` pairs with ``end`` exclusive.
    """
    gloss = {tuple(term.split()): oid for term, oid in registry.glossary().items()}
    max_len = max((len(t) for t in gloss), default=0)
    low = [t.lower() for t in tokens]
    out = []
    i = 0
    while i < len(low):
        for n in range(min(max_len, len(low) - i), 0, -1):
            oid = gloss.get(tuple(low[i : i + n]))
            if oid is not None:
                out.append((oid, (i, i + n)))
                i += n
                break
        else:
            i += 1
    return out


def most_frequent_organ(docs: Iterable[Document]) -> int:
    """Organ annotated on the most documents; ties go to the smallest id."""
    counts: dict[int, int] = {}
    for d in docs:
        for a in d.annotations:
            counts[a] = counts.get(a, 0) + 1
    if not counts:
        raise CorpusError("no annotations to count")
    return min(counts, key=lambda o: (-counts[o], o))


def save_corpus(docs: Sequence[Document], path: str | Path) -> None:
    with open(path, "w") as fh:
        for d in docs:
            fh.write(json.dumps(d.to_record(), separators=(",", ":")) + "\n")


def load_corpus(path: str | Path, atlas: Atlas | None = None) -> list[Document]:
    docs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                doc = Document(str(rec["id"]), tuple(str(t).lower() for t in rec["tokens"]), frozenset(rec.get("annotations", ())))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise CorpusError(f"{path}:{lineno}: malformed record ({exc})") from None
            if atlas is not None and not doc.annotations <= set(atlas.registry.ids):
                raise CorpusError(f"{path}:{lineno}: annotations {sorted(doc.annotations)} not in atlas registry")
            docs.append(doc)
    return docs
