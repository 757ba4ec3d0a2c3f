"""Triple ingestion, vocabularies, degree statistics and graph perturbations."""

from __future__ import annotations

import math
import random
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

SPLITS = ("train", "valid", "test")
FIXTURE_DIR = Path(__file__).parent / "fixtures" / "micro"
FIXTURE_CONFIG = FIXTURE_DIR.parent / "micro.yaml"


class TripleParseError(ValueError):
    pass


class Triple(NamedTuple):
    head: int
    rel: int
    tail: int


class Direction(str, Enum):
    TAIL = "predict-tail"
    HEAD = "predict-head"


class Query(NamedTuple):
    known: int
    rel: int
    direction: Direction
    gold: int

    @classmethod
    def from_triple(cls, t: Triple, direction: Direction) -> "Query":
        if direction is Direction.TAIL:
            return cls(t.head, t.rel, Direction.TAIL, t.tail)
        return cls(t.tail, t.rel, Direction.HEAD, t.head)

    @property
    def triple(self) -> Triple:
        if self.direction is Direction.TAIL:
            return Triple(self.known, self.rel, self.gold)
        return Triple(self.gold, self.rel, self.known)


class Vocab:
    """Ordered name <-> id mapping; ids are assigned in first-seen order."""

    def __init__(self, names: Iterable[str] = ()):
        self._names: list[str] = []
        self._ids: dict[str, int] = {}
        for n in names:
            self.add(n)

    def add(self, name: str) -> int:
        idx = self._ids.get(name)
        if idx is None:
            idx = len(self._names)
            self._ids[name] = idx
            self._names.append(name)
        return idx

    def id(self, name: str) -> int:
        return self._ids[name]

    def name(self, idx: int) -> str:
        return self._names[idx]

    @property
    def names(self) -> list[str]:
        return list(self._names)

    def __contains__(self, name: str) -> bool:
        return name in self._ids

    def __len__(self) -> int:
        return len(self._names)


@dataclass
class VocabBuilder:
    entities: Vocab = field(default_factory=Vocab)
    relations: Vocab = field(default_factory=Vocab)


@dataclass
class DegreeStats:
    entity_count: int
    avg_degree: float
    low_degree_pct: float
    max_degree: int
    min_degree: int


def load_triples(path: str | Path, vocab: VocabBuilder) -> list[Triple]:
    """Read a tab-separated ``head<TAB>relation<TAB>tail`` file, interning names into ``vocab``."""
    triples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise TripleParseError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}"
                )
            h, r, t = parts
            triples.append(
                Triple(vocab.entities.add(h), vocab.relations.add(r), vocab.entities.add(t))
            )
    return triples


def load_descriptions(path: str | Path, entities: Vocab) -> dict[int, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\r\n")
            if not line:
                continue
            name, _, text = line.partition("\t")
            if name in entities:
                out[entities.id(name)] = text
    return out


class KnowledgeGraph:
    """Integer-coded triple store with splits, a filtering index and train degrees.

    Treat instances as immutable once built; ``perturb`` returns a new graph.
    """

    def __init__(
        self,
        entities: Vocab,
        relations: Vocab,
        train: list[Triple],
        valid: list[Triple],
        test: list[Triple],
        descriptions: dict[int, str] | None = None,
    ):
        self.entities = entities
        self.relations = relations
        self.train = list(train)
        self.valid = list(valid)
        self.test = list(test)
        self.descriptions = dict(descriptions or {})
        self.all_true = frozenset(self.train) | frozenset(self.valid) | frozenset(self.test)
        self.degree = self._count_degree(self.train, len(entities))
        self._train_index = None
        self._true_index = None

    @staticmethod
    def _count_degree(triples: list[Triple], n: int) -> np.ndarray:
        deg = np.zeros(n, dtype=np.int64)
        for h, _, t in triples:
            deg[h] += 1
            deg[t] += 1
        return deg

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def split(self, name: str) -> list[Triple]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def description(self, entity: int) -> str:
        return self.descriptions.get(entity, "")

    def queries(self, split: str) -> list[Query]:
        """Both-direction queries for every triple of ``split``."""
        out = []
        for t in self.split(split):
            out.append(Query.from_triple(t, Direction.TAIL))
            out.append(Query.from_triple(t, Direction.HEAD))
        return out

    def _index(self, triples: Iterable[Triple]) -> dict:
        idx: dict = defaultdict(set)
        for h, r, t in triples:
            idx[(h, r, Direction.TAIL)].add(t)
            idx[(t, r, Direction.HEAD)].add(h)
        return idx

    def answers(self, q: Query, train_only: bool = False) -> set[int]:
        """All entities completing ``q`` to a known triple (gold included when known)."""
        if train_only:
            if self._train_index is None:
                self._train_index = self._index(self.train)
            return self._train_index.get((q.known, q.rel, q.direction), set())
        if self._true_index is None:
            self._true_index = self._index(self.all_true)
        return self._true_index.get((q.known, q.rel, q.direction), set())

    def incident_train_triple(self, entity: int, exclude: Triple | None = None) -> Triple | None:
        """Lowest-index train triple touching ``entity`` other than ``exclude``; None if there is none."""
        if not hasattr(self, "_incident"):
            inc: dict[int, list[Triple]] = {}
            for t in self.train:
                inc.setdefault(t.head, []).append(t)
                if t.tail != t.head:
                    inc.setdefault(t.tail, []).append(t)
            self._incident = inc
        for t in self._incident.get(entity, ()):
            if t != exclude:
                return t
        return None

    def verbalize(self, t: Triple) -> str:
        return f"( {self.entities.name(t.head)} , {self.relations.name(t.rel)} , {self.entities.name(t.tail)} )"

    def check(self) -> None:
        """Raise AssertionError if a structural invariant is violated."""
        sets = [set(self.train), set(self.valid), set(self.test)]
        assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2]), (
            "splits overlap"
        )
        ne, nr = self.n_entities, self.n_relations
        for t in self.all_true:
            assert 0 <= t.head < ne and 0 <= t.tail < ne and 0 <= t.rel < nr, t
        assert np.array_equal(self.degree, self._count_degree(self.train, ne))


def load_kg(directory: str | Path, descriptions: str | Path | None = None) -> KnowledgeGraph:
    """Load ``train.txt``, ``valid.txt`` and ``test.txt`` from ``directory``.

    Names are interned across train, then valid, then test. A ``descriptions.txt``
    next to the splits is picked up automatically when ``descriptions`` is None.
    """
    directory = Path(directory)
    vocab = VocabBuilder()
    splits = {}
    for name in SPLITS:
        path = directory / f"{name}.txt"
        splits[name] = load_triples(path, vocab) if path.exists() else []
    desc_path = Path(descriptions) if descriptions else directory / "descriptions.txt"
    desc = load_descriptions(desc_path, vocab.entities) if desc_path.exists() else {}
    return KnowledgeGraph(
        vocab.entities, vocab.relations, splits["train"], splits["valid"], splits["test"], desc
    )


def load_fixture() -> KnowledgeGraph:
    return load_kg(FIXTURE_DIR)


def low_degree_threshold(degree: np.ndarray) -> int:
    """Degree value at ascending rank ceil(0.2 * |E|)."""
    ordered = np.sort(degree)
    rank = max(1, math.ceil(0.2 * len(ordered)))
    return int(ordered[rank - 1])


def low_degree_entities(kg: KnowledgeGraph) -> np.ndarray:
    return np.flatnonzero(kg.degree <= low_degree_threshold(kg.degree))


def degree_stats(kg: KnowledgeGraph) -> DegreeStats:
    if not kg.train:
        raise ValueError("degree statistics need a non-empty train split")
    deg = kg.degree
    n = len(deg)
    low = int(np.count_nonzero(deg <= low_degree_threshold(deg)))
    return DegreeStats(
        entity_count=n,
        avg_degree=2.0 * len(kg.train) / n,
        low_degree_pct=100.0 * low / n,
        max_degree=int(deg.max()),
        min_degree=int(deg.min()),
    )


def low_degree_slice(kg: KnowledgeGraph, split: str) -> list[Query]:
    low = set(low_degree_entities(kg).tolist())
    return [q for q in kg.queries(split) if q.gold in low]


def perturb(kg: KnowledgeGraph, train_fraction: float = 1.0, edge_dropout: float = 0.0, seed: int = 0) -> KnowledgeGraph:
    """Subsample then randomly drop train edges; valid/test are left untouched."""
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1], got {train_fraction}")
    if not 0.0 <= edge_dropout < 1.0:
        raise ValueError(f"edge_dropout must lie in [0, 1), got {edge_dropout}")
    rng = random.Random(seed)
    n = len(kg.train)
    keep = sorted(rng.sample(range(n), math.ceil(train_fraction * n)))
    n_drop = math.floor(edge_dropout * len(keep))
    if n_drop:
        dropped = set(rng.sample(range(len(keep)), n_drop))
        keep = [k for i, k in enumerate(keep) if i not in dropped]
    if not keep:
        raise ValueError("perturbation removed every train triple")
    train = [kg.train[i] for i in keep]
    return KnowledgeGraph(kg.entities, kg.relations, train, kg.valid, kg.test, kg.descriptions)


def filter_set(kg: KnowledgeGraph, q: Query, train_only: bool = False) -> set[int]:
    """Entities other than the gold that also complete ``q`` to a known triple."""
    return kg.answers(q, train_only=train_only) - {q.gold}


def write_kg(kg: KnowledgeGraph, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        with open(directory / f"{name}.txt", "w", encoding="utf-8") as fh:
            for h, r, t in kg.split(name):
                fh.write(f"{kg.entities.name(h)}\t{kg.relations.name(r)}\t{kg.entities.name(t)}\n")
    if kg.descriptions:
        with open(directory / "descriptions.txt", "w", encoding="utf-8") as fh:
            for e, text in sorted(kg.descriptions.items()):
                fh.write(f"{kg.entities.name(e)}\t{text}\n")
