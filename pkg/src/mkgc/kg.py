"""In-memory multilingual knowledge graphs.

Entities and relations live in global dense vocabularies; every entry carries
the language it came from and its original surface string.  Triples are stored
as ``(n, 3)`` int64 arrays of ``(subject, relation, object)`` ids.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

FOLDS = ("train", "dev", "test")
SHARED = ""  # language tag of a relation shared by all languages


class KGError(Exception):
    """Raised on inconsistent graph contents or configuration."""


class LoadError(KGError):
    """Malformed or dangling input data."""


class ConfigError(KGError):
    pass


class Vocab:
    """Dense ``(language, surface) -> id`` index."""

    def __init__(self):
        self.langs: list[str] = []
        self.names: list[str] = []
        self._index: dict[tuple[str, str], int] = {}

    def __len__(self):
        return len(self.names)

    def __contains__(self, key):
        return key in self._index

    def add(self, lang: str, name: str) -> int:
        key = (lang, name)
        idx = self._index.get(key)
        if idx is None:
            idx = len(self.names)
            self._index[key] = idx
            self.langs.append(lang)
            self.names.append(name)
        return idx

    def get(self, lang: str, name: str) -> int | None:
        return self._index.get((lang, name))

    def label(self, idx: int) -> str:
        lang = self.langs[idx]
        return f"{lang}:{self.names[idx]}" if lang else self.names[idx]

    def ids_of(self, lang: str) -> np.ndarray:
        return np.array([i for i, l in enumerate(self.langs) if l == lang], dtype=np.int64)

    def digest(self) -> str:
        h = hashlib.sha256()
        for lang, name in zip(self.langs, self.names):
            h.update(f"{lang}\t{name}\n".encode("utf-8"))
        return h.hexdigest()


class EquivClasses:
    """Union-find over ``0..n-1``; the representative of a class is its smallest member."""

    def __init__(self, n: int, pairs: Iterable[tuple[int, int]] = ()):
        self.parent = list(range(n))
        for a, b in pairs:
            self.union(int(a), int(b))

    def __len__(self):
        return len(self.parent)

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> int:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        lo, hi = min(ra, rb), max(ra, rb)
        self.parent[hi] = lo
        return lo

    def connected(self, a: int, b: int) -> bool:
        return self.find(a) == self.find(b)

    def representatives(self) -> np.ndarray:
        return np.array([self.find(i) for i in range(len(self.parent))], dtype=np.int64)


@dataclass
class MultiKG:
    languages: list[str]
    entities: Vocab
    relations: Vocab
    folds: dict[str, dict[str, np.ndarray]]
    # gold entity equivalences in input order, with a mask of the revealed half
    entity_gold: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int64))
    revealed_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))
    relation_gold: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int64))

    @property
    def entity_revealed(self) -> np.ndarray:
        return self.entity_gold[self.revealed_mask]

    @property
    def entity_heldout(self) -> np.ndarray:
        return self.entity_gold[~self.revealed_mask]

    def _check_lang(self, lang: str):
        if lang not in self.languages:
            raise KGError(f"unknown language {lang!r}")

    def entities_of(self, lang: str) -> np.ndarray:
        self._check_lang(lang)
        return self.entities.ids_of(lang)

    def relations_of(self, lang: str) -> np.ndarray:
        self._check_lang(lang)
        ids = self.relations.ids_of(lang)
        if len(ids) == 0:
            # shared vocabulary: relations used by this language
            used = np.concatenate([t[:, 1] for t in self.folds[lang].values()] or [np.zeros(0, np.int64)])
            ids = np.unique(used)
        return ids

    def triples(self, lang: str, fold: str = "train") -> np.ndarray:
        self._check_lang(lang)
        return self.folds[lang][fold]

    def all_triples(self, lang: str) -> np.ndarray:
        return np.concatenate([self.triples(lang, f) for f in FOLDS])

    def revealed_classes(self) -> EquivClasses:
        return EquivClasses(len(self.entities), self.entity_revealed)

    def gold_classes(self) -> EquivClasses:
        return EquivClasses(len(self.entities), self.entity_gold)

    def relation_classes(self) -> EquivClasses:
        return EquivClasses(len(self.relations), self.relation_gold)

    def stats(self) -> dict[str, dict[str, int]]:
        out = {}
        for lang in self.languages:
            out[lang] = {
                "entities": len(self.entities_of(lang)),
                "relations": len(self.relations_of(lang)),
                "triples": int(sum(len(t) for t in self.folds[lang].values())),
            }
        return out


def _dedup(rows: np.ndarray) -> np.ndarray:
    """Drop repeated rows, keeping the first occurrence and the input order."""
    if len(rows) == 0:
        return rows.reshape(0, rows.shape[1] if rows.ndim == 2 else 3)
    _, first = np.unique(rows, axis=0, return_index=True)
    return rows[np.sort(first)]


def build_vocab(
    raw: Mapping[str, Mapping[str, Sequence[Sequence[str]]]],
    entity_pairs: Sequence[tuple[str, str, str, str]] = (),
    relation_pairs: Sequence[tuple[str, str, str, str]] = (),
    shared_relations: bool = False,
) -> MultiKG:
    """Index raw string triples into a :class:`MultiKG`.

    ``raw`` maps language -> fold -> rows of ``(s, r, o)`` strings.  Alignment
    pairs are ``(lang_a, name_a, lang_b, name_b)``; all of them become gold and
    revealed until a split is applied.  With ``shared_relations`` relation
    surface strings are one vocabulary for every language.
    """
    entities, relations = Vocab(), Vocab()
    folds: dict[str, dict[str, np.ndarray]] = {}
    for lang, by_fold in raw.items():
        seen: set[tuple[int, int, int]] = set()
        folds[lang] = {}
        for fold in FOLDS:
            rows = []
            for n, row in enumerate(by_fold.get(fold, ())):
                if len(row) != 3:
                    raise LoadError(f"{lang}/{fold}: row {n + 1} has {len(row)} fields, expected 3")
                s, r, o = row
                t = (
                    entities.add(lang, s),
                    relations.add(SHARED if shared_relations else lang, r),
                    entities.add(lang, o),
                )
                if t in seen:
                    continue
                seen.add(t)
                rows.append(t)
            folds[lang][fold] = np.array(rows, dtype=np.int64).reshape(-1, 3)

    def resolve(vocab, pairs, kind):
        out = []
        for la, a, lb, b in pairs:
            ia, ib = vocab.get(la, a), vocab.get(lb, b)
            if ia is None or ib is None:
                raise LoadError(f"{kind} alignment ({la}:{a}, {lb}:{b}) names an unknown {kind}")
            if la == lb:
                raise LoadError(f"{kind} alignment ({la}:{a}, {lb}:{b}) joins a language to itself")
            out.append((ia, ib))
        return _dedup(np.array(out, dtype=np.int64).reshape(-1, 2))

    gold = resolve(entities, entity_pairs, "entity")
    kg = MultiKG(
        languages=list(raw),
        entities=entities,
        relations=relations,
        folds=folds,
        entity_gold=gold,
        revealed_mask=np.ones(len(gold), bool),
        relation_gold=resolve(relations, relation_pairs, "relation"),
    )
    for lang, st in kg.stats().items():
        logger.info("%s: %d entities, %d relations, %d triples", lang, st["entities"], st["relations"], st["triples"])
    return kg


def check_renames(renames: Mapping[int, int]) -> None:
    for src, dst in renames.items():
        if renames.get(dst, dst) != dst:
            raise ConfigError(f"relation rename map is not idempotent: {src} -> {dst} -> {renames[dst]}")


def collapse_triples(triples: np.ndarray, entity_rep: np.ndarray, relation_rename: np.ndarray) -> np.ndarray:
    """Replace ids by class representatives and drop duplicates that result."""
    if len(triples) == 0:
        return triples.reshape(0, 3)
    out = np.stack(
        [entity_rep[triples[:, 0]], relation_rename[triples[:, 1]], entity_rep[triples[:, 2]]], axis=1
    )
    return _dedup(out)


def rename_array(n_relations: int, renames: Mapping[int, int] | None) -> np.ndarray:
    arr = np.arange(n_relations, dtype=np.int64)
    if renames:
        check_renames(renames)
        for src, dst in renames.items():
            arr[src] = dst
    return arr


def collapse_union(
    kg: MultiKG,
    eq: EquivClasses,
    relation_renames: Mapping[int, int] | None = None,
    fold: str = "train",
) -> tuple[np.ndarray, np.ndarray]:
    """Union of all languages' ``fold`` triples with equivalent nodes collapsed.

    Returns the collapsed triples and, per triple, the index into
    ``kg.languages`` of the language it was first seen in.
    """
    reps = eq.representatives()
    rename = rename_array(len(kg.relations), relation_renames)
    parts, langs = [], []
    for li, lang in enumerate(kg.languages):
        t = kg.triples(lang, fold)
        parts.append(t)
        langs.append(np.full(len(t), li, dtype=np.int64))
    if not parts:
        return np.zeros((0, 3), np.int64), np.zeros(0, np.int64)
    t = np.concatenate(parts)
    lang_of = np.concatenate(langs)
    if len(t) == 0:
        return t.reshape(0, 3), lang_of
    mapped = np.stack([reps[t[:, 0]], rename[t[:, 1]], reps[t[:, 2]]], axis=1)
    _, first = np.unique(mapped, axis=0, return_index=True)
    first = np.sort(first)
    return mapped[first], lang_of[first]


def relation_renames_from_pairs(n_relations: int, pairs: np.ndarray) -> dict[int, int]:
    """Rename map sending every member of an equivalence class to its smallest id."""
    reps = EquivClasses(n_relations, pairs).representatives()
    return {i: int(r) for i, r in enumerate(reps) if r != i}

