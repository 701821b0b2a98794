"""Filtered KGC ranking and cosine-ranking evaluation of entity / relation alignment."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedding import EmbeddingTable, as_real
from .kg import FOLDS, EquivClasses, KGError, MultiKG
from .signatures import cosine_matrix

SPLITS = ("whole", "seen", "unseen")
RA_FREQUENCY_THRESHOLD = 500


def filtered_rank(scores: np.ndarray, gold: int, filtered: np.ndarray | None = None) -> int:
    """Rank of ``scores[gold]`` after dropping ``filtered`` positions; ties count against the gold."""
    if filtered is not None and len(filtered) and np.any(np.asarray(filtered) == gold):
        raise KGError("gold candidate was filtered")
    better = scores >= scores[gold]
    better[gold] = False
    if filtered is not None and len(filtered):
        better[np.asarray(filtered)] = False
    return 1 + int(np.count_nonzero(better))


def metrics(ranks, ks=(1, 10)) -> dict[str, float]:
    ranks = np.asarray(ranks, dtype=np.float64)
    out = {"queries": float(len(ranks))}
    if len(ranks) == 0:
        out["mrr"] = float("nan")
        out.update({f"hits{k}": float("nan") for k in ks})
        return out
    out["mrr"] = float(np.mean(1.0 / ranks))
    out.update({f"hits{k}": float(np.mean(ranks <= k)) for k in ks})
    return out


@dataclass
class EvalReport:
    rows: dict[tuple[str, str, str], dict[str, float]] = field(default_factory=dict)

    def add(self, task: str, group: str, split: str, values: dict[str, float]) -> None:
        self.rows[(task, group, split)] = values

    def get(self, task: str, group: str, split: str, metric: str) -> float:
        return self.rows[(task, group, split)][metric]

    def merge(self, other: "EvalReport") -> "EvalReport":
        self.rows.update(other.rows)
        return self

    def to_tsv(self, path: str | Path | None = None) -> str:
        lines = ["task\tgroup\tsplit\tmetric\tvalue"]
        for (task, group, split), values in self.rows.items():
            for metric, value in values.items():
                text = str(int(value)) if metric == "queries" else f"{value:.6f}"
                lines.append(f"{task}\t{group}\t{split}\t{metric}\t{text}")
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def format_table(self) -> str:
        metric_names = []
        for values in self.rows.values():
            for m in values:
                if m not in metric_names:
                    metric_names.append(m)
        metric_names.sort(key=lambda m: (m != "queries", m != "mrr", int(m[4:]) if m.startswith("hits") else 0))
        header = ["task", "group", "split"] + metric_names
        body = []
        for (task, group, split), values in self.rows.items():
            cells = [task, group, split]
            for m in metric_names:
                v = values.get(m)
                cells.append("" if v is None else (str(int(v)) if m == "queries" else f"{v:.4f}"))
            body.append(cells)
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
        return "\n".join([fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in body])


def known_facts(kg: MultiKG, table: EmbeddingTable, include_dev: bool = True):
    """Row-space filter sets ``(s, r) -> {o}`` and ``(r, o) -> {s}`` over all languages."""
    folds = FOLDS if include_dev else ("train", "test")
    tails: dict[tuple[int, int], set] = {}
    heads: dict[tuple[int, int], set] = {}
    for lang in kg.languages:
        for fold in folds:
            t = kg.triples(lang, fold)
            if len(t) == 0:
                continue
            s = table.entity_row[t[:, 0]]
            r = table.relation_row[t[:, 1]]
            o = table.entity_row[t[:, 2]]
            for a, b, c in zip(s.tolist(), r.tolist(), o.tolist()):
                if a < 0 or b < 0 or c < 0:
                    continue
                tails.setdefault((a, b), set()).add(c)
                heads.setdefault((b, c), set()).add(a)
    return tails, heads


def split_seen_unseen(
    test: np.ndarray,
    other_train: list[np.ndarray],
    entity_classes: EquivClasses,
    relation_classes: EquivClasses,
) -> np.ndarray:
    """Boolean mask: test triple has a counterpart in another language's train fold.

    A counterpart matches subject and object up to ``entity_classes`` and the
    relation up to ``relation_classes``.
    """
    ent = entity_classes.representatives()
    rel = relation_classes.representatives()
    keys = set()
    for t in other_train:
        if len(t):
            keys.update(zip(ent[t[:, 0]].tolist(), rel[t[:, 1]].tolist(), ent[t[:, 2]].tolist()))
    if len(test) == 0:
        return np.zeros(0, bool)
    return np.array(
        [k in keys for k in zip(ent[test[:, 0]].tolist(), rel[test[:, 1]].tolist(), ent[test[:, 2]].tolist())],
        dtype=bool,
    )


def seen_masks(kg: MultiKG, fold: str = "test") -> dict[str, np.ndarray]:
    eq, rel_eq = kg.revealed_classes(), kg.relation_classes()
    out = {}
    for lang in kg.languages:
        others = [kg.triples(l, "train") for l in kg.languages if l != lang]
        out[lang] = split_seen_unseen(kg.triples(lang, fold), others, eq, rel_eq)
    return out


def rank_triples(
    table: EmbeddingTable,
    triples: np.ndarray,
    candidates: np.ndarray,
    tails: dict,
    heads: dict,
    directions: tuple[str, ...] = ("tail", "head"),
) -> dict[str, np.ndarray]:
    """Filtered ranks of each triple's object (``tail``) and subject (``head``)."""
    out = {}
    if len(triples) == 0:
        return {d: np.zeros(0, np.int64) for d in directions}
    s_rows = table.erows(triples[:, 0])
    r_rows = table.rrows(triples[:, 1])
    o_rows = table.erows(triples[:, 2])
    ent = table.entities
    rel = table.relations
    cand = ent[candidates]
    for direction in directions:
        if direction == "tail":
            scores = np.real((ent[s_rows] * rel[r_rows]) @ np.conj(cand).T)
            gold_rows, keys, known = o_rows, zip(s_rows.tolist(), r_rows.tolist()), tails
        else:
            scores = np.real((rel[r_rows] * np.conj(ent[o_rows])) @ cand.T)
            gold_rows, keys, known = s_rows, zip(r_rows.tolist(), o_rows.tolist()), heads
        gold_pos = np.searchsorted(candidates, gold_rows)
        if np.any(gold_pos >= len(candidates)) or np.any(candidates[np.minimum(gold_pos, len(candidates) - 1)] != gold_rows):
            raise KGError("gold entity missing from candidate set")
        ranks = np.empty(len(triples), np.int64)
        for q, key in enumerate(keys):
            other = known.get(key, set()) - {int(gold_rows[q])}
            filt = np.searchsorted(candidates, sorted(other)) if other else None
            if filt is not None:
                inside = filt < len(candidates)
                filt = filt[inside][candidates[filt[inside]] == np.array(sorted(other))[inside]]
            ranks[q] = filtered_rank(scores[q], int(gold_pos[q]), filt)
        out[direction] = ranks
    return out


def language_candidates(kg: MultiKG, table: EmbeddingTable, lang: str, global_candidates: bool = False) -> np.ndarray:
    if global_candidates:
        return np.arange(table.ent_re.shape[0])
    rows = table.entity_row[kg.entities_of(lang)]
    return np.unique(rows[rows >= 0])


def eval_kgc(
    kg: MultiKG,
    table: EmbeddingTable,
    fold: str = "test",
    directions: tuple[str, ...] = ("tail", "head"),
    include_dev: bool = True,
    global_candidates: bool = False,
    dump: str | Path | None = None,
) -> EvalReport:
    """MRR and HITS@1/10 per language, and pooled over languages as group ``all``, for the whole, seen and unseen query sets."""
    tails, heads = known_facts(kg, table, include_dev)
    seen = seen_masks(kg, fold)
    report = EvalReport()
    dump_lines = []
    pooled_ranks, pooled_seen = [], []
    for lang in kg.languages:
        triples = kg.triples(lang, fold)
        cands = language_candidates(kg, table, lang, global_candidates)
        ranks = rank_triples(table, triples, cands, tails, heads, directions)
        all_ranks = np.concatenate([ranks[d] for d in directions])
        all_seen = np.concatenate([seen[lang]] * len(directions))
        report.add("kgc", lang, "whole", metrics(all_ranks))
        report.add("kgc", lang, "seen", metrics(all_ranks[all_seen]))
        report.add("kgc", lang, "unseen", metrics(all_ranks[~all_seen]))
        pooled_ranks.append(all_ranks)
        pooled_seen.append(all_seen)
        if dump is not None:
            for d in directions:
                for (s, r, o), rank in zip(triples.tolist(), ranks[d].tolist()):
                    e, rv = kg.entities, kg.relations
                    dump_lines.append(f"{d}\t{e.label(s)}\t{rv.label(r)}\t{e.label(o)}\t{rank}")
    if len(kg.languages) > 1:
        ranks, seen_all = np.concatenate(pooled_ranks), np.concatenate(pooled_seen)
        report.add("kgc", "all", "whole", metrics(ranks))
        report.add("kgc", "all", "seen", metrics(ranks[seen_all]))
        report.add("kgc", "all", "unseen", metrics(ranks[~seen_all]))
    if dump is not None:
        Path(dump).write_text("".join(l + "\n" for l in dump_lines), encoding="utf-8")
    return report


def cosine_rank(query: np.ndarray, candidates: np.ndarray, gold: int, exclude=None) -> int:
    """Pessimistic rank of candidate ``gold`` by cosine similarity to ``query``."""
    sims = cosine_matrix(query[None, :], candidates)[0]
    return filtered_rank(sims, gold, exclude)


def eval_ea(kg: MultiKG, table: EmbeddingTable, pairs: np.ndarray | None = None) -> EvalReport:
    """HITS@1/10 of held-out entity alignments, ranking the target language by cosine.

    Target-language entities sharing the query's row (aliased at train time)
    are not candidates; pairs already sharing a row are not queried.
    """
    pairs = kg.entity_heldout if pairs is None else pairs
    vecs = as_real(table.entities)
    lang_rows = {l: np.unique(table.entity_row[kg.entities_of(l)]) for l in kg.languages}
    by_group: dict[str, list[int]] = {}
    for a, b in pairs.tolist():
        qa, gb = int(table.entity_row[a]), int(table.entity_row[b])
        if qa < 0 or gb < 0 or qa == gb:
            continue
        la, lb = kg.entities.langs[a], kg.entities.langs[b]
        cands = lang_rows[lb]
        cands = cands[(cands != qa) & (cands >= 0)]
        gold = int(np.searchsorted(cands, gb))
        rank = cosine_rank(vecs[qa], vecs[cands], gold)
        by_group.setdefault(f"{la}-{lb}", []).append(rank)
        by_group.setdefault("all", []).append(rank)
    report = EvalReport()
    for group in sorted(by_group, key=lambda g: (g == "all", g)):
        report.add("ea", group, "heldout", metrics(by_group[group], ks=(1, 10)))
    if not by_group:
        report.add("ea", "all", "heldout", metrics([], ks=(1, 10)))
    return report


def relation_train_counts(kg: MultiKG) -> np.ndarray:
    counts = np.zeros(len(kg.relations), np.int64)
    for lang in kg.languages:
        t = kg.triples(lang, "train")
        if len(t):
            np.add.at(counts, t[:, 1], 1)
    return counts


def eval_ra(
    kg: MultiKG,
    table: EmbeddingTable,
    threshold: int = RA_FREQUENCY_THRESHOLD,
    pairs: np.ndarray | None = None,
) -> EvalReport:
    """HITS@1/3 of gold relation alignments by relation-embedding cosine, bucketed by train frequency."""
    pairs = kg.relation_gold if pairs is None else pairs
    vecs = as_real(table.relations)
    counts = relation_train_counts(kg)
    lang_rows = {}
    for l in kg.languages:
        rows = table.relation_row[kg.relations_of(l)]
        lang_rows[l] = np.unique(rows[rows >= 0])
    buckets: dict[str, list[int]] = {f"<{threshold}": [], f">={threshold}": []}
    for a, b in pairs.tolist():
        qa, gb = int(table.relation_row[a]), int(table.relation_row[b])
        target = kg.relations.langs[b]
        if qa < 0 or gb < 0 or target not in lang_rows:
            continue
        cands = lang_rows[target]
        rank = cosine_rank(vecs[qa], vecs[cands], int(np.searchsorted(cands, gb)))
        key = f">={threshold}" if counts[a] >= threshold else f"<{threshold}"
        buckets[key].append(rank)
    report = EvalReport()
    for key, ranks in buckets.items():
        report.add("ra", key, "gold", metrics(ranks, ks=(1, 3, 10)))
    report.add("ra", "all", "gold", metrics(buckets[f"<{threshold}"] + buckets[f">={threshold}"], ks=(1, 3, 10)))
    return report
