"""Subject-object signatures of relations and relation-pair beliefs.

A relation's hard signature is the set of (subject, object) entity-class pairs
it connects in the train folds.  Its soft signature replaces each pair by the
concatenated embeddings ``[Re s || Im s || Re o || Im o]``.  Beliefs between
relations in different languages are derived from either kind:

* ``jaccard``        symmetric Jaccard overlap, zeroed below a threshold
* ``asymmetric``     directed subsumption ``|SO1 & SO2| / |SO1|`` and its min
* ``softAsymmetric`` the intersection size replaced by a sum of
  ``sigmoid(w * cos + c)`` over mutually-best cosine partners
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedding import EmbeddingTable
from .kg import MultiKG

VARIANTS = ("jaccard", "asymmetric", "softAsymmetric")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def hard_jaccard(a: set, b: set, threshold: float = 0.0) -> float:
    union = len(a | b)
    if union == 0:
        return 0.0
    value = len(a & b) / union
    return value if value >= threshold else 0.0


def hard_subsumption(a: set, b: set) -> float:
    """Belief that ``a`` implies ``b``; 0 for an empty ``a``."""
    if not a:
        return 0.0
    return len(a & b) / len(a)


def cosine_matrix(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pairwise cosines between rows of ``x`` and ``y``; zero-norm rows give 0."""
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    xn = np.divide(x, nx[:, None], out=np.zeros_like(x, dtype=np.float64), where=nx[:, None] > 0)
    yn = np.divide(y, ny[:, None], out=np.zeros_like(y, dtype=np.float64), where=ny[:, None] > 0)
    return np.clip(xn @ yn.T, -1.0, 1.0)


def partner_pairs(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs ``(i, j)`` where ``j`` is row ``i``'s best column and ``i`` is column ``j``'s best row.

    Ties go to the smallest index.
    """
    if a.size == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    best_col = np.argmax(a, axis=1)
    best_row = np.argmax(a, axis=0)
    rows = np.flatnonzero(best_row[best_col] == np.arange(a.shape[0]))
    return rows, best_col[rows]


def soft_overlap(cosines: np.ndarray, w: float, c: float) -> float:
    """Soft intersection size from the cosines of the partner pairs."""
    return float(np.sum(sigmoid(np.asarray(cosines) * w + c)))


def soft_overlap_grad(cosines: np.ndarray, w: float, c: float) -> tuple[float, float]:
    """``(d/dw, d/dc)`` of :func:`soft_overlap`."""
    s = sigmoid(np.asarray(cosines) * w + c)
    ds = s * (1.0 - s)
    return float(np.sum(ds * cosines)), float(np.sum(ds))


def soft_signature(table: EmbeddingTable, pairs: np.ndarray) -> np.ndarray:
    """``(n, 4d)`` soft signature of ``(subject, object)`` entity-id pairs."""
    s = table.erows(pairs[:, 0])
    o = table.erows(pairs[:, 1])
    return np.concatenate([table.ent_re[s], table.ent_im[s], table.ent_re[o], table.ent_im[o]], axis=1)


class SignatureIndex:
    """Hard signatures of every relation over entity-class representatives."""

    def __init__(self, kg: MultiKG, entity_rep: np.ndarray, fold: str = "train"):
        self.kg = kg
        self.entity_rep = np.asarray(entity_rep)
        n_ent = len(kg.entities)
        self.pairs: dict[int, np.ndarray] = {}
        self.keys: dict[int, set] = {}
        self.lang_of: dict[int, int] = {}
        touching: dict[int, set] = {}
        for li, lang in enumerate(kg.languages):
            t = kg.triples(lang, fold)
            if len(t) == 0:
                continue
            mapped = np.stack([self.entity_rep[t[:, 0]], t[:, 1], self.entity_rep[t[:, 2]]], axis=1)
            mapped = np.unique(mapped, axis=0)
            for r in np.unique(mapped[:, 1]):
                so = mapped[mapped[:, 1] == r][:, [0, 2]]
                r = int(r)
                self.pairs[r] = so
                self.keys[r] = set((so[:, 0] * n_ent + so[:, 1]).tolist())
                self.lang_of[r] = li
                for e in np.unique(so):
                    touching.setdefault(int(e), set()).add(r)
        cands = set()
        for rels in touching.values():
            for a, b in itertools.combinations(sorted(rels), 2):
                if self.lang_of[a] != self.lang_of[b]:
                    cands.add((a, b) if self.lang_of[a] < self.lang_of[b] else (b, a))
        # candidate pairs, first member from the earlier language
        self.candidates = sorted(cands)

    def train_count(self, r: int) -> int:
        return len(self.pairs.get(r, ()))


@dataclass
class BeliefTable:
    r1: np.ndarray
    r2: np.ndarray
    fwd: np.ndarray  # b(r1 => r2)
    bwd: np.ndarray  # b(r2 => r1)
    variant: str
    epoch: int = 0
    # soft variant only: partner cosines and signature sizes per pair
    cosines: list[np.ndarray] = field(default_factory=list)
    n1: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n2: np.ndarray = field(default_factory=lambda: np.zeros(0))
    selected: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))

    def __len__(self):
        return len(self.r1)

    @property
    def equiv(self) -> np.ndarray:
        return np.minimum(self.fwd, self.bwd)

    def recompute(self, w: float, c: float) -> None:
        """Re-evaluate soft beliefs for new ``(w, c)`` with the partner sets held fixed."""
        if self.variant != "softAsymmetric":
            return
        overlap = np.array([soft_overlap(cs, w, c) for cs in self.cosines])
        self.fwd = _safe_div(overlap, self.n1)
        self.bwd = _safe_div(overlap, self.n2)

    def equiv_terms(self, idx: np.ndarray, w: float, c: float):
        """Equivalence beliefs of pairs ``idx`` at ``(w, c)`` and their ``d/dw``, ``d/dc``.

        Hard variants return the stored values and zero gradients.
        """
        idx = np.asarray(idx, dtype=np.int64)
        if self.variant != "softAsymmetric":
            zero = np.zeros(len(idx))
            return self.equiv[idx], zero, zero.copy()
        denom = np.maximum(self.n1[idx], self.n2[idx])
        overlap = np.array([soft_overlap(self.cosines[k], w, c) for k in idx])
        g = np.array([soft_overlap_grad(self.cosines[k], w, c) for k in idx]).reshape(-1, 2)
        return _safe_div(overlap, denom), _safe_div(g[:, 0], denom), _safe_div(g[:, 1], denom)

    def select(self, lang_of: dict[int, int]) -> np.ndarray:
        """Relation test: keep pairs that are each other's best-implied relation.

        ``r2`` must maximise ``b(r1 => .)`` among ``r2``'s language and ``r1``
        must maximise ``b(r2 => .)`` among ``r1``'s.  Ties go to the smallest
        relation id; relations whose best belief is 0 select nothing.
        """
        best: dict[tuple[int, int], tuple[float, int]] = {}

        def offer(src, tgt, value):
            key = (src, lang_of[tgt])
            cur = best.get(key)
            if value > 0 and (cur is None or value > cur[0] or (value == cur[0] and tgt < cur[1])):
                best[key] = (value, tgt)

        for a, b, f, bw in zip(self.r1.tolist(), self.r2.tolist(), self.fwd.tolist(), self.bwd.tolist()):
            offer(a, b, f)
            offer(b, a, bw)
        sel = np.zeros(len(self), bool)
        for k, (a, b) in enumerate(zip(self.r1.tolist(), self.r2.tolist())):
            ba = best.get((a, lang_of[b]))
            bb = best.get((b, lang_of[a]))
            sel[k] = ba is not None and bb is not None and ba[1] == b and bb[1] == a
        self.selected = sel
        return sel

    def to_tsv(self, path: str | Path, kg: MultiKG) -> None:
        rel = kg.relations
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("r1\tr2\tb_fwd\tb_bwd\tb_equiv\n")
            for a, b, f, bw, e in zip(self.r1, self.r2, self.fwd, self.bwd, self.equiv):
                fh.write(f"{rel.label(a)}\t{rel.label(b)}\t{f:.6f}\t{bw:.6f}\t{e:.6f}\n")


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def refresh_beliefs(
    index: SignatureIndex,
    variant: str,
    table: EmbeddingTable | None = None,
    threshold: float = 0.02,
    max_pairs: int = 512,
    rng: np.random.Generator | None = None,
    epoch: int = 0,
) -> BeliefTable:
    """Compute beliefs for every candidate relation pair (others are implicitly 0)."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown belief variant {variant!r}")
    cands = index.candidates
    r1 = np.array([a for a, _ in cands], dtype=np.int64)
    r2 = np.array([b for _, b in cands], dtype=np.int64)
    if variant == "jaccard":
        vals = np.array([hard_jaccard(index.keys[a], index.keys[b], threshold) for a, b in cands])
        out = BeliefTable(r1, r2, vals, vals.copy(), variant, epoch)
    elif variant == "asymmetric":
        fwd = np.array([hard_subsumption(index.keys[a], index.keys[b]) for a, b in cands])
        bwd = np.array([hard_subsumption(index.keys[b], index.keys[a]) for a, b in cands])
        out = BeliefTable(r1, r2, fwd, bwd, variant, epoch)
    else:
        if table is None:
            raise ValueError("soft beliefs need an embedding table")
        rng = rng if rng is not None else np.random.default_rng(0)
        sigs = {}
        for r in sorted({r for pair in cands for r in pair}):
            pairs = index.pairs[r]
            if max_pairs and len(pairs) > max_pairs:
                pairs = pairs[np.sort(rng.choice(len(pairs), max_pairs, replace=False))]
            sigs[r] = soft_signature(table, pairs)
        cosines = []
        for a, b in cands:
            amat = cosine_matrix(sigs[a], sigs[b])
            i, j = partner_pairs(amat)
            cosines.append(amat[i, j])
        n1 = np.array([len(sigs[a]) for a, _ in cands], dtype=np.float64)
        n2 = np.array([len(sigs[b]) for _, b in cands], dtype=np.float64)
        out = BeliefTable(r1, r2, np.zeros(len(cands)), np.zeros(len(cands)), variant, epoch,
                          cosines=cosines, n1=n1, n2=n2)
        out.recompute(table.w, table.c)
    out.select(index.lang_of)
    return out
