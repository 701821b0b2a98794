"""Complex-valued embedding tables and ComplEx scoring.

Embeddings are stored as separate real and imaginary float64 matrices.  Each
entity (relation) id maps to a storage row through ``entity_row``
(``relation_row``); seed-aligned entities map to the same row, so they share
one vector rather than holding copies.  A row index of -1 marks an id the
table does not cover.

Gradients are returned as complex arrays ``g`` with ``g.real = df/dRe`` and
``g.imag = df/dIm``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import read_keyvalue, write_keyvalue
from .kg import KGError

INIT_STD = 0.05
INIT_W = 100.0
INIT_C = -90.0


def complex_score(s: np.ndarray, r: np.ndarray, o: np.ndarray) -> np.ndarray:
    """``Re(sum_k s_k r_k conj(o_k))`` over the last axis."""
    return np.real(np.sum(s * r * np.conj(o), axis=-1))


def score_all_objects(s: np.ndarray, r: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Scores of ``(s, r, x)`` for every candidate row ``x``, as one matrix-vector product."""
    return np.real(np.conj(candidates) @ (s * r))


def score_all_subjects(r: np.ndarray, o: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    return np.real(candidates @ (r * np.conj(o)))


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    z = scores - np.max(scores, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    z = scores - np.max(scores, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def score_gradients(s: np.ndarray, r: np.ndarray, o: np.ndarray):
    """Analytic gradients of :func:`complex_score` w.r.t. ``s``, ``r`` and ``o``."""
    return np.conj(r) * o, np.conj(s) * o, s * r


def as_real(x: np.ndarray) -> np.ndarray:
    """``[Re(x) || Im(x)]`` along the last axis."""
    return np.concatenate([x.real, x.imag], axis=-1)


@dataclass
class EmbeddingTable:
    ent_re: np.ndarray
    ent_im: np.ndarray
    rel_re: np.ndarray
    rel_im: np.ndarray
    entity_row: np.ndarray
    relation_row: np.ndarray
    w: float = INIT_W
    c: float = INIT_C

    @property
    def dim(self) -> int:
        return self.ent_re.shape[1]

    @property
    def entities(self) -> np.ndarray:
        return self.ent_re + 1j * self.ent_im

    @property
    def relations(self) -> np.ndarray:
        return self.rel_re + 1j * self.rel_im

    def _rows(self, table: np.ndarray, ids) -> np.ndarray:
        rows = table[np.asarray(ids)]
        if np.any(rows < 0):
            raise KGError("id not covered by this embedding table")
        return rows

    def erows(self, ids) -> np.ndarray:
        return self._rows(self.entity_row, ids)

    def rrows(self, ids) -> np.ndarray:
        return self._rows(self.relation_row, ids)

    def entity(self, ids) -> np.ndarray:
        rows = self.erows(ids)
        return self.ent_re[rows] + 1j * self.ent_im[rows]

    def relation(self, ids) -> np.ndarray:
        rows = self.rrows(ids)
        return self.rel_re[rows] + 1j * self.rel_im[rows]

    def score(self, s, r, o):
        return complex_score(self.entity(s), self.relation(r), self.entity(o))

    def score_objects(self, s: int, r: int, candidate_rows: np.ndarray) -> np.ndarray:
        cand = self.ent_re[candidate_rows] + 1j * self.ent_im[candidate_rows]
        return score_all_objects(self.entity(s), self.relation(r), cand)

    def score_subjects(self, r: int, o: int, candidate_rows: np.ndarray) -> np.ndarray:
        cand = self.ent_re[candidate_rows] + 1j * self.ent_im[candidate_rows]
        return score_all_subjects(self.relation(r), self.entity(o), cand)

    def prob_object(self, s: int, r: int, candidate_rows: np.ndarray) -> np.ndarray:
        return softmax(self.score_objects(s, r, candidate_rows))

    def prob_subject(self, r: int, o: int, candidate_rows: np.ndarray) -> np.ndarray:
        return softmax(self.score_subjects(r, o, candidate_rows))

    def params(self) -> dict[str, np.ndarray]:
        return {"ent_re": self.ent_re, "ent_im": self.ent_im, "rel_re": self.rel_re, "rel_im": self.rel_im}

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params().values()) and np.isfinite([self.w, self.c]).all()

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(
            self.ent_re.copy(), self.ent_im.copy(), self.rel_re.copy(), self.rel_im.copy(),
            self.entity_row.copy(), self.relation_row.copy(), self.w, self.c,
        )


def init_embeddings(
    n_entities: int,
    n_relations: int,
    dim: int,
    seed,
    entity_row: np.ndarray | None = None,
    relation_row: np.ndarray | None = None,
    std: float = INIT_STD,
) -> EmbeddingTable:
    """Gaussian ``N(0, std)`` table; one row per id unless row maps are given."""
    if dim < 1:
        raise KGError(f"embedding dimension must be >= 1, got {dim}")
    if entity_row is None:
        entity_row = np.arange(n_entities, dtype=np.int64)
    if relation_row is None:
        relation_row = np.arange(n_relations, dtype=np.int64)
    n_erows = int(entity_row.max()) + 1 if len(entity_row) else 0
    n_rrows = int(relation_row.max()) + 1 if len(relation_row) else 0
    rng = np.random.default_rng(seed)
    return EmbeddingTable(
        ent_re=rng.normal(0.0, std, (n_erows, dim)),
        ent_im=rng.normal(0.0, std, (n_erows, dim)),
        rel_re=rng.normal(0.0, std, (n_rrows, dim)),
        rel_im=rng.normal(0.0, std, (n_rrows, dim)),
        entity_row=np.asarray(entity_row, dtype=np.int64),
        relation_row=np.asarray(relation_row, dtype=np.int64),
    )


def dense_rows(reps: np.ndarray, keep: np.ndarray | None = None) -> np.ndarray:
    """Map class representatives to dense row indices; ids outside ``keep`` get -1."""
    reps = np.asarray(reps, dtype=np.int64)
    out = np.full(len(reps), -1, dtype=np.int64)
    mask = np.ones(len(reps), bool) if keep is None else np.zeros(len(reps), bool)
    if keep is not None:
        mask[keep] = True
    uniq = np.unique(reps[mask])
    out[mask] = np.searchsorted(uniq, reps[mask])
    return out


def merge_tables(tables: list[EmbeddingTable]) -> EmbeddingTable:
    """Stack tables covering disjoint id sets into one table."""
    n_e, n_r = len(tables[0].entity_row), len(tables[0].relation_row)
    erow = np.full(n_e, -1, np.int64)
    rrow = np.full(n_r, -1, np.int64)
    eoff = roff = 0
    for t in tables:
        for dst, src, off in ((erow, t.entity_row, eoff), (rrow, t.relation_row, roff)):
            covered = src >= 0
            if np.any(dst[covered] >= 0):
                raise KGError("merged tables overlap")
            dst[covered] = src[covered] + off
        eoff += t.ent_re.shape[0]
        roff += t.rel_re.shape[0]
    cat = lambda name: np.concatenate([getattr(t, name) for t in tables])
    return EmbeddingTable(cat("ent_re"), cat("ent_im"), cat("rel_re"), cat("rel_im"), erow, rrow,
                          tables[0].w, tables[0].c)


# Checkpoint layout, all little-endian:
#   magic  8s  b"MKGCCKPT"
#   version u32
#   N_e u64, N_r u64, d u64, rows_e u64, rows_r u64
#   entity_row i64[N_e], relation_row i64[N_r]
#   ent_re f64[rows_e*d], ent_im, rel_re f64[rows_r*d], rel_im   (row-major)
#   w f64, c f64
MAGIC = b"MKGCCKPT"
VERSION = 1
_HEADER = struct.Struct("<8sIQQQQQ")


def save_checkpoint(path: str | Path, table: EmbeddingTable, meta: dict | None = None) -> None:
    path = Path(path)
    d = table.dim
    header = _HEADER.pack(
        MAGIC, VERSION, len(table.entity_row), len(table.relation_row), d,
        table.ent_re.shape[0], table.rel_re.shape[0],
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(table.entity_row.astype("<i8").tobytes())
        fh.write(table.relation_row.astype("<i8").tobytes())
        for arr in (table.ent_re, table.ent_im, table.rel_re, table.rel_im):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        fh.write(struct.pack("<dd", table.w, table.c))
    if meta is not None:
        write_keyvalue(meta_path(path), meta)


def meta_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta")


def load_checkpoint(path: str | Path) -> tuple[EmbeddingTable, dict[str, str]]:
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < _HEADER.size:
        raise KGError(f"{path}: truncated checkpoint")
    magic, version, n_e, n_r, d, rows_e, rows_r = _HEADER.unpack_from(buf)
    if magic != MAGIC or version != VERSION:
        raise KGError(f"{path}: not a version-{VERSION} checkpoint")
    expected = _HEADER.size + 8 * (n_e + n_r + 2 * d * (rows_e + rows_r) + 2)
    if len(buf) != expected:
        raise KGError(f"{path}: size {len(buf)} does not match header ({expected})")
    pos = _HEADER.size

    def take(count, dtype, shape=None):
        nonlocal pos
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).astype(dtype[1:])
        pos += 8 * count
        return arr.reshape(shape) if shape else arr

    erow = take(n_e, "<i8")
    rrow = take(n_r, "<i8")
    ent_re = take(rows_e * d, "<f8", (rows_e, d))
    ent_im = take(rows_e * d, "<f8", (rows_e, d))
    rel_re = take(rows_r * d, "<f8", (rows_r, d))
    rel_im = take(rows_r * d, "<f8", (rows_r, d))
    w, c = struct.unpack_from("<dd", buf, pos)
    meta = read_keyvalue(meta_path(path)) if meta_path(path).exists() else {}
    return EmbeddingTable(ent_re, ent_im, rel_re, rel_im, erow, rrow, w, c), meta
