"""Joint KGC / relation-alignment objective and the training loop.

Per batch the objective is ``L_kgc + alpha * L_reg + beta * L_ra``:

* ``L_kgc``  both-direction negative log-likelihood under a full softmax over
  the query language's candidate entities (1-N scoring)
* ``L_reg``  squared magnitude of the embedding rows the batch touches
* ``L_ra``   belief-weighted L1 distance (or BCE against the sigmoid cosine)
  between relation embeddings of pairs passing the relation test

Seed-aligned entities share one embedding row.  ``(w, c)`` of the soft
overlap are trained only from ``curriculum_freeze_epochs`` on.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import read_keyvalue
from .embedding import EmbeddingTable, dense_rows, init_embeddings, log_softmax
from .kg import ConfigError, KGError, MultiKG, collapse_union, relation_renames_from_pairs
from .signatures import BeliefTable, SignatureIndex, refresh_beliefs, sigmoid

logger = logging.getLogger(__name__)

TRAIN_VARIANTS = ("one", "union", "jaccard", "asymmetric", "softAsymmetric")
RA_FORMS = ("l1", "bceCosine")
MIN_W = 1e-6


class NumericalError(KGError):
    pass


@dataclass
class TrainConfig:
    # frozen after a dev-MRR grid on the default synthetic dataset
    dim: int = 50
    lr: float = 0.5
    overlap_lr: float = 0.05
    batch_size: int = 512
    epochs: int = 100
    alpha: float = 0.3
    beta: float = 10.0
    variant: str = "softAsymmetric"
    ra_loss: str = "l1"
    curriculum_freeze_epochs: int = 5
    tau: float = 0.02
    max_pairs: int = 512
    seed: int = 0
    union_rename_relations: bool = False

    def validate(self) -> "TrainConfig":
        if self.variant not in TRAIN_VARIANTS:
            raise ConfigError(f"variant must be one of {TRAIN_VARIANTS}, got {self.variant!r}")
        if self.ra_loss not in RA_FORMS:
            raise ConfigError(f"ra_loss must be one of {RA_FORMS}, got {self.ra_loss!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.dim < 1:
            raise ConfigError("epochs, batch_size and dim must be >= 1")
        if self.lr <= 0 or self.overlap_lr < 0:
            raise ConfigError("learning rates must be positive")
        return self

    def updated(self, values: dict[str, str]) -> "TrainConfig":
        types = {f.name: f.type for f in fields(self)}
        current = asdict(self)
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kind = type(current[key])
            try:
                if kind is bool:
                    if raw.lower() not in ("1", "0", "true", "false", "yes", "no"):
                        raise ValueError(raw)
                    current[key] = raw.lower() in ("1", "true", "yes")
                else:
                    current[key] = kind(raw)
            except ValueError:
                raise ConfigError(f"bad value {raw!r} for {key}") from None
        return TrainConfig(**current).validate()

    @classmethod
    def from_file(cls, path: str | Path | None, overrides: dict[str, str] | None = None) -> "TrainConfig":
        values = read_keyvalue(path) if path else {}
        values.update(overrides or {})
        return cls().updated(values)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    epoch: int
    kgc: float
    reg: float
    ra: float
    total: float


class Grads:
    """Gradient buffers shaped like an :class:`EmbeddingTable`'s parameters."""

    def __init__(self, table: EmbeddingTable):
        self.ent = np.zeros(table.ent_re.shape, dtype=np.complex128)
        self.rel = np.zeros(table.rel_re.shape, dtype=np.complex128)
        self.w = 0.0
        self.c = 0.0

    def as_params(self) -> dict[str, np.ndarray]:
        return {
            "ent_re": self.ent.real, "ent_im": self.ent.imag,
            "rel_re": self.rel.real, "rel_im": self.rel.imag,
        }


def kgc_loss(table: EmbeddingTable, batch: np.ndarray, candidates: np.ndarray, grads: Grads | None = None) -> float:
    """Summed ``-log P(o|s,r) - log P(s|o,r)`` for row-space triples ``batch``.

    ``candidates`` is the sorted array of entity rows competing in both
    softmaxes; every subject and object of the batch must be among them.
    """
    ent = table.entities
    rel = table.relations
    cand = ent[candidates]
    s, r, o = ent[batch[:, 0]], rel[batch[:, 1]], ent[batch[:, 2]]
    pos_s = np.searchsorted(candidates, batch[:, 0])
    pos_o = np.searchsorted(candidates, batch[:, 2])
    if np.any(candidates[np.minimum(pos_o, len(candidates) - 1)] != batch[:, 2]) or np.any(
        candidates[np.minimum(pos_s, len(candidates) - 1)] != batch[:, 0]
    ):
        raise KGError("gold entity missing from candidate set")
    rows = np.arange(len(batch))

    sr = s * r
    logp_t = log_softmax(np.real(sr @ np.conj(cand).T))
    q = r * np.conj(o)
    logp_h = log_softmax(np.real(q @ cand.T))
    loss = -float(np.sum(logp_t[rows, pos_o]) + np.sum(logp_h[rows, pos_s]))

    if grads is not None:
        err_t = np.exp(logp_t)
        err_t[rows, pos_o] -= 1.0
        err_h = np.exp(logp_h)
        err_h[rows, pos_s] -= 1.0
        grads.ent[candidates] += err_t.T @ sr + err_h.T @ np.conj(q)
        mix_t = err_t @ cand
        np.add.at(grads.ent, batch[:, 0], np.conj(r) * mix_t)
        np.add.at(grads.rel, batch[:, 1], np.conj(s) * mix_t + o * (err_h @ np.conj(cand)))
        np.add.at(grads.ent, batch[:, 2], r * (err_h @ cand))
    return loss


def regularizer(table: EmbeddingTable, batch: np.ndarray, grads: Grads | None = None, scale: float = 1.0) -> float:
    """Sum of squared magnitudes of the distinct rows ``batch`` touches."""
    erows = np.unique(batch[:, [0, 2]])
    rrows = np.unique(batch[:, 1])
    e = table.ent_re[erows] + 1j * table.ent_im[erows]
    rv = table.rel_re[rrows] + 1j * table.rel_im[rrows]
    loss = float(np.sum(np.abs(e) ** 2) + np.sum(np.abs(rv) ** 2))
    if grads is not None:
        grads.ent[erows] += scale * 2.0 * e
        grads.rel[rrows] += scale * 2.0 * rv
    return loss


def _ra_pairs(table: EmbeddingTable, beliefs: BeliefTable):
    idx = np.flatnonzero(beliefs.selected)
    if len(idx) == 0:
        return idx, idx, idx
    a = table.relation_row[beliefs.r1[idx]]
    b = table.relation_row[beliefs.r2[idx]]
    keep = (a >= 0) & (b >= 0) & (a != b)
    return idx[keep], a[keep], b[keep]


def ra_loss_l1(table: EmbeddingTable, beliefs: BeliefTable, grads: Grads | None = None, scale: float = 1.0) -> float:
    """``sum b_equiv * ||r1 - r2||_1`` over selected pairs (real and imaginary parts)."""
    idx, a, b = _ra_pairs(table, beliefs)
    if len(idx) == 0:
        return 0.0
    belief, db_dw, db_dc = beliefs.equiv_terms(idx, table.w, table.c)
    diff = table.relations[a] - table.relations[b]
    dist = np.sum(np.abs(diff.real), axis=1) + np.sum(np.abs(diff.imag), axis=1)
    if grads is not None:
        g = belief[:, None] * (np.sign(diff.real) + 1j * np.sign(diff.imag))
        np.add.at(grads.rel, a, scale * g)
        np.add.at(grads.rel, b, -scale * g)
        grads.w += scale * float(np.sum(dist * db_dw))
        grads.c += scale * float(np.sum(dist * db_dc))
    return float(np.sum(belief * dist))


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def ra_loss_bce(table: EmbeddingTable, beliefs: BeliefTable, grads: Grads | None = None, scale: float = 1.0) -> float:
    """``sum BCE(b_equiv, sigmoid(cos(r1, r2)))`` over selected pairs."""
    idx, a, b = _ra_pairs(table, beliefs)
    if len(idx) == 0:
        return 0.0
    belief, db_dw, db_dc = beliefs.equiv_terms(idx, table.w, table.c)
    u = np.concatenate([table.rel_re[a], table.rel_im[a]], axis=1)
    v = np.concatenate([table.rel_re[b], table.rel_im[b]], axis=1)
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    ok = (nu > 0) & (nv > 0)
    cos = np.zeros(len(idx))
    cos[ok] = np.sum(u[ok] * v[ok], axis=1) / (nu[ok] * nv[ok])
    loss = -(belief * _log_sigmoid(cos) + (1.0 - belief) * _log_sigmoid(-cos))
    if grads is not None:
        dcos = sigmoid(cos) - belief
        gu = np.zeros_like(u)
        gv = np.zeros_like(v)
        gu[ok] = v[ok] / (nu[ok] * nv[ok])[:, None] - cos[ok, None] * u[ok] / (nu[ok] ** 2)[:, None]
        gv[ok] = u[ok] / (nu[ok] * nv[ok])[:, None] - cos[ok, None] * v[ok] / (nv[ok] ** 2)[:, None]
        gu *= dcos[:, None]
        gv *= dcos[:, None]
        d = table.dim
        np.add.at(grads.rel, a, scale * (gu[:, :d] + 1j * gu[:, d:]))
        np.add.at(grads.rel, b, scale * (gv[:, :d] + 1j * gv[:, d:]))
        # d BCE / d b = log(1 - p) - log(p) = -cos
        grads.w += scale * float(np.sum(-cos * db_dw))
        grads.c += scale * float(np.sum(-cos * db_dc))
    return float(np.sum(loss))


RA_LOSSES = {"l1": ra_loss_l1, "bceCosine": ra_loss_bce}


class Adagrad:
    """Per-element accumulated-squared-gradient steps."""

    def __init__(self, lr: float, eps: float = 1e-10):
        self.lr = lr
        self.eps = eps
        self.sums: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            acc = self.sums.get(name)
            if acc is None:
                acc = self.sums[name] = np.zeros_like(params[name])
            acc += g * g
            params[name] -= self.lr * g / (np.sqrt(acc) + self.eps)


@dataclass
class TrainingRun:
    """State of one model being trained: rows, data, optimizer and beliefs."""

    kg: MultiKG
    config: TrainConfig
    table: EmbeddingTable
    train: np.ndarray  # row-space triples
    train_lang: np.ndarray
    candidates: dict[int, np.ndarray]
    index: SignatureIndex | None = None
    beliefs: BeliefTable | None = None
    language: str | None = None
    history: list[LossBreakdown] = field(default_factory=list)
    optimizer: Adagrad = None
    overlap_optimizer: Adagrad = None

    def __post_init__(self):
        self.optimizer = Adagrad(self.config.lr)
        self.overlap_optimizer = Adagrad(self.config.overlap_lr)

    @property
    def uses_beliefs(self) -> bool:
        return self.config.variant in ("jaccard", "asymmetric", "softAsymmetric")


def candidate_rows(kg: MultiKG, entity_row: np.ndarray, lang: str) -> np.ndarray:
    rows = entity_row[kg.entities_of(lang)]
    return np.unique(rows[rows >= 0])


def prepare_run(kg: MultiKG, config: TrainConfig, language: str | None = None) -> TrainingRun:
    """Set up a run: one language in isolation, or all languages with shared seed-aligned rows."""
    config.validate()
    n_ent, n_rel = len(kg.entities), len(kg.relations)
    if language is not None:
        li = kg.languages.index(language)
        entity_row = dense_rows(np.arange(n_ent), kg.entities_of(language))
        relation_row = dense_rows(np.arange(n_rel), kg.relations_of(language))
        t = kg.triples(language, "train")
        train = np.stack([entity_row[t[:, 0]], relation_row[t[:, 1]], entity_row[t[:, 2]]], axis=1).reshape(-1, 3)
        train_lang = np.full(len(train), li, dtype=np.int64)
        seed = [config.seed, li + 1]
        index = None
    else:
        eq = kg.revealed_classes()
        reps = eq.representatives()
        renames = None
        if config.variant == "union" and config.union_rename_relations:
            renames = relation_renames_from_pairs(n_rel, kg.relation_gold)
        collapsed, train_lang = collapse_union(kg, eq, renames)
        rel_reps = np.arange(n_rel)
        for src, dst in (renames or {}).items():
            rel_reps[src] = dst
        entity_row = dense_rows(reps)
        relation_row = dense_rows(rel_reps)
        train = np.stack(
            [entity_row[collapsed[:, 0]], relation_row[collapsed[:, 1]], entity_row[collapsed[:, 2]]], axis=1
        ).reshape(-1, 3)
        seed = [config.seed, 0]
        index = SignatureIndex(kg, reps) if config.variant in ("jaccard", "asymmetric", "softAsymmetric") else None
    table = init_embeddings(n_ent, n_rel, config.dim, seed, entity_row, relation_row)
    langs = [language] if language is not None else kg.languages
    candidates = {kg.languages.index(l): candidate_rows(kg, entity_row, l) for l in langs}
    return TrainingRun(kg, config, table, train, train_lang, candidates, index=index, language=language)


def refresh(run: TrainingRun, epoch: int) -> BeliefTable | None:
    cfg = run.config
    if not run.uses_beliefs:
        return None
    if cfg.variant != "softAsymmetric" and run.beliefs is not None:
        run.beliefs.epoch = epoch
        return run.beliefs
    rng = np.random.default_rng([cfg.seed, 2, epoch])
    run.beliefs = refresh_beliefs(
        run.index, cfg.variant, run.table, threshold=cfg.tau, max_pairs=cfg.max_pairs, rng=rng, epoch=epoch
    )
    return run.beliefs


def batch_objective(run: TrainingRun, batch_idx: np.ndarray, grads: Grads | None) -> tuple[float, float, float]:
    """Loss components of one batch, accumulating scaled gradients into ``grads``."""
    cfg = run.config
    batch = run.train[batch_idx]
    langs = run.train_lang[batch_idx]
    kgc = 0.0
    for li in np.unique(langs):
        kgc += kgc_loss(run.table, batch[langs == li], run.candidates[int(li)], grads)
    reg = regularizer(run.table, batch, grads, scale=cfg.alpha)
    ra = 0.0
    if run.beliefs is not None:
        ra = RA_LOSSES[cfg.ra_loss](run.table, run.beliefs, grads, scale=cfg.beta)
    return kgc, reg, ra


def train_epoch(run: TrainingRun, epoch: int) -> LossBreakdown:
    cfg = run.config
    table = run.table
    refresh(run, epoch)
    train_overlap = cfg.variant == "softAsymmetric" and epoch >= cfg.curriculum_freeze_epochs
    order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(len(run.train))
    totals = np.zeros(3)
    for b, start in enumerate(range(0, len(order), cfg.batch_size)):
        grads = Grads(table)
        parts = batch_objective(run, order[start:start + cfg.batch_size], grads)
        total = parts[0] + cfg.alpha * parts[1] + cfg.beta * parts[2]
        if not np.isfinite(total):
            raise NumericalError(f"non-finite loss in epoch {epoch}, batch {b} (kgc={parts[0]}, ra={parts[2]})")
        totals += parts
        run.optimizer.step(table.params(), grads.as_params())
        if train_overlap:
            wc = {"w": np.array([table.w]), "c": np.array([table.c])}
            run.overlap_optimizer.step(wc, {"w": np.array([grads.w]), "c": np.array([grads.c])})
            table.w = max(float(wc["w"][0]), MIN_W)
            table.c = float(wc["c"][0])
    if not table.all_finite():
        raise NumericalError(f"non-finite embeddings after epoch {epoch}")
    if run.beliefs is not None:
        run.beliefs.recompute(table.w, table.c)
    kgc, reg, ra = totals.tolist()
    out = LossBreakdown(epoch, kgc, reg, ra, kgc + cfg.alpha * reg + cfg.beta * ra)
    run.history.append(out)
    return out


@dataclass
class TrainResult:
    config: TrainConfig
    runs: list[TrainingRun]

    @property
    def table(self) -> EmbeddingTable:
        from .embedding import merge_tables

        if len(self.runs) == 1:
            return self.runs[0].table
        return merge_tables([r.table for r in self.runs])

    @property
    def beliefs(self) -> BeliefTable | None:
        return self.runs[0].beliefs if len(self.runs) == 1 else None

    def history(self) -> list[LossBreakdown]:
        """Per-epoch losses, summed over the independent runs of ``one``."""
        out = []
        for rows in zip(*(r.history for r in self.runs)):
            out.append(LossBreakdown(
                rows[0].epoch,
                sum(x.kgc for x in rows), sum(x.reg for x in rows), sum(x.ra for x in rows),
                sum(x.total for x in rows),
            ))
        return out


def train(kg: MultiKG, config: TrainConfig, on_epoch=None) -> TrainResult:
    """Train ``config.variant``; ``one`` trains every language independently."""
    config.validate()
    if config.variant == "one":
        runs = [prepare_run(kg, config, language=lang) for lang in kg.languages]
    else:
        runs = [prepare_run(kg, config)]
    for run in runs:
        for epoch in range(config.epochs):
            loss = train_epoch(run, epoch)
            logger.debug("%s epoch %d: %s", run.language or config.variant, epoch, loss)
            if on_epoch is not None:
                on_epoch(run, loss)
    return TrainResult(config, runs)
