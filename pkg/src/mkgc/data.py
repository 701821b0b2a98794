"""Dataset files, fold splitting, relation uniquification and a synthetic generator.

Layout of a dataset directory (UTF-8, tab separated, no header)::

    <root>/<lang>/{train,dev,test}.tsv        subject  relation  object
    <root>/align/entity_<la>-<lb>.tsv         entity_la  entity_lb
    <root>/align/relation_<la>-<lb>.tsv       relation_la  relation_lb   (optional)
    <root>/manifest.txt                       key=value                  (optional)

When no relation alignment files are present the relation strings are taken
to be one vocabulary shared by all languages (as in DBpedia slices) and are
uniquified per language on load.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .kg import FOLDS, SHARED, KGError, LoadError, MultiKG, Vocab, build_vocab

logger = logging.getLogger(__name__)

MANIFEST = "manifest.txt"


def read_keyvalue(path: str | Path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise LoadError(f"{path}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_keyvalue(path: str | Path, values: dict) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in values.items()), encoding="utf-8")


def read_rows(path: Path, width: int) -> list[tuple[str, ...]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != width:
                raise LoadError(f"{path}:{n}: expected {width} tab-separated fields, got {len(parts)}")
            rows.append(tuple(parts))
    return rows


def write_rows(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write("\t".join(row) + "\n")


@dataclass
class DatasetLayout:
    root: Path
    languages: list[str]
    entity_alignments: dict[tuple[str, str], Path]
    relation_alignments: dict[tuple[str, str], Path]

    def triple_file(self, lang: str, fold: str) -> Path:
        return self.root / lang / f"{fold}.tsv"

    @property
    def manifest(self) -> dict[str, str]:
        p = self.root / MANIFEST
        return read_keyvalue(p) if p.exists() else {}

    def files(self) -> list[Path]:
        out = [self.triple_file(l, f) for l in self.languages for f in FOLDS]
        out += [self.entity_alignments[k] for k in sorted(self.entity_alignments)]
        out += [self.relation_alignments[k] for k in sorted(self.relation_alignments)]
        return out

    @classmethod
    def discover(cls, root: str | Path) -> "DatasetLayout":
        root = Path(root)
        if not root.is_dir():
            raise LoadError(f"dataset directory {root} does not exist")
        manifest = read_keyvalue(root / MANIFEST) if (root / MANIFEST).exists() else {}
        if "languages" in manifest:
            langs = [l for l in manifest["languages"].split(",") if l]
        else:
            langs = sorted(p.name for p in root.iterdir() if (p / "train.tsv").exists())
        if not langs:
            raise LoadError(f"no language folders with train.tsv under {root}")
        for lang in langs:
            for fold in FOLDS:
                if not (root / lang / f"{fold}.tsv").exists():
                    raise LoadError(f"missing file {root / lang / f'{fold}.tsv'}")

        def scan(prefix):
            found = {}
            adir = root / "align"
            if adir.is_dir():
                for p in sorted(adir.glob(f"{prefix}_*.tsv")):
                    pair = p.stem[len(prefix) + 1:].split("-")
                    if len(pair) != 2 or pair[0] not in langs or pair[1] not in langs:
                        raise LoadError(f"alignment file {p} does not name two known languages")
                    found[(pair[0], pair[1])] = p
            return found

        return cls(root, langs, scan("entity"), scan("relation"))


def split_revealed(n: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask choosing ``round(fraction * n)`` revealed items uniformly."""
    mask = np.zeros(n, bool)
    k = int(round(fraction * n))
    mask[rng.permutation(n)[:k]] = True
    return mask


def load_dataset(
    root: str | Path,
    reveal_fraction: float | None = None,
    split_seed: int | None = None,
    uniquify: bool = True,
) -> MultiKG:
    """Read a dataset directory and reveal a random part of the entity alignments.

    The revealed fraction and the seed default to the manifest's
    ``seed_align_fraction`` / ``split_seed`` entries, else 0.5 and 0.
    """
    layout = root if isinstance(root, DatasetLayout) else DatasetLayout.discover(root)
    manifest = layout.manifest
    if reveal_fraction is None:
        reveal_fraction = float(manifest.get("seed_align_fraction", 0.5))
    if split_seed is None:
        split_seed = int(manifest.get("split_seed", 0))
    if not 0.0 <= reveal_fraction <= 1.0:
        raise LoadError(f"reveal fraction {reveal_fraction} outside [0, 1]")

    raw = {
        lang: {fold: read_rows(layout.triple_file(lang, fold), 3) for fold in FOLDS}
        for lang in layout.languages
    }
    shared = not layout.relation_alignments

    def pairs_of(files):
        out, spans = [], []
        for (la, lb), path in sorted(files.items()):
            rows = read_rows(path, 2)
            start = len(out)
            for n, (a, b) in enumerate(rows, 1):
                out.append((la, a, lb, b, f"{path}:{n}"))
            spans.append((start, len(out)))
        return out, spans

    ent_rows, spans = pairs_of(layout.entity_alignments)
    rel_rows, _ = pairs_of(layout.relation_alignments)

    kg = build_vocab(raw, shared_relations=shared)
    for la, a, lb, b, where in ent_rows:
        if kg.entities.get(la, a) is None or kg.entities.get(lb, b) is None:
            raise LoadError(f"{where}: entity alignment ({a}, {b}) names an unknown entity")
    for la, a, lb, b, where in rel_rows:
        if kg.relations.get(la, a) is None or kg.relations.get(lb, b) is None:
            raise LoadError(f"{where}: relation alignment ({a}, {b}) names an unknown relation")

    gold = np.array(
        [(kg.entities.get(la, a), kg.entities.get(lb, b)) for la, a, lb, b, _ in ent_rows], dtype=np.int64
    ).reshape(-1, 2)
    rng = np.random.default_rng(split_seed)
    mask = np.zeros(len(gold), bool)
    for start, stop in spans:
        mask[start:stop] = split_revealed(stop - start, reveal_fraction, rng)
    kg.entity_gold, kg.revealed_mask = gold, mask
    kg.relation_gold = np.array(
        [(kg.relations.get(la, a), kg.relations.get(lb, b)) for la, a, lb, b, _ in rel_rows], dtype=np.int64
    ).reshape(-1, 2)
    if shared and uniquify:
        kg = uniquify_relations(kg)
    return kg


def uniquify_relations(kg: MultiKG) -> MultiKG:
    """Give each (language, relation) its own id; gold pairs link ids sharing a name.

    Ids are assigned language by language in ``kg.languages`` order.
    """
    relations = Vocab()
    remap: dict[str, np.ndarray] = {}
    for lang in kg.languages:
        table = np.full(len(kg.relations), -1, dtype=np.int64)
        for rid in kg.relations_of(lang):
            rid = int(rid)
            src_lang = kg.relations.langs[rid]
            if src_lang not in (SHARED, lang):
                raise KGError(f"relation {kg.relations.label(rid)} used outside its language {lang}")
            table[rid] = relations.add(lang, kg.relations.names[rid])
        remap[lang] = table

    folds = {}
    for lang in kg.languages:
        folds[lang] = {}
        for fold in FOLDS:
            t = kg.folds[lang][fold].copy()
            if len(t):
                t[:, 1] = remap[lang][t[:, 1]]
            folds[lang][fold] = t

    by_name: dict[str, list[int]] = {}
    for rid, name in enumerate(relations.names):
        by_name.setdefault(name, []).append(rid)
    gold = [pair for ids in by_name.values() for pair in itertools.combinations(ids, 2)]
    return MultiKG(
        languages=list(kg.languages),
        entities=kg.entities,
        relations=relations,
        folds=folds,
        entity_gold=kg.entity_gold,
        revealed_mask=kg.revealed_mask,
        relation_gold=np.array(gold, dtype=np.int64).reshape(-1, 2),
    )


def write_dataset(kg: MultiKG, root: str | Path, manifest: dict | None = None) -> DatasetLayout:
    """Write ``kg`` in the directory layout above; relation alignments are always written."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ent, rel = kg.entities, kg.relations
    for lang in kg.languages:
        for fold in FOLDS:
            t = kg.folds[lang][fold]
            write_rows(root / lang / f"{fold}.tsv", ((ent.names[s], rel.names[r], ent.names[o]) for s, r, o in t))

    def grouped(pairs, vocab, prefix):
        out: dict[tuple[str, str], list] = {}
        for a, b in pairs:
            key = (vocab.langs[a], vocab.langs[b])
            out.setdefault(key, []).append((vocab.names[a], vocab.names[b]))
        for (la, lb), rows in out.items():
            write_rows(root / "align" / f"{prefix}_{la}-{lb}.tsv", rows)

    grouped(kg.entity_gold, ent, "entity")
    grouped(kg.relation_gold, rel, "relation")
    meta = {"languages": ",".join(kg.languages)}
    meta.update(manifest or {})
    write_keyvalue(root / MANIFEST, meta)
    return DatasetLayout.discover(root)


def split_folds(n: int, rng: np.random.Generator, ratios=(0.6, 0.3, 0.1)) -> list[np.ndarray]:
    perm = rng.permutation(n)
    n_train = int(round(ratios[0] * n))
    n_dev = int(round(ratios[1] * n))
    return [perm[:n_train], perm[n_train:n_train + n_dev], perm[n_train + n_dev:]]


@dataclass
class SyntheticSpec:
    n_entities: int = 200
    n_relations: int = 20
    n_triples: int = 2000
    fact_drop_fraction: float = 0.3
    seed_align_fraction: float = 0.5
    seed: int = 7
    n_languages: int = 2
    n_clusters: int = 10
    subject_clusters: int = 2

    def validate(self) -> None:
        if not 0.0 <= self.fact_drop_fraction < 1.0:
            raise KGError(f"fact_drop_fraction {self.fact_drop_fraction} outside [0, 1)")
        if not 0.0 < self.seed_align_fraction <= 1.0:
            raise KGError(f"seed_align_fraction {self.seed_align_fraction} outside (0, 1]")
        if min(self.n_entities, self.n_relations, self.n_languages, self.n_clusters) < 1:
            raise KGError("entity, relation, language and cluster counts must be positive")
        if self.n_triples < 0 or self.n_triples > self.n_entities ** 2 * self.n_relations:
            raise KGError(
                f"infeasible spec: {self.n_triples} triples > "
                f"{self.n_entities}^2 * {self.n_relations} possible facts"
            )

    @classmethod
    def from_dict(cls, values: dict[str, str]) -> "SyntheticSpec":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for k, v in values.items():
            if k not in known:
                raise KGError(f"unknown synthetic spec key {k!r}")
            kwargs[k] = float(v) if k.endswith("fraction") else int(v)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "SyntheticSpec":
        return cls.from_dict(read_keyvalue(path))


def _base_facts(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Sample the base KG.

    Entities fall into clusters.  Each relation has a few subject clusters and
    maps every subject cluster to one object cluster, so a relation's facts
    come from relation-specific subject and object pools.  Relation
    frequencies are mildly skewed.
    """
    ne, nr, k = spec.n_entities, spec.n_relations, min(spec.n_clusters, spec.n_entities)
    cluster = rng.permutation(np.arange(ne) % k)
    members = [np.flatnonzero(cluster == c) for c in range(k)]
    weights = 1.0 / np.sqrt(np.arange(1, nr + 1))
    weights = weights[rng.permutation(nr)]

    cand, cand_w = [], []
    for r in range(nr):
        subj_clusters = rng.choice(k, size=min(spec.subject_clusters, k), replace=False)
        rows = []
        for sc in subj_clusters:
            oc = rng.integers(k)
            s, o = np.meshgrid(members[sc], members[oc], indexing="ij")
            rows.append(np.stack([s.ravel(), np.full(s.size, r), o.ravel()], axis=1))
        rows = np.concatenate(rows)
        cand.append(rows)
        cand_w.append(np.full(len(rows), weights[r] / len(rows)))
    cand = np.concatenate(cand)
    cand_w = np.concatenate(cand_w)

    take = min(spec.n_triples, len(cand))
    chosen = cand[rng.choice(len(cand), size=take, replace=False, p=cand_w / cand_w.sum())]
    if take == spec.n_triples:
        return chosen
    # pools are too small for the requested size: fill with unconstrained facts
    known = {tuple(t) for t in chosen.tolist()}
    extra = []
    while len(known) < spec.n_triples:
        t = (int(rng.integers(ne)), int(rng.integers(nr)), int(rng.integers(ne)))
        if t not in known:
            known.add(t)
            extra.append(t)
    return np.concatenate([chosen, np.array(extra, dtype=np.int64).reshape(-1, 3)])


def generate_synthetic(spec: SyntheticSpec, out: str | Path) -> DatasetLayout:
    """Write a synthetic multilingual dataset: a base KG plus renamed, thinned clones."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    base = _base_facts(spec, rng)
    langs = [f"L{i}" for i in range(spec.n_languages)]

    facts, ent_names, rel_names = {}, {}, {}
    for li, lang in enumerate(langs):
        if li == 0:
            keep = np.ones(len(base), bool)
        else:
            keep = rng.random(len(base)) >= spec.fact_drop_fraction
        facts[lang] = base[keep]
        eperm = rng.permutation(spec.n_entities)
        rperm = rng.permutation(spec.n_relations)
        ent_names[lang] = [f"{lang}_e{eperm[i]:05d}" for i in range(spec.n_entities)]
        rel_names[lang] = [f"{lang}_r{rperm[i]:04d}" for i in range(spec.n_relations)]

    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    for lang in langs:
        t = facts[lang]
        en, rn = ent_names[lang], rel_names[lang]
        for fold, idx in zip(FOLDS, split_folds(len(t), rng)):
            write_rows(root / lang / f"{fold}.tsv", ((en[s], rn[r], en[o]) for s, r, o in t[idx]))

    present = {lang: set(facts[lang][:, [0, 2]].ravel().tolist()) for lang in langs}
    used_rel = {lang: set(facts[lang][:, 1].tolist()) for lang in langs}
    for la, lb in itertools.combinations(langs, 2):
        ents = sorted(present[la] & present[lb])
        write_rows(root / "align" / f"entity_{la}-{lb}.tsv", ((ent_names[la][e], ent_names[lb][e]) for e in ents))
        rels = sorted(used_rel[la] & used_rel[lb])
        write_rows(root / "align" / f"relation_{la}-{lb}.tsv", ((rel_names[la][r], rel_names[lb][r]) for r in rels))

    meta = {"languages": ",".join(langs), "generator": "mkgc.synthetic", "split_seed": spec.seed}
    meta.update({k: v for k, v in asdict(spec).items()})
    write_keyvalue(root / MANIFEST, meta)
    logger.info("wrote synthetic dataset to %s (%d base facts)", root, len(base))
    return DatasetLayout.discover(root)


def expected_clone_size(n: int, drop: float) -> tuple[float, float]:
    """Mean and standard deviation of a clone's fact count."""
    return n * (1 - drop), math.sqrt(n * drop * (1 - drop))
