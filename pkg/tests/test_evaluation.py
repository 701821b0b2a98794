import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mkgc.data import SyntheticSpec, generate_synthetic, load_dataset
from mkgc.embedding import as_real, dense_rows, init_embeddings
from mkgc.evaluation import (
    EvalReport,
    cosine_rank,
    eval_ea,
    eval_kgc,
    eval_ra,
    filtered_rank,
    known_facts,
    metrics,
    rank_triples,
    split_seen_unseen,
)
from mkgc.kg import KGError, build_vocab

from conftest import MANY

scores_st = arrays(np.float64, st.integers(1, 12), elements=st.sampled_from([-2.0, -1.0, 0.0, 0.5, 1.0, 3.0]))


def oracle_rank(scores, gold, filtered=()):
    """Sort all candidates by descending score; equal scores put the gold last."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i == gold))
    kept = [i for i in order if i == gold or i not in set(filtered)]
    return kept.index(gold) + 1


def oracle_cosine_rank(q, cands, gold, exclude=()):
    cos = [float(q @ c / (np.linalg.norm(q) * np.linalg.norm(c))) for c in cands]
    return oracle_rank(cos, gold, exclude)


class TestFilteredRank:
    def test_examples(self):
        assert filtered_rank(np.array([5.0, 1.0, 2.0]), 0) == 1
        scores = np.array([3.0, 5.0, 4.0, 1.0])  # gold 0 has raw rank 3
        assert filtered_rank(scores, 0) == 3
        assert filtered_rank(scores, 0, np.array([1])) == 2

    def test_ties_pessimistic(self):
        assert filtered_rank(np.array([1.0, 1.0, 1.0]), 1) == 3

    def test_gold_filtered_is_error(self):
        with pytest.raises(KGError):
            filtered_rank(np.array([1.0, 2.0]), 0, np.array([0]))

    @settings(max_examples=MANY)
    @given(scores_st, st.data())
    def test_oracle_raw_bound_shift(self, scores, data):
        n = len(scores)
        gold = data.draw(st.integers(0, n - 1))
        filt = data.draw(st.lists(st.integers(0, n - 1), max_size=n).map(lambda xs: sorted(set(xs) - {gold})))
        f = np.array(filt, dtype=np.int64)
        r = filtered_rank(scores, gold, f)
        assert r == oracle_rank(scores.tolist(), gold, filt)
        assert 1 <= r <= filtered_rank(scores, gold)
        assert filtered_rank(scores + 7.25, gold, f) == r


class TestMetrics:
    def test_examples(self):
        m = metrics([1, 2, 4])
        assert m["mrr"] == pytest.approx(0.5833, abs=1e-4) and m["queries"] == 3
        m = metrics([1, 1, 1])
        assert m["mrr"] == m["hits1"] == 1.0

    @settings(max_examples=MANY)
    @given(st.lists(st.integers(1, 50), min_size=1, max_size=40))
    def test_ranges(self, ranks):
        m = metrics(ranks)
        assert 0 < m["mrr"] <= 1 and m["hits1"] <= m["hits10"] <= 1

    def test_empty(self):
        assert np.isnan(metrics([])["mrr"])


class TestSeenUnseen:
    def setup_kg(self):
        raw = {
            "A": {"train": [("a", "p", "b"), ("b", "solo", "a")], "test": [("b", "p", "c")]},
            "B": {"train": [("b2", "q", "c2")], "test": [("a2", "q", "b2"), ("c2", "q", "a2")]},
        }
        ents = [("A", "a", "B", "a2"), ("A", "b", "B", "b2"), ("A", "c", "B", "c2")]
        return build_vocab(raw, ents, [("A", "p", "B", "q")])

    def test_examples(self):
        kg = self.setup_kg()
        eq, rel = kg.revealed_classes(), kg.relation_classes()
        # (a2, q, b2) copies A's train fact (a, p, b)
        seen_b = split_seen_unseen(kg.triples("B", "test"), [kg.triples("A")], eq, rel)
        assert seen_b.tolist() == [True, False]
        seen_a = split_seen_unseen(kg.triples("A", "test"), [kg.triples("B")], eq, rel)
        assert seen_a.tolist() == [True]
        solo = kg.triples("A")[1:2]
        assert split_seen_unseen(solo, [kg.triples("B")], eq, rel).tolist() == [False]

    def test_drop_zero_recount(self, tmp_path):
        generate_synthetic(SyntheticSpec(n_entities=50, n_relations=5, n_triples=300, fact_drop_fraction=0.0, seed=2,
                                         n_clusters=5), tmp_path)
        kg = load_dataset(tmp_path, reveal_fraction=0.5, split_seed=1)
        eq = kg.revealed_classes()
        rep = eq.representatives()
        rrep = kg.relation_classes().representatives()
        for lang, other in (("L0", "L1"), ("L1", "L0")):
            test, train = kg.triples(lang, "test"), kg.triples(other, "train")
            got = split_seen_unseen(test, [train], eq, kg.relation_classes())
            expected = []
            for s, r, o in test.tolist():
                hit = False
                for s2, r2, o2 in train.tolist():
                    if rep[s] == rep[s2] and rep[o] == rep[o2] and rrep[r] == rrep[r2]:
                        hit = True
                        break
                expected.append(hit)
            assert got.tolist() == expected
            assert 0 < sum(expected) < len(expected)

    def test_whole_is_weighted_mean(self, small_kg):
        table = init_embeddings(len(small_kg.entities), len(small_kg.relations), 4, seed=0,
                                entity_row=dense_rows(small_kg.revealed_classes().representatives()))
        rep = eval_kgc(small_kg, table)
        for group in small_kg.languages + ["all"]:
            w = rep.rows[("kgc", group, "whole")]
            s = rep.rows[("kgc", group, "seen")]
            u = rep.rows[("kgc", group, "unseen")]
            assert s["queries"] + u["queries"] == w["queries"]
            for m in ("mrr", "hits1", "hits10"):
                parts = [x[m] * x["queries"] for x in (s, u) if x["queries"]]
                assert abs(sum(parts) / w["queries"] - w[m]) < 1e-9


class TestRankTriples:
    def test_brute_force_oracle(self, rng):
        for trial in range(30):
            n = 5
            table = init_embeddings(n, 2, 3, seed=trial, std=1.0)
            known = {tuple(x) for x in np.stack([rng.integers(0, n, 8), rng.integers(0, 2, 8), rng.integers(0, n, 8)], 1).tolist()}
            kg_triples = np.array(sorted(known))
            tails, heads = {}, {}
            for s, r, o in kg_triples.tolist():
                tails.setdefault((s, r), set()).add(o)
                heads.setdefault((r, o), set()).add(s)
            ranks = rank_triples(table, kg_triples, np.arange(n), tails, heads)
            for q, (s, r, o) in enumerate(kg_triples.tolist()):
                ts = [table.score(s, r, x) for x in range(n)]
                hs = [table.score(x, r, o) for x in range(n)]
                assert ranks["tail"][q] == oracle_rank(ts, o, [x for x in tails[(s, r)] if x != o])
                assert ranks["head"][q] == oracle_rank(hs, s, [x for x in heads[(r, o)] if x != s])

    def test_dump_and_tail_only(self, small_kg, tmp_path):
        table = init_embeddings(len(small_kg.entities), len(small_kg.relations), 4, seed=0)
        rep = eval_kgc(small_kg, table, directions=("tail",), dump=tmp_path / "ranks.tsv")
        lines = (tmp_path / "ranks.tsv").read_text().splitlines()
        total = sum(len(small_kg.triples(l, "test")) for l in small_kg.languages)
        assert len(lines) == total and all(l.split("\t")[0] == "tail" and len(l.split("\t")) == 5 for l in lines)
        assert rep.get("kgc", "all", "whole", "queries") == total

    def test_filter_includes_dev_by_default(self, small_kg):
        table = init_embeddings(len(small_kg.entities), len(small_kg.relations), 4, seed=0)
        with_dev, _ = known_facts(small_kg, table, include_dev=True)
        without, _ = known_facts(small_kg, table, include_dev=False)
        assert sum(map(len, with_dev.values())) > sum(map(len, without.values()))


def two_language_table(n=6, d=3, seed=0, share=()):
    raw = {"A": {"train": [(f"a{i}", "p", f"a{(i + 1) % n}") for i in range(n)]},
           "B": {"train": [(f"b{i}", "q", f"b{(i + 1) % n}") for i in range(n)]}}
    kg = build_vocab(raw, [("A", f"a{i}", "B", f"b{i}") for i in range(n)], [("A", "p", "B", "q")])
    mask = np.zeros(n, bool)
    mask[list(share)] = True
    kg.revealed_mask = mask
    rows = dense_rows(kg.revealed_classes().representatives())
    table = init_embeddings(len(kg.entities), len(kg.relations), d, seed=seed, entity_row=rows)
    return kg, table


class TestEA:
    def test_identical_vectors_rank_one(self):
        kg, t = two_language_table()
        a, b = kg.entity_gold[2]
        t.ent_re[t.entity_row[b]] = t.ent_re[t.entity_row[a]]
        t.ent_im[t.entity_row[b]] = t.ent_im[t.entity_row[a]]
        rep = eval_ea(kg, t, pairs=kg.entity_gold[2:3])
        assert rep.get("ea", "all", "heldout", "hits1") == 1.0

    def test_revealed_pairs_not_queried(self):
        kg, t = two_language_table(share=(0, 1))
        rep = eval_ea(kg, t)
        assert rep.get("ea", "all", "heldout", "queries") == 4
        # a revealed pair passed explicitly shares a row and is skipped
        rep = eval_ea(kg, t, pairs=kg.entity_gold[:1])
        assert rep.get("ea", "all", "heldout", "queries") == 0

    def test_aliased_candidates_excluded(self):
        kg, t = two_language_table(share=(0,))
        # b0 shares a0's row; a query from a0 must not see it
        vecs = as_real(t.entities)
        a, b = kg.entity_gold[3]
        qa = t.entity_row[a]
        cands = np.unique(t.entity_row[kg.entities_of("B")])
        cands = cands[cands != qa]
        expected = oracle_cosine_rank(vecs[qa], vecs[cands], int(np.searchsorted(cands, t.entity_row[b])))
        assert eval_ea(kg, t, pairs=kg.entity_gold[3:4]).get("ea", "all", "heldout", "mrr") == 1 / expected

    def test_cosine_rank_oracle(self, rng):
        for _ in range(100):
            q = rng.normal(size=4)
            cands = rng.normal(size=(int(rng.integers(1, 100)), 4))
            gold = int(rng.integers(len(cands)))
            assert cosine_rank(q, cands, gold) == oracle_cosine_rank(q, cands, gold)

    def test_random_hits1_about_one_percent(self, rng):
        hits = [cosine_rank(rng.normal(size=8), rng.normal(size=(100, 8)), 0) == 1 for _ in range(20000)]
        # 1% with a 4-sigma Monte-Carlo margin
        assert abs(np.mean(hits) - 0.01) < 4 * np.sqrt(0.01 * 0.99 / 20000)


class TestRA:
    def ten_relation_kg(self, counts=None):
        raw = {"A": {"train": []}, "B": {"train": []}}
        for lang in "AB":
            for r in range(5):
                k = (counts or {}).get((lang, r), 1)
                raw[lang]["train"] += [(f"{lang}s{r}_{i}", f"{lang}r{r}", f"{lang}o{r}_{i}") for i in range(k)]
        gold = [("A", f"Ar{r}", "B", f"Br{r}") for r in range(5)]
        return build_vocab(raw, relation_pairs=gold)

    def test_identical_embeddings_rank_one(self):
        kg = self.ten_relation_kg()
        t = init_embeddings(len(kg.entities), len(kg.relations), 3, seed=0)
        for a, b in kg.relation_gold.tolist():
            t.rel_re[b] = t.rel_re[a]
            t.rel_im[b] = t.rel_im[a]
        assert eval_ra(kg, t).get("ra", "all", "gold", "hits1") == 1.0

    def test_bucket_boundary(self):
        kg = self.ten_relation_kg({("A", 0): 500, ("A", 1): 499})
        t = init_embeddings(len(kg.entities), len(kg.relations), 3, seed=0)
        rep = eval_ra(kg, t)
        assert rep.get("ra", ">=500", "gold", "queries") == 1
        assert rep.get("ra", "<500", "gold", "queries") == 4
        assert eval_ra(kg, t, threshold=499).get("ra", ">=499", "gold", "queries") == 2

    def test_oracle(self, rng):
        kg = self.ten_relation_kg()
        for seed in range(100):
            t = init_embeddings(len(kg.entities), len(kg.relations), 3, seed=seed)
            vecs = as_real(t.relations)
            b_ids = kg.relations_of("B")
            ranks = []
            for a, b in kg.relation_gold.tolist():
                ranks.append(oracle_cosine_rank(vecs[a], vecs[b_ids], int(np.searchsorted(b_ids, b))))
            rep = eval_ra(kg, t)
            assert rep.get("ra", "all", "gold", "mrr") == pytest.approx(np.mean(1 / np.array(ranks)), abs=1e-12)
            assert rep.get("ra", "all", "gold", "hits3") == np.mean(np.array(ranks) <= 3)


class TestReport:
    def test_tsv_and_table(self, tmp_path):
        rep = EvalReport()
        rep.add("kgc", "L0", "whole", metrics([1, 3]))
        rep.add("ra", "all", "gold", metrics([2], ks=(1, 3, 10)))
        text = rep.to_tsv(tmp_path / "r.tsv")
        lines = text.splitlines()
        assert lines[0] == "task\tgroup\tsplit\tmetric\tvalue"
        assert "kgc\tL0\twhole\tmrr\t0.666667" in lines
        assert (tmp_path / "r.tsv").read_text() == text
        header = rep.format_table().splitlines()[0].split()
        assert header == ["task", "group", "split", "queries", "mrr", "hits1", "hits3", "hits10"]
