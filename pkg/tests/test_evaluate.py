import numpy as np
import pytest

import oracles
from fedkd.evaluate import (
    ClientMetrics,
    MetricReport,
    aggregate_metrics,
    evaluate_client,
    evaluate_federation,
    format_table,
    metrics_from_ranks,
    rank_batch,
    rank_triple,
)
from fedkd.kg import KnowledgeGraph
from fedkd.scorers import MODEL_KINDS, InitParams, init_embeddings, score
from fedkd.synthetic import synthetic_graph
from toys import integer_table, random_graph


@pytest.mark.parametrize("kind", MODEL_KINDS)
@pytest.mark.parametrize("direction", ["tail", "head"])
def test_rank_matches_exhaustive_oracle_with_ties(kind, direction):
    rng = np.random.default_rng(0)
    ties_seen = 0
    for _ in range(10):
        g = random_graph(rng)
        t = integer_table(kind, rng, g)
        known = set(map(tuple, g.all_triples().tolist()))
        fn = lambda h, r, e: score(t, h, r, e)
        for triple in g.test.tolist():
            for index, kn in ((g.filter_index(), known), (None, set())):
                got = rank_triple(t, triple, direction, index)
                want = oracles.brute_rank(fn, g.num_entities, triple, direction, kn)
                assert got == want
                ties_seen += got != int(got)
    assert ties_seen > 0


def test_rank_batch_agrees_with_single_triples():
    rng = np.random.default_rng(1)
    g = random_graph(rng)
    t = init_embeddings(InitParams(6, 2, 4), "RotatE", g.num_entities, g.num_relations, rng)
    batch = rank_batch(t, g.test, "tail", g.filter_index())
    assert batch.tolist() == [rank_triple(t, tr, "tail", g.filter_index()) for tr in g.test.tolist()]


def test_filtering_removes_other_true_tails():
    g = KnowledgeGraph(["a", "b", "c", "d"], ["r"], [[0, 0, 1]], [], [[0, 0, 2]])
    t = init_embeddings(InitParams(6, 2, 1), "TransE", 4, 1, np.random.default_rng(0))
    t.relation[:] = 0.0
    t.entity[:, 0] = [0.0, 0.0, 1.0, 5.0]
    assert rank_triple(t, (0, 0, 2), "tail") == 3.0
    assert rank_triple(t, (0, 0, 2), "tail", g.filter_index()) == 2.0


def test_metrics_from_ranks_values():
    m = metrics_from_ranks([1, 4])
    assert m["mrr"] == 0.625 and m["hits1"] == 0.5 and m["hits5"] == 1.0


def test_client_weighting():
    rep = aggregate_metrics([ClientMetrics(0, 100, 0.8, 0, 0, 0), ClientMetrics(1, 50, 0.5, 0, 0, 0)])
    assert rep.mrr == pytest.approx(0.7, abs=1e-15)


def test_report_roundtrip_and_table():
    rep = aggregate_metrics([ClientMetrics(0, 3, 0.5, 0.25, 0.5, 0.75)])
    assert MetricReport.from_dict(rep.to_dict()) == rep
    text = format_table([("FedEKD", 16, rep)])
    assert text.splitlines()[1].split() == ["FedEKD", "16", "0.5000", "0.2500", "0.5000", "0.7500"]


def _monotone(rep):
    items = [rep, *rep.per_client]
    return all(m.hits1 <= m.hits5 <= m.hits10 and m.mrr >= m.hits1 for m in items)


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_metric_monotonicity(kind):
    rng = np.random.default_rng(2)
    g = synthetic_graph(40, 3, 150, latent_dim=4, seed=1)
    g = KnowledgeGraph(g.entities, g.relations, g.train[:-20], g.train[-20:-10], g.train[-10:])
    t = init_embeddings(InitParams(6, 2, 4), kind, g.num_entities, g.num_relations, rng)
    for filtered in (True, False):
        rep = evaluate_federation([t], [g], "test", filtered)
        assert _monotone(rep)
        assert 0 < rep.mrr <= 1


def test_empty_split_rejected():
    g = KnowledgeGraph(["a", "b"], ["r"], [[0, 0, 1]])
    t = init_embeddings(InitParams(6, 2, 2), "TransE", 2, 1, np.random.default_rng(0))
    with pytest.raises(ValueError, match="empty"):
        evaluate_client(t, g, "test")


def test_nonfinite_embeddings_are_reported():
    from fedkd.scorers import NumericError
    g = KnowledgeGraph(["a", "b", "c"], ["r"], [[0, 0, 1]], [], [[1, 0, 2]])
    t = init_embeddings(InitParams(6, 2, 2), "TransE", 3, 1, np.random.default_rng(0))
    t.entity[2] = np.nan
    with pytest.raises(NumericError, match=r"\[1, 0, 2\]"):
        evaluate_client(t, g, "test")
