"""Filtered link-prediction ranking and client-weighted metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .kg import KnowledgeGraph
from .scorers import EmbeddingTable, NumericError, score_batch

HITS_AT = (1, 5, 10)
# candidate-score cells per evaluation chunk
CHUNK_CELLS = 1 << 22


@dataclass
class ClientMetrics:
    client_id: int
    count: int
    mrr: float
    hits1: float
    hits5: float
    hits10: float


@dataclass
class MetricReport:
    mrr: float
    hits1: float
    hits5: float
    hits10: float
    per_client: list[ClientMetrics] = field(default_factory=list)

    def summary(self) -> dict:
        return {"mrr": self.mrr, "hits1": self.hits1, "hits5": self.hits5, "hits10": self.hits10}

    def to_dict(self) -> dict:
        return {**self.summary(), "per_client": [asdict(m) for m in self.per_client]}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(d["mrr"], d["hits1"], d["hits5"], d["hits10"],
                   [ClientMetrics(**m) for m in d.get("per_client", [])])


def _rank_from_scores(scores: np.ndarray, truth: np.ndarray, excluded: np.ndarray) -> np.ndarray:
    """Mean-tie rank of ``truth`` per row, ignoring ``excluded`` candidates."""
    rows = np.arange(len(truth))
    true_score = scores[rows, truth][:, None]
    keep = ~excluded
    keep[rows, truth] = False
    higher = ((scores > true_score) & keep).sum(1)
    ties = ((scores == true_score) & keep).sum(1)
    return 1.0 + higher + 0.5 * ties


def _exclusion_mask(queries: np.ndarray, direction: str, num_entities: int, filter_index) -> np.ndarray:
    mask = np.zeros((len(queries), num_entities), dtype=bool)
    if filter_index is None:
        return mask
    tails, heads = filter_index
    for i, (h, r, t) in enumerate(queries.tolist()):
        known = tails.get((h, r), ()) if direction == "tail" else heads.get((r, t), ())
        if known:
            mask[i, list(known)] = True
    return mask


def rank_batch(table: EmbeddingTable, triples: np.ndarray, direction: str, filter_index=None) -> np.ndarray:
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    ent = np.arange(table.num_entities)
    step = max(1, CHUNK_CELLS // max(1, table.num_entities * table.entity.shape[1]))
    out = []
    for start in range(0, len(triples), step):
        q = triples[start:start + step]
        h, r, t = q[:, :1], q[:, 1:2], q[:, 2:]
        if direction == "tail":
            scores, truth = score_batch(table, h, r, ent[None, :]), q[:, 2]
        elif direction == "head":
            scores, truth = score_batch(table, ent[None, :], r, t), q[:, 0]
        else:
            raise ValueError(f"direction must be 'tail' or 'head', not {direction!r}")
        finite = np.isfinite(scores).all(axis=1)
        if not finite.all():
            raise NumericError(f"non-finite score while ranking triple {q[np.argmin(finite)].tolist()}")
        out.append(_rank_from_scores(scores, truth, _exclusion_mask(q, direction, table.num_entities,
                                                                    filter_index)))
    return np.concatenate(out) if out else np.zeros(0)


def rank_triple(table: EmbeddingTable, triple, direction: str = "tail", filter_index=None) -> float:
    """Rank of the true entity among all entities in the given slot.

    ``filter_index`` is ``(tails_by_(h, r), heads_by_(r, t))`` as returned by
    :meth:`KnowledgeGraph.filter_index`; ``None`` ranks in the raw setting.
    """
    return float(rank_batch(table, np.asarray([triple]), direction, filter_index)[0])


def metrics_from_ranks(ranks: np.ndarray) -> dict:
    ranks = np.asarray(ranks, dtype=np.float64)
    out = {"mrr": float(np.mean(1.0 / ranks))}
    for n in HITS_AT:
        out[f"hits{n}"] = float(np.mean(ranks <= n))
    return out


def evaluate_client(table: EmbeddingTable, graph: KnowledgeGraph, split: str = "test",
                    filtered: bool = True, client_id: int = 0) -> ClientMetrics:
    """Tail and head prediction over every triple of ``split``."""
    triples = graph.split(split)
    if len(triples) == 0:
        raise ValueError(f"client {client_id}: empty {split} split")
    index = graph.filter_index() if filtered else None
    ranks = np.concatenate([rank_batch(table, triples, d, index) for d in ("tail", "head")])
    return ClientMetrics(client_id, len(triples), **metrics_from_ranks(ranks))


def aggregate_metrics(per_client: list[ClientMetrics]) -> MetricReport:
    """Average client metrics weighted by evaluated triple counts."""
    if not per_client:
        raise ValueError("no client metrics to aggregate")
    counts = np.array([m.count for m in per_client], dtype=np.float64)
    w = counts / counts.sum()
    agg = {k: float(sum(wi * getattr(m, k) for wi, m in zip(w, per_client)))
           for k in ("mrr", "hits1", "hits5", "hits10")}
    return MetricReport(per_client=list(per_client), **agg)


def evaluate_federation(tables: list[EmbeddingTable], graphs: list[KnowledgeGraph], split: str = "test",
                        filtered: bool = True) -> MetricReport:
    return aggregate_metrics([evaluate_client(t, g, split, filtered, c)
                              for c, (t, g) in enumerate(zip(tables, graphs))])


def format_table(rows: list[tuple[str, int, MetricReport]]) -> str:
    """Plain-text summary with one line per (method, dim, report)."""
    lines = [f"{'Method':<10} {'Dim':>5} {'MRR':>8} {'Hits@1':>8} {'Hits@5':>8} {'Hits@10':>8}"]
    for method, dim, rep in rows:
        lines.append(f"{method:<10} {dim:>5} {rep.mrr:>8.4f} {rep.hits1:>8.4f} {rep.hits5:>8.4f} {rep.hits10:>8.4f}")
    return "\n".join(lines)
