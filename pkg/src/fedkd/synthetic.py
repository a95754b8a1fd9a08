"""Synthetic knowledge graphs with latent translational structure, used for
desk-scale experiments and tests."""

from __future__ import annotations

import numpy as np

from .kg import KnowledgeGraph


def synthetic_graph(num_entities: int = 300, num_relations: int = 9, num_triples: int = 3000,
                    latent_dim: int = 32, tails_per_head: int = 3, noise: float = 0.5,
                    seed: int = 0) -> KnowledgeGraph:
    """Entities are random points; relation ``r`` links a head to the tails
    nearest to ``head + offset_r`` under noisy distances.

    Every relation gets ``num_triples // num_relations`` triples (rounded down
    to a multiple of ``tails_per_head``), all in the train split.
    """
    rng = np.random.default_rng(seed)
    points = rng.normal(size=(num_entities, latent_dim))
    offsets = rng.normal(size=(num_relations, latent_dim))
    heads_per_rel = num_triples // num_relations // tails_per_head
    if heads_per_rel > num_entities:
        raise ValueError("too many triples for the entity count")
    rows = []
    for r in range(num_relations):
        heads = rng.choice(num_entities, size=heads_per_rel, replace=False)
        target = points[heads] + offsets[r]
        dist = np.linalg.norm(target[:, None, :] - points[None, :, :], axis=-1)
        dist += noise * rng.standard_normal(dist.shape)
        dist[np.arange(len(heads)), heads] = np.inf
        tails = np.argsort(dist, axis=1)[:, :tails_per_head]
        rows.extend((int(h), r, int(t)) for h, ts in zip(heads, tails) for t in ts)
    return KnowledgeGraph([f"e{i}" for i in range(num_entities)], [f"r{i}" for i in range(num_relations)],
                          np.array(rows, dtype=np.int64))
