"""Knowledge graph data model, relation-wise federated partitioning and
negative sampling."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

SPLITS = ("train", "valid", "test")
MAX_REJECTION_ROUNDS = 64


class DataError(ValueError):
    """Raised for unusable input data (bad files, impossible partitions)."""


class ParseError(DataError):
    def __init__(self, path, lineno, message):
        self.path = path
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


def _as_triples(arr) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 3), dtype=np.int64)
    return arr.reshape(-1, 3)


@dataclass
class KnowledgeGraph:
    """Integer-id triples over an entity and relation vocabulary.

    Splits are ``(n, 3)`` int64 arrays of ``(head, relation, tail)``.
    """

    entities: list[str]
    relations: list[str]
    train: np.ndarray
    valid: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.int64))
    test: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.int64))

    def __post_init__(self):
        self.train = _as_triples(self.train)
        self.valid = _as_triples(self.valid)
        self.test = _as_triples(self.test)
        self._train_keys = None
        self._filter_index = None

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def split(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def all_triples(self) -> np.ndarray:
        return np.concatenate([self.train, self.valid, self.test])

    def validate(self) -> None:
        for name in SPLITS:
            arr = self.split(name)
            if len(arr) == 0:
                continue
            if arr.min() < 0:
                raise DataError(f"negative id in {name} split")
            if max(arr[:, 0].max(), arr[:, 2].max()) >= self.num_entities:
                raise DataError(f"entity id out of vocabulary in {name} split")
            if arr[:, 1].max() >= self.num_relations:
                raise DataError(f"relation id out of vocabulary in {name} split")
        seen: set[tuple] = set()
        for name in SPLITS:
            keys = set(map(tuple, self.split(name).tolist()))
            if keys & seen:
                raise DataError(f"{name} split overlaps another split")
            seen |= keys

    def encode(self, triples: np.ndarray) -> np.ndarray:
        """Unique int64 key per triple."""
        triples = _as_triples(triples)
        return (triples[:, 0] * self.num_relations + triples[:, 1]) * self.num_entities + triples[:, 2]

    def train_keys(self) -> np.ndarray:
        if self._train_keys is None:
            self._train_keys = np.unique(self.encode(self.train))
        return self._train_keys

    def filter_index(self):
        """Known tails per (h, r) and heads per (r, t) over all splits."""
        if self._filter_index is None:
            allt = self.all_triples()
            heads: dict[tuple[int, int], set[int]] = {}
            for h, r, t in allt.tolist():
                heads.setdefault((r, t), set()).add(h)
            self._filter_index = (_index_tails(allt), heads)
        return self._filter_index


def _index_tails(triples: np.ndarray) -> dict[tuple[int, int], set[int]]:
    index: dict[tuple[int, int], set[int]] = {}
    for h, r, t in triples.tolist():
        index.setdefault((h, r), set()).add(t)
    return index


@dataclass
class FederatedDataset:
    clients: list[KnowledgeGraph]
    entity_maps: list[np.ndarray]  # local entity id -> global entity id
    global_entities: list[str]
    seed: int = 0

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    @property
    def num_global_entities(self) -> int:
        return len(self.global_entities)


# ---------------------------------------------------------------------------
# Loading

def _read_labeled(path, ent_vocab: dict, rel_vocab: dict, grow: bool = True) -> list:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(path, lineno, f"expected 3 tab-separated fields, got {len(parts)}")
            h, r, t = parts
            ids = []
            for label, vocab in ((h, ent_vocab), (r, rel_vocab), (t, ent_vocab)):
                if label not in vocab:
                    if not grow:
                        raise ParseError(path, lineno, f"unknown label {label!r}")
                    vocab[label] = len(vocab)
                ids.append(vocab[label])
            rows.append(ids)
    return rows


def load_graph(path) -> KnowledgeGraph:
    """Read one tab-separated triple file into the train split of a graph.

    Vocabularies follow first-appearance order.
    """
    ent: dict[str, int] = {}
    rel: dict[str, int] = {}
    rows = _read_labeled(path, ent, rel)
    if not rows:
        raise DataError(f"{path}: no triples")
    return KnowledgeGraph(list(ent), list(rel), np.array(rows, dtype=np.int64))


def load_dataset(directory) -> KnowledgeGraph:
    """Read ``train.txt``/``valid.txt``/``test.txt`` with a merged vocabulary."""
    ent: dict[str, int] = {}
    rel: dict[str, int] = {}
    splits = {}
    for name in SPLITS:
        path = os.path.join(directory, f"{name}.txt")
        if not os.path.exists(path):
            if name == "train":
                raise DataError(f"{path} does not exist")
            splits[name] = []
            continue
        splits[name] = _read_labeled(path, ent, rel)
    if not splits["train"]:
        raise DataError(f"{directory}: empty train split")
    return KnowledgeGraph(list(ent), list(rel), *(np.array(splits[s], dtype=np.int64) for s in SPLITS))


# ---------------------------------------------------------------------------
# Partitioning

def _split_counts(n: int) -> tuple[int, int, int]:
    n_train = (8 * n) // 10
    n_valid = n // 10
    return n_train, n_valid, n - n_train - n_valid


def partition_by_relation(graph: KnowledgeGraph, num_clients: int, seed: int = 0) -> FederatedDataset:
    """Deal relations round-robin (after a seeded shuffle) to ``num_clients``
    clients and re-split every client's triples 0.8/0.1/0.1."""
    if num_clients < 1:
        raise DataError("num_clients must be positive")
    if num_clients > graph.num_relations:
        raise DataError(f"cannot split {graph.num_relations} relations over {num_clients} clients")
    rng = np.random.default_rng(seed)
    order = rng.permutation(graph.num_relations)
    owner = np.empty(graph.num_relations, dtype=np.int64)
    owner[order] = np.arange(graph.num_relations) % num_clients

    triples = np.unique(graph.all_triples(), axis=0)
    clients, maps = [], []
    for c in range(num_clients):
        mine = triples[owner[triples[:, 1]] == c]
        mine = mine[rng.permutation(len(mine))]
        n_train, n_valid, _ = _split_counts(len(mine))
        parts = (mine[:n_train], mine[n_train:n_train + n_valid], mine[n_train + n_valid:])

        # local vocabularies in first-appearance order over train, valid, test
        ent_local: dict[int, int] = {}
        for h, _, t in np.concatenate(parts).tolist():
            ent_local.setdefault(h, len(ent_local))
            ent_local.setdefault(t, len(ent_local))
        rel_global = np.flatnonzero(owner == c)
        rel_local = {int(r): i for i, r in enumerate(rel_global)}

        def relabel(arr):
            out = np.empty_like(arr)
            for i, (h, r, t) in enumerate(arr.tolist()):
                out[i] = (ent_local[h], rel_local[r], ent_local[t])
            return out

        emap = np.fromiter(ent_local.keys(), dtype=np.int64, count=len(ent_local))
        clients.append(KnowledgeGraph(
            entities=[graph.entities[g] for g in emap],
            relations=[graph.relations[r] for r in rel_global],
            train=relabel(parts[0]), valid=relabel(parts[1]), test=relabel(parts[2]),
        ))
        maps.append(emap)
    return FederatedDataset(clients, maps, list(graph.entities), seed)


def write_partition(fed: FederatedDataset, directory) -> None:
    """One ``client_<i>`` directory per client plus a top-level manifest."""
    os.makedirs(directory, exist_ok=True)
    counts = []
    for c, (kg, emap) in enumerate(zip(fed.clients, fed.entity_maps)):
        cdir = os.path.join(directory, f"client_{c}")
        os.makedirs(cdir, exist_ok=True)
        for name in SPLITS:
            with open(os.path.join(cdir, f"{name}.txt"), "w", encoding="utf-8") as fh:
                for h, r, t in kg.split(name).tolist():
                    fh.write(f"{kg.entities[h]}\t{kg.relations[r]}\t{kg.entities[t]}\n")
        with open(os.path.join(cdir, "entities.tsv"), "w", encoding="utf-8") as fh:
            for i, label in enumerate(kg.entities):
                fh.write(f"{i}\t{label}\n")
        with open(os.path.join(cdir, "relations.tsv"), "w", encoding="utf-8") as fh:
            for i, label in enumerate(kg.relations):
                fh.write(f"{i}\t{label}\n")
        with open(os.path.join(cdir, "entity_map.tsv"), "w", encoding="utf-8") as fh:
            for local, glob in enumerate(emap.tolist()):
                fh.write(f"{local}\t{glob}\n")
        counts.append({
            "entities": kg.num_entities, "relations": kg.num_relations,
            **{name: int(len(kg.split(name))) for name in SPLITS},
        })
    with open(os.path.join(directory, "global_entities.tsv"), "w", encoding="utf-8") as fh:
        for i, label in enumerate(fed.global_entities):
            fh.write(f"{i}\t{label}\n")
    manifest = {"seed": fed.seed, "num_clients": fed.num_clients, "counts": counts}
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_vocab(path) -> list[str]:
    labels = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\r\n").split("\t")
            if len(parts) != 2 or int(parts[0]) != len(labels):
                raise ParseError(path, lineno, "expected '<id>\\t<label>' with dense ids")
            labels.append(parts[1])
    return labels


def read_partition(directory) -> FederatedDataset:
    manifest_path = os.path.join(directory, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DataError(f"{directory} is not a partition directory (no manifest.json)")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    global_entities = _read_vocab(os.path.join(directory, "global_entities.tsv"))
    clients, maps = [], []
    for c in range(manifest["num_clients"]):
        cdir = os.path.join(directory, f"client_{c}")
        ents = _read_vocab(os.path.join(cdir, "entities.tsv"))
        rels = _read_vocab(os.path.join(cdir, "relations.tsv"))
        ent_vocab = {label: i for i, label in enumerate(ents)}
        rel_vocab = {label: i for i, label in enumerate(rels)}
        splits = [
            np.array(_read_labeled(os.path.join(cdir, f"{s}.txt"), ent_vocab, rel_vocab, grow=False),
                     dtype=np.int64)
            for s in SPLITS
        ]
        emap = np.zeros(len(ents), dtype=np.int64)
        with open(os.path.join(cdir, "entity_map.tsv"), encoding="utf-8") as fh:
            for line in fh:
                local, glob = line.split("\t")
                emap[int(local)] = int(glob)
        clients.append(KnowledgeGraph(ents, rels, *splits))
        maps.append(emap)
    return FederatedDataset(clients, maps, global_entities, manifest["seed"])


# ---------------------------------------------------------------------------
# Negative sampling

@dataclass
class NegativeSampleSet:
    positive: Triple
    corrupted_tails: np.ndarray


def sample_negatives(client: KnowledgeGraph, positive, n: int, rng: np.random.Generator) -> NegativeSampleSet:
    """Draw ``n`` tails uniformly, rejecting the true tail and known train tails."""
    tails = sample_negative_batch(client, np.asarray([positive], dtype=np.int64), n, rng)[0]
    return NegativeSampleSet(Triple(*map(int, positive)), tails)


def sample_negative_batch(client: KnowledgeGraph, positives: np.ndarray, n: int,
                          rng: np.random.Generator, corrupt: str = "tail") -> np.ndarray:
    """Corrupted entity ids of shape ``(len(positives), n)``.

    ``corrupt="head"`` replaces heads instead of tails, rejecting heads that
    form a known train triple with ``(relation, tail)``.
    """
    num_ent = client.num_entities
    if num_ent < 2:
        raise DataError("negative sampling needs at least 2 entities")
    if corrupt not in ("tail", "head"):
        raise ValueError(f"corrupt must be 'tail' or 'head', not {corrupt!r}")
    positives = _as_triples(positives)
    keys = client.train_keys()
    slot = 2 if corrupt == "tail" else 0

    out = rng.integers(0, num_ent, size=(len(positives), n))
    pending = np.ones(out.shape, dtype=bool)
    for _ in range(MAX_REJECTION_ROUNDS):
        rows, cols = np.nonzero(pending)
        cand = positives[rows].copy()
        cand[:, slot] = out[rows, cols]
        bad = (cand[:, slot] == positives[rows, slot]) | _contains(keys, client.encode(cand))
        pending[rows[~bad], cols[~bad]] = False
        if not pending.any():
            return out
        rows, cols = np.nonzero(pending)
        out[rows, cols] = rng.integers(0, num_ent, size=len(rows))
    row = int(np.nonzero(pending.any(axis=1))[0][0])
    raise DataError(
        f"negative sampling exhausted for triple {tuple(positives[row].tolist())}: "
        f"no admissible {corrupt} after {MAX_REJECTION_ROUNDS} rounds")


def _contains(sorted_keys: np.ndarray, query: np.ndarray) -> np.ndarray:
    if len(sorted_keys) == 0:
        return np.zeros(len(query), dtype=bool)
    pos = np.searchsorted(sorted_keys, query).clip(max=len(sorted_keys) - 1)
    return sorted_keys[pos] == query
