"""Versioned checkpoint directories.

Layout::

    meta.json        format tag, version, config, per-client metadata
    server.npz       global entity matrix (federated runs only)
    client_<c>.npz   embeddings, temperature net, optimizer moments
"""

from __future__ import annotations

import json
import os
import zipfile

import numpy as np

from .distill import NET_PARAMS, TemperatureNet
from .federation import ClientState, ServerState
from .kg import FederatedDataset
from .optim import AdamState
from .scorers import EmbeddingTable

FORMAT = "fedkd-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _table_meta(table: EmbeddingTable) -> dict:
    return {"kind": table.kind, "dim": table.dim, "gamma": table.gamma, "epsilon": table.epsilon,
            "transe_norm": table.transe_norm}


def save_checkpoint(directory, clients: list[ClientState], server: ServerState | None = None,
                    config: dict | None = None, extra: dict | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    meta = {"format": FORMAT, "version": VERSION, "config": config or {}, "extra": extra or {},
            "has_server": server is not None, "clients": []}
    for client in clients:
        arrays = {"entity": client.table.entity, "relation": client.table.relation,
                  "entity_map": client.entity_map}
        if client.net is not None:
            arrays.update({f"net.{k}": v for k, v in client.net.params().items()})
        adam_meta = {}
        for name, state in client.adam.items():
            arrays[f"adam.{name}.m"] = state.m
            arrays[f"adam.{name}.v"] = state.v
            adam_meta[name] = {"t": state.t, "lr": state.lr, "beta1": state.beta1,
                               "beta2": state.beta2, "eps": state.eps}
        np.savez(os.path.join(directory, f"client_{client.client_id}.npz"), **arrays)
        meta["clients"].append({
            "client_id": client.client_id,
            "table": _table_meta(client.table),
            "net": ({"tau_min": client.net.tau_min, "tau_max": client.net.tau_max}
                    if client.net is not None else None),
            "adam": adam_meta,
            "epochs": client.epochs,
            "rng_state": client.rng.bit_generator.state,
        })
    if server is not None:
        np.savez(os.path.join(directory, "server.npz"), entity=server.entity, mask=server.mask)
    with open(os.path.join(directory, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, default=int)
        fh.write("\n")


class Checkpoint:
    """Loaded checkpoint: metadata plus per-client arrays."""

    def __init__(self, meta: dict, client_arrays: list[dict], server: ServerState | None):
        self.meta = meta
        self.client_arrays = client_arrays
        self.server = server

    @property
    def config(self) -> dict:
        return self.meta["config"]

    @property
    def num_clients(self) -> int:
        return len(self.client_arrays)

    def tables(self) -> list[EmbeddingTable]:
        out = []
        for cm, arrays in zip(self.meta["clients"], self.client_arrays):
            t = cm["table"]
            out.append(EmbeddingTable(t["kind"], t["dim"], t["gamma"], t["epsilon"],
                                      arrays["entity"], arrays["relation"], t["transe_norm"]))
        return out

    def client_states(self, fed: FederatedDataset) -> list[ClientState]:
        """Rebuild full client states (for resuming) against ``fed``."""
        states = []
        for (cm, arrays, table) in zip(self.meta["clients"], self.client_arrays, self.tables()):
            c = cm["client_id"]
            net = None
            if cm["net"] is not None:
                net = TemperatureNet(*(arrays[f"net.{k}"] for k in NET_PARAMS), **cm["net"])
            adam = {name: AdamState(arrays[f"adam.{name}.m"], arrays[f"adam.{name}.v"], **am)
                    for name, am in cm["adam"].items()}
            rng = np.random.default_rng()
            rng.bit_generator.state = cm["rng_state"]
            states.append(ClientState(c, fed.clients[c], fed.entity_maps[c], table, rng, adam,
                                      None, net, cm["epochs"]))
        return states

    def check_against(self, fed: FederatedDataset) -> None:
        if fed.num_clients != self.num_clients:
            raise CheckpointError(f"checkpoint has {self.num_clients} clients, data has {fed.num_clients}")
        for c, (kg, table) in enumerate(zip(fed.clients, self.tables())):
            if table.num_entities != kg.num_entities or table.num_relations != kg.num_relations:
                raise CheckpointError(
                    f"client {c}: checkpoint table is {table.num_entities}x{table.num_relations} "
                    f"(entities x relations), data has {kg.num_entities}x{kg.num_relations}")


def load_checkpoint(directory) -> Checkpoint:
    meta_path = os.path.join(directory, "meta.json")
    try:
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise CheckpointError(f"{directory}: missing meta.json") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{meta_path}: unreadable metadata ({exc})") from None
    if not isinstance(meta, dict) or meta.get("format") != FORMAT:
        raise CheckpointError(f"{meta_path}: not a {FORMAT} file")
    if meta.get("version") != VERSION:
        raise CheckpointError(f"{meta_path}: unsupported checkpoint version {meta.get('version')!r}, "
                              f"expected {VERSION}")
    arrays = []
    try:
        for cm in meta["clients"]:
            with np.load(os.path.join(directory, f"client_{cm['client_id']}.npz")) as data:
                arrays.append({k: data[k] for k in data.files})
        server = None
        if meta.get("has_server"):
            with np.load(os.path.join(directory, "server.npz")) as data:
                server = ServerState(data["entity"], data["mask"])
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{directory}: corrupted checkpoint ({exc})") from None
    return Checkpoint(meta, arrays, server)
