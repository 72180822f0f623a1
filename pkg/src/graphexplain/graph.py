"""Graph data model: edge/node/global features over a fixed topology.

The JSON interchange format is a stable contract:

    {"nodes": [[f, ...], ...], "edges": [[f, ...], ...],
     "senders": [int], "receivers": [int],
     "global": [f] | null, "labels": [int] | null}

Message passing updates features only; senders/receivers never change.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError

Array = np.ndarray


@dataclass(frozen=True)
class Graph:
    """Directed multigraph with dense feature matrices.

    edge_features[k] belongs to the edge senders[k] -> receivers[k].
    global_features, when present, is a [1, d_u] matrix. labels is an
    optional per-node integer vector (task-dependent meaning).
    """

    node_features: Array
    edge_features: Array
    senders: Array
    receivers: Array
    global_features: Array | None = None
    labels: Array | None = None

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edge_features.shape[0]


def build_graph(
    nodes,
    edges,
    senders,
    receivers,
    global_features=None,
    labels=None,
) -> Graph:
    """Validate raw arrays and assemble a Graph."""
    nf = np.ascontiguousarray(nodes, dtype=np.float64)
    if nf.ndim != 2:
        raise DimensionError(f"node features must be 2-D, got shape {nf.shape}")
    ef = np.ascontiguousarray(edges, dtype=np.float64)
    if ef.size == 0:
        ef = ef.reshape(0, ef.shape[1] if ef.ndim == 2 else 0)
    if ef.ndim != 2:
        raise DimensionError(f"edge features must be 2-D, got shape {ef.shape}")
    s = np.ascontiguousarray(senders, dtype=np.int64)
    r = np.ascontiguousarray(receivers, dtype=np.int64)
    if s.shape != (ef.shape[0],) or r.shape != (ef.shape[0],):
        raise DataError(
            f"{ef.shape[0]} edges but {s.shape[0]} senders / {r.shape[0]} receivers"
        )
    n = nf.shape[0]
    for name, idx in (("sender", s), ("receiver", r)):
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            bad = idx[(idx < 0) | (idx >= n)][0]
            raise DataError(f"{name} id {bad} out of range for {n} nodes")
    gf = None
    if global_features is not None:
        gf = np.ascontiguousarray(global_features, dtype=np.float64).reshape(1, -1)
    lb = None
    if labels is not None:
        lb = np.ascontiguousarray(labels, dtype=np.int64)
        if lb.shape != (n,):
            raise DataError(f"labels shape {lb.shape} does not match {n} nodes")
    for name, a in (("node", nf), ("edge", ef), ("global", gf)):
        if a is not None and not np.all(np.isfinite(a)):
            raise DataError(f"{name} features contain non-finite entries")
    return Graph(nf, ef, s, r, gf, lb)


def to_json_dict(g: Graph) -> dict:
    return {
        "nodes": g.node_features.tolist(),
        "edges": g.edge_features.tolist(),
        "senders": g.senders.tolist(),
        "receivers": g.receivers.tolist(),
        "global": None if g.global_features is None else g.global_features[0].tolist(),
        "labels": None if g.labels is None else g.labels.tolist(),
    }


def from_json_dict(d: dict) -> Graph:
    try:
        edges = d["edges"]
        if len(edges) == 0:
            edges = np.zeros((0, 0))
        return build_graph(
            d["nodes"], edges, d["senders"], d["receivers"],
            d.get("global"), d.get("labels"),
        )
    except KeyError as e:
        raise DataError(f"graph JSON missing key {e}") from None


def dumps(g: Graph) -> str:
    return json.dumps(to_json_dict(g), sort_keys=True)


def loads(text: str) -> Graph:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise DataError(f"invalid graph JSON: {e}") from None
    return from_json_dict(d)


def save(g: Graph, path) -> None:
    with open(path, "w") as f:
        f.write(dumps(g))
        f.write("\n")


def load(path) -> Graph:
    with open(path) as f:
        return loads(f.read())


def permute_nodes(g: Graph, perm) -> Graph:
    """Relabel nodes by perm (new index = perm[old index]), keeping the
    same abstract graph. Used by equivariance tests."""
    perm = np.asarray(perm, dtype=np.int64)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return Graph(
        node_features=np.ascontiguousarray(g.node_features[inv]),
        edge_features=g.edge_features,
        senders=perm[g.senders],
        receivers=perm[g.receivers],
        global_features=g.global_features,
        labels=None if g.labels is None else g.labels[inv],
    )
