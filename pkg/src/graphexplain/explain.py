"""Per-feature explanations of model predictions.

Three methods share one backward engine:

* sensitivity_analysis - gradient of the explained output; squared per
  feature by default, raw ("signed") on request
* guided_backprop      - gradients with negative upstream values clipped
  at ReLU units
* lrp                  - relevance decomposition of the output value,
  epsilon-stabilized or alpha/beta rule, with the relevance captured by
  bias terms reported as a separate sink

Each explanation also records the attribution arriving at every
message-passing layer's input blocks, so entity-level importance can be
aggregated across steps (edges that carry no informative input features
still show up through intermediate layers).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .gn import ForwardTrace, GnModel
from .graph import Graph
from .tape import (
    Array,
    BackwardMode,
    Gradient,
    Guided,
    LrpAlphaBeta,
    LrpEpsilon,
    is_lrp,
)


@dataclass(frozen=True)
class Naive:
    """All relevance of a pooled entry goes to the winning row."""


@dataclass(frozen=True)
class LpNorm:
    """Share relevance proportionally to |v|^p within the pool."""

    p: float = 2.0

    def __post_init__(self):
        if self.p < 1.0:
            raise ValueError(f"p must be >= 1, got {self.p}")


@dataclass(frozen=True)
class Search:
    """Share relevance uniformly among rows that, when forced as the
    pooled value, leave the explained output within a relative tolerance
    of the unforced one. The winner is always included."""

    delta_rel: float = 0.1
    proportional: bool = False  # share by candidate output closeness instead

    def __post_init__(self):
        if self.delta_rel <= 0.0:
            raise ValueError(f"delta_rel must be > 0, got {self.delta_rel}")


MaxPoolStrategy = Naive | LpNorm | Search


@dataclass
class LayerAttribution:
    """Attribution over one layer's input feature blocks."""

    node_attr: Array
    edge_attr: Array
    global_attr: Array | None


@dataclass
class Explanation:
    """Per-feature attribution for every entity of an explained graph."""

    method: str
    target: dict  # {"kind": "node", "index": int} | {"kind": "global"}
    node_attr: Array
    edge_attr: Array
    global_attr: Array | None
    bias_sink: float | None
    per_layer: list[LayerAttribution]
    output_value: float


def _target_seed(trace: ForwardTrace, target: dict, value: float) -> Array:
    out = trace.output
    seed = np.zeros_like(out)
    if target["kind"] == "node":
        idx = target["index"]
        if not (0 <= idx < out.shape[0]):
            raise DataError(f"target node {idx} out of range for {out.shape[0]} outputs")
        seed[idx, 0] = value
    elif target["kind"] == "global":
        if out.shape != (1, 1):
            raise DataError(f"global target needs a scalar head, output is {out.shape}")
        seed[0, 0] = value
    else:
        raise DataError(f"unknown target kind {target['kind']!r}")
    return seed


def _collect(model: GnModel, trace: ForwardTrace, result, transform=None) -> tuple:
    def grab(leaf_id):
        if leaf_id is None:
            return None
        a = result.adjoints[leaf_id]
        v = trace.tape.value(leaf_id)
        out = np.zeros_like(v) if a is None else a
        return transform(out) if transform else out

    node_attr = grab(trace.leaf_nodes)
    edge_attr = grab(trace.leaf_edges)
    global_attr = grab(trace.leaf_global)
    per_layer = [
        LayerAttribution(grab(li["nodes"]), grab(li["edges"]), grab(li["global"]))
        for li in trace.layer_inputs
    ]
    return node_attr, edge_attr, global_attr, per_layer


def sensitivity_analysis(
    model: GnModel, graph: Graph, target: dict, signed: bool = False
) -> Explanation:
    """Gradient saliency of the explained output w.r.t. every input
    feature: squared per entry by default, raw when signed=True."""
    trace = model.forward(graph)
    seed = _target_seed(trace, target, 1.0)
    res = trace.tape.backward(trace.out_id, seed, Gradient(), keep_all=True)
    tf = None if signed else lambda a: a * a
    node_attr, edge_attr, global_attr, per_layer = _collect(model, trace, res, tf)
    return Explanation(
        method="sa_signed" if signed else "sa",
        target=dict(target),
        node_attr=node_attr,
        edge_attr=edge_attr,
        global_attr=global_attr,
        bias_sink=None,
        per_layer=per_layer,
        output_value=float((trace.output * (seed != 0)).sum()),
    )


def guided_backprop(model: GnModel, graph: Graph, target: dict) -> Explanation:
    """Saliency from backpropagation that keeps only excitatory paths."""
    trace = model.forward(graph)
    seed = _target_seed(trace, target, 1.0)
    res = trace.tape.backward(trace.out_id, seed, Guided(), keep_all=True)
    node_attr, edge_attr, global_attr, per_layer = _collect(model, trace, res)
    return Explanation(
        method="gbp",
        target=dict(target),
        node_attr=node_attr,
        edge_attr=edge_attr,
        global_attr=global_attr,
        bias_sink=None,
        per_layer=per_layer,
        output_value=float((trace.output * (seed != 0)).sum()),
    )


def lrp(
    model: GnModel,
    graph: Graph,
    target: dict,
    rule: BackwardMode | None = None,
    max_pool: MaxPoolStrategy = Naive(),
) -> Explanation:
    """Decompose the explained output value into per-feature relevances.

    The backward pass is seeded with the output value itself, so the
    attributions (plus the bias sink) account for the prediction."""
    if rule is None:
        rule = LrpEpsilon()
    if not is_lrp(rule):
        raise ValueError(f"rule must be an LRP mode, got {rule}")
    trace = model.forward(graph)
    out = trace.output
    if target["kind"] == "node":
        value = float(out[target["index"], 0]) if 0 <= target["index"] < out.shape[0] else None
        if value is None:
            raise DataError(
                f"target node {target['index']} out of range for {out.shape[0]} outputs"
            )
    else:
        value = float(out[0, 0])
    seed = _target_seed(trace, target, value)

    def redistribute(inputs, winners, r_row, replay_handle):
        return max_pool_redistribute(inputs, winners, r_row, max_pool, replay_handle)

    res = trace.tape.backward(
        trace.out_id, seed, rule, max_pool_lrp=redistribute, keep_all=True
    )
    node_attr, edge_attr, global_attr, per_layer = _collect(model, trace, res)
    method = "lrp_eps" if isinstance(rule, LrpEpsilon) else "lrp_ab"
    return Explanation(
        method=method,
        target=dict(target),
        node_attr=node_attr,
        edge_attr=edge_attr,
        global_attr=global_attr,
        bias_sink=res.bias_sink,
        per_layer=per_layer,
        output_value=value,
    )


def explain(
    model: GnModel,
    graph: Graph,
    target: dict,
    method: str,
    signed: bool = False,
    rule: BackwardMode | None = None,
    max_pool: MaxPoolStrategy = Naive(),
) -> Explanation:
    """Dispatch by method name: 'sa', 'gbp' or 'lrp'."""
    if method == "sa":
        return sensitivity_analysis(model, graph, target, signed=signed)
    if method == "gbp":
        return guided_backprop(model, graph, target)
    if method == "lrp":
        return lrp(model, graph, target, rule=rule, max_pool=max_pool)
    raise DataError(f"unknown explanation method {method!r}")


# -- max pooling redistribution ---------------------------------------


def max_pool_redistribute(
    inputs: Array,
    winners,
    r: Array,
    strategy: MaxPoolStrategy,
    replay_handle=None,
) -> Array:
    """Split the relevance of one pooled row back over its input rows.

    inputs is [k, d]; winners[c] is the argmax row of column c; r is the
    [d] relevance of the pooled row. Column sums of the result equal r
    exactly: the winner absorbs the rounding residual.
    """
    k, d = inputs.shape
    out = np.zeros((k, d), dtype=np.float64)
    winners = np.asarray(winners, dtype=np.int64)
    if isinstance(strategy, Naive):
        for c in range(d):
            out[winners[c], c] = r[c]
        return out
    if isinstance(strategy, LpNorm):
        weights = np.abs(inputs) ** strategy.p
        totals = weights.sum(axis=0)
        for c in range(d):
            if totals[c] == 0.0:  # all-zero column: fall back to the winner
                out[winners[c], c] = r[c]
                continue
            shares = weights[:, c] / totals[c] * r[c]
            shares[winners[c]] += r[c] - shares.sum()
            out[:, c] = shares
        return out
    if isinstance(strategy, Search):
        if replay_handle is None:
            raise ValueError("Search redistribution needs a replay handle")
        f = replay_handle(None)
        tol = strategy.delta_rel * max(abs(f), 1e-8)
        fs = np.array([replay_handle(i) for i in range(k)])
        accepted = np.abs(fs - f) <= tol
        for c in range(d):
            members = accepted.copy()
            members[winners[c]] = True
            idx = np.flatnonzero(members)
            if strategy.proportional:
                closeness = 1.0 / (np.abs(fs[idx] - f) + tol * 1e-6 + 1e-300)
                shares = closeness / closeness.sum() * r[c]
            else:
                shares = np.full(idx.size, r[c] / idx.size)
            shares[np.searchsorted(idx, winners[c])] += r[c] - shares.sum()
            out[idx, c] = shares
        return out
    raise ValueError(f"unknown max-pool strategy {strategy!r}")


# -- aggregation over layers -------------------------------------------


def aggregate_layers(explanation: Explanation, reduce: str = "signed_sum") -> dict:
    """Collapse attributions to one score per node and per edge.

    Sums over every layer's input blocks and over feature dimensions;
    'signed_sum' keeps cancellation, 'abs_sum' ranks by magnitude.
    """
    if reduce not in ("signed_sum", "abs_sum"):
        raise ValueError(f"unknown reduction {reduce!r}")
    absolute = reduce == "abs_sum"

    def acc(total, a):
        if a is None:
            return total
        v = np.abs(a) if absolute else a
        s = v.sum(axis=1)
        return s if total is None else total + s

    nodes = edges = None
    glob = None
    layers = explanation.per_layer or [
        LayerAttribution(
            explanation.node_attr, explanation.edge_attr, explanation.global_attr
        )
    ]
    for la in layers:
        nodes = acc(nodes, la.node_attr)
        edges = acc(edges, la.edge_attr)
        if la.global_attr is not None:
            g = np.abs(la.global_attr) if absolute else la.global_attr
            glob = (glob or 0.0) + float(g.sum())
    return {"nodes": nodes, "edges": edges, "global": glob}


# -- serialization -----------------------------------------------------


def to_json_dict(e: Explanation) -> dict:
    return {
        "method": e.method,
        "target": e.target,
        "node_attr": e.node_attr.tolist(),
        "edge_attr": e.edge_attr.tolist(),
        "global_attr": None if e.global_attr is None else e.global_attr[0].tolist(),
        "bias_sink": e.bias_sink,
        "output_value": e.output_value,
        "per_layer": [
            {
                "node_attr": la.node_attr.tolist(),
                "edge_attr": la.edge_attr.tolist(),
                "global_attr": None if la.global_attr is None else la.global_attr[0].tolist(),
            }
            for la in e.per_layer
        ],
    }


def from_json_dict(d: dict) -> Explanation:
    try:
        def arr(x):
            return None if x is None else np.atleast_2d(np.asarray(x, dtype=np.float64))

        return Explanation(
            method=d["method"],
            target=d["target"],
            node_attr=arr(d["node_attr"]),
            edge_attr=arr(d["edge_attr"]),
            global_attr=arr(d["global_attr"]),
            bias_sink=d["bias_sink"],
            per_layer=[
                LayerAttribution(arr(x["node_attr"]), arr(x["edge_attr"]), arr(x["global_attr"]))
                for x in d["per_layer"]
            ],
            output_value=d["output_value"],
        )
    except KeyError as k:
        raise DataError(f"explanation JSON missing key {k}") from None


def loads(text: str) -> Explanation:
    try:
        return from_json_dict(json.loads(text))
    except json.JSONDecodeError as err:
        raise DataError(f"invalid explanation JSON: {err}") from None
