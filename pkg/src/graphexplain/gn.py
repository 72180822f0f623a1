"""Message-passing layers over Graph values.

One layer applies three update MLPs with pooling between them:

    e'_k = edge_mlp(e_k, v_receiver, v_sender, u)
    v'_i = node_mlp(pool_{k: receiver=i}(e'_k), v_i, u)
    u'   = global_mlp(pool_k(e'_k), pool_i(v'_i), u)        (optional)

Incidence is directed: a node aggregates the edges that point at it.
Every MLP is linear -> ReLU -> linear. The model head is either a
per-node linear readout (one logit per node) or a linear readout of the
final global vector (one scalar per graph). All operations are recorded
on a Tape so any backward mode can replay them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .graph import Graph
from .tape import Array, Tape

POOLS = ("sum", "mean", "max")


@dataclass
class MlpSpec:
    in_dim: int
    hidden: int
    out_dim: int

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "w1": (self.in_dim, self.hidden),
            "b1": (self.hidden,),
            "w2": (self.hidden, self.out_dim),
            "b2": (self.out_dim,),
        }


@dataclass
class GnLayerSpec:
    edge_mlp: MlpSpec
    node_mlp: MlpSpec
    global_mlp: MlpSpec | None
    pool_ev: str = "max"
    pool_eu: str = "mean"
    pool_vu: str = "mean"


@dataclass
class GnSpec:
    """Architecture description, sufficient to rebuild the model."""

    node_dim: int
    edge_dim: int
    global_dim: int  # 0 = graph carries no global block
    hidden: int
    n_layers: int
    head: str  # "node" | "global"
    pool_ev: str = "max"
    pool_eu: str = "mean"
    pool_vu: str = "mean"
    use_global: bool = False

    def __post_init__(self):
        if self.head not in ("node", "global"):
            raise ValueError(f"unknown head {self.head!r}")
        for p in (self.pool_ev, self.pool_eu, self.pool_vu):
            if p not in POOLS:
                raise ValueError(f"unknown pooling {p!r}")
        if self.head == "global" and not self.use_global:
            raise ValueError("a global head requires use_global=True")

    def layer_specs(self) -> list[GnLayerSpec]:
        specs = []
        d_v, d_e, d_u = self.node_dim, self.edge_dim, self.global_dim
        h = self.hidden
        for _ in range(self.n_layers):
            u_in = d_u if self.use_global else 0
            edge = MlpSpec(d_e + 2 * d_v + u_in, h, h)
            node = MlpSpec(h + d_v + u_in, h, h)
            glob = MlpSpec(h + h + u_in, h, h) if self.use_global else None
            specs.append(
                GnLayerSpec(edge, node, glob, self.pool_ev, self.pool_eu, self.pool_vu)
            )
            d_v = d_e = h
            d_u = h if self.use_global else 0
        return specs

    def head_in_dim(self) -> int:
        return self.hidden if self.n_layers > 0 else (
            self.node_dim if self.head == "node" else self.global_dim
        )


def glorot_uniform(shape: tuple[int, ...], rng: np.random.Generator) -> Array:
    if len(shape) == 1:
        return np.zeros(shape, dtype=np.float64)
    fan_in, fan_out = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class ForwardTrace:
    """Everything an explanation needs to interpret a finished tape."""

    tape: Tape
    out_id: int
    leaf_nodes: int  # tape id of the node-feature leaf
    leaf_edges: int
    leaf_global: int | None
    layer_inputs: list[dict]  # per layer: {"nodes": id, "edges": id, "global": id|None}
    param_leaf_ids: dict[str, int]

    @property
    def output(self) -> Array:
        return self.tape.value(self.out_id)


class GnModel:
    """A stack of message-passing layers plus a readout head.

    Parameters are plain float64 arrays in a flat, ordered dict keyed by
    dotted names ("layers.0.edge_mlp.w1", "head.w", ...). The model is
    immutable during a forward pass; training mutates ``params`` between
    steps only.
    """

    def __init__(self, spec: GnSpec, params: dict[str, Array]):
        self.spec = spec
        self.params = params

    # -- construction --------------------------------------------------

    @classmethod
    def build(cls, spec: GnSpec, rng: np.random.Generator) -> "GnModel":
        params: dict[str, Array] = {}
        for li, layer in enumerate(spec.layer_specs()):
            for mlp_name, mlp in (
                ("edge_mlp", layer.edge_mlp),
                ("node_mlp", layer.node_mlp),
                ("global_mlp", layer.global_mlp),
            ):
                if mlp is None:
                    continue
                for pname, shape in mlp.param_shapes().items():
                    params[f"layers.{li}.{mlp_name}.{pname}"] = glorot_uniform(shape, rng)
        d = spec.head_in_dim()
        params["head.w"] = glorot_uniform((d, 1), rng)
        params["head.b"] = np.zeros((1,), dtype=np.float64)
        return cls(spec, params)

    # -- forward ---------------------------------------------------------

    def forward(
        self,
        graph: Graph,
        train: bool = False,
        dropout: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> ForwardTrace:
        """Run the model on a graph, recording every primitive.

        Dropout (inverted scaling, applied at the output of every linear
        map) is active only when train=True and dropout > 0; explanation
        passes always run with it off.
        """
        spec = self.spec
        if graph.node_features.shape[1] != spec.node_dim:
            raise DimensionError(
                f"graph node width {graph.node_features.shape[1]} != model {spec.node_dim}"
            )
        if graph.n_edges and graph.edge_features.shape[1] != spec.edge_dim:
            raise DimensionError(
                f"graph edge width {graph.edge_features.shape[1]} != model {spec.edge_dim}"
            )
        use_drop = train and dropout > 0.0
        if use_drop and rng is None:
            raise ValueError("dropout requires an rng")

        tape = Tape()
        param_ids = {name: tape.leaf(v, "param", name) for name, v in self.params.items()}

        n_v, n_e = graph.n_nodes, graph.n_edges
        v_id = tape.leaf(graph.node_features, "nodes", "graph.nodes")
        ef = graph.edge_features
        if ef.shape[1] == 0 and spec.edge_dim > 0:
            ef = np.zeros((0, spec.edge_dim))
        e_id = tape.leaf(ef, "edges", "graph.edges")
        u_id = None
        if spec.use_global:
            gf = graph.global_features
            if gf is None:
                raise DimensionError("model expects a global block, graph has none")
            if gf.shape[1] != spec.global_dim:
                raise DimensionError(
                    f"graph global width {gf.shape[1]} != model {spec.global_dim}"
                )
            u_id = tape.leaf(gf, "global", "graph.global")
        leaf_v, leaf_e, leaf_u = v_id, e_id, u_id

        def mlp(prefix: str, x: int) -> int:
            h = tape.linear(x, param_ids[f"{prefix}.w1"], param_ids[f"{prefix}.b1"])
            h = self._maybe_drop(tape, h, use_drop, dropout, rng)
            h = tape.relu(h)
            y = tape.linear(h, param_ids[f"{prefix}.w2"], param_ids[f"{prefix}.b2"])
            return self._maybe_drop(tape, y, use_drop, dropout, rng)

        layer_inputs: list[dict] = []
        for li in range(spec.n_layers):
            layer_inputs.append({"nodes": v_id, "edges": e_id, "global": u_id})
            prefix = f"layers.{li}"
            # edge update
            parts = [e_id, tape.gather(v_id, graph.receivers), tape.gather(v_id, graph.senders)]
            if u_id is not None:
                parts.append(tape.gather(u_id, np.zeros(n_e, dtype=np.int64)))
            e_new = mlp(f"{prefix}.edge_mlp", tape.concat(parts))
            # node update
            pooled = tape.segment_reduce(e_new, graph.receivers, n_v, spec.pool_ev)
            parts = [pooled, v_id]
            if u_id is not None:
                parts.append(tape.gather(u_id, np.zeros(n_v, dtype=np.int64)))
            v_new = mlp(f"{prefix}.node_mlp", tape.concat(parts))
            # global update
            u_new = u_id
            if spec.use_global:
                e_glob = tape.segment_reduce(
                    e_new, np.zeros(n_e, dtype=np.int64), 1, spec.pool_eu
                )
                v_glob = tape.segment_reduce(
                    v_new, np.zeros(n_v, dtype=np.int64), 1, spec.pool_vu
                )
                u_new = mlp(f"{prefix}.global_mlp", tape.concat([e_glob, v_glob, u_id]))
            v_id, e_id, u_id = v_new, e_new, u_new

        head_src = v_id if spec.head == "node" else u_id
        assert head_src is not None
        out_id = tape.linear(head_src, param_ids["head.w"], param_ids["head.b"])

        return ForwardTrace(
            tape=tape,
            out_id=out_id,
            leaf_nodes=leaf_v,
            leaf_edges=leaf_e,
            leaf_global=leaf_u,
            layer_inputs=layer_inputs,
            param_leaf_ids=param_ids,
        )

    @staticmethod
    def _maybe_drop(tape: Tape, x: int, on: bool, rate: float, rng) -> int:
        if not on:
            return x
        keep = 1.0 - rate
        mask = (rng.random(tape.value(x).shape) < keep) / keep
        return tape.dropout(x, mask)

    # -- prediction convenience ----------------------------------------

    def predict(self, graph: Graph) -> Array:
        """Eval-mode forward; returns node logits [n_v] or a scalar."""
        trace = self.forward(graph)
        out = trace.output
        return out[0, 0] if self.spec.head == "global" else out[:, 0]
