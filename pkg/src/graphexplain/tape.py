"""Dense tensor primitives recorded on a replayable tape.

A Tape is a topologically ordered list of primitive records. Forward
methods append records and return integer node ids; ``backward`` walks
the records in reverse under one of four attribution modes:

* Gradient      - plain vector-Jacobian products
* Guided        - gradients with negative upstream values clipped at ReLU
* LrpEpsilon    - relevance redistribution, epsilon-stabilized
* LrpAlphaBeta  - relevance redistribution, separate positive/negative shares

Values are 2-D float64 arrays throughout ([rows, features]); scalars
live in [1, 1] arrays. Tapes are single-use per forward pass and are
not shared between threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels as K
from .errors import DimensionError, GraphExplainError, NumericError

Array = np.ndarray

LEAF_KINDS = ("nodes", "edges", "global", "param", "const")


@dataclass(frozen=True)
class Gradient:
    """Standard reverse-mode gradients."""


@dataclass(frozen=True)
class Guided:
    """Gradients with negative upstream values zeroed at every ReLU."""


@dataclass(frozen=True)
class LrpEpsilon:
    """Epsilon-stabilized relevance rule.

    signed=False keeps only positive input contributions in both the
    numerator and the denominator (the default); signed=True is the
    conventional variant over raw contributions with a sign-matched
    stabilizer.
    """

    eps: float = 1e-16
    signed: bool = False

    def __post_init__(self):
        if not self.eps > 0.0:
            raise ValueError(f"eps must be > 0, got {self.eps}")


@dataclass(frozen=True)
class LrpAlphaBeta:
    """Relevance rule with separate positive (alpha) and negative (beta)
    redistribution, alpha + beta = 1."""

    alpha: float = 1.0
    beta: float = 0.0

    def __post_init__(self):
        if abs(self.alpha + self.beta - 1.0) > 1e-12:
            raise ValueError(
                f"alpha + beta must equal 1, got {self.alpha} + {self.beta}"
            )


BackwardMode = Gradient | Guided | LrpEpsilon | LrpAlphaBeta


def is_lrp(mode: BackwardMode) -> bool:
    return isinstance(mode, (LrpEpsilon, LrpAlphaBeta))


# Stabilizer for pooling/add relevance splits when the mode itself does
# not carry an epsilon (alpha/beta rule).
_DEFAULT_SPLIT_EPS = 1e-16


def _as_matrix(x) -> Array:
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise DimensionError(f"tape values must be 1-D or 2-D, got shape {a.shape}")
    return a


@dataclass
class Record:
    """One primitive operation: its kind, input ids, forward value and
    whatever the backward rules need."""

    kind: str
    inputs: tuple[int, ...]
    value: Array
    meta: dict = field(default_factory=dict)
    leaf_kind: str | None = None
    leaf_name: str = ""


class Tape:
    """Recorded DAG of primitive operations, ids in topological order."""

    def __init__(self):
        self.records: list[Record] = []

    def __len__(self) -> int:
        return len(self.records)

    def value(self, nid: int) -> Array:
        return self.records[nid].value

    def _push(self, rec: Record) -> int:
        self.records.append(rec)
        return len(self.records) - 1

    # -- leaves ------------------------------------------------------

    def leaf(self, value, kind: str = "const", name: str = "") -> int:
        if kind not in LEAF_KINDS:
            raise ValueError(f"unknown leaf kind {kind!r}")
        v = _as_matrix(value)
        if not np.all(np.isfinite(v)):
            raise NumericError(f"leaf {name!r} contains non-finite entries")
        return self._push(Record("leaf", (), v, leaf_kind=kind, leaf_name=name))

    # -- primitives ----------------------------------------------------

    def linear(self, x: int, w: int, b: int) -> int:
        xv, wv, bv = self.value(x), self.value(w), self.value(b)
        if xv.shape[1] != wv.shape[0] or wv.shape[1] != bv.shape[1]:
            raise DimensionError(
                f"linear: x {xv.shape} incompatible with w {wv.shape}, b {bv.shape}"
            )
        y = K.linear_forward(xv, wv, bv[0])
        return self._push(Record("linear", (x, w, b), y))

    def relu(self, x: int) -> int:
        return self._push(Record("relu", (x,), K.relu_forward(self.value(x))))

    def concat(self, ids: Sequence[int]) -> int:
        vals = [self.value(i) for i in ids]
        rows = {v.shape[0] for v in vals}
        if len(rows) != 1:
            raise DimensionError(f"concat: row counts differ: {[v.shape for v in vals]}")
        widths = [v.shape[1] for v in vals]
        y = np.concatenate(vals, axis=1)
        return self._push(Record("concat", tuple(ids), y, {"widths": widths}))

    def slice_cols(self, x: int, start: int, stop: int) -> int:
        xv = self.value(x)
        if not (0 <= start <= stop <= xv.shape[1]):
            raise DimensionError(
                f"split: slice [{start}:{stop}] out of range for width {xv.shape[1]}"
            )
        y = np.ascontiguousarray(xv[:, start:stop])
        return self._push(
            Record("split", (x,), y, {"start": start, "stop": stop, "width": xv.shape[1]})
        )

    def gather(self, x: int, idx) -> int:
        xv = self.value(x)
        idx = np.ascontiguousarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= xv.shape[0]):
            raise IndexError(
                f"gather: index out of range [0, {xv.shape[0]}) in {idx}"
            )
        return self._push(Record("gather", (x,), xv[idx], {"idx": idx, "n_rows": xv.shape[0]}))

    def segment_reduce(self, x: int, segment_ids, n_segments: int, mode: str) -> int:
        if mode not in ("sum", "mean", "max"):
            raise ValueError(f"unknown segment reduction {mode!r}")
        xv = self.value(x)
        ids = np.ascontiguousarray(segment_ids, dtype=np.int64)
        if ids.shape[0] != xv.shape[0]:
            raise DimensionError(
                f"segment_reduce: {xv.shape[0]} rows vs {ids.shape[0]} segment ids"
            )
        if ids.size and (ids.min() < 0 or ids.max() >= n_segments):
            raise IndexError(
                f"segment id out of range [0, {n_segments}): {ids}"
            )
        meta: dict = {"ids": ids, "n_seg": n_segments}
        if mode == "sum":
            y = K.segment_sum(xv, ids, n_segments)
        elif mode == "mean":
            y = K.segment_mean(xv, ids, n_segments)
            meta["counts"] = K.segment_counts(ids, n_segments)
        else:
            y, argmax = K.segment_max(xv, ids, n_segments)
            meta["argmax"] = argmax
        return self._push(Record(f"segment_{mode}", (x,), y, meta))

    def add(self, a: int, b: int) -> int:
        av, bv = self.value(a), self.value(b)
        if av.shape != bv.shape:
            raise DimensionError(f"add: shapes differ {av.shape} vs {bv.shape}")
        return self._push(Record("elementwise_add", (a, b), av + bv))

    def dropout(self, x: int, mask_scaled: Array) -> int:
        """Multiply by a precomputed keep-mask already scaled by 1/keep.

        Training-time only; never recorded during explanation passes.
        """
        xv = self.value(x)
        if mask_scaled.shape != xv.shape:
            raise DimensionError(
                f"dropout: mask {mask_scaled.shape} vs value {xv.shape}"
            )
        return self._push(Record("dropout", (x,), xv * mask_scaled, {"mask": mask_scaled}))

    # -- replay ------------------------------------------------------

    def replay(self, overrides: dict[int, Array], upto: int | None = None) -> list[Array]:
        """Recompute values with some node values forced.

        Used by the search-based max-pool redistribution to answer
        "what would the output be if this pooled row were the winner".
        The tape itself is not mutated.
        """
        lo = min(overrides)
        hi = len(self.records) - 1 if upto is None else upto
        values: list[Array] = [r.value for r in self.records]
        for nid in range(lo, hi + 1):
            rec = self.records[nid]
            if nid in overrides:
                values[nid] = overrides[nid]
                continue
            values[nid] = _reeval(rec, [values[i] for i in rec.inputs])
        return values

    # -- backward ------------------------------------------------------

    def backward(
        self,
        out_id: int,
        seed: Array,
        mode: BackwardMode,
        max_pool_lrp: Callable | None = None,
        keep_all: bool = False,
    ) -> "BackwardResult":
        """Propagate the seed from ``out_id`` to every leaf.

        max_pool_lrp(inputs, winners, r_row, replay_handle) -> [k, d]
        handles segment_max redistribution under LRP modes; when None,
        relevance routes to the argmax rows.

        keep_all retains the adjoints of interior nodes (used for the
        per-layer breakdown of explanations).
        """
        seed = _as_matrix(seed)
        out_val = self.value(out_id)
        if seed.shape != out_val.shape:
            raise DimensionError(
                f"seed shape {seed.shape} does not match output {out_val.shape}"
            )
        adj: list[Array | None] = [None] * len(self.records)
        adj[out_id] = seed.copy()
        sink = 0.0
        lrp = is_lrp(mode)
        guided = isinstance(mode, Guided)
        split_eps = mode.eps if isinstance(mode, LrpEpsilon) else _DEFAULT_SPLIT_EPS
        # Readout of the explained scalar, for max-pool search replays:
        # the sum of output entries under the seed's support.
        seed_mask = seed != 0.0
        baseline = float(out_val[seed_mask].sum())

        for nid in range(out_id, -1, -1):
            g = adj[nid]
            if g is None:
                continue
            rec = self.records[nid]
            if rec.kind == "leaf":
                continue
            if lrp and not np.all(np.isfinite(g)):
                raise NumericError(
                    f"non-finite relevance at tape node {nid} ({rec.kind})"
                )

            if rec.kind == "linear":
                x, w, b = rec.inputs
                xv, wv, bv = self.value(x), self.value(w), self.value(b)
                if isinstance(mode, LrpEpsilon):
                    gx, s = K.linear_lrp_eps(xv, wv, bv[0], g, mode.eps, mode.signed)
                    sink += s
                    _acc(adj, x, gx)
                elif isinstance(mode, LrpAlphaBeta):
                    gx, s = K.linear_lrp_ab(xv, wv, bv[0], g, mode.alpha, mode.beta)
                    sink += s
                    _acc(adj, x, gx)
                else:
                    gx, gw, gb = K.linear_vjp(xv, wv, g)
                    _acc(adj, x, gx)
                    _acc(adj, w, gw)
                    _acc(adj, b, gb.reshape(1, -1))
            elif rec.kind == "relu":
                (x,) = rec.inputs
                if lrp:
                    _acc(adj, x, g)
                else:
                    _acc(adj, x, K.relu_vjp(self.value(x), g, guided))
            elif rec.kind == "concat":
                off = 0
                for i, wd in zip(rec.inputs, rec.meta["widths"]):
                    _acc(adj, i, np.ascontiguousarray(g[:, off : off + wd]))
                    off += wd
            elif rec.kind == "split":
                (x,) = rec.inputs
                gx = np.zeros((g.shape[0], rec.meta["width"]), dtype=np.float64)
                gx[:, rec.meta["start"] : rec.meta["stop"]] = g
                _acc(adj, x, gx)
            elif rec.kind == "gather":
                (x,) = rec.inputs
                _acc(adj, x, K.scatter_add_rows(g, rec.meta["idx"], rec.meta["n_rows"]))
            elif rec.kind == "segment_sum":
                (x,) = rec.inputs
                if lrp:
                    gx = K.segment_prop_lrp(
                        self.value(x), rec.meta["ids"], rec.meta["n_seg"], g, split_eps
                    )
                else:
                    gx = K.segment_broadcast(g, rec.meta["ids"])
                _acc(adj, x, gx)
            elif rec.kind == "segment_mean":
                (x,) = rec.inputs
                if lrp:
                    gx = K.segment_prop_lrp(
                        self.value(x), rec.meta["ids"], rec.meta["n_seg"], g, split_eps
                    )
                else:
                    gx = K.segment_broadcast_mean(g, rec.meta["ids"], rec.meta["counts"])
                _acc(adj, x, gx)
            elif rec.kind == "segment_max":
                (x,) = rec.inputs
                xv = self.value(x)
                if lrp and max_pool_lrp is not None:
                    gx = self._segment_max_lrp(
                        nid, g, max_pool_lrp, out_id, seed_mask, baseline
                    )
                else:
                    gx = K.segment_max_route(g, rec.meta["ids"], rec.meta["argmax"], xv.shape[0])
                _acc(adj, x, gx)
            elif rec.kind == "elementwise_add":
                a, b = rec.inputs
                if lrp:
                    ga, gb = K.proportional_pair(self.value(a), self.value(b), g, split_eps)
                else:
                    ga, gb = g, g
                _acc(adj, a, ga)
                _acc(adj, b, gb)
            elif rec.kind == "dropout":
                (x,) = rec.inputs
                _acc(adj, x, g if lrp else g * rec.meta["mask"])
            else:
                raise GraphExplainError(f"unknown primitive {rec.kind!r} on tape")
            if not keep_all:
                adj[nid] = None

        leaves = {
            nid: adj[nid]
            for nid, rec in enumerate(self.records)
            if rec.kind == "leaf" and adj[nid] is not None
        }
        return BackwardResult(leaves, sink, adj if keep_all else None)

    def _segment_max_lrp(
        self,
        nid: int,
        r_out: Array,
        redistribute: Callable,
        out_id: int,
        seed_mask: Array,
        baseline: float,
    ) -> Array:
        """Per-segment relevance redistribution for max pooling.

        The replay handle re-runs the tail of the tape with a candidate
        member row forced as the pooled value and returns the recomputed
        explained scalar; calling it with None returns the unforced one.
        """
        rec = self.records[nid]
        ids, argmax = rec.meta["ids"], rec.meta["argmax"]
        xv = self.value(rec.inputs[0])
        gx = np.zeros_like(xv)
        for s in range(rec.value.shape[0]):
            r_row = r_out[s]
            if not np.any(r_row):
                continue
            members = np.flatnonzero(ids == s)
            if members.size == 0:
                continue
            # winners as positions within the member list
            winners = np.searchsorted(members, argmax[s])

            def replay_handle(candidate: int | None, _s=s, _members=members) -> float:
                if candidate is None:
                    return baseline
                forced = rec.value.copy()
                forced[_s] = xv[_members[candidate]]
                values = self.replay({nid: forced}, upto=out_id)
                return float(values[out_id][seed_mask].sum())

            shares = redistribute(xv[members], winners, r_row, replay_handle)
            gx[members] += shares
        return gx


def _reeval(rec: Record, ins: list[Array]) -> Array:
    if rec.kind == "leaf":
        return rec.value
    if rec.kind == "linear":
        return K.linear_forward(ins[0], ins[1], ins[2][0])
    if rec.kind == "relu":
        return K.relu_forward(ins[0])
    if rec.kind == "concat":
        return np.concatenate(ins, axis=1)
    if rec.kind == "split":
        return np.ascontiguousarray(ins[0][:, rec.meta["start"] : rec.meta["stop"]])
    if rec.kind == "gather":
        return ins[0][rec.meta["idx"]]
    if rec.kind == "segment_sum":
        return K.segment_sum(ins[0], rec.meta["ids"], rec.meta["n_seg"])
    if rec.kind == "segment_mean":
        return K.segment_mean(ins[0], rec.meta["ids"], rec.meta["n_seg"])
    if rec.kind == "segment_max":
        return K.segment_max(ins[0], rec.meta["ids"], rec.meta["n_seg"])[0]
    if rec.kind == "elementwise_add":
        return ins[0] + ins[1]
    if rec.kind == "dropout":
        return ins[0] * rec.meta["mask"]
    raise GraphExplainError(f"unknown primitive {rec.kind!r} on tape")


def _acc(adj: list, nid: int, g: Array) -> None:
    if adj[nid] is None:
        adj[nid] = g.copy() if g.base is not None else g
    else:
        adj[nid] = adj[nid] + g


@dataclass
class BackwardResult:
    """Per-leaf attributions plus the relevance absorbed by biases."""

    leaves: dict[int, Array]
    bias_sink: float
    adjoints: list[Array | None] | None = None


def finite_difference_gradient(f: Callable[[Array], float], x: Array, h: float = 1e-5) -> Array:
    """Central-difference gradient of a scalar function, the test oracle
    for Gradient-mode backward."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g
