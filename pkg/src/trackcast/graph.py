"""Per-frame agent graph and message passing.

Existing tracks and current detections share one graph. Each node is encoded
from its own geometry and short history, then every GNN layer updates a node
from the summed messages of its radius neighbours::

    h'_i = relu(W_self h_i + W_out sum_j relu(W_msg [h_j ; e_ij] + b_msg) + b)

Weights are stored input-major (``x @ W``), i.e. transposed with respect to
the column-vector form above.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tape, Tensor
from .layers import init_mlp, mlp

TRACK = "track"
DETECTION = "detection"
EDGE_DIM = 5
POS_SCALE = 10.0
DIM_SCALE = 5.0


def wrap_angle(a):
    """Wrap to [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass
class AgentNode:
    node_id: int
    source: str                 # TRACK or DETECTION
    state: np.ndarray           # x, y, z, rotation_y, l, w, h
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    history: np.ndarray | None = None   # (n, 2) ground-plane (x, z), oldest first

    @property
    def position(self) -> np.ndarray:
        return self.state[:3]

    def padded_history(self, H: int) -> np.ndarray:
        hist = self.history
        if hist is None or len(hist) == 0:
            hist = self.state[[0, 2]][None, :]
        hist = np.asarray(hist, dtype=np.float64)[-H:]
        if len(hist) < H:
            hist = np.concatenate([np.repeat(hist[:1], H - len(hist), axis=0), hist])
        return hist


@dataclass
class AgentGraph:
    nodes: list[AgentNode]
    neighbors: list[list[int]]
    edge_src: np.ndarray        # directed edges j -> i, sorted by (dst, src)
    edge_dst: np.ndarray
    edge_attr: np.ndarray       # (E, 5): dx, dy, dz, relative yaw, distance (raw units)
    radius: float
    features: Tensor | None = None
    layer: int = 0

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        """Undirected edge count."""
        return len(self.edge_src) // 2

    def undirected_edges(self) -> set[tuple[int, int]]:
        return {(int(j), int(i)) for i, j in zip(self.edge_dst, self.edge_src) if j < i}


def node_input_width(H: int) -> int:
    return 3 + 2 + 3 + 3 + 2 * H + 1


def node_inputs(nodes: list[AgentNode], H: int) -> np.ndarray:
    """Normalised encoder inputs, one row per node.

    Positions are taken in the fixed scene frame (sensor origin) and divided
    by 10 m, so a node's inputs never depend on unrelated agents; the history
    is expressed relative to the node's own position.
    """
    if not nodes:
        return np.zeros((0, node_input_width(H)))
    pos = np.array([n.position for n in nodes], dtype=np.float64)
    rows = []
    for n, p in zip(nodes, pos):
        st = np.asarray(n.state, dtype=np.float64)
        hist = n.padded_history(H) - st[[0, 2]]
        row = np.concatenate([
            p / POS_SCALE,
            [math.sin(st[3]), math.cos(st[3])],
            st[4:7] / DIM_SCALE,
            np.asarray(n.velocity, dtype=np.float64),
            hist.reshape(-1) / POS_SCALE,
            [1.0 if n.source == DETECTION else 0.0],
        ])
        rows.append(row)
    out = np.array(rows)
    if not np.all(np.isfinite(out)):
        raise ad.NumericalError("non-finite node input")
    return out


def init_encoder(store: ParamStore, H: int, D: int) -> None:
    init_mlp(store, "enc", [node_input_width(H), D, D])


def encode_nodes(tape: Tape, store: ParamStore, nodes: list[AgentNode], H: int) -> Tensor:
    """Pre-interaction embedding: two tanh layers over each node's own inputs."""
    x = tape.constant(node_inputs(nodes, H))
    return mlp(tape, store, "enc", x, hidden_act="tanh", out_act="tanh")


def build_graph(nodes: list[AgentNode], radius_m: float) -> AgentGraph:
    """Undirected edges between nodes whose centres lie within ``radius_m``."""
    if not radius_m > 0:
        raise ValueError("radius must be positive")
    n = len(nodes)
    pos = np.array([nd.position for nd in nodes], dtype=np.float64).reshape(n, 3)
    yaw = np.array([nd.state[3] for nd in nodes], dtype=np.float64)
    diff = pos[None, :, :] - pos[:, None, :]          # [i, j] = p_j - p_i
    dist = np.sqrt((diff * diff).sum(axis=-1))
    adj = dist <= radius_m
    np.fill_diagonal(adj, False)
    dst, src = np.nonzero(adj)                        # row-major: sorted by (dst, src)
    neighbors = [src[dst == i].tolist() for i in range(n)]
    attrs = np.column_stack([diff[dst, src], wrap_angle(yaw[src] - yaw[dst]), dist[dst, src]])
    src, dst = src.astype(np.intp), dst.astype(np.intp)
    return AgentGraph(
        nodes=list(nodes),
        neighbors=neighbors,
        edge_src=src,
        edge_dst=dst,
        edge_attr=attrs.reshape(-1, EDGE_DIM),
        radius=radius_m,
    )


def edge_features(attr: np.ndarray) -> np.ndarray:
    scale = np.array([POS_SCALE, POS_SCALE, POS_SCALE, math.pi, POS_SCALE])
    return attr / scale


def init_gnn(store: ParamStore, D: int, D_msg: int, L: int) -> None:
    if L < 1:
        raise ValueError("at least one GNN layer is required")
    for k in range(L):
        store.add(f"gnn.{k}.W_self", (D, D), "glorot")
        store.add(f"gnn.{k}.W_msg", (D + EDGE_DIM, D_msg), "glorot")
        store.add(f"gnn.{k}.b_msg", (D_msg,), "zeros")
        store.add(f"gnn.{k}.W_out", (D_msg, D), "glorot", 0.5)
        store.add(f"gnn.{k}.b", (D,), "zeros")


def gnn_depth(store: ParamStore) -> int:
    k = 0
    while f"gnn.{k}.W_self" in store:
        k += 1
    return k


def message_pass(graph: AgentGraph, store: ParamStore, tape: Tape, layer: int | None = None) -> AgentGraph:
    """One round of neighbour aggregation; returns a graph with updated features."""
    k = graph.layer if layer is None else layer
    if k >= gnn_depth(store):
        raise ValueError(f"layer index {k} exceeds the {gnn_depth(store)} configured layers")
    h = graph.features
    w_self = tape.param(store, f"gnn.{k}.W_self")
    w_msg = tape.param(store, f"gnn.{k}.W_msg")
    b_msg = tape.param(store, f"gnn.{k}.b_msg")
    w_out = tape.param(store, f"gnn.{k}.W_out")
    bias = tape.param(store, f"gnn.{k}.b")
    D = w_self.shape[0]
    if h.shape[1] != D or w_msg.shape[0] != D + EDGE_DIM:
        raise ad.ShapeError(f"gnn layer {k}: feature width {h.shape[1]} vs weights {w_self.shape}, {w_msg.shape}")
    n = graph.num_nodes
    n_dir = len(graph.edge_src)
    if n_dir:
        msg_in = ad.concat([ad.take_rows(h, graph.edge_src), tape.constant(edge_features(graph.edge_attr))])
        msgs = ad.relu(ad.add_bias(msg_in @ w_msg, b_msg))
        incidence = np.zeros((n, n_dir))
        incidence[graph.edge_dst, np.arange(n_dir)] = 1.0
        agg = tape.constant(incidence) @ msgs
    else:
        agg = tape.constant(np.zeros((n, w_msg.shape[1])))
    out = ad.relu(ad.add_bias(h @ w_self + agg @ w_out, bias))
    return replace(graph, features=out, layer=k + 1)


def run_gnn(graph: AgentGraph, store: ParamStore, tape: Tape, H: int | None = None) -> AgentGraph:
    """Encode (if needed) and apply every configured layer."""
    if graph.features is None:
        if H is None:
            raise ValueError("H is required to encode a fresh graph")
        graph = replace(graph, features=encode_nodes(tape, store, graph.nodes, H), layer=0)
    if graph.layer != 0:
        raise ValueError("run_gnn expects a fresh graph (layer index 0)")
    for _ in range(gnn_depth(store)):
        graph = message_pass(graph, store, tape)
    return graph
