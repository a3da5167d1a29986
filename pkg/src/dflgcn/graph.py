"""Skeleton graph with spatial-configuration partitioning and the matching
graph-convolution layer.

Every joint's 1-hop neighbourhood (itself plus its bone neighbours) is split
into three subsets by hop distance to the centre joint: the joint itself
(root), neighbours closer to the centre or equally far (centripetal), and
neighbours farther away (centrifugal). Each subset gets its own weight
matrix and is averaged over its own cardinality.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .nn import Layer, ShapeError, as_tensor, check_finite, glorot_uniform

ROOT, CENTRIPETAL, CENTRIFUGAL = 0, 1, 2
PARTITION_NAMES = ("root", "centripetal", "centrifugal")


class TopologyError(ValueError):
    pass


def hop_distances(adjacency: np.ndarray, source: int) -> np.ndarray:
    v = adjacency.shape[0]
    dist = np.full(v, -1, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    while queue:
        i = queue.popleft()
        for j in np.flatnonzero(adjacency[i]):
            if dist[j] < 0:
                dist[j] = dist[i] + 1
                queue.append(j)
    return dist


@dataclass(frozen=True)
class SkeletonGraph:
    adjacency: np.ndarray    # V x V, symmetric bone edges, no self-loops
    partitions: np.ndarray   # 3 x V x V 0/1 masks: root, centripetal, centrifugal
    normalized: np.ndarray   # 3 x V x V, row i of subset k scaled by 1 / Z_i(k)
    center: int

    @property
    def num_joints(self) -> int:
        return self.adjacency.shape[0]


def normalize_rows(mask: np.ndarray) -> np.ndarray:
    counts = mask.sum(axis=-1, keepdims=True)
    return np.divide(mask, counts, out=np.zeros_like(mask, dtype=np.float64), where=counts > 0)


def build_graph_from_edges(num_joints: int, edges, center: int) -> SkeletonGraph:
    adj = np.zeros((num_joints, num_joints))
    for i, j in edges:
        if i != j:
            adj[i, j] = adj[j, i] = 1.0
    dist = hop_distances(adj, center)
    if np.any(dist < 0):
        missing = np.flatnonzero(dist < 0).tolist()
        raise TopologyError(f"skeleton graph is disconnected; unreachable joints {missing}")
    parts = np.zeros((3, num_joints, num_joints))
    parts[ROOT] = np.eye(num_joints)
    # neighbour j of i: nearer or tied -> centripetal, farther -> centrifugal
    farther = dist[None, :] > dist[:, None]
    parts[CENTRIPETAL] = adj * ~farther
    parts[CENTRIFUGAL] = adj * farther
    normalized = np.stack([normalize_rows(p) for p in parts])
    for a in (adj, parts, normalized):
        a.setflags(write=False)
    return SkeletonGraph(adj, parts, normalized, center)


def build_graph(topology) -> SkeletonGraph:
    edges = [(j, p) for j, p in enumerate(topology.parent) if p >= 0]
    return build_graph_from_edges(topology.num_joints, edges, topology.center)


def graph_conv_apply(graph: SkeletonGraph, f_in: np.ndarray, weights) -> np.ndarray:
    """Single-frame graph convolution: ``sum_k W_k^T f_in A_k^T`` for ``f_in[C, V]``."""
    f_in = as_tensor(f_in)
    weights = [as_tensor(w) for w in weights]
    if len(weights) != 3:
        raise ShapeError(f"expected 3 partition weights, got {len(weights)}")
    c, v = f_in.shape
    if v != graph.num_joints:
        raise ShapeError(f"feature has {v} joints, graph has {graph.num_joints}")
    for w in weights:
        if w.ndim != 2 or w.shape[0] != c:
            raise ShapeError(f"weight shape {w.shape} incompatible with {c} input channels")
    return sum(w.T @ f_in @ a.T for w, a in zip(weights, graph.normalized))


class GraphConv(Layer):
    """Spatial graph convolution applied to every frame of ``[B, C, T, V]``.

    ``weight`` has shape ``[3, C_in, C_out]``, one matrix per partition subset.
    """

    def __init__(self, graph: SkeletonGraph, c_in: int, c_out: int,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.graph = graph
        self.c_in, self.c_out = c_in, c_out
        self.add_param("weight", glorot_uniform(rng, (3, c_in, c_out), c_in, c_out))

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.c_in or x.shape[3] != self.graph.num_joints:
            raise ShapeError(f"GraphConv({self.c_in}->{self.c_out}, V={self.graph.num_joints})"
                             f" got input {x.shape}")
        b, c, t, v = x.shape
        # xa[b, k, c, t, i] = sum_j x[b, c, t, j] * A_k[i, j]
        xa = np.stack([x @ a.T for a in self.graph.normalized], axis=1)
        xa = xa.reshape(b, 3 * c, t * v)
        w = self.params["weight"].reshape(3 * c, self.c_out)
        y = np.matmul(w.T, xa).reshape(b, self.c_out, t, v)
        self._cache = (xa, x.shape)
        return check_finite(y, "GraphConv")

    def backward(self, dy):
        xa, (b, c, t, v) = self._need_cache()
        dy2 = dy.reshape(b, self.c_out, t * v)
        w = self.params["weight"].reshape(3 * c, self.c_out)
        gw = xa.transpose(1, 0, 2).reshape(3 * c, -1) @ dy2.transpose(1, 0, 2).reshape(self.c_out, -1).T
        self.grads["weight"] += gw.reshape(3, c, self.c_out)
        dxa = np.matmul(w, dy2).reshape(b, 3, c, t, v)
        dx = np.zeros((b, c, t, v))
        for k, a in enumerate(self.graph.normalized):
            dx += dxa[:, k] @ a
        return dx
