"""Hand skeleton graph with augmented edges and partitioned adjacency.

Vertex layout: 0 is the wrist; fingers occupy consecutive runs of four
(thumb 1-4, index 5-8, middle 9-12, ring 13-16, pinky 17-20) ordered from
base to tip, so vertex ``4 * k`` is the tip of finger ``k``.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

NUM_VERTICES = 21
WRIST = 0
FINGERS = {"thumb": 1, "index": 2, "middle": 3, "ring": 4, "pinky": 5}


def _tip(k):
    return 4 * k


def _base(k):
    return 4 * k - 3


@dataclass(frozen=True)
class HandGraph:
    vertex_count: int
    natural_edges: frozenset
    augmented_edges: dict = field(hash=False)
    parent_of: tuple = ()
    handedness: str = "right"

    @property
    def all_edges(self):
        edges = set(self.natural_edges)
        for group in self.augmented_edges.values():
            edges |= group
        return frozenset(edges)

    def hop_distance(self):
        """Hop count from the wrist over natural edges, per vertex."""
        nbrs = {v: [] for v in range(self.vertex_count)}
        for a, b in self.natural_edges:
            nbrs[a].append(b)
            nbrs[b].append(a)
        dist = [-1] * self.vertex_count
        dist[WRIST] = 0
        queue = deque([WRIST])
        while queue:
            u = queue.popleft()
            for w in nbrs[u]:
                if dist[w] < 0:
                    dist[w] = dist[u] + 1
                    queue.append(w)
        return dist


def _edge(a, b):
    return (min(a, b), max(a, b))


def build_hand_graph(handedness="right") -> HandGraph:
    """Build the 21-vertex hand graph.

    Left hands share the right-hand topology; mirroring is handled on
    coordinates, not on the graph.
    """
    if handedness not in ("right", "left"):
        raise ValueError(f"handedness must be 'right' or 'left', got {handedness!r}")

    parent = [0] * NUM_VERTICES
    natural = set()
    for k in range(1, 6):
        chain = [WRIST] + list(range(_base(k), _tip(k) + 1))
        for a, b in zip(chain, chain[1:]):
            natural.add(_edge(a, b))
            parent[b] = a

    # fingertip -> base of the next finger; the pinky has no neighbour
    type1 = {_edge(_tip(k), _base(k + 1)) for k in range(1, 5)}
    # fingertip -> middle joint of the same finger
    type2 = {_edge(_tip(k), _tip(k) - 2) for k in range(1, 6)}
    # thumb tip -> index fingertip
    type3 = {_edge(_tip(1), _tip(2))}

    return HandGraph(
        vertex_count=NUM_VERTICES,
        natural_edges=frozenset(natural),
        augmented_edges={"type1": frozenset(type1), "type2": frozenset(type2),
                         "type3": frozenset(type3)},
        parent_of=tuple(parent),
        handedness=handedness,
    )


@dataclass(frozen=True)
class PartitionedAdjacency:
    matrices: np.ndarray  # K_v x V x V, row-normalized
    strategy: str

    @property
    def num_subsets(self):
        return self.matrices.shape[0]


STRATEGIES = ("spatial", "uniform")


def _row_normalize(a):
    deg = a.sum(axis=1, keepdims=True)
    out = np.zeros_like(a)
    np.divide(a, deg, out=out, where=deg > 0)
    return out


def partition_adjacency(graph: HandGraph, strategy="spatial") -> PartitionedAdjacency:
    """Split the adjacency (with self-loops) into normalized subsets.

    ``spatial``: self-loops, centripetal neighbours (closer to the wrist),
    and centrifugal neighbours (farther or equidistant). Entry ``[v, w]``
    means vertex ``v`` gathers from ``w``. ``uniform`` keeps one subset.
    """
    v = graph.vertex_count
    if strategy == "uniform":
        a = np.eye(v)
        for i, j in graph.all_edges:
            a[i, j] = a[j, i] = 1.0
        return PartitionedAdjacency(_row_normalize(a)[None], strategy)
    if strategy != "spatial":
        raise ValueError(f"unknown partition strategy {strategy!r}; expected one of {STRATEGIES}")

    dist = graph.hop_distance()
    self_loops = np.eye(v)
    inward = np.zeros((v, v))
    outward = np.zeros((v, v))
    for i, j in graph.all_edges:
        for src, nbr in ((i, j), (j, i)):
            if dist[nbr] < dist[src]:
                inward[src, nbr] = 1.0
            else:
                outward[src, nbr] = 1.0
    mats = np.stack([_row_normalize(m) for m in (self_loops, inward, outward)])
    return PartitionedAdjacency(mats, strategy)


def graph_to_json(graph: HandGraph, adjacency: PartitionedAdjacency | None = None) -> str:
    doc = {
        "vertices": list(range(graph.vertex_count)),
        "handedness": graph.handedness,
        "parent_of": list(graph.parent_of),
        "natural_edges": sorted(list(e) for e in graph.natural_edges),
        "augmented_edges": {k: sorted(list(e) for e in s)
                            for k, s in sorted(graph.augmented_edges.items())},
    }
    if adjacency is not None:
        doc["partition"] = {"strategy": adjacency.strategy,
                            "matrices": adjacency.matrices.tolist()}
    return json.dumps(doc, indent=2)
