"""Session graphs: weighted directed item-transition graphs with anchor neighborhoods.

A session [a, b, c, b] becomes a graph whose nodes are the unique items in
first-occurrence order and whose edges count consecutive transitions.  On
top of that, every node gets two anchor lists: the first item (inbound),
the last item (outbound), and any repeated item (both), each weighted by
its breadth-first distance on the undirected, unweighted projection.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import posenc
from .posenc import EncodingScheme


class GraphError(ValueError):
    pass


@dataclass
class Session:
    """An ordered list of item ids, optionally timestamped and labeled."""

    items: list[int]
    timestamps: list[float] | None = None
    label: int | None = None

    def __post_init__(self):
        if len(self.items) < 1:
            raise GraphError("a session has at least one item")
        if self.timestamps is not None:
            if len(self.timestamps) != len(self.items):
                raise GraphError("timestamps must align with items")
            if any(b < a for a, b in zip(self.timestamps, self.timestamps[1:])):
                raise GraphError("timestamps must be nondecreasing")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def end_time(self) -> float:
        return self.timestamps[-1] if self.timestamps else 0.0


@dataclass
class SessionGraph:
    """Nodes in first-occurrence order, weighted edges, and anchor lists."""

    items: list[int]                      # node index -> item id
    edges: list[tuple[int, int, float]]   # (src node, dst node, weight)
    occurrences: dict[int, list[int]]     # node index -> session positions
    first_node: int
    last_node: int
    length: int                           # session length l
    anchor_in: list[list[tuple[int, float]]] | None = None
    anchor_out: list[list[tuple[int, float]]] | None = None

    @property
    def n(self) -> int:
        return len(self.items)

    @property
    def has_anchors(self) -> bool:
        return self.anchor_in is not None


def build_session_graph(session: Session) -> SessionGraph:
    """One node per unique item; one edge per distinct consecutive pair, weight = multiplicity."""
    node_of: dict[int, int] = {}
    items: list[int] = []
    occurrences: dict[int, list[int]] = {}
    for pos, item in enumerate(session.items):
        if item not in node_of:
            node_of[item] = len(items)
            items.append(item)
        occurrences.setdefault(node_of[item], []).append(pos)

    weights: dict[tuple[int, int], float] = {}
    for a, b in zip(session.items, session.items[1:]):
        key = (node_of[a], node_of[b])
        weights[key] = weights.get(key, 0.0) + 1.0

    return SessionGraph(
        items=items,
        edges=[(s, t, w) for (s, t), w in sorted(weights.items())],
        occurrences=occurrences,
        first_node=node_of[session.items[0]],
        last_node=node_of[session.items[-1]],
        length=len(session),
    )


def _bfs_distances(adjacency: list[set[int]], start: int) -> list[int]:
    dist = [-1] * len(adjacency)
    dist[start] = 0
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in adjacency[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def attach_anchors(graph: SessionGraph, weight_mode: str = "distance") -> SessionGraph:
    """Attach anchor neighborhoods in place and return the graph.

    Anchors of a node: the first item (inbound side), the last item
    (outbound side), and every item occurring at least twice (both sides).
    Anchor weight is the BFS distance on the undirected projection, or its
    reciprocal under ``weight_mode="inverse"``.  A node anchored to itself
    would get distance 0, which erases the message; it gets weight 1
    instead, acting as a self-loop.
    """
    if weight_mode not in ("distance", "inverse"):
        raise GraphError(f"weight_mode must be distance|inverse, got {weight_mode!r}")
    adjacency = [set() for _ in range(graph.n)]
    for s, t, _ in graph.edges:
        if s != t:
            adjacency[s].add(t)
            adjacency[t].add(s)

    repeated = [v for v in range(graph.n) if len(graph.occurrences[v]) >= 2]
    in_anchors = dict.fromkeys([graph.first_node] + repeated)
    out_anchors = dict.fromkeys([graph.last_node] + repeated)

    dist_from = {a: _bfs_distances(adjacency, a) for a in set(in_anchors) | set(out_anchors)}

    def weight(anchor: int, node: int) -> float:
        d = dist_from[anchor][node]
        assert d >= 0, "session graphs are connected by construction"
        if d == 0:
            return 1.0
        return 1.0 / d if weight_mode == "inverse" else float(d)

    graph.anchor_in = [[(a, weight(a, v)) for a in in_anchors] for v in range(graph.n)]
    graph.anchor_out = [[(a, weight(a, v)) for a in out_anchors] for v in range(graph.n)]
    return graph


def assemble_node_pe(graph: SessionGraph, scheme: EncodingScheme, l: int | None = None) -> np.ndarray:
    """Per-node positional encodings under the repeated-item rule.

    A node's first half comes from the encoding of its earliest occurrence
    and its second half from the encoding of its latest occurrence.  For
    nodes of unrepeated items the two coincide and the row is exactly
    ``encode(scheme, pos, l)``.  The same split is applied to non-dual
    kinds for uniformity.
    """
    if scheme.kind == posenc.LRPE:
        raise GraphError("LRPE provides attention biases, not per-node vectors")
    if l is None:
        l = graph.length
    earliest = [min(graph.occurrences[v]) for v in range(graph.n)]
    latest = [max(graph.occurrences[v]) for v in range(graph.n)]
    half = scheme.dim // 2
    first_rows = posenc.encode_matrix(scheme, l, positions=earliest)
    last_rows = posenc.encode_matrix(scheme, l, positions=latest)
    return np.concatenate([first_rows[:, :half], last_rows[:, half:]], axis=-1)


def edges_tsv(graph: SessionGraph) -> str:
    """Debug dump: src, dst, weight, and edge kind, one edge per line."""
    lines = []
    for s, t, w in graph.edges:
        lines.append(f"{graph.items[s]}\t{graph.items[t]}\t{w:g}\tnormal")
    if graph.has_anchors:
        for v in range(graph.n):
            for a, w in graph.anchor_in[v]:
                lines.append(f"{graph.items[a]}\t{graph.items[v]}\t{w:g}\tanchor_in")
            for a, w in graph.anchor_out[v]:
                lines.append(f"{graph.items[v]}\t{graph.items[a]}\t{w:g}\tanchor_out")
    return "\n".join(lines) + "\n"
