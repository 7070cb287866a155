"""Fixed-size tensor extraction from graphs.

Every graph becomes a ``w x k x (d+1)`` tensor: ``w`` anchor nodes are picked
by a ranking procedure, each anchor gathers its ``k`` hop-closest neighbours
into a receptive field with a deterministic internal order, and the member
labels are one-hot encoded (the extra channel encodes padding).
"""

from __future__ import annotations

import multiprocessing
from dataclasses import dataclass

import numpy as np

from .data import PAD, Graph, GraphDataset, one_hot_encode
from .labelling import NodeRanking, Procedure, canonical_order, rank_nodes, wl_refine


@dataclass
class ReceptiveField:
    """Ordered members of one anchor's neighbourhood, padded to exactly k."""

    anchor: int
    members: tuple

    def __post_init__(self):
        real = [m for m in self.members if m != PAD]
        if len(set(real)) != len(real):
            raise ValueError("receptive field members must be distinct")
        if self.anchor != PAD and (not self.members or self.members[0] != self.anchor):
            raise ValueError("a real anchor must occupy position 0")


@dataclass
class GraphTensor:
    data: np.ndarray  # (w, k, d+1) float64
    graph_index: int
    class_label: int


@dataclass
class _NodeKeys:
    """Per-graph tie-breaking keys, computed once and shared by all anchors."""

    ranking: NodeRanking
    wl: np.ndarray
    canon_pos: np.ndarray
    naive: bool

    def member_key(self, hop: int, v: int):
        if self.naive:
            return (hop, v)
        return (hop, int(self.wl[v]), int(self.canon_pos[v]))


def _node_keys(g: Graph, procedure: Procedure, naive_ties: bool) -> _NodeKeys:
    ranking = rank_nodes(g, procedure, naive_ties=naive_ties)
    if naive_ties:
        n = g.n
        zeros = np.zeros(n, dtype=np.int64)
        return _NodeKeys(ranking=ranking, wl=zeros, canon_pos=zeros, naive=True)
    if procedure is Procedure.CANONICAL:
        canon_pos = ranking.positions()
    else:
        canon_pos = canonical_order(g).positions()
    wl = wl_refine(g).colors
    return _NodeKeys(ranking=ranking, wl=wl, canon_pos=canon_pos, naive=False)


def node_sequence(g: Graph, w: int, ranking: NodeRanking) -> list:
    """The top-w ranked nodes, padded with PAD when the graph is smaller than w."""
    if w < 1:
        raise ValueError("w must be >= 1")
    top = [int(v) for v in ranking.order[: min(g.n, w)]]
    return top + [PAD] * (w - len(top))


def assemble_neighbourhood(g: Graph, anchor: int, k: int) -> list:
    """BFS from the anchor, expanding whole hop-rings until >= k candidates.

    Returns ``[(node, hop), ...]`` including the anchor at hop 0.  The final
    ring may overshoot k; trimming is normalization's job.
    """
    if not 0 <= anchor < g.n:
        raise ValueError(f"anchor {anchor} not a node of the graph")
    adj = g.adjacency()
    seen = {anchor}
    out = [(anchor, 0)]
    ring = [anchor]
    hop = 0
    while len(out) < k and ring:
        hop += 1
        nxt = []
        for v in ring:
            for u in adj[v]:
                if u not in seen:
                    seen.add(u)
                    nxt.append(u)
        out.extend((u, hop) for u in nxt)
        ring = nxt
    return out


def normalize_receptive_field(candidates, keys: _NodeKeys, k: int) -> ReceptiveField:
    """Order candidates by (hop asc, WL colour asc, canonical position asc),
    keep the first k, pad with PAD."""
    ordered = sorted(candidates, key=lambda c: keys.member_key(c[1], c[0]))
    members = [v for v, _ in ordered[:k]]
    anchor = members[0] if members else PAD
    members += [PAD] * (k - len(members))
    return ReceptiveField(anchor=anchor, members=tuple(members))


def graph_to_tensor(
    g: Graph,
    w: int,
    k: int,
    d: int,
    procedure: Procedure = Procedure.BETWEENNESS,
    naive_ties: bool = False,
    graph_index: int = -1,
) -> GraphTensor:
    """Full extraction for one graph: ranking, anchor sequence, receptive
    fields, one-hot encoding.  Output shape is ``w x k x (d+1)``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    keys = _node_keys(g, procedure, naive_ties)
    anchors = node_sequence(g, w, keys.ranking)
    data = np.zeros((w, k, d + 1), dtype=np.float64)
    for i, anchor in enumerate(anchors):
        if anchor == PAD:
            labels = [PAD] * k
        else:
            field = normalize_receptive_field(assemble_neighbourhood(g, anchor, k), keys, k)
            labels = [PAD if m == PAD else g.node_labels[m] for m in field.members]
        data[i] = one_hot_encode(labels, d)
    return GraphTensor(data=data, graph_index=graph_index, class_label=g.class_label)


def default_width(ds: GraphDataset) -> int:
    """w defaults to the rounded average graph size of the dataset."""
    mean = float(np.mean([g.n for g in ds.graphs]))
    return max(1, int(np.floor(mean + 0.5)))


def _extract_one(args):
    g, i, w, k, d, procedure, naive_ties = args
    return graph_to_tensor(g, w, k, d, procedure, naive_ties, graph_index=i)


def tensorize_dataset(
    ds: GraphDataset,
    w: int | None = None,
    k: int = 10,
    procedure: Procedure = Procedure.BETWEENNESS,
    naive_ties: bool = False,
    jobs: int = 1,
) -> list:
    """Extract tensors for every graph.  Extraction is per-graph independent;
    with ``jobs > 1`` it runs in worker processes and results are merged by
    graph index, so output never depends on scheduling order."""
    if w is None:
        w = default_width(ds)
    d = ds.num_node_labels
    work = [(g, i, w, k, d, procedure, naive_ties) for i, g in enumerate(ds.graphs)]
    if jobs > 1 and len(work) > 1 and "fork" in multiprocessing.get_all_start_methods():
        with multiprocessing.get_context("fork").Pool(jobs) as pool:
            tensors = pool.map(_extract_one, work, chunksize=max(1, len(work) // (4 * jobs)))
    else:
        tensors = [_extract_one(item) for item in work]
    tensors.sort(key=lambda t: t.graph_index)
    return tensors


def padded_anchor_count(ds: GraphDataset, w: int) -> int:
    """How many PAD anchors tensorization will introduce at width w."""
    return sum(max(0, w - g.n) for g in ds.graphs)
