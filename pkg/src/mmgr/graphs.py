"""Per-question graph construction and disjoint-union batching.

Two topologies are supported:

* ``dense`` -- every source is a node, all sources connected to each other,
  and the question embedding is concatenated into every node's features.
* ``star`` -- the question is its own (unlabeled) node, each source node is
  connected only to it, and source features omit the question embedding.

Edges are stored once as unordered index pairs; layers expand them into both
directions during aggregation.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DimensionError, ShapeError

QUESTION_DIM = 768
IMAGE_DIM = 2048
TEXT_DIM = 768

#: Question categories for visual-modality questions, plus "text" for
#: questions answered from text sources.
VISUAL_CATEGORIES = ("YesNo", "Number", "Color", "Choose", "Others", "Shape")
ALL_CATEGORIES = VISUAL_CATEGORIES + ("text",)


class Modality(Enum):
    IMAGE = "image"
    TEXT = "text"


class NodeKind(Enum):
    QUESTION = "question"
    IMAGE_SOURCE = "image_source"
    TEXT_SOURCE = "text_source"


class Topology(Enum):
    DENSE = "dense"
    STAR = "star"


#: Fixed concatenation order of the embedding blocks per node, recorded in
#: model checkpoints so training and inference cannot silently disagree.
CONCAT_ORDER = "dense=question+image+caption|question+snippet;star=image+caption|snippet"


def input_dims(topology: Topology) -> dict[NodeKind, int]:
    """Node input feature width per kind for the given topology."""
    if topology is Topology.DENSE:
        return {
            NodeKind.IMAGE_SOURCE: QUESTION_DIM + IMAGE_DIM + TEXT_DIM,
            NodeKind.TEXT_SOURCE: QUESTION_DIM + TEXT_DIM,
        }
    return {
        NodeKind.QUESTION: QUESTION_DIM,
        NodeKind.IMAGE_SOURCE: IMAGE_DIM + TEXT_DIM,
        NodeKind.TEXT_SOURCE: TEXT_DIM,
    }


@dataclass
class SourceRecord:
    """One candidate source: an image (with caption) or a text snippet."""

    sid: str
    modality: Modality
    label: int
    feature_ids: list[str]
    raw_text: str | None = None

    def __post_init__(self):
        expected = 2 if self.modality is Modality.IMAGE else 1
        if len(self.feature_ids) != expected:
            raise ConfigError(
                f"source {self.sid!r}: {self.modality.value} sources need "
                f"{expected} feature id(s), got {len(self.feature_ids)}"
            )
        if self.label not in (0, 1):
            raise ConfigError(f"source {self.sid!r}: label must be 0 or 1")


@dataclass
class QuestionInstance:
    """A question plus its candidate sources, as feature-store references."""

    qid: str
    category: str
    question_feature_id: str
    sources: list[SourceRecord]
    raw_text: str | None = None

    def __post_init__(self):
        if not self.sources:
            raise ConfigError(f"question {self.qid!r} has no sources")
        sids = [s.sid for s in self.sources]
        if len(set(sids)) != len(sids):
            raise ConfigError(f"question {self.qid!r} has duplicate source ids")


@dataclass
class QuestionGraph:
    """One question's graph: typed nodes, ragged input features, edge list."""

    topology: Topology
    graph_id: str
    kinds: list[NodeKind]
    features: list[np.ndarray]
    has_label: np.ndarray
    labels: np.ndarray
    edges: np.ndarray  # (m, 2) int64, each row an unordered pair i < j
    modalities: list[Modality | None]
    source_ids: list[str | None]

    @property
    def n_nodes(self) -> int:
        return len(self.kinds)

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])


def _lookup(store, feature_id: str, expected_dim: int, role: str) -> np.ndarray:
    vec = np.asarray(store.get(feature_id), dtype=np.float64).reshape(-1)
    if vec.shape[0] != expected_dim:
        raise DimensionError(
            f"feature {feature_id!r} ({role}) has dim {vec.shape[0]}, expected {expected_dim}"
        )
    return vec


def _edge_array(pairs: list[tuple[int, int]]) -> np.ndarray:
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    return np.asarray(pairs, dtype=np.int64)


def build_dense_graph(inst: QuestionInstance, store) -> QuestionGraph:
    """Complete graph over source nodes, question embedding in every node."""
    q = _lookup(store, inst.question_feature_id, QUESTION_DIM, "question")
    kinds: list[NodeKind] = []
    feats: list[np.ndarray] = []
    mods: list[Modality | None] = []
    sids: list[str | None] = []
    labels = []
    for src in inst.sources:
        if src.modality is Modality.IMAGE:
            img = _lookup(store, src.feature_ids[0], IMAGE_DIM, "image")
            cap = _lookup(store, src.feature_ids[1], TEXT_DIM, "caption")
            feats.append(np.concatenate([q, img, cap]))
            kinds.append(NodeKind.IMAGE_SOURCE)
        else:
            txt = _lookup(store, src.feature_ids[0], TEXT_DIM, "snippet")
            feats.append(np.concatenate([q, txt]))
            kinds.append(NodeKind.TEXT_SOURCE)
        mods.append(src.modality)
        sids.append(src.sid)
        labels.append(src.label)
    n = len(feats)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    return QuestionGraph(
        topology=Topology.DENSE,
        graph_id=inst.qid,
        kinds=kinds,
        features=feats,
        has_label=np.ones(n, dtype=bool),
        labels=np.asarray(labels, dtype=np.int64),
        edges=_edge_array(pairs),
        modalities=mods,
        source_ids=sids,
    )


def build_star_graph(inst: QuestionInstance, store) -> QuestionGraph:
    """Question node at index 0, each source connected only to it."""
    q = _lookup(store, inst.question_feature_id, QUESTION_DIM, "question")
    kinds: list[NodeKind] = [NodeKind.QUESTION]
    feats: list[np.ndarray] = [q]
    mods: list[Modality | None] = [None]
    sids: list[str | None] = [None]
    labels = [0]
    for src in inst.sources:
        if src.modality is Modality.IMAGE:
            img = _lookup(store, src.feature_ids[0], IMAGE_DIM, "image")
            cap = _lookup(store, src.feature_ids[1], TEXT_DIM, "caption")
            feats.append(np.concatenate([img, cap]))
            kinds.append(NodeKind.IMAGE_SOURCE)
        else:
            txt = _lookup(store, src.feature_ids[0], TEXT_DIM, "snippet")
            feats.append(txt.copy())
            kinds.append(NodeKind.TEXT_SOURCE)
        mods.append(src.modality)
        sids.append(src.sid)
        labels.append(src.label)
    n = len(feats)
    has_label = np.ones(n, dtype=bool)
    has_label[0] = False
    pairs = [(0, i) for i in range(1, n)]
    return QuestionGraph(
        topology=Topology.STAR,
        graph_id=inst.qid,
        kinds=kinds,
        features=feats,
        has_label=has_label,
        labels=np.asarray(labels, dtype=np.int64),
        edges=_edge_array(pairs),
        modalities=mods,
        source_ids=sids,
    )


def build_graph(inst: QuestionInstance, store, topology: Topology) -> QuestionGraph:
    if topology is Topology.DENSE:
        return build_dense_graph(inst, store)
    return build_star_graph(inst, store)


class BatchedGraph:
    """Disjoint union of question graphs with index offsets.

    Node tables are concatenated; edges are shifted so they never cross graph
    boundaries.  The mapping back to ``(graph_id, local_index)`` is kept for
    un-batching and reporting.  Aggregation operators (degree vector, sparse
    neighbor-mean and edge-scatter matrices) are built lazily and cached;
    they depend only on the edge list, never on features or parameters.
    """

    def __init__(self, graphs: list[QuestionGraph]):
        if not graphs:
            raise ConfigError("cannot batch an empty list of graphs")
        topologies = {g.topology for g in graphs}
        if len(topologies) > 1:
            raise ConfigError(
                "cannot batch graphs of mixed topologies: "
                + ", ".join(sorted(t.value for t in topologies))
            )
        self.topology = graphs[0].topology
        self.graph_ids = [g.graph_id for g in graphs]

        kinds: list[NodeKind] = []
        feats: list[np.ndarray] = []
        mods: list[Modality | None] = []
        sids: list[str | None] = []
        edge_blocks = []
        node_graph = []
        node_local = []
        offset = 0
        for gi, g in enumerate(graphs):
            kinds.extend(g.kinds)
            feats.extend(g.features)
            mods.extend(g.modalities)
            sids.extend(g.source_ids)
            if g.n_edges:
                edge_blocks.append(g.edges + offset)
            node_graph.extend([gi] * g.n_nodes)
            node_local.extend(range(g.n_nodes))
            offset += g.n_nodes

        self.kinds = kinds
        self.features = feats
        self.modalities = mods
        self.source_ids = sids
        self.has_label = np.concatenate([g.has_label for g in graphs])
        self.labels = np.concatenate([g.labels for g in graphs])
        self.edges = (
            np.concatenate(edge_blocks, axis=0) if edge_blocks else np.zeros((0, 2), dtype=np.int64)
        )
        self.node_graph = np.asarray(node_graph, dtype=np.int64)
        self.node_local = np.asarray(node_local, dtype=np.int64)
        self._graph_node_counts = [g.n_nodes for g in graphs]

        self._directed: tuple[np.ndarray, np.ndarray] | None = None
        self._degrees: np.ndarray | None = None
        self._mean_op: sp.csr_matrix | None = None
        self._scatter_op: sp.csr_matrix | None = None
        self._scatter_src_op: sp.csr_matrix | None = None
        self._kind_groups: dict[NodeKind, np.ndarray] | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.kinds)

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    # -- aggregation machinery -------------------------------------------

    def directed_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """(dst, src) arrays with every unordered pair expanded both ways."""
        if self._directed is None:
            if self.n_edges:
                a, b = self.edges[:, 0], self.edges[:, 1]
                dst = np.concatenate([a, b])
                src = np.concatenate([b, a])
            else:
                dst = np.zeros(0, dtype=np.int64)
                src = np.zeros(0, dtype=np.int64)
            self._directed = (dst, src)
        return self._directed

    def degrees(self) -> np.ndarray:
        if self._degrees is None:
            dst, _ = self.directed_edges()
            self._degrees = np.bincount(dst, minlength=self.n_nodes).astype(np.float64)
        return self._degrees

    def neighbor_mean_op(self) -> sp.csr_matrix:
        """Sparse (n x n) M with M[i, j] = 1/deg(i) for each edge i<-j.

        ``M @ X`` is the neighbor mean with empty neighborhoods yielding
        exactly zero rows; ``M.T @ G`` is its backward.
        """
        if self._mean_op is None:
            dst, src = self.directed_edges()
            deg = self.degrees()
            weights = np.zeros(len(dst)) if len(dst) == 0 else 1.0 / deg[dst]
            self._mean_op = sp.csr_matrix(
                (weights, (dst, src)), shape=(self.n_nodes, self.n_nodes)
            )
        return self._mean_op

    def edge_scatter_op(self) -> sp.csr_matrix:
        """Sparse (n x 2m) S with S[dst(e), e] = 1: sums per-edge messages."""
        if self._scatter_op is None:
            dst, _ = self.directed_edges()
            m = len(dst)
            self._scatter_op = sp.csr_matrix(
                (np.ones(m), (dst, np.arange(m))), shape=(self.n_nodes, m)
            )
        return self._scatter_op

    def edge_scatter_src_op(self) -> sp.csr_matrix:
        """Like :meth:`edge_scatter_op` but indexed by edge source nodes."""
        if self._scatter_src_op is None:
            _, src = self.directed_edges()
            m = len(src)
            self._scatter_src_op = sp.csr_matrix(
                (np.ones(m), (src, np.arange(m))), shape=(self.n_nodes, m)
            )
        return self._scatter_src_op

    def kind_groups(self) -> dict[NodeKind, np.ndarray]:
        """Node indices per kind, in ascending index order."""
        if self._kind_groups is None:
            groups: dict[NodeKind, list[int]] = {}
            for i, k in enumerate(self.kinds):
                groups.setdefault(k, []).append(i)
            self._kind_groups = {
                k: np.asarray(v, dtype=np.int64) for k, v in groups.items()
            }
        return self._kind_groups

    def feature_dim_check(self, dims: dict[NodeKind, int]) -> None:
        for i, (k, f) in enumerate(zip(self.kinds, self.features)):
            if k not in dims:
                raise ShapeError(f"node {i}: no input width declared for kind {k.value}")
            if f.shape[0] != dims[k]:
                raise ShapeError(
                    f"node {i} ({k.value}): feature dim {f.shape[0]}, expected {dims[k]}"
                )

    # -- unbatching --------------------------------------------------------

    def unbatch(self) -> list[QuestionGraph]:
        """Inverse of batching: recover the individual graphs."""
        out = []
        start = 0
        for gi, count in enumerate(self._graph_node_counts):
            stop = start + count
            mask = (self.edges[:, 0] >= start) & (self.edges[:, 0] < stop)
            out.append(
                QuestionGraph(
                    topology=self.topology,
                    graph_id=self.graph_ids[gi],
                    kinds=list(self.kinds[start:stop]),
                    features=[f.copy() for f in self.features[start:stop]],
                    has_label=self.has_label[start:stop].copy(),
                    labels=self.labels[start:stop].copy(),
                    edges=self.edges[mask] - start,
                    modalities=list(self.modalities[start:stop]),
                    source_ids=list(self.source_ids[start:stop]),
                )
            )
            start = stop
        return out


def batch_graphs(graphs: list[QuestionGraph]) -> BatchedGraph:
    return BatchedGraph(graphs)
