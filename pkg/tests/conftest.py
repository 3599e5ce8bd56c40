"""Shared numeric test helpers."""

import numpy as np

from mmgr.graphs import Modality, NodeKind, QuestionGraph, Topology


def toy_graph(topology, kinds, dims, edges, rng, labels=None, graph_id="toy"):
    """Hand-built graph with arbitrary per-kind feature widths for layer tests."""
    n = len(kinds)
    features = [rng.standard_normal(dims[k]) for k in kinds]
    has_label = np.array([k is not NodeKind.QUESTION for k in kinds])
    if labels is None:
        labels = [0] * n
    modalities = [
        None
        if k is NodeKind.QUESTION
        else (Modality.IMAGE if k is NodeKind.IMAGE_SOURCE else Modality.TEXT)
        for k in kinds
    ]
    source_ids = [None if k is NodeKind.QUESTION else f"{graph_id}.s{i}" for i, k in enumerate(kinds)]
    return QuestionGraph(
        topology=topology,
        graph_id=graph_id,
        kinds=list(kinds),
        features=features,
        has_label=has_label,
        labels=np.asarray(labels, dtype=np.int64),
        edges=np.asarray(edges, dtype=np.int64).reshape(-1, 2),
        modalities=modalities,
        source_ids=source_ids,
    )


def toy_star(n_sources, dims, rng, labels=None, graph_id="star"):
    kinds = [NodeKind.QUESTION] + [
        NodeKind.IMAGE_SOURCE if i % 2 == 0 else NodeKind.TEXT_SOURCE
        for i in range(n_sources)
    ]
    edges = [(0, i) for i in range(1, n_sources + 1)]
    lab = [0] + list(labels) if labels is not None else None
    return toy_graph(Topology.STAR, kinds, dims, edges, rng, lab, graph_id)


def finite_difference(f, x, eps=1e-4):
    """Central-difference gradient of a scalar function at x (any shape)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x)
        flat[i] = orig - eps
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * eps)
    return grad


def max_rel_err(a, b, floor=1e-8):
    """max |a-b| / max(|a|, |b|, floor) over all elements."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
