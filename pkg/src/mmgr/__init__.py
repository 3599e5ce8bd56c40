"""Graph-convolution engine for multimodal multihop source retrieval.

Given a question and a set of candidate image/text sources as precomputed
feature vectors, build a per-question graph (dense or star topology), train
graph-convolution models to classify each source as positive or distractor,
and evaluate retrieval F1.
"""

__version__ = "0.1.0"

from .data import (
    Dataset,
    FeatureStore,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    manifest_schema,
    read_store,
    write_store,
)
from .graphs import (
    BatchedGraph,
    Modality,
    NodeKind,
    QuestionGraph,
    QuestionInstance,
    SourceRecord,
    Topology,
    batch_graphs,
    build_dense_graph,
    build_star_graph,
)
from .layers import Model, ModelSpec, init_model, load_model, save_model
from .metrics import EvalReport, evaluate, f1, lexical_overlap_baseline
from .training import AdamW, FitResult, TrainConfig, fit, step_lr, weighted_ce

__all__ = [
    "AdamW",
    "BatchedGraph",
    "Dataset",
    "EvalReport",
    "FeatureStore",
    "FitResult",
    "Model",
    "ModelSpec",
    "Modality",
    "NodeKind",
    "QuestionGraph",
    "QuestionInstance",
    "SourceRecord",
    "SyntheticSpec",
    "TrainConfig",
    "Topology",
    "batch_graphs",
    "build_dense_graph",
    "build_star_graph",
    "evaluate",
    "f1",
    "fit",
    "generate_synthetic",
    "init_model",
    "lexical_overlap_baseline",
    "load_dataset",
    "load_model",
    "manifest_schema",
    "read_store",
    "save_model",
    "step_lr",
    "weighted_ce",
    "write_store",
]
