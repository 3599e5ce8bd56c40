"""Retrieval evaluation: confusion counts, F1, and breakdowns.

Counts are pooled globally (micro-averaged) within each reporting cell:
combined, per source modality, and per question category.  A per-question
macro average is available behind a flag for analysis.
"""

from __future__ import annotations

import json
import re
import warnings
from collections import namedtuple
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .graphs import (
    ALL_CATEGORIES,
    BatchedGraph,
    Modality,
    QuestionGraph,
    QuestionInstance,
    batch_graphs,
    build_graph,
)

PrecisionRecallF1 = namedtuple("PrecisionRecallF1", ["precision", "recall", "f1"])

#: Bucket used when a question category is outside the known taxonomy.
OTHER_CATEGORY = "other"


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def observe(self, label: int, pred: int) -> None:
        if label == 1:
            if pred == 1:
                self.tp += 1
            else:
                self.fn += 1
        else:
            if pred == 1:
                self.fp += 1
            else:
                self.tn += 1

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def merged(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def f1(counts: ConfusionCounts) -> PrecisionRecallF1:
    """Precision, recall, and their harmonic mean; 0/0 is defined as 0."""
    p = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    r = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    score = 2 * p * r / (p + r) if p + r else 0.0
    return PrecisionRecallF1(p, r, score)


@dataclass
class EvalReport:
    combined: ConfusionCounts
    per_modality: dict[str, ConfusionCounts]
    per_category: dict[str, ConfusionCounts]
    macro: dict[str, float] | None = None
    n_questions: int = 0

    def scores(self, cell: ConfusionCounts) -> PrecisionRecallF1:
        return f1(cell)

    def to_dict(self) -> dict:
        def cell(c: ConfusionCounts) -> dict:
            p, r, s = f1(c)
            return {"precision": p, "recall": r, "f1": s, "counts": c.to_dict()}

        out = {
            "n_questions": self.n_questions,
            "combined": cell(self.combined),
            "per_modality": {k: cell(v) for k, v in sorted(self.per_modality.items())},
            "per_category": {k: cell(v) for k, v in sorted(self.per_category.items())},
        }
        if self.macro is not None:
            out["macro"] = self.macro
        return out

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def render_table(self) -> str:
        rows = [("combined", self.combined)]
        rows += [(f"modality:{k}", v) for k, v in sorted(self.per_modality.items())]
        rows += [(f"category:{k}", v) for k, v in sorted(self.per_category.items())]
        width = max(len(name) for name, _ in rows)
        lines = [
            f"{'cell'.ljust(width)}  {'prec':>7} {'recall':>7} {'f1':>7} {'tp':>6} {'fp':>6} {'fn':>6} {'tn':>6}"
        ]
        for name, c in rows:
            p, r, s = f1(c)
            lines.append(
                f"{name.ljust(width)}  {p:7.4f} {r:7.4f} {s:7.4f} "
                f"{c.tp:6d} {c.fp:6d} {c.fn:6d} {c.tn:6d}"
            )
        return "\n".join(lines)


def predict_batch(model, batch: BatchedGraph) -> np.ndarray:
    """Per-node class prediction (argmax over the two logits)."""
    logits, _ = model.forward(batch)
    return np.argmax(logits, axis=1)


def evaluate_graphs(
    model,
    graphs: list[QuestionGraph],
    categories: dict[str, str],
    batch_size: int = 64,
    macro: bool = False,
) -> EvalReport:
    """Micro-averaged confusion counts over every labeled source node."""
    if not graphs:
        raise ConfigError("cannot evaluate an empty split")
    combined = ConfusionCounts()
    per_modality = {m.value: ConfusionCounts() for m in Modality}
    per_category: dict[str, ConfusionCounts] = {}
    per_question: list[PrecisionRecallF1] = []

    for start in range(0, len(graphs), batch_size):
        chunk = graphs[start : start + batch_size]
        batch = batch_graphs(chunk)
        preds = predict_batch(model, batch)
        question_cells: dict[int, ConfusionCounts] = {}
        for i in range(batch.n_nodes):
            if not batch.has_label[i]:
                continue
            label = int(batch.labels[i])
            pred = int(preds[i])
            combined.observe(label, pred)
            per_modality[batch.modalities[i].value].observe(label, pred)
            gid = batch.graph_ids[batch.node_graph[i]]
            category = categories.get(gid, OTHER_CATEGORY)
            if category not in ALL_CATEGORIES:
                if category != OTHER_CATEGORY:
                    warnings.warn(
                        f"question {gid!r}: category {category!r} not in the "
                        f"taxonomy, grouped under {OTHER_CATEGORY!r}"
                    )
                category = OTHER_CATEGORY
            per_category.setdefault(category, ConfusionCounts()).observe(label, pred)
            question_cells.setdefault(int(batch.node_graph[i]), ConfusionCounts()).observe(
                label, pred
            )
        per_question.extend(f1(c) for _, c in sorted(question_cells.items()))

    macro_block = None
    if macro:
        macro_block = {
            "precision": float(np.mean([q.precision for q in per_question])),
            "recall": float(np.mean([q.recall for q in per_question])),
            "f1": float(np.mean([q.f1 for q in per_question])),
        }
    return EvalReport(
        combined=combined,
        per_modality=per_modality,
        per_category=per_category,
        macro=macro_block,
        n_questions=len(graphs),
    )


def evaluate(
    model,
    instances: list[QuestionInstance],
    store,
    batch_size: int = 64,
    macro: bool = False,
    workers: int = 1,
) -> EvalReport:
    """Build graphs for the model's topology and evaluate the split."""
    if not instances:
        raise ConfigError("cannot evaluate an empty split")
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            graphs = list(pool.map(lambda i: build_graph(i, store, model.topology), instances))
    else:
        graphs = [build_graph(inst, store, model.topology) for inst in instances]
    categories = {inst.qid: inst.category for inst in instances}
    return evaluate_graphs(model, graphs, categories, batch_size=batch_size, macro=macro)


# ---------------------------------------------------------------------------
# lexical-overlap baseline
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def overlap_tokens(text: str) -> set[str]:
    """Lowercase, split on non-alphanumeric runs, deduplicate."""
    return set(_TOKEN_RE.findall(text.lower()))


def lexical_overlap_baseline(
    inst: QuestionInstance, raw_text: dict[str, str] | None = None, top_k: int = 2
) -> list[str]:
    """Top-k sources by question/source token-set overlap.

    Ties break toward earlier manifest order.  Source text comes from the
    ``raw_text`` map when given, else from each record's own raw_text.
    """
    if inst.raw_text is None:
        raise ConfigError(f"question {inst.qid!r} has no raw_text for the lexical baseline")
    question = overlap_tokens(inst.raw_text)
    scored = []
    for position, src in enumerate(inst.sources):
        text = raw_text.get(src.sid) if raw_text is not None else src.raw_text
        tokens = overlap_tokens(text or "")
        scored.append((-len(question & tokens), position, src.sid))
    scored.sort()
    return [sid for _, _, sid in scored[:top_k]]
