"""Raw-record parsing and dataset construction.

Input is JSON Lines, one question per line:

    {"qid": ..., "question_text": ..., "category": ...,
     "split": "train"|"dev"|"test" (optional, default "train"),
     "sources": [{"sid", "modality": "image"|"text", "label": 0|1,
                  "snippet_or_caption": str,
                  "image_path": str (image sources only)}]}

Output is the retrieval engine's dataset layout: ``manifest.jsonl``,
``text.mmqf`` (768-d questions, snippets, captions), ``image.mmqf``
(2048-d), an ``encoding.json`` metadata sidecar naming the backends, and an
``encode_report.json`` listing any per-item failures.  Questions touching
an undecodable image are dropped and reported rather than aborting the run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backends import make_image_encoder, make_text_encoder
from .formats import manifest_line, write_store

SPLITS = ("train", "dev", "test")


class RawRecordError(ValueError):
    """A raw line is malformed; message names the line number."""


@dataclass
class RawSource:
    sid: str
    modality: str
    label: int
    snippet_or_caption: str
    image_path: str | None = None


@dataclass
class RawRecord:
    qid: str
    question_text: str
    category: str
    sources: list[RawSource]
    split: str = "train"


@dataclass
class BuildResult:
    manifest: Path
    stores: list[Path]
    metadata: Path
    report: Path
    questions_written: int
    questions_dropped: int


def _parse_source(obj: dict, where: str) -> RawSource:
    for key in ("sid", "modality", "label", "snippet_or_caption"):
        if key not in obj:
            raise RawRecordError(f"{where}: source is missing {key!r}")
    if obj["modality"] not in ("image", "text"):
        raise RawRecordError(f"{where}: bad modality {obj['modality']!r}")
    if obj["label"] not in (0, 1):
        raise RawRecordError(f"{where}: label must be 0 or 1")
    image_path = obj.get("image_path")
    if obj["modality"] == "image" and not image_path:
        raise RawRecordError(f"{where}: image source {obj['sid']!r} needs an image_path")
    if not isinstance(obj["snippet_or_caption"], str) or not obj["snippet_or_caption"]:
        raise RawRecordError(f"{where}: source {obj['sid']!r} needs snippet/caption text")
    return RawSource(
        sid=obj["sid"],
        modality=obj["modality"],
        label=int(obj["label"]),
        snippet_or_caption=obj["snippet_or_caption"],
        image_path=image_path,
    )


def read_raw_records(path) -> list[RawRecord]:
    path = Path(path)
    if not path.exists():
        raise RawRecordError(f"raw file {path} does not exist")
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path}:{line_no}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RawRecordError(f"{where}: invalid JSON ({exc.msg})") from None
            for key in ("qid", "question_text", "category", "sources"):
                if key not in obj:
                    raise RawRecordError(f"{where}: missing {key!r}")
            split = obj.get("split", "train")
            if split not in SPLITS:
                raise RawRecordError(f"{where}: bad split {split!r}")
            sources = [_parse_source(s, where) for s in obj["sources"]]
            if not sources:
                raise RawRecordError(f"{where}: question has no sources")
            sids = [s.sid for s in sources]
            if len(set(sids)) != len(sids):
                raise RawRecordError(f"{where}: duplicate source ids")
            records.append(
                RawRecord(
                    qid=obj["qid"],
                    question_text=obj["question_text"],
                    category=obj["category"],
                    sources=sources,
                    split=split,
                )
            )
    return records


def build_dataset(
    raw_path,
    out_dir,
    text_model: str = "hash768",
    image_model: str = "resnet152-random",
    batch_size: int = 8,
    seed: int = 0,
) -> BuildResult:
    """Encode every record and emit the engine-ready dataset files."""
    records = read_raw_records(raw_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    text_encoder = make_text_encoder(text_model, seed=seed)
    image_encoder = make_image_encoder(image_model, seed=seed)

    # one text pass over questions, snippets, and captions
    text_items: list[tuple[str, str]] = []
    image_items: list[tuple[str, str]] = []
    for rec in records:
        text_items.append((f"{rec.qid}.q", rec.question_text))
        for src in rec.sources:
            if src.modality == "image":
                image_items.append((f"{src.sid}.i", src.image_path))
                text_items.append((f"{src.sid}.c", src.snippet_or_caption))
            else:
                text_items.append((f"{src.sid}.t", src.snippet_or_caption))

    text_vectors = text_encoder.encode([text for _, text in text_items])
    image_vectors, failures = image_encoder.encode(
        [p for _, p in image_items], batch_size=batch_size
    )
    failed_paths = {f.path for f in failures}

    bad_questions = {
        rec.qid
        for rec in records
        for src in rec.sources
        if src.modality == "image" and str(src.image_path) in failed_paths
    }

    image_ids = [fid for fid, _ in image_items]
    image_ok = [i for i, (_, p) in enumerate(image_items) if str(p) not in failed_paths]
    text_path = out_dir / "text.mmqf"
    image_path = out_dir / "image.mmqf"
    write_store(text_path, [fid for fid, _ in text_items], text_vectors)
    write_store(
        image_path,
        [image_ids[i] for i in image_ok],
        image_vectors[image_ok] if image_ok else np.zeros((0, image_encoder.dim)),
    )

    lines = []
    written = 0
    for rec in records:
        if rec.qid in bad_questions:
            continue
        sources = []
        for src in rec.sources:
            entry = {
                "sid": src.sid,
                "modality": src.modality,
                "label": src.label,
                "feature_ids": (
                    [f"{src.sid}.i", f"{src.sid}.c"]
                    if src.modality == "image"
                    else [f"{src.sid}.t"]
                ),
                "raw_text": src.snippet_or_caption,
            }
            sources.append(entry)
        lines.append(
            manifest_line(
                rec.qid, rec.category, rec.split, f"{rec.qid}.q", sources,
                raw_text=rec.question_text,
            )
        )
        written += 1
    manifest_path = out_dir / "manifest.jsonl"
    manifest_path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    metadata_path = out_dir / "encoding.json"
    metadata_path.write_text(
        json.dumps(
            {
                "text_model": text_encoder.name,
                "image_model": image_encoder.name,
                "image_pooling": getattr(image_encoder, "pooling", None),
                "text_dim": text_encoder.dim,
                "image_dim": image_encoder.dim,
                "seed": seed,
            },
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    report_path = out_dir / "encode_report.json"
    report_path.write_text(
        json.dumps(
            {
                "questions_written": written,
                "questions_dropped": sorted(bad_questions),
                "image_failures": [
                    {"path": f.path, "reason": f.reason} for f in failures
                ],
            },
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    return BuildResult(
        manifest=manifest_path,
        stores=[text_path, image_path],
        metadata=metadata_path,
        report=report_path,
        questions_written=written,
        questions_dropped=len(bad_questions),
    )
