"""Writers for the retrieval engine's on-disk contracts.

These mirror the consuming engine's documented formats without importing
it: the MMQF feature store (header ``"MMQF" | u32 version=1 | u32 dim |
u64 count`` followed by little-endian float32 rows, ids in a
``<path>.ids.json`` sidecar) and the JSON Lines question manifest.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

STORE_MAGIC = b"MMQF"
STORE_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


def write_store(path, ids: list[str], rows: np.ndarray) -> None:
    rows = np.asarray(rows)
    if rows.ndim != 2 or rows.shape[0] != len(ids):
        raise ValueError(f"need one id per row, got {len(ids)} ids for shape {rows.shape}")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(STORE_MAGIC, STORE_VERSION, rows.shape[1], rows.shape[0]))
        fh.write(np.ascontiguousarray(rows, dtype="<f4").tobytes())
    with open(str(path) + ".ids.json", "w", encoding="utf-8") as fh:
        json.dump(list(ids), fh)


def manifest_line(
    qid: str,
    category: str,
    split: str,
    question_feature_id: str,
    sources: list[dict],
    raw_text: str | None = None,
) -> str:
    obj: dict = {
        "qid": qid,
        "category": category,
        "split": split,
        "question_feature_id": question_feature_id,
    }
    if raw_text is not None:
        obj["raw_text"] = raw_text
    obj["sources"] = sources
    return json.dumps(obj, separators=(",", ":"))
