"""Feature stores, dataset manifests, and synthetic dataset generation.

On-disk formats (the external contract of this module):

* Feature store ("MMQF"): header ``magic "MMQF" | u32 version=1 | u32 dim |
  u64 count`` followed by ``count x dim`` little-endian 32-bit floats, plus a
  ``<path>.ids.json`` sidecar holding the ordered list of row ids.  Values
  are widened to 64-bit on load; round-trips are bitwise exact.
* Manifest: JSON Lines, one question per line, schema in
  :data:`MANIFEST_SCHEMA` (also printed by the ``schema`` CLI subcommand).
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from .errors import (
    ConfigError,
    ConsistencyError,
    FeatureLookupError,
    FormatError,
    ManifestError,
    MmgrError,
)
from .graphs import (
    ALL_CATEGORIES,
    QUESTION_DIM,
    IMAGE_DIM,
    TEXT_DIM,
    VISUAL_CATEGORIES,
    Modality,
    QuestionInstance,
    SourceRecord,
)
from .tensor import make_rng

STORE_MAGIC = b"MMQF"
STORE_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")

SPLITS = ("train", "dev", "test")


class FeatureStore:
    """Immutable id-addressed matrix of feature rows (one dim per store)."""

    def __init__(self, dim: int, ids: list[str], rows: np.ndarray):
        if len(ids) != rows.shape[0]:
            raise ConsistencyError(
                f"store has {rows.shape[0]} rows but {len(ids)} ids"
            )
        if len(set(ids)) != len(ids):
            raise ConsistencyError("store ids are not unique")
        self.dim = int(dim)
        self.ids = list(ids)
        self.rows = np.asarray(rows, dtype=np.float64).reshape(len(ids), self.dim)
        self._index = {fid: i for i, fid in enumerate(self.ids)}

    @property
    def count(self) -> int:
        return len(self.ids)

    def __contains__(self, fid: str) -> bool:
        return fid in self._index

    def get(self, fid: str) -> np.ndarray:
        try:
            return self.rows[self._index[fid]]
        except KeyError:
            raise FeatureLookupError(f"unknown feature id {fid!r}") from None


def write_store(path, ids: list[str], rows: np.ndarray) -> None:
    """Write an MMQF store plus its ids sidecar; 32-bit floats on disk."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise ConfigError(f"store rows must be 2-D, got shape {rows.shape}")
    if len(ids) != rows.shape[0]:
        raise ConsistencyError(f"{len(ids)} ids for {rows.shape[0]} rows")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(STORE_MAGIC, STORE_VERSION, rows.shape[1], rows.shape[0]))
        fh.write(np.ascontiguousarray(rows, dtype="<f4").tobytes())
    with open(str(path) + ".ids.json", "w", encoding="utf-8") as fh:
        json.dump(list(ids), fh)


def read_store(path) -> FeatureStore:
    path = Path(path)
    if not path.exists():
        raise FeatureLookupError(f"feature store {path} does not exist")
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise FormatError(f"store {path}: truncated header")
        magic, version, dim, count = _HEADER.unpack(header)
        if magic != STORE_MAGIC:
            raise FormatError(f"store {path}: bad magic {magic!r} (expected MMQF)")
        if version != STORE_VERSION:
            raise FormatError(f"store {path}: unsupported version {version}")
        payload = fh.read()
    expected = count * dim * 4
    if len(payload) != expected:
        raise FormatError(
            f"store {path}: payload is {len(payload)} bytes, expected {expected}"
        )
    sidecar = Path(str(path) + ".ids.json")
    if not sidecar.exists():
        raise ConsistencyError(f"store {path}: missing ids sidecar {sidecar}")
    with open(sidecar, encoding="utf-8") as fh:
        ids = json.load(fh)
    if not isinstance(ids, list) or len(ids) != count:
        raise ConsistencyError(
            f"store {path}: sidecar lists {len(ids)} ids, header says {count}"
        )
    rows = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(count, dim)
    return FeatureStore(dim, ids, rows)


class FeatureCatalog:
    """Read-only union of several stores; ids must be globally unique."""

    def __init__(self, stores: list[FeatureStore]):
        self.stores = list(stores)
        self._index: dict[str, FeatureStore] = {}
        for store in self.stores:
            for fid in store.ids:
                if fid in self._index:
                    raise ConsistencyError(f"feature id {fid!r} appears in two stores")
                self._index[fid] = store

    def __contains__(self, fid: str) -> bool:
        return fid in self._index

    def get(self, fid: str) -> np.ndarray:
        try:
            return self._index[fid].get(fid)
        except KeyError:
            raise FeatureLookupError(f"unknown feature id {fid!r}") from None


def load_stores(paths) -> FeatureCatalog:
    return FeatureCatalog([read_store(p) for p in paths])


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

MANIFEST_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "Question manifest line",
    "description": (
        "One question per JSON line. Image sources carry two feature ids "
        "(image, caption); text sources carry one (snippet). The category is "
        "one of " + "/".join(VISUAL_CATEGORIES) + " for visual questions, or 'text'."
    ),
    "type": "object",
    "required": ["qid", "category", "split", "question_feature_id", "sources"],
    "additionalProperties": False,
    "properties": {
        "qid": {"type": "string", "minLength": 1},
        "category": {"type": "string", "minLength": 1},
        "split": {"enum": list(SPLITS)},
        "question_feature_id": {"type": "string", "minLength": 1},
        "raw_text": {"type": "string"},
        "sources": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["sid", "modality", "label", "feature_ids"],
                "additionalProperties": False,
                "properties": {
                    "sid": {"type": "string", "minLength": 1},
                    "modality": {"enum": [m.value for m in Modality]},
                    "label": {"enum": [0, 1]},
                    "feature_ids": {
                        "type": "array",
                        "items": {"type": "string", "minLength": 1},
                        "minItems": 1,
                        "maxItems": 2,
                    },
                    "raw_text": {"type": "string"},
                },
            },
        },
    },
}

_VALIDATOR = jsonschema.Draft202012Validator(MANIFEST_SCHEMA)


def manifest_schema() -> dict:
    return MANIFEST_SCHEMA


def _instance_from_obj(obj: dict) -> QuestionInstance:
    sources = [
        SourceRecord(
            sid=s["sid"],
            modality=Modality(s["modality"]),
            label=int(s["label"]),
            feature_ids=list(s["feature_ids"]),
            raw_text=s.get("raw_text"),
        )
        for s in obj["sources"]
    ]
    return QuestionInstance(
        qid=obj["qid"],
        category=obj["category"],
        question_feature_id=obj["question_feature_id"],
        sources=sources,
        raw_text=obj.get("raw_text"),
    )


def iter_manifest(path):
    """Yield (line_number, QuestionInstance, split) with validation."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest {path} does not exist")
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{line_no}: invalid JSON ({exc.msg})") from None
            error = jsonschema.exceptions.best_match(_VALIDATOR.iter_errors(obj))
            if error is not None:
                raise ManifestError(f"{path}:{line_no}: {error.message}")
            try:
                inst = _instance_from_obj(obj)
            except MmgrError as exc:
                raise ManifestError(f"{path}:{line_no}: {exc}") from None
            if inst.category not in ALL_CATEGORIES:
                warnings.warn(
                    f"{path}:{line_no}: category {inst.category!r} is outside the "
                    "known taxonomy"
                )
            yield line_no, inst, obj["split"]


def load_manifest(path) -> dict[str, list[QuestionInstance]]:
    splits: dict[str, list[QuestionInstance]] = {name: [] for name in SPLITS}
    for _, inst, split in iter_manifest(path):
        splits[split].append(inst)
    return splits


@dataclass
class Dataset:
    splits: dict[str, list[QuestionInstance]]
    store: FeatureCatalog

    def split(self, name: str) -> list[QuestionInstance]:
        if name not in self.splits:
            raise ConfigError(f"unknown split {name!r}")
        return self.splits[name]


def load_dataset(manifest_path, store_paths) -> Dataset:
    """Load stores and manifest, resolving every feature id eagerly."""
    if not Path(manifest_path).exists():
        raise ManifestError(f"manifest {manifest_path} does not exist")
    catalog = load_stores(store_paths)
    splits: dict[str, list[QuestionInstance]] = {name: [] for name in SPLITS}
    for line_no, inst, split in iter_manifest(manifest_path):
        for fid in [inst.question_feature_id] + [
            fid for src in inst.sources for fid in src.feature_ids
        ]:
            if fid not in catalog:
                raise ManifestError(
                    f"{manifest_path}:{line_no}: feature id {fid!r} not found "
                    "in the declared stores"
                )
        splits[split].append(inst)
    return Dataset(splits, catalog)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


#: Distance of the distractor cluster from the origin.  Negatives sit in a
#: fixed far-away region per feature channel, giving the task a wide margin
#: so the production learning rate (2e-5) separates it within a few epochs.
NEGATIVE_OFFSET_SCALE = 48.0


@dataclass
class SyntheticSpec:
    """Desk-scale stand-in for the real dataset.

    Positive sources are built from the question direction plus Gaussian
    noise (images through a fixed seeded random projection); negatives are
    unit-variance Gaussians drawn independently of the question around a
    fixed per-channel offset.  At noise_scale 0, positives are exactly
    collinear with their question.
    """

    n_train: int = 200
    n_dev: int = 50
    n_test: int = 50
    sources_per_question: int = 10
    positives_per_question: int = 2
    noise_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.positives_per_question > self.sources_per_question:
            raise ConfigError("positives_per_question exceeds sources_per_question")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be nonnegative")
        if min(self.n_train, self.n_dev, self.n_test) < 0:
            raise ConfigError("split sizes must be nonnegative")
        if self.n_train + self.n_dev + self.n_test == 0:
            raise ConfigError("at least one split must be non-empty")

    @property
    def n_questions(self) -> int:
        return self.n_train + self.n_dev + self.n_test


@dataclass
class SyntheticPaths:
    manifest: Path
    stores: list[Path]


def generate_synthetic(spec: SyntheticSpec, out_dir) -> SyntheticPaths:
    """Write a synthetic manifest plus text (768) and image (2048) stores."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = make_rng(spec.seed)

    # fixed projection taking a 768-d direction into image-feature space
    projection = rng.standard_normal((QUESTION_DIM, IMAGE_DIM)) / np.sqrt(QUESTION_DIM)

    def channel_offset(dim: int) -> np.ndarray:
        v = rng.standard_normal(dim)
        return v * (NEGATIVE_OFFSET_SCALE / np.linalg.norm(v))

    offset_snippet = channel_offset(TEXT_DIM)
    offset_image = channel_offset(IMAGE_DIM)
    offset_caption = channel_offset(TEXT_DIM)

    text_ids: list[str] = []
    text_rows: list[np.ndarray] = []
    image_ids: list[str] = []
    image_rows: list[np.ndarray] = []
    lines: list[str] = []

    def unit_direction(dim: int) -> np.ndarray:
        v = rng.standard_normal(dim)
        return v / np.linalg.norm(v)

    counter = 0
    for split, count in zip(SPLITS, (spec.n_train, spec.n_dev, spec.n_test)):
        for _ in range(count):
            qid = f"q{counter:06d}"
            counter += 1
            question = unit_direction(QUESTION_DIM)
            text_ids.append(f"{qid}.q")
            text_rows.append(question)

            positive_at = set(
                rng.permutation(spec.sources_per_question)[: spec.positives_per_question].tolist()
            )
            sources = []
            has_positive_image = False
            for k in range(spec.sources_per_question):
                sid = f"{qid}.s{k:02d}"
                label = int(k in positive_at)
                is_image = bool(rng.random() < 0.5)
                if label:
                    snippet = question + spec.noise_scale * rng.standard_normal(TEXT_DIM)
                    image = question @ projection + spec.noise_scale * rng.standard_normal(IMAGE_DIM)
                    caption = question + spec.noise_scale * rng.standard_normal(TEXT_DIM)
                else:
                    snippet = offset_snippet + rng.standard_normal(TEXT_DIM)
                    image = offset_image + rng.standard_normal(IMAGE_DIM)
                    caption = offset_caption + rng.standard_normal(TEXT_DIM)
                if is_image:
                    image_ids.append(f"{sid}.i")
                    image_rows.append(image)
                    text_ids.append(f"{sid}.c")
                    text_rows.append(caption)
                    sources.append(
                        {
                            "sid": sid,
                            "modality": "image",
                            "label": label,
                            "feature_ids": [f"{sid}.i", f"{sid}.c"],
                        }
                    )
                    has_positive_image = has_positive_image or bool(label)
                else:
                    text_ids.append(f"{sid}.t")
                    text_rows.append(snippet)
                    sources.append(
                        {
                            "sid": sid,
                            "modality": "text",
                            "label": label,
                            "feature_ids": [f"{sid}.t"],
                        }
                    )
            category = (
                VISUAL_CATEGORIES[int(rng.integers(len(VISUAL_CATEGORIES)))]
                if has_positive_image
                else "text"
            )
            lines.append(
                json.dumps(
                    {
                        "qid": qid,
                        "category": category,
                        "split": split,
                        "question_feature_id": f"{qid}.q",
                        "sources": sources,
                    },
                    separators=(",", ":"),
                )
            )

    text_path = out_dir / "text.mmqf"
    image_path = out_dir / "image.mmqf"
    write_store(
        text_path, text_ids, np.stack(text_rows) if text_rows else np.zeros((0, TEXT_DIM))
    )
    write_store(
        image_path, image_ids, np.stack(image_rows) if image_rows else np.zeros((0, IMAGE_DIM))
    )
    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return SyntheticPaths(manifest_path, [text_path, image_path])
