"""Text and image encoder backends.

Two families per modality:

* Offline deterministic defaults that need no downloaded weights:
  ``hash768`` for text (hashed token bag projected through per-token seeded
  Gaussian rows) and ``resnet152-random`` for images (the ResNet-152 trunk
  with seeded random frozen weights, global-average-pooled).
* Pretrained backends (``sbert:<model-name>``, ``resnet152``) that require
  downloadable weights and raise :class:`EncoderSetupError` with a
  descriptive message when the environment cannot provide them.

All backends run frozen, in eval mode, with torch pinned to one thread so
repeated runs produce identical bytes.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

TEXT_DIM = 768
IMAGE_DIM = 2048

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
_IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


class EncoderSetupError(RuntimeError):
    """The requested encoder backend cannot be constructed here."""


@dataclass
class ImageFailure:
    path: str
    reason: str


# ---------------------------------------------------------------------------
# text
# ---------------------------------------------------------------------------


class HashedTextEncoder:
    """Deterministic 768-d sentence vectors from hashed token bags.

    Each token deterministically seeds a Gaussian row (Philox keyed by the
    token's SHA-256); a sentence is the L2-normalized sum of its token rows
    weighted by occurrence count.  No weights, no downloads, identical
    strings always map to identical vectors.
    """

    name = "hash768"
    dim = TEXT_DIM

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._rows: dict[str, np.ndarray] = {}

    def _token_row(self, token: str) -> np.ndarray:
        row = self._rows.get(token)
        if row is None:
            digest = hashlib.sha256(f"{self.seed}:{token}".encode()).digest()
            key = int.from_bytes(digest[:8], "little")
            row = np.random.Generator(np.random.Philox(key)).standard_normal(self.dim)
            self._rows[token] = row
        return row

    def encode(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for i, text in enumerate(texts):
            tokens = _TOKEN_RE.findall(text.lower())
            if not tokens:
                continue
            acc = np.zeros(self.dim)
            for token in tokens:
                acc += self._token_row(token)
            norm = np.linalg.norm(acc)
            out[i] = acc / norm if norm > 0 else acc
        return out


class SbertTextEncoder:
    """Pretrained sentence encoder via sentence-transformers (768-d)."""

    dim = TEXT_DIM

    def __init__(self, model_name: str):
        self.name = f"sbert:{model_name}"
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:
            raise EncoderSetupError(
                "sentence-transformers is not installed; install the "
                "'pretrained' extra or use the hash768 backend"
            ) from exc
        try:
            self._model = SentenceTransformer(model_name)
        except Exception as exc:
            raise EncoderSetupError(
                f"could not load sentence encoder {model_name!r} (weights "
                f"unavailable or not cached): {exc}"
            ) from exc
        got = self._model.get_sentence_embedding_dimension()
        if got != self.dim:
            raise EncoderSetupError(
                f"sentence encoder {model_name!r} emits {got}-d vectors; "
                f"this pipeline requires {self.dim}"
            )

    def encode(self, texts: list[str]) -> np.ndarray:
        vectors = self._model.encode(texts, convert_to_numpy=True, show_progress_bar=False)
        return np.asarray(vectors, dtype=np.float64)


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def _load_torch():
    try:
        import torch
        import torchvision
    except ImportError as exc:
        raise EncoderSetupError(
            "torch/torchvision are required for image encoding"
        ) from exc
    torch.set_num_threads(1)  # keeps reductions deterministic across runs
    return torch, torchvision


def _preprocess(image_path: str) -> np.ndarray:
    """Resize shorter side to 256, center-crop 224, normalize to CHW float32."""
    from PIL import Image

    with Image.open(image_path) as img:
        img = img.convert("RGB")
        w, h = img.size
        scale = 256 / min(w, h)
        img = img.resize((max(1, round(w * scale)), max(1, round(h * scale))), Image.BILINEAR)
        w, h = img.size
        left, top = (w - 224) // 2, (h - 224) // 2
        img = img.crop((left, top, left + 224, top + 224))
        arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = (arr - _IMAGENET_MEAN) / _IMAGENET_STD
    return arr.transpose(2, 0, 1)


class ResnetImageEncoder:
    """ResNet-152 trunk, global-average-pooled penultimate features (2048-d).

    ``pretrained=False`` (the default backend) keeps the architecture but
    draws frozen weights from a fixed seed, so it works offline and stays
    deterministic; ``pretrained=True`` loads the published weights and
    raises a setup error when they cannot be fetched.
    """

    dim = IMAGE_DIM

    def __init__(self, pretrained: bool = False, seed: int = 0):
        self.name = "resnet152" if pretrained else "resnet152-random"
        self.pooling = "global_average"
        torch, torchvision = _load_torch()
        self._torch = torch
        if pretrained:
            try:
                weights = torchvision.models.ResNet152_Weights.IMAGENET1K_V2
                model = torchvision.models.resnet152(weights=weights)
            except Exception as exc:
                raise EncoderSetupError(
                    f"pretrained ResNet-152 weights unavailable in this "
                    f"environment: {exc}"
                ) from exc
        else:
            torch.manual_seed(seed)
            model = torchvision.models.resnet152(weights=None)
        model.fc = torch.nn.Identity()
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self._model = model

    def encode(self, image_paths: list[str], batch_size: int = 8) -> tuple[np.ndarray, list[ImageFailure]]:
        """Encode decodable images; failures are reported, not raised.

        Returns an (n, 2048) array with zero rows for failed items plus the
        failure list (path and reason) so callers can drop affected records.
        """
        torch = self._torch
        out = np.zeros((len(image_paths), self.dim), dtype=np.float64)
        failures: list[ImageFailure] = []
        pending: list[tuple[int, np.ndarray]] = []

        def flush():
            if not pending:
                return
            batch = torch.from_numpy(np.stack([arr for _, arr in pending]))
            with torch.no_grad():
                feats = self._model(batch).numpy()
            for (idx, _), row in zip(pending, feats):
                out[idx] = row.astype(np.float64)
            pending.clear()

        for i, path in enumerate(image_paths):
            try:
                pending.append((i, _preprocess(path)))
            except Exception as exc:
                failures.append(ImageFailure(str(path), f"{type(exc).__name__}: {exc}"))
                continue
            if len(pending) >= batch_size:
                flush()
        flush()
        return out, failures


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------


def make_text_encoder(name: str, seed: int = 0):
    if name == "hash768":
        return HashedTextEncoder(seed=seed)
    if name.startswith("sbert:"):
        return SbertTextEncoder(name.split(":", 1)[1])
    raise EncoderSetupError(
        f"unknown text backend {name!r}; expected 'hash768' or 'sbert:<model>'"
    )


def make_image_encoder(name: str, seed: int = 0):
    if name == "resnet152-random":
        return ResnetImageEncoder(pretrained=False, seed=seed)
    if name == "resnet152":
        return ResnetImageEncoder(pretrained=True)
    raise EncoderSetupError(
        f"unknown image backend {name!r}; expected 'resnet152-random' or 'resnet152'"
    )
