"""Dual-encoder backends producing unit-normalized float32 vectors.

`hash:<dim>` is a deterministic stand-in (thumbnail pixels for images,
character-trigram counts for texts, both pushed through a fixed Gaussian
projection) used for fixtures, CI, and smoke runs. `clip:<model-id>` loads a
real CLIP checkpoint through torch/transformers when those are installed and
the weights are reachable.
"""

from __future__ import annotations

import zlib
from typing import Protocol, Sequence

import numpy as np
from PIL import Image

from .fileio import AdapterError

_THUMB = 16
_TEXT_BUCKETS = 1024


class Encoder(Protocol):
    dim: int

    def encode_images(self, images: Sequence[Image.Image]) -> np.ndarray: ...

    def encode_texts(self, texts: Sequence[str]) -> np.ndarray: ...


def _unit(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows.astype(np.float64), axis=1)
    if np.any(norms == 0.0):
        raise AdapterError("encoder produced a zero vector")
    return (rows.astype(np.float64) / norms[:, None]).astype(np.float32)


class HashEncoder:
    """Deterministic featurizer; identical inputs give identical vectors on
    any platform. Not semantically meaningful beyond coarse pixel/text
    similarity."""

    def __init__(self, dim: int = 64) -> None:
        if dim <= 0:
            raise AdapterError(f"dim must be positive, got {dim}")
        self.dim = dim
        rng = np.random.default_rng(dim)
        self._image_proj = rng.standard_normal((_THUMB * _THUMB * 3, dim))
        self._text_proj = rng.standard_normal((_TEXT_BUCKETS, dim))

    def encode_images(self, images: Sequence[Image.Image]) -> np.ndarray:
        if not images:
            return np.empty((0, self.dim), dtype=np.float32)
        feats = np.stack(
            [
                np.asarray(
                    img.convert("RGB").resize((_THUMB, _THUMB), Image.BILINEAR), dtype=np.float64
                ).reshape(-1)
                / 255.0
                - 0.5
                for img in images
            ]
        )
        return _unit(feats @ self._image_proj)

    def encode_texts(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.empty((0, self.dim), dtype=np.float32)
        rows = np.zeros((len(texts), _TEXT_BUCKETS), dtype=np.float64)
        for i, text in enumerate(texts):
            rows[i, 0] = 1.0  # bias bucket keeps empty text off the zero vector
            padded = f"\x02{text}\x03"
            for j in range(len(padded) - 2):
                trigram = padded[j : j + 3]
                rows[i, zlib.crc32(trigram.encode("utf-8")) % _TEXT_BUCKETS] += 1.0
        return _unit(rows @ self._text_proj)


class ClipEncoder:
    """CLIP dual encoder via transformers; requires the `clip` extra and
    locally cached (or downloadable) weights."""

    def __init__(self, model_id: str, device: str | None = None) -> None:
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise AdapterError(
                "clip encoder needs torch and transformers (pip install 'sap-adapters[clip]')"
            ) from exc
        try:
            self._model = CLIPModel.from_pretrained(model_id)
            self._processor = CLIPProcessor.from_pretrained(model_id)
        except Exception as exc:
            raise AdapterError(f"cannot load CLIP checkpoint {model_id!r}: {exc}") from exc
        self._torch = torch
        self._device = device or ("cuda" if torch.cuda.is_available() else "cpu")
        self._model = self._model.to(self._device).eval()
        self.dim = int(self._model.config.projection_dim)

    def encode_images(self, images: Sequence[Image.Image]) -> np.ndarray:
        if not images:
            return np.empty((0, self.dim), dtype=np.float32)
        inputs = self._processor(images=list(images), return_tensors="pt").to(self._device)
        with self._torch.no_grad():
            feats = self._model.get_image_features(**inputs)
        return _unit(feats.cpu().numpy())

    def encode_texts(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.empty((0, self.dim), dtype=np.float32)
        inputs = self._processor(
            text=list(texts), return_tensors="pt", padding=True, truncation=True
        ).to(self._device)
        with self._torch.no_grad():
            feats = self._model.get_text_features(**inputs)
        return _unit(feats.cpu().numpy())


def make_encoder(spec: str, device: str | None = None) -> Encoder:
    """Build an encoder from a model identifier like `hash:64` or
    `clip:openai/clip-vit-base-patch16`."""
    kind, _, arg = spec.partition(":")
    if kind == "hash":
        return HashEncoder(dim=int(arg) if arg else 64)
    if kind == "clip":
        if not arg:
            raise AdapterError("clip encoder needs a model id, e.g. clip:openai/clip-vit-base-patch16")
        return ClipEncoder(arg, device=device)
    raise AdapterError(f"unknown encoder spec {spec!r} (expected hash:<dim> or clip:<model-id>)")
