"""Encoder backends producing shared-space embeddings.

Two families:

* ``hash:<dim>[:<grid>]`` - a deterministic content-hash encoder for offline
  and conformance testing. Text and image tiles are mapped to unit Gaussian
  vectors seeded from their SHA-256, so reruns are byte-identical and no
  model weights are needed.
* ``clip:<model-id>`` - a real frozen CLIP checkpoint via transformers.
  Patch embeddings are the final-layer vision tokens pushed through the
  post-layernorm and the visual projection; the global embedding is the
  standard pooled image feature. Requires torch + transformers and the
  checkpoint being available locally or downloadable.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from PIL import Image


class EncoderError(ValueError):
    pass


def _hash_unit_vector(payload: bytes, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")
    rng = np.random.default_rng(seed)
    vec = rng.standard_normal(dim)
    return (vec / np.linalg.norm(vec)).astype(np.float32)


@dataclass(frozen=True)
class HashEncoder:
    """Deterministic stand-in encoder; embeddings depend only on content."""

    dim: int = 512
    grid: int = 4  # canonical image is split into grid x grid patch tiles
    tile: int = 16  # pixels per tile edge after canonical resize

    @property
    def name(self) -> str:
        return f"hash:{self.dim}:{self.grid}"

    def encode_text(self, text: str) -> np.ndarray:
        return _hash_unit_vector(b"text\x00" + text.encode("utf-8"), self.dim)

    def encode_image(self, image: Image.Image) -> tuple[np.ndarray, np.ndarray]:
        side = self.grid * self.tile
        canonical = image.convert("RGB").resize((side, side), Image.BILINEAR)
        data = np.asarray(canonical, dtype=np.uint8)
        patches = []
        for row in range(self.grid):
            for col in range(self.grid):
                tile = data[
                    row * self.tile : (row + 1) * self.tile,
                    col * self.tile : (col + 1) * self.tile,
                ]
                patches.append(_hash_unit_vector(b"tile\x00" + tile.tobytes(), self.dim))
        pooled = _hash_unit_vector(b"image\x00" + data.tobytes(), self.dim)
        return pooled, np.stack(patches)


class ClipEncoder:
    """Frozen CLIP backbone; lazy heavyweight imports."""

    def __init__(self, model_id: str):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:  # pragma: no cover - environment dependent
            raise EncoderError(f"clip encoder needs torch and transformers: {exc}") from exc
        try:
            self._model = CLIPModel.from_pretrained(model_id)
            self._processor = CLIPProcessor.from_pretrained(model_id)
        except Exception as exc:
            raise EncoderError(f"cannot load CLIP checkpoint {model_id!r}: {exc}") from exc
        self._model.eval()
        self._torch = torch
        self.model_id = model_id
        self.dim = int(self._model.config.projection_dim)

    @property
    def name(self) -> str:
        return f"clip:{self.model_id}"

    def encode_text(self, text: str) -> np.ndarray:
        torch = self._torch
        inputs = self._processor(text=[text], return_tensors="pt", padding=True, truncation=True)
        with torch.no_grad():
            features = self._model.get_text_features(**inputs)
        return features[0].cpu().numpy().astype(np.float32)

    def encode_image(self, image: Image.Image) -> tuple[np.ndarray, np.ndarray]:
        torch = self._torch
        inputs = self._processor(images=image.convert("RGB"), return_tensors="pt")
        with torch.no_grad():
            pooled = self._model.get_image_features(**inputs)[0]
            vision = self._model.vision_model(pixel_values=inputs["pixel_values"])
            tokens = vision.last_hidden_state[0, 1:]  # drop the class token
            tokens = self._model.vision_model.post_layernorm(tokens)
            patches = self._model.visual_projection(tokens)
        return (
            pooled.cpu().numpy().astype(np.float32),
            patches.cpu().numpy().astype(np.float32),
        )


def make_encoder(spec: str):
    """Build an encoder from its command-line spec string."""
    kind, _, rest = spec.partition(":")
    if kind == "hash":
        parts = [p for p in rest.split(":") if p]
        try:
            dim = int(parts[0]) if parts else 512
            grid = int(parts[1]) if len(parts) > 1 else 4
        except ValueError:
            raise EncoderError(f"bad hash encoder spec {spec!r}")
        if dim < 1 or grid < 1:
            raise EncoderError(f"bad hash encoder spec {spec!r}")
        return HashEncoder(dim=dim, grid=grid)
    if kind == "clip":
        if not rest:
            raise EncoderError("clip encoder needs a model id, e.g. clip:openai/clip-vit-base-patch16")
        return ClipEncoder(rest)
    raise EncoderError(f"unknown encoder kind {kind!r} (use hash:<dim> or clip:<model-id>)")
