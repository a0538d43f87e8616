"""Image/text encoder backends behind one interface.

``rn50`` wraps the RN50 CLIP encoders via open_clip (weights must be
available locally or downloadable). ``hashed`` is a deterministic,
dependency-free stand-in with the same preprocessing and unit-norm embedding
contract, for hermetic deployments and tests.
"""

from __future__ import annotations

import hashlib
import io

import numpy as np
from PIL import Image

IMAGE_SIZE = 224
EMBED_DIM = 512


class EncoderError(Exception):
    """The configured encoder backend cannot be constructed."""


def decode_png(data: bytes) -> Image.Image:
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:
        raise ValueError(f"payload is not a decodable image: {exc}") from exc
    return img.convert("RGB")


def preprocess(img: Image.Image) -> np.ndarray:
    """Canonical pipeline: bicubic resize of the short side to 224, center crop.

    Returns (224, 224, 3) float64 in [0, 1]. A 224x224 input passes through
    with only the resample no-op.
    """
    w, h = img.size
    scale = IMAGE_SIZE / min(w, h)
    if scale != 1.0:
        img = img.resize((max(IMAGE_SIZE, round(w * scale)), max(IMAGE_SIZE, round(h * scale))),
                         Image.BICUBIC)
    w, h = img.size
    left = (w - IMAGE_SIZE) // 2
    top = (h - IMAGE_SIZE) // 2
    img = img.crop((left, top, left + IMAGE_SIZE, top + IMAGE_SIZE))
    return np.asarray(img, dtype=np.float64) / 255.0


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


class HashedEncoder:
    """Deterministic fallback: pooled image features and text-hash seeds, both
    pushed through fixed random projections onto the unit sphere."""

    name = "hashed"

    def __init__(self, dim: int = EMBED_DIM):
        self.dim = dim
        projection_rng = np.random.default_rng(0xC11F)
        self._projection = projection_rng.standard_normal((192, dim)) / np.sqrt(dim)

    def encode_image(self, img: Image.Image) -> np.ndarray:
        pixels = preprocess(img)
        # 8x8 average-pooled grid per channel -> 192 features
        pooled = pixels.reshape(8, 28, 8, 28, 3).mean(axis=(1, 3))
        features = pooled.transpose(2, 0, 1).reshape(-1)
        return _unit(features @ self._projection)

    def encode_text(self, prompt: str) -> np.ndarray:
        digest = hashlib.sha256(prompt.encode("utf-8")).digest()
        seed = int.from_bytes(digest[:8], "little")
        return _unit(np.random.default_rng(seed).standard_normal(self.dim))


class Rn50Encoder:
    """RN50 CLIP encoders via open_clip; requires the pretrained weights."""

    name = "RN50"

    def __init__(self, device: str = "cpu"):
        try:
            import open_clip
            import torch
        except ImportError as exc:
            raise EncoderError(
                "RN50 backend needs torch and open-clip-torch (pip install "
                "'clip-loss-service[rn50]'); use --encoder hashed for a "
                "self-contained deployment") from exc
        try:
            model, _, preprocess_fn = open_clip.create_model_and_transforms(
                "RN50", pretrained="openai", device=device)
        except Exception as exc:
            raise EncoderError(f"could not load RN50 weights: {exc}") from exc
        model.eval()
        self._torch = torch
        self._model = model
        self._preprocess = preprocess_fn
        self._tokenize = open_clip.get_tokenizer("RN50")
        self._device = device

    def encode_image(self, img: Image.Image) -> np.ndarray:
        with self._torch.no_grad():
            batch = self._preprocess(img).unsqueeze(0).to(self._device)
            features = self._model.encode_image(batch)[0].cpu().numpy().astype(np.float64)
        return _unit(features)

    def encode_text(self, prompt: str) -> np.ndarray:
        with self._torch.no_grad():
            tokens = self._tokenize([prompt]).to(self._device)
            features = self._model.encode_text(tokens)[0].cpu().numpy().astype(np.float64)
        return _unit(features)


BACKENDS = {"rn50": Rn50Encoder, "hashed": HashedEncoder}


def make_encoder(kind: str, device: str = "cpu"):
    if kind not in BACKENDS:
        raise EncoderError(f"unknown encoder backend {kind!r}; choose from {sorted(BACKENDS)}")
    if kind == "rn50":
        return Rn50Encoder(device=device)
    return HashedEncoder()
