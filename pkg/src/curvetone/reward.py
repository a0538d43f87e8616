"""Reward computation behind a loss-provider interface.

Providers return loss values, not rewards; the trainer differences
consecutive losses, which makes the per-episode telescoping sum
beta * (L_0 - L_T) exact for any provider. Two providers ship: a remote
client for the image/text similarity service, and a deterministic built-in
proxy so training and tests run self-contained.
"""

from __future__ import annotations

import base64
import io
import threading
import time
from dataclasses import dataclass

import numpy as np
import requests
from PIL import Image

from .imaging import FloatImage, QuantizedImage, quantize

NEGATIVE_PROMPT = "a bad, saturated, blacked out photo of nothing"
POSITIVE_TEMPLATE = "a good photo of {}"


class ProviderError(Exception):
    """The loss provider could not produce a value (transport failure, etc.)."""


class ProtocolError(ProviderError):
    """The service answered, but not in the agreed wire format."""


@dataclass(frozen=True)
class RewardScale:
    beta: float = 200.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"reward scale must be positive, got {self.beta}")


@dataclass(frozen=True)
class PromptSet:
    negative: str
    positives: tuple[str, ...]


def dedupe_classes(classes) -> list[str]:
    """Drop duplicate class names case-insensitively, keeping first spellings."""
    seen = set()
    unique = []
    for name in classes:
        key = name.lower()
        if key not in seen:
            seen.add(key)
            unique.append(name)
    return unique


def build_prompts(classes) -> PromptSet:
    unique = dedupe_classes(classes)
    if not unique:
        raise ValueError("need at least one object class to build prompts")
    return PromptSet(
        negative=NEGATIVE_PROMPT,
        positives=tuple(POSITIVE_TEMPLATE.format(name) for name in unique),
    )


def clip_loss_from_similarities(pos_sims, neg_sims) -> float:
    """Mean binary cross-entropy of softmax over (positive, negative) similarity pairs.

    Equals mean_i log(1 + exp(-(m_p_i - m_n_i))), evaluated stably.
    """
    pos = np.asarray(pos_sims, dtype=np.float64).reshape(-1)
    neg = np.asarray(neg_sims, dtype=np.float64).reshape(-1)
    if pos.size == 0:
        raise ValueError("need at least one similarity pair")
    if pos.shape != neg.shape:
        raise ValueError(f"similarity arrays differ in length: {pos.shape} vs {neg.shape}")
    return float(np.mean(np.logaddexp(0.0, neg - pos)))


def reward_from_losses(loss_t: float, loss_next: float, scale: RewardScale = RewardScale()) -> float:
    """Reward is the scaled improvement in the loss."""
    return scale.beta * (loss_t - loss_next)


def proxy_loss(image: FloatImage) -> float:
    """Deterministic stand-in loss minimized by well-exposed, contrasty images.

    L = (mean(Y) - 0.5)^2 + max(0, 0.2 - std(Y))^2 over per-pixel luminance
    Y = channel mean. Invariant under pixel and channel permutations.
    """
    lum = image.data.astype(np.float64).mean(axis=0)
    mu = float(lum.mean())
    sigma = float(lum.std())
    return (mu - 0.5) ** 2 + max(0.0, 0.2 - sigma) ** 2


class ProxyLossProvider:
    """Self-contained provider computing the built-in proxy loss; ignores classes."""

    name = "proxy"

    def loss(self, image: FloatImage, classes=()) -> float:
        return proxy_loss(image)


@dataclass(frozen=True, eq=False)
class LossQuery:
    """Wire-level query: an 8-bit 3x224x224 image plus its object class names."""

    image: QuantizedImage
    classes: tuple[str, ...]

    def __post_init__(self):
        if self.image.bit_depth != 8 or self.image.data.shape != (3, 224, 224):
            raise ValueError(f"loss queries need an 8-bit 3x224x224 image, got shape {self.image.data.shape} at {self.image.bit_depth} bits")
        if len(self.classes) < 1:
            raise ValueError("loss queries need at least one class name")


def encode_query(query: LossQuery) -> dict:
    buf = io.BytesIO()
    Image.fromarray(query.image.data.transpose(1, 2, 0), mode="RGB").save(buf, format="PNG")
    return {
        "image_png_b64": base64.b64encode(buf.getvalue()).decode("ascii"),
        "classes": list(query.classes),
    }


class RemoteLossProvider:
    """HTTP client for the loss service; transport only, no local math.

    Transient failures (connection errors, timeouts, 5xx) are retried with
    exponential backoff; the service's own 4xx rejections and malformed
    bodies raise ProtocolError immediately.
    """

    name = "remote"

    def __init__(self, endpoint: str, timeout: float = 10.0, retries: int = 3,
                 backoff: float = 0.2, max_in_flight: int = 4, session=None):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._session = session if session is not None else requests.Session()
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def _request(self, method: str, path: str, payload=None):
        url = self.endpoint + path
        last_exc = None
        for attempt in range(self.retries):
            if attempt:
                time.sleep(self.backoff * (2 ** (attempt - 1)))
            try:
                with self._slots:
                    resp = self._session.request(method, url, json=payload, timeout=self.timeout)
            except requests.RequestException as exc:
                last_exc = exc
                continue
            if resp.status_code >= 500:
                last_exc = ProviderError(f"{url}: server error {resp.status_code}")
                continue
            return resp
        raise ProviderError(f"{url}: no response after {self.retries} attempts: {last_exc}")

    @staticmethod
    def _excerpt(resp) -> str:
        return resp.text[:200]

    def health(self) -> dict:
        resp = self._request("GET", "/v1/health")
        if resp.status_code != 200:
            raise ProviderError(f"health check failed with status {resp.status_code}: {self._excerpt(resp)}")
        try:
            body = resp.json()
        except ValueError as exc:
            raise ProtocolError(f"health response is not JSON: {self._excerpt(resp)}") from exc
        if body.get("status") != "ok":
            raise ProviderError(f"service unhealthy: {body}")
        return body

    def loss(self, image: FloatImage, classes=()) -> float:
        query = LossQuery(image=quantize(image, 8), classes=tuple(classes))
        resp = self._request("POST", "/v1/loss", encode_query(query))
        if resp.status_code != 200:
            raise ProtocolError(f"loss request rejected with status {resp.status_code}: {self._excerpt(resp)}")
        try:
            body = resp.json()
        except ValueError as exc:
            raise ProtocolError(f"loss response is not JSON: {self._excerpt(resp)}") from exc
        if not isinstance(body, dict) or not isinstance(body.get("loss"), (int, float)):
            raise ProtocolError(f"loss response missing numeric 'loss': {self._excerpt(resp)}")
        return float(body["loss"])
