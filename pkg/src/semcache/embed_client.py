"""Client for an external embedding service (POST /embed, GET /health).

Used when experiments swap the synthetic embedder for real sentence
embeddings. The client retries transient failures with backoff and fails
loudly on any mismatch; it never falls back to synthetic vectors silently.
"""

from __future__ import annotations

import logging
import time

import numpy as np
import requests

from .core import Vector

logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-5


class EmbedClient:
    def __init__(
        self,
        base_url: str,
        expected_dim: int | None = None,
        timeout: float = 30.0,
        retries: int = 3,
        backoff: float = 0.25,
    ):
        if retries < 1:
            raise ValueError(f"retries must be >= 1, got {retries}")
        self.base_url = base_url.rstrip("/")
        self.expected_dim = expected_dim
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def health(self) -> dict:
        resp = requests.get(f"{self.base_url}/health", timeout=self.timeout)
        resp.raise_for_status()
        return resp.json()

    def _post_embed(self, texts: list[str]) -> dict:
        last_error: Exception | None = None
        for attempt in range(self.retries):
            try:
                resp = requests.post(
                    f"{self.base_url}/embed", json={"texts": texts}, timeout=self.timeout
                )
                resp.raise_for_status()
                return resp.json()
            except requests.RequestException as exc:
                last_error = exc
                if attempt < self.retries - 1:
                    time.sleep(self.backoff * (2**attempt))
        raise ConnectionError(
            f"embedding service unreachable after {self.retries} attempts: {last_error}"
        )

    def fetch_embeddings(self, texts: list[str]) -> list[Vector]:
        """Embed ``texts`` in order; verifies count, dimension, and unit norm."""
        if not texts:
            return []
        data = self._post_embed(list(texts))
        vectors = data.get("vectors")
        if vectors is None or len(vectors) != len(texts):
            got = 0 if vectors is None else len(vectors)
            raise ValueError(f"embedding service returned {got} vectors for {len(texts)} texts")
        dim = int(data.get("dim", len(vectors[0]) if vectors else 0))
        if self.expected_dim is not None and dim != self.expected_dim:
            raise ValueError(
                f"embedding dimension mismatch: expected {self.expected_dim}, got {dim}"
            )
        out: list[Vector] = []
        for i, values in enumerate(vectors):
            v = np.asarray(values, dtype=np.float32)
            if v.shape[0] != dim:
                raise ValueError(
                    f"vector {i} has dimension {v.shape[0]}, expected {dim}"
                )
            norm = float(np.linalg.norm(v.astype(np.float64)))
            if abs(norm - 1.0) > NORM_TOLERANCE:
                raise ValueError(
                    f"vector {i} is not unit-normalized (norm {norm:.6f}); "
                    "the service must normalize"
                )
            out.append(v)
        return out


def fetch_embeddings(client: EmbedClient, texts: list[str]) -> list[Vector]:
    return client.fetch_embeddings(texts)
