"""Pluggable token embeddings.

The dense retriever never computes its own token vectors; it asks a provider.
Two providers ship: a seeded feature-hashing embedder that preserves lexical
overlap (deterministic, no model weights, good enough to exercise every
dense-path contract at desk scale), and a loader for vector files produced by
a real encoder offline.
"""

from __future__ import annotations

import hashlib
from typing import Protocol, runtime_checkable

import numpy as np

from . import ConfigError, DataError
from .corpus import tokenize


@runtime_checkable
class EmbeddingProvider(Protocol):
    """Token matrices for contexts, single vectors for queries. Deterministic."""

    @property
    def dimension(self) -> int: ...

    @property
    def identity(self) -> str: ...

    def token_vectors(self, text: str) -> np.ndarray: ...

    def query_vector(self, text: str) -> np.ndarray: ...


DEFAULT_DIM = 64
DEFAULT_EMBED_SEED = 13
DEFAULT_N_HASH = 8


class HashingEmbedder:
    """Feature hashing: each token maps to a sparse signed unit vector.

    A token gets n_hash (index, sign) probes from sha256("{seed}:{probe}:{token}");
    the resulting vector is L2-normalized. Shared tokens between two texts
    produce aligned components, so inner products track lexical overlap.
    The query vector is the normalized mean of the token vectors.
    """

    def __init__(self, dim: int = DEFAULT_DIM, seed: int = DEFAULT_EMBED_SEED,
                 n_hash: int = DEFAULT_N_HASH):
        if dim <= 0:
            raise ConfigError(f"embedding dimension must be positive, got {dim}")
        if n_hash <= 0:
            raise ConfigError(f"hash probe count must be positive, got {n_hash}")
        self._dim = dim
        self._seed = seed
        self._n_hash = n_hash
        self._cache: dict[str, np.ndarray] = {}

    @property
    def dimension(self) -> int:
        return self._dim

    @property
    def identity(self) -> str:
        return f"hashing:dim={self._dim}:seed={self._seed}:n_hash={self._n_hash}"

    def spec(self) -> dict:
        return {"kind": "hashing", "dim": self._dim, "seed": self._seed,
                "n_hash": self._n_hash}

    def _token_vector(self, token: str) -> np.ndarray:
        cached = self._cache.get(token)
        if cached is not None:
            return cached
        v = np.zeros(self._dim, dtype=np.float64)
        probe = 0
        placed = 0
        # Extra probes cover the (rare) case of all signs cancelling.
        while placed < self._n_hash or not np.any(v):
            digest = hashlib.sha256(f"{self._seed}:{probe}:{token}".encode("utf-8")).digest()
            idx = int.from_bytes(digest[:4], "big") % self._dim
            sign = 1.0 if digest[4] % 2 == 0 else -1.0
            v[idx] += sign
            probe += 1
            placed += 1
        v /= np.linalg.norm(v)
        self._cache[token] = v
        return v

    def token_vectors(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            raise DataError("cannot embed a text with no tokens")
        return np.stack([self._token_vector(t) for t in tokens])

    def query_vector(self, text: str) -> np.ndarray:
        mean = self.token_vectors(text).mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm > 0.0:
            mean = mean / norm
        return mean


def text_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class VectorFileProvider:
    """Precomputed vectors from an .npz file, keyed by text digest.

    Context matrices live under "tok:<sha256-of-text>", query vectors under
    "qry:<sha256-of-text>". dump_vectors writes such a file from any provider,
    which is how offline encoder outputs plug in.
    """

    def __init__(self, path: str):
        try:
            self._archive = np.load(path)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read vector file '{path}': {exc}") from None
        self._path = path
        dims = {self._archive[k].shape[-1] for k in self._archive.files}
        if len(dims) != 1:
            raise DataError(f"vector file '{path}' mixes dimensions {sorted(dims)}")
        self._dim = dims.pop()

    @property
    def dimension(self) -> int:
        return self._dim

    @property
    def identity(self) -> str:
        return f"file:{self._path}"

    def spec(self) -> dict:
        return {"kind": "file", "path": self._path}

    def _fetch(self, key: str, text: str) -> np.ndarray:
        if key not in self._archive.files:
            raise DataError(
                f"vector file '{self._path}' has no entry for text {text[:40]!r}..."
            )
        return np.asarray(self._archive[key], dtype=np.float64)

    def token_vectors(self, text: str) -> np.ndarray:
        mat = self._fetch(f"tok:{text_key(text)}", text)
        if mat.ndim != 2:
            raise DataError("context entry is not a token matrix")
        return mat

    def query_vector(self, text: str) -> np.ndarray:
        vec = self._fetch(f"qry:{text_key(text)}", text)
        if vec.ndim != 1:
            raise DataError("query entry is not a vector")
        return vec


def dump_vectors(path: str, provider: EmbeddingProvider,
                 context_texts: list[str], query_texts: list[str]) -> None:
    """Materialize provider outputs into a vector file VectorFileProvider can read."""
    arrays = {}
    for text in context_texts:
        arrays[f"tok:{text_key(text)}"] = provider.token_vectors(text)
    for text in query_texts:
        arrays[f"qry:{text_key(text)}"] = provider.query_vector(text)
    np.savez(path, **arrays)


def provider_from_spec(spec: dict, vectors_path: str | None = None) -> EmbeddingProvider:
    """Rebuild a provider from the spec a model file carries."""
    kind = spec.get("kind")
    if kind == "hashing":
        return HashingEmbedder(dim=spec["dim"], seed=spec["seed"], n_hash=spec["n_hash"])
    if kind == "file":
        path = vectors_path or spec.get("path")
        if not path:
            raise ConfigError("file provider needs a vector file path")
        return VectorFileProvider(path)
    raise ConfigError(f"unknown embedding provider kind {kind!r}")
