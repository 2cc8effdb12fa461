"""Semantic label embeddings from a word-vector table.

Tables use the plain GloVe text format: one token per line followed by its
vector components, space-separated. Label texts are lowercased, split on
whitespace/hyphens/underscores, and their in-table token vectors averaged.
"""
from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pose_io import LabelVocabulary, ValidationError

logger = logging.getLogger(__name__)

EMBEDDING_DIM = 300
_TOKEN_SPLIT = re.compile(r"[\s_\-]+")


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    """Read-only token -> vector map with a fixed dimension."""

    vectors: dict[str, np.ndarray]
    dim: int

    def __contains__(self, token: str) -> bool:
        return token in self.vectors

    def __len__(self) -> int:
        return len(self.vectors)

    def __getitem__(self, token: str) -> np.ndarray:
        return self.vectors[token]


def load_embedding_table(path: str | Path, dim: int = EMBEDDING_DIM) -> EmbeddingTable:
    """Parse a GloVe-format text file; every line must carry exactly `dim` numbers."""
    path = Path(path)
    vectors: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            token, values = parts[0], parts[1:]
            if len(values) != dim:
                raise ValidationError(
                    f"{path}: line {lineno}: expected {dim} values for {token!r}, got {len(values)}"
                )
            if token in vectors:
                raise ValidationError(f"{path}: line {lineno}: duplicate token {token!r}")
            vec = np.array([float(v) for v in values], dtype=np.float64)
            if not np.isfinite(vec).all():
                raise ValidationError(f"{path}: line {lineno}: non-finite value for {token!r}")
            vec.setflags(write=False)
            vectors[token] = vec
    return EmbeddingTable(vectors=vectors, dim=dim)


def save_embedding_table(table: EmbeddingTable, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for token, vec in table.vectors.items():
            fh.write(token + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def tokenize_label(text: str) -> list[str]:
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


def embed_label(text: str, table: EmbeddingTable) -> np.ndarray:
    """Average of the in-table token vectors; zero vector if none are known."""
    tokens = tokenize_label(text)
    hits = []
    for token in tokens:
        if token in table:
            hits.append(table[token])
        else:
            logger.warning("label %r: token %r not in embedding table, skipping", text, token)
    if not hits:
        logger.warning("label %r: no token in embedding table, using zero vector", text)
        return np.zeros(table.dim, dtype=np.float64)
    return np.mean(hits, axis=0)


def build_label_matrix(vocab: LabelVocabulary, table: EmbeddingTable) -> np.ndarray:
    """Stack per-label embeddings into an (N, dim) matrix, row i = label i."""
    matrix = np.empty((vocab.n, table.dim), dtype=np.float64)
    fallbacks = []
    for i, text in enumerate(vocab.labels):
        row = embed_label(text, table)
        if not row.any():
            fallbacks.append(text)
        matrix[i] = row
    if fallbacks:
        logger.warning("%d/%d labels fell back to the zero vector: %s", len(fallbacks), vocab.n, fallbacks)
    return matrix


def make_synthetic_table(tokens: list[str] | tuple[str, ...], dim: int = EMBEDDING_DIM, seed: int = 0) -> EmbeddingTable:
    """Deterministic stand-in for a pretrained table.

    Each token's vector depends only on (token, dim, seed), so table content
    is independent of token order; vectors are unit-norm.
    """
    vectors: dict[str, np.ndarray] = {}
    for token in tokens:
        if token in vectors:
            continue
        digest = hashlib.blake2s(f"{seed}:{dim}:{token}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        vec = rng.standard_normal(dim)
        vec /= np.linalg.norm(vec)
        vec.setflags(write=False)
        vectors[token] = vec
    return EmbeddingTable(vectors=vectors, dim=dim)


def vocab_tokens(vocab: LabelVocabulary) -> list[str]:
    """All distinct tokens appearing in a vocabulary's label texts."""
    seen: dict[str, None] = {}
    for text in vocab.labels:
        for token in tokenize_label(text):
            seen.setdefault(token, None)
    return list(seen)
