"""Entity embedding tables computed from single-entity inputs."""

from __future__ import annotations

import numpy as np

from .sequence import build_sequence, build_single_input

_NORM_EPS = 1e-12


class EmbeddingIndex:
    """Name-indexed matrix of entity embeddings with cosine helpers.

    Similarities are cosines of mean-centered vectors: each index subtracts
    its own mean embedding before normalizing, which removes the common
    anisotropy direction so the similarity scale actually spreads.
    """

    def __init__(self, names, vectors):
        self.names = tuple(names)
        self.vectors = np.asarray(vectors, dtype=float)
        if self.vectors.shape[0] != len(self.names):
            raise ValueError("names/vectors length mismatch")
        self._row = {n: i for i, n in enumerate(self.names)}
        centered = self.vectors - self.vectors.mean(axis=0, keepdims=True)
        norms = np.linalg.norm(centered, axis=1, keepdims=True)
        self._unit = centered / np.maximum(norms, _NORM_EPS)

    def __len__(self):
        return len(self.names)

    def __contains__(self, name):
        return name in self._row

    def vector(self, name):
        return self.vectors[self._row[name]]

    def unit(self, name):
        """Centered unit vector of one entity (for cross-index cosines)."""
        return self._unit[self._row[name]]

    def cosine_to(self, unit_vec):
        """Cosine of every stored (centered) embedding against a unit vector."""
        return self._unit @ np.asarray(unit_vec, dtype=float)


def encode_entities(entities, kg, kind, encoder, tokenizer, max_len=128, max_units=12):
    """EmbeddingIndex over ``entities`` (sorted) from single-entity inputs.

    Each entity is serialized with ``kind`` sequences, encoded with full
    visibility, and projected from the classification token.
    """
    names = sorted(entities)
    vectors = np.empty((len(names), encoder.emb_size))
    full_row = None
    for i, name in enumerate(names):
        seq = build_sequence(name, kg, kind, max_units=max_units)
        ids = build_single_input(seq, tokenizer, max_len=max_len)
        if full_row is None or full_row.shape[0] != len(ids):
            full_row = np.ones((len(ids), len(ids)), dtype=bool)
        hidden, _ = encoder.forward_hidden(ids, full_row)
        vectors[i] = encoder.project_single(hidden)
    return EmbeddingIndex(names, vectors)
