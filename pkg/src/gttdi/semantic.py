"""Eight-label slice descriptions, skip-gram token embeddings, and the semantic tensor."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import RoadNetwork, TrafficSeriesTensor

LABELS = ("road_id", "sensor_id", "sensor_position", "flow_direction",
          "month", "day", "day_of_week", "slice_id")

_MONTHS = ("jan", "feb", "mar", "apr", "may", "jun", "jul", "aug", "sep", "oct", "nov", "dec")
_WEEKDAYS = ("mon", "tue", "wed", "thu", "fri", "sat", "sun")


class VocabularyError(KeyError):
    pass


def describe(sample: int, sensor: int, network: RoadNetwork, days: Sequence[int],
             slices_per_day: int, calendar: Callable[[int], tuple[int, int, int]] | None = None,
             _order: dict | None = None) -> tuple[str, ...]:
    """The 8-token sentence for one (sample, sensor) slice.

    Depends only on metadata, so the observed and corrupted copies of a slice
    share it.
    """
    if not 0 <= sensor < len(network.sensors):
        raise IndexError(f"unknown sensor index {sensor}")
    if not 0 <= sample < len(days) * slices_per_day:
        raise IndexError(f"sample index {sample} out of range")
    calendar = calendar or network.calendar
    order = _order if _order is not None else network.road_order()
    s = network.sensors[sensor]
    month, dom, dow = calendar(days[sample // slices_per_day])
    return (
        f"road_{s.road_id}",
        f"sensor_{s.sensor_id}",
        f"position_{order[s.sensor_id]}",
        f"direction_{s.direction}",
        f"month_{_MONTHS[month - 1]}",
        f"day_{dom}",
        f"dow_{_WEEKDAYS[dow]}",
        f"slice_{sample % slices_per_day + 1}",
    )


def describe_all(t: TrafficSeriesTensor, network: RoadNetwork) -> list[list[tuple[str, ...]]]:
    """Descriptions indexed [sample][sensor]."""
    order = network.road_order()
    return [[describe(k, s, network, t.days, t.slices_per_day, _order=order)
             for s in range(t.n_sensors)] for k in range(t.n_samples)]


@dataclass
class EmbeddingTable:
    vocabulary: dict[str, int]
    vectors: np.ndarray

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def lookup(self, token: str) -> np.ndarray:
        try:
            return self.vectors[self.vocabulary[token]]
        except KeyError:
            raise VocabularyError(f"out-of-vocabulary token '{token}'") from None

    def save(self, path) -> None:
        tokens = sorted(self.vocabulary, key=self.vocabulary.get)
        with open(path, "w") as fh:
            fh.write(f"{len(tokens)} {self.dim}\n")
            for tok in tokens:
                vec = self.vectors[self.vocabulary[tok]]
                fh.write(tok + " " + " ".join(repr(float(v)) for v in vec) + "\n")

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"embedding file not found: {path}")
        lines = path.read_text().splitlines()
        n, dim = (int(v) for v in lines[0].split())
        vocab, rows = {}, []
        for i, line in enumerate(lines[1:n + 1]):
            parts = line.split()
            vocab[parts[0]] = i
            rows.append([float(v) for v in parts[1:]])
        vectors = np.array(rows, dtype=np.float64).reshape(n, dim)
        return cls(vocab, vectors)


def build_vocabulary(corpus: Iterable[Sequence[str]]) -> tuple[dict[str, int], np.ndarray]:
    """Token -> row index (first-seen order) and token counts."""
    vocab: dict[str, int] = {}
    counts: list[int] = []
    for sent in corpus:
        for tok in sent:
            if tok not in vocab:
                vocab[tok] = len(vocab)
                counts.append(0)
            counts[vocab[tok]] += 1
    return vocab, np.array(counts, dtype=np.float64)


def train_skipgram(corpus: Sequence[Sequence[str]], dim: int = 16, epochs: int = 5,
                   negatives: int = 5, seed: int = 0, lr: float = 0.025,
                   norm_cap: float = 5.0) -> EmbeddingTable:
    """Skip-gram with negative sampling; every token of a sentence is context for every other."""
    if not corpus:
        raise ValueError("empty corpus")
    for sent in corpus:
        if len(sent) != len(LABELS):
            raise ValueError(f"sentences must have {len(LABELS)} tokens, got {len(sent)}")
    vocab, counts = build_vocabulary(corpus)
    if not vocab:
        raise ValueError("empty vocabulary")
    n_vocab = len(vocab)
    rng = np.random.default_rng(seed)
    w_in = (rng.random((n_vocab, dim)) - 0.5) / dim
    w_out = np.zeros((n_vocab, dim))
    noise = counts ** 0.75
    noise /= noise.sum()
    cum_noise = np.cumsum(noise)

    ids = np.array([[vocab[t] for t in sent] for sent in corpus])
    n_tok = ids.shape[1]
    ci, oi = np.nonzero(~np.eye(n_tok, dtype=bool))
    total_steps = epochs * len(ids)
    step = 0
    for _ in range(epochs):
        for row in rng.permutation(len(ids)):
            alpha = max(lr * (1.0 - step / total_steps), lr * 1e-4)
            step += 1
            centers, contexts = ids[row, ci], ids[row, oi]
            negs = np.searchsorted(cum_noise, rng.random((len(centers), negatives)))
            negs = np.minimum(negs, n_vocab - 1)
            v = w_in[centers]                       # (P, F)
            targets = np.concatenate([contexts[:, None], negs], axis=1)   # (P, 1+k)
            u = w_out[targets]                      # (P, 1+k, F)
            score = 1.0 / (1.0 + np.exp(-np.einsum("pf,pkf->pk", v, u)))
            label = np.zeros_like(score)
            label[:, 0] = 1.0
            g = (label - score) * alpha             # ascent direction on log-likelihood
            np.add.at(w_in, centers, np.einsum("pk,pkf->pf", g, u))
            np.add.at(w_out, targets.ravel(), (g[:, :, None] * v[:, None, :]).reshape(-1, dim))
    norms = np.linalg.norm(w_in, axis=1, keepdims=True)
    w_in = w_in * np.minimum(1.0, norm_cap / np.maximum(norms, 1e-300))
    return EmbeddingTable(vocab, w_in)


def hash_embedding(tokens: Iterable[str], dim: int = 16) -> EmbeddingTable:
    """Deterministic stand-in: each token maps to a pseudo-random unit vector seeded by its hash."""
    vocab, rows = {}, []
    for tok in tokens:
        if tok in vocab:
            continue
        seed = int.from_bytes(hashlib.sha256(tok.encode()).digest()[:8], "little")
        vec = np.random.default_rng(seed).standard_normal(dim)
        vocab[tok] = len(rows)
        rows.append(vec / np.linalg.norm(vec))
    return EmbeddingTable(vocab, np.array(rows).reshape(len(rows), dim))


def assemble_semantic_tensor(descriptions: Sequence[Sequence[Sequence[str]]], table: EmbeddingTable,
                             labels: Iterable[str] | None = None) -> np.ndarray:
    """(K, S, 8*F_s): label vectors concatenated in label order.

    Labels left out of ``labels`` keep their slot but contribute zeros.
    """
    keep = set(LABELS if labels is None else labels)
    unknown = keep - set(LABELS)
    if unknown:
        raise ValueError(f"unknown semantic labels: {sorted(unknown)}")
    k, s = len(descriptions), len(descriptions[0]) if descriptions else 0
    idx = np.empty((k, s, len(LABELS)), dtype=np.int64)
    for a, row in enumerate(descriptions):
        for b, sent in enumerate(row):
            for c, tok in enumerate(sent):
                try:
                    idx[a, b, c] = table.vocabulary[tok]
                except KeyError:
                    raise VocabularyError(f"out-of-vocabulary token '{tok}'") from None
    out = table.vectors[idx]                        # (K, S, 8, F_s)
    gate = np.array([lab in keep for lab in LABELS], dtype=np.float64)
    out = out * gate[None, None, :, None]
    return out.reshape(k, s, len(LABELS) * table.dim)
