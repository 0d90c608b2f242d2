"""Geography and pattern edges between sensors."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import RoadNetwork, TrafficSeriesTensor


class LeakageError(ValueError):
    """Pattern edges were requested from data outside the training split."""


@dataclass(frozen=True)
class EdgeSet:
    """Directed pairs (2, W) with features (W, 3) = [is_geo, is_pattern, weight].

    Every undirected edge is stored in both directions with identical features.
    """

    pairs: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(2, -1)
        feats = np.asarray(self.features, dtype=np.float64).reshape(-1, 3)
        if pairs.shape[1] != feats.shape[0]:
            raise ValueError(f"{pairs.shape[1]} pairs but {feats.shape[0]} feature rows")
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "features", feats)

    @property
    def n_edges(self) -> int:
        return self.pairs.shape[1]

    @classmethod
    def empty(cls) -> "EdgeSet":
        return cls(np.zeros((2, 0), dtype=np.int64), np.zeros((0, 3)))

    def as_dict(self) -> dict[tuple[int, int], tuple[float, float, float]]:
        return {(int(i), int(j)): tuple(f) for i, j, f in zip(self.pairs[0], self.pairs[1], self.features)}

    def is_symmetric(self) -> bool:
        d = self.as_dict()
        return all((j, i) in d and d[(j, i)] == f for (i, j), f in d.items())

    def has_self_loops(self) -> bool:
        return bool(np.any(self.pairs[0] == self.pairs[1]))


def _from_undirected(entries: dict[tuple[int, int], tuple[float, float, float]]) -> EdgeSet:
    """Build a symmetric EdgeSet from {(i, j) with i < j: features}."""
    rows = []
    for (i, j), f in sorted(entries.items()):
        rows.append((i, j, f))
        rows.append((j, i, f))
    rows.sort(key=lambda r: (r[0], r[1]))
    if not rows:
        return EdgeSet.empty()
    pairs = np.array([[r[0] for r in rows], [r[1] for r in rows]])
    return EdgeSet(pairs, np.array([r[2] for r in rows]))


def _undirected(edges: EdgeSet) -> dict[tuple[int, int], tuple[float, float, float]]:
    return {(i, j): f for (i, j), f in edges.as_dict().items() if i < j}


def geography_edges(network: RoadNetwork) -> EdgeSet:
    """Link sensors adjacent along road segments; weight = inverse distance scaled so the max is 1."""
    raw = {}
    for a, b in network.segments:
        i, j = network.index(a), network.index(b)
        if i == j:
            continue
        pa = np.asarray(network.sensors[i].position)
        pb = np.asarray(network.sensors[j].position)
        dist = max(float(np.linalg.norm(pa - pb)), 1e-12)
        raw[(min(i, j), max(i, j))] = 1.0 / dist
    if not raw:
        return EdgeSet.empty()
    top = max(raw.values())
    return _from_undirected({k: (1.0, 0.0, v / top) for k, v in raw.items()})


def mean_daily_profiles(t: TrafficSeriesTensor) -> np.ndarray:
    """(S, N) mean over days of each sensor's daily series, observed points only."""
    values, mask = t.daily()
    counts = mask.sum(axis=0)
    sums = np.where(mask, values, 0.0).sum(axis=0)
    return np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)


def kmeans(x: np.ndarray, k: int, seed: int, max_iter: int = 100) -> tuple[np.ndarray, np.ndarray, int]:
    """Lloyd iterations from a seeded k-means++ start.

    Returns (labels, centers, iterations run).  Stops at an assignment fixpoint
    or after ``max_iter`` iterations.
    """
    n = x.shape[0]
    k = min(k, n)
    rng = np.random.default_rng(seed)
    centers = [x[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(x[idx])
    centers = np.array(centers, dtype=np.float64)
    labels = np.full(n, -1)
    it = 0
    for it in range(1, max_iter + 1):
        d2 = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
        new = np.argmin(d2, axis=1)
        for c in range(k):
            if not np.any(new == c):
                # empty cluster: take the point farthest from its center
                far = int(np.argmax(d2[np.arange(n), new]))
                new[far] = c
        if np.array_equal(new, labels):
            break
        labels = new
        centers = np.array([x[labels == c].mean(axis=0) for c in range(k)])
    return labels, centers, it


def nearest_neighbors(dist: np.ndarray, labels: np.ndarray, n_neighbors: int) -> list[list[int]]:
    """Per sensor: nearest same-cluster sensors, topped up from other clusters.

    Ties break by ascending sensor index.
    """
    s = dist.shape[0]
    out = []
    for i in range(s):
        others = [j for j in range(s) if j != i]
        inside = sorted((j for j in others if labels[j] == labels[i]), key=lambda j: (dist[i, j], j))
        outside = sorted((j for j in others if labels[j] != labels[i]), key=lambda j: (dist[i, j], j))
        out.append((inside + outside)[:n_neighbors] if len(inside) < n_neighbors else inside[:n_neighbors])
    return out


def pattern_edges(train_truth: TrafficSeriesTensor, n_clusters: int | None = None,
                  n_neighbors: int = 5, seed: int = 0) -> EdgeSet:
    """Link each sensor to its most similar sensors by mean daily profile."""
    if train_truth.role != "train":
        raise LeakageError(
            f"pattern edges must come from the training split only (got role={train_truth.role!r})")
    if n_neighbors < 1:
        raise ValueError("n_neighbors must be >= 1")
    s = train_truth.n_sensors
    if s < 2:
        raise ValueError("pattern edges need at least 2 sensors")
    if n_clusters is None:
        n_clusters = max(2, s // 10)
    profiles = mean_daily_profiles(train_truth)
    labels, _, _ = kmeans(profiles, n_clusters, seed)
    dist = np.sqrt(((profiles[:, None, :] - profiles[None]) ** 2).sum(-1))
    neigh = nearest_neighbors(dist, labels, n_neighbors)

    iu = np.triu_indices(s, 1)
    same = labels[iu[0]] == labels[iu[1]]
    pool = dist[iu][same] if np.any(same) else dist[iu]
    sigma = float(np.median(pool)) if pool.size else 0.0
    if sigma <= 0:
        sigma = float(np.median(dist[iu]))

    entries = {}
    for i, js in enumerate(neigh):
        for j in js:
            key = (min(i, j), max(i, j))
            w = 1.0 if sigma <= 0 else float(np.exp(-dist[i, j] ** 2 / sigma ** 2))
            entries[key] = (0.0, 1.0, w)
    return _from_undirected(entries)


def merge_edges(geo: EdgeSet, pattern: EdgeSet, n_sensors: int | None = None) -> EdgeSet:
    """Union; a pair in both sets keeps both type bits and the larger weight."""
    for es in (geo, pattern):
        if es.n_edges and (es.pairs.min() < 0 or (n_sensors is not None and es.pairs.max() >= n_sensors)):
            raise IndexError("edge index out of range")
    merged = dict(_undirected(geo))
    for key, f in _undirected(pattern).items():
        if key in merged:
            g = merged[key]
            merged[key] = (max(g[0], f[0]), max(g[1], f[1]), max(g[2], f[2]))
        else:
            merged[key] = f
    return _from_undirected(merged)


def save_edges(path, edges: EdgeSet) -> None:
    with open(path, "w") as fh:
        for (i, j), (geo, pat, w) in sorted(_undirected(edges).items()):
            fh.write(f"{i} {j} {int(geo)} {int(pat)} {float(w)!r}\n")


def load_edges(path) -> EdgeSet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"edge file not found: {path}")
    entries = {}
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        i, j, geo, pat, w = line.split()
        i, j = int(i), int(j)
        entries[(min(i, j), max(i, j))] = (float(geo), float(pat), float(w))
    return _from_undirected(entries)
