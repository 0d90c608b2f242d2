"""End-to-end experiment: scenario -> edges -> embeddings -> training -> evaluation, plus ablations."""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .corruption import CorruptionSpec, Pattern, corrupt
from .data import DatasetSplit, RoadNetwork, TrafficSeriesTensor, reslice_tensor, split_by_days
from .evaluation import EVAL_RATES, MetricsReport, score_baselines
from .graph import EdgeSet, geography_edges, merge_edges, pattern_edges
from .model import ModelConfig, attention_edges
from .scenario import ScenarioConfig, generate
from .semantic import LABELS, EmbeddingTable, assemble_semantic_tensor, describe_all, hash_embedding, train_skipgram
from .training import TrainConfig, TrainResult, impute_tensor, train


def seed_for(seed: int, stage: str) -> int:
    """Named sub-stream of the global seed."""
    return int(np.random.SeedSequence([seed, zlib.crc32(stage.encode())]).generate_state(1, np.uint64)[0] >> 1)


@dataclass(frozen=True)
class EmbedConfig:
    dim: int = 16
    epochs: int = 5
    negatives: int = 5
    method: str = "skipgram"          # or "hash"


@dataclass(frozen=True)
class GraphConfig:
    n_neighbors: int = 5
    n_clusters: int = 0               # 0 -> max(2, S // 10)
    geography: bool = True
    pattern: bool = True


@dataclass(frozen=True)
class ModelSettings:
    graph_heads: int = 2
    graph_head_dim: int = 16
    graph_out: int = 64
    sem_hidden_channels: int = 8
    sem_out: int = 64
    sem_kernel: int = 3
    enc_layers: int = 1
    enc_heads: int = 4
    enc_ff_mult: int = 4
    dropout: float = 0.1

    def build(self, slice_len: int, sem_dim: int) -> ModelConfig:
        return ModelConfig(slice_len=slice_len, sem_dim=sem_dim, graph_heads=self.graph_heads,
                           graph_head_dim=self.graph_head_dim, graph_out=self.graph_out,
                           sem_hidden_channels=self.sem_hidden_channels, sem_out=self.sem_out,
                           sem_kernel=self.sem_kernel, enc_layers=self.enc_layers,
                           enc_heads=self.enc_heads, enc_ff_mult=self.enc_ff_mult, dropout=self.dropout)


@dataclass(frozen=True)
class EvalConfig:
    rates: tuple[float, ...] = (0.5,)
    knn_k: int = 5
    labels: tuple[str, ...] = LABELS


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelSettings = field(default_factory=ModelSettings)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


@dataclass
class Prepared:
    network: RoadNetwork
    truth: TrafficSeriesTensor
    train: TrafficSeriesTensor
    val: TrafficSeriesTensor
    test: TrafficSeriesTensor
    split: DatasetSplit
    edges: EdgeSet
    table: EmbeddingTable
    semantic: np.ndarray

    def rows(self, part: TrafficSeriesTensor) -> np.ndarray:
        """Sample rows of ``part`` inside the full tensor."""
        m = self.truth.slices_per_day
        pos = [self.truth.days.index(d) for d in part.days]
        return np.concatenate([np.arange(p * m, (p + 1) * m) for p in pos])


def build_edges(network: RoadNetwork, train_truth: TrafficSeriesTensor, cfg: GraphConfig, seed: int) -> EdgeSet:
    geo = geography_edges(network) if cfg.geography else EdgeSet.empty()
    if not cfg.pattern:
        return geo
    pat = pattern_edges(train_truth, cfg.n_clusters or None, cfg.n_neighbors, seed_for(seed, "kmeans"))
    return merge_edges(geo, pat, train_truth.n_sensors)


def build_embeddings(network: RoadNetwork, truth: TrafficSeriesTensor, cfg: EmbedConfig, seed: int):
    descriptions = describe_all(truth, network)
    corpus = [sent for row in descriptions for sent in row]
    if cfg.method == "hash":
        table = hash_embedding((t for sent in corpus for t in sent), cfg.dim)
    elif cfg.method == "skipgram":
        table = train_skipgram(corpus, cfg.dim, cfg.epochs, cfg.negatives, seed_for(seed, "embed"))
    else:
        raise ValueError(f"unknown embedding method '{cfg.method}'")
    return descriptions, table


def prepare(cfg: ExperimentConfig, network: RoadNetwork | None = None,
            truth: TrafficSeriesTensor | None = None) -> Prepared:
    if truth is None:
        network, truth = generate(cfg.scenario)
    train_t, val_t, test_t, split = split_by_days(truth)
    edges = build_edges(network, train_t, cfg.graph, cfg.seed)
    descriptions, table = build_embeddings(network, truth, cfg.embed, cfg.seed)
    sem = assemble_semantic_tensor(descriptions, table, cfg.eval.labels)
    return Prepared(network, truth, train_t, val_t, test_t, split, edges, table, sem)


def corrupted(prep: Prepared, pattern: Pattern | str, rate: float, seed: int) -> TrafficSeriesTensor:
    spec = CorruptionSpec(Pattern(pattern), rate, seed_for(seed, f"corrupt-{Pattern(pattern).value}"))
    return corrupt(prep.truth, spec)


def fit(prep: Prepared, cfg: ExperimentConfig, pattern: Pattern | str | None = None,
        verbose: bool = False) -> TrainResult:
    tcfg = cfg.train if pattern is None else replace(cfg.train, pattern=Pattern(pattern))
    tcfg = replace(tcfg, seed=seed_for(cfg.seed, "train"))
    val_rows = prep.rows(prep.val)
    val_input = corrupted(prep, tcfg.pattern, tcfg.val_rate, cfg.seed).select_days(
        [prep.truth.days.index(d) for d in prep.val.days], role="val")
    mcfg = cfg.model.build(prep.truth.slice_len, prep.table.dim)
    return train(prep.train, prep.val, attention_edges(prep.edges, prep.truth.n_sensors),
                 prep.semantic[prep.rows(prep.train)], prep.semantic[val_rows], tcfg, mcfg,
                 val_input=val_input, verbose=verbose)


def evaluate(prep: Prepared, result: TrainResult | None, cfg: ExperimentConfig, pattern: Pattern | str,
             rates=None, baselines: bool = True, method: str = "GT-TDI") -> MetricsReport:
    """Score the model (and HA/KNN) on originally missing test cells at each rate."""
    pattern = Pattern(pattern)
    report = MetricsReport()
    test_rows = prep.rows(prep.test)
    for rate in rates or cfg.eval.rates:
        inc = corrupted(prep, pattern, rate, cfg.seed)
        sel = (prep.truth.mask & ~inc.mask)[test_rows]
        if not sel.any():
            continue
        if result is not None:
            t0 = time.perf_counter()
            part = inc.select_days([prep.truth.days.index(d) for d in prep.test.days], role="test")
            filled = impute_tensor(result.imputer, part, prep.semantic[test_rows])
            report.add(method, pattern.value, rate, prep.truth.values[test_rows], filled, sel,
                       time.perf_counter() - t0, cfg.seed)
        if baselines:
            score_baselines(prep.truth, inc, test_rows, pattern.value, rate, report, cfg.seed, cfg.eval.knn_k)
    return report


# ---------------------------------------------------------------- ablations

ABLATION_AXES = {
    "semantic_labels": tuple(range(len(LABELS) + 1)),
    "slices": (1, 2, 4, 6, 8, 12),
    "kl_loss": ("on", "off"),
    "pattern_edges": ("on", "off"),
    "kmeans_neighbors": (1, 3, 5, 7, 9),
}


def configure(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    """The experiment config for one ablation cell."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis '{axis}'")
    if value not in ABLATION_AXES[axis]:
        raise ValueError(f"invalid value {value!r} for ablation axis '{axis}'")
    if axis == "semantic_labels":
        return replace(cfg, eval=replace(cfg.eval, labels=LABELS[:value]))
    if axis == "slices":
        return replace(cfg, scenario=replace(cfg.scenario, slices=value))
    if axis == "kl_loss":
        return replace(cfg, train=replace(cfg.train, kl_weight=cfg.train.kl_weight if value == "on" else 0.0))
    if axis == "pattern_edges":
        return replace(cfg, graph=replace(cfg.graph, pattern=value == "on"))
    return replace(cfg, graph=replace(cfg.graph, n_neighbors=value))


def ablation_label(axis: str, value) -> str:
    if axis == "semantic_labels":
        return "labels=" + ("none" if value == 0 else "+".join(l.split("_")[0] for l in LABELS[:value]))
    return f"{axis}={value}"


def ablate(cfg: ExperimentConfig, axis: str, values=None, rates=EVAL_RATES, workers: int = 1,
           prep: Prepared | None = None) -> MetricsReport:
    """Train and score one model per axis value (shared seed); rows are per missing rate."""
    values = ABLATION_AXES.get(axis, ()) if values is None else tuple(values)
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis '{axis}'")

    def cell(value):
        c = configure(cfg, axis, value)
        p = prep
        if p is None or axis in ("slices", "pattern_edges", "kmeans_neighbors", "semantic_labels"):
            p = _prepare_cell(c, prep)
        result = fit(p, c)
        return evaluate(p, result, c, c.train.pattern, rates, baselines=False, method=ablation_label(axis, value))

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(cell, values))
    else:
        parts = [cell(v) for v in values]
    report = MetricsReport()
    for part in parts:
        report.extend(part)
    return report


def _prepare_cell(c: ExperimentConfig, base: Prepared | None) -> Prepared:
    if base is None:
        return prepare(c)
    truth = base.truth
    if truth.slices_per_day != c.scenario.slices:
        truth = reslice_tensor(truth, c.scenario.slices)
    train_t, val_t, test_t, split = split_by_days(truth)
    edges = build_edges(base.network, train_t, c.graph, c.seed)
    descriptions = describe_all(truth, base.network)
    table = base.table
    if truth.slices_per_day != base.truth.slices_per_day:
        descriptions, table = build_embeddings(base.network, truth, c.embed, c.seed)
    sem = assemble_semantic_tensor(descriptions, table, c.eval.labels)
    return Prepared(base.network, truth, train_t, val_t, test_t, split, edges, table, sem)
