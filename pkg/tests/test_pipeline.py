from dataclasses import replace

import numpy as np
import pytest

from gttdi.pipeline import (ABLATION_AXES, ExperimentConfig, ablate, ablation_label, configure, evaluate,
                            fit, prepare, seed_for)
from gttdi.scenario import ScenarioConfig
from gttdi.semantic import LABELS

TINY = ExperimentConfig(seed=3, scenario=ScenarioConfig(n_sensors=6, n_days=10, points_per_day=24, slices=2))
TINY = replace(TINY, train=replace(TINY.train, epochs=2, batch_size=8),
               model=replace(TINY.model, graph_head_dim=4, graph_out=8, sem_out=8, enc_heads=2, enc_ff_mult=2),
               embed=replace(TINY.embed, dim=4, epochs=1),
               graph=replace(TINY.graph, n_neighbors=2))


@pytest.fixture(scope="module")
def prep():
    return prepare(TINY)


def test_seed_for_is_stable_and_stage_specific():
    assert seed_for(0, "train") == seed_for(0, "train")
    assert seed_for(0, "train") != seed_for(0, "embed")
    assert seed_for(0, "train") != seed_for(1, "train")
    assert 0 <= seed_for(5, "x") < 2 ** 63


def test_prepare_splits_cover_all_days(prep):
    days = prep.train.days + prep.val.days + prep.test.days
    assert sorted(days) == sorted(prep.truth.days)
    assert prep.semantic.shape == (prep.truth.n_samples, 6, len(LABELS) * TINY.embed.dim)
    rows = prep.rows(prep.test)
    assert np.array_equal(prep.truth.values[rows], prep.test.values)


def test_configure_rejects_unknown_axis_and_value():
    with pytest.raises(ValueError):
        configure(TINY, "depth", 1)
    with pytest.raises(ValueError):
        configure(TINY, "kl_loss", "maybe")


def test_configure_sets_each_axis():
    assert configure(TINY, "kl_loss", "off").train.kl_weight == 0.0
    assert configure(TINY, "kl_loss", "on").train.kl_weight == TINY.train.kl_weight
    assert configure(TINY, "pattern_edges", "off").graph.pattern is False
    assert configure(TINY, "semantic_labels", 3).eval.labels == LABELS[:3]
    assert configure(TINY, "slices", 6).scenario.slices == 6
    assert configure(TINY, "kmeans_neighbors", 7).graph.n_neighbors == 7


def test_ablation_labels():
    assert ablation_label("semantic_labels", 0) == "labels=none"
    assert ablation_label("semantic_labels", 2) == "labels=road+sensor"
    assert ablation_label("kl_loss", "on") == "kl_loss=on"
    assert set(ABLATION_AXES["semantic_labels"]) == set(range(len(LABELS) + 1))


def test_fit_and_evaluate_tiny(prep):
    result = fit(prep, TINY, "rm")
    assert len(result.log) == 2
    report = evaluate(prep, result, TINY, "rm")
    assert report.methods() == ["GT-TDI", "HA", "KNN"]
    assert all(0.0 <= r.maape <= np.pi / 2 for r in report.rows)


def test_ablate_tiny_is_deterministic(prep):
    a = ablate(TINY, "kl_loss", rates=(0.3,), prep=prep)
    b = ablate(TINY, "kl_loss", rates=(0.3,), prep=prep)
    assert [r.method for r in a.rows] == ["kl_loss=on", "kl_loss=off"]
    assert [(r.maape, r.rmse) for r in a.rows] == [(r.maape, r.rmse) for r in b.rows]
