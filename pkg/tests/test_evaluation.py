import math

import numpy as np
import pytest

from gttdi.evaluation import MetricsReport, ha_impute, knn_impute


def test_ha_uses_same_slot_on_other_days():
    # 3 days x 2 slices, 1 sensor, 2 points
    values = np.arange(12, dtype=float).reshape(6, 1, 2)
    mask = np.ones(values.shape, bool)
    mask[0, 0, 1] = False
    out = ha_impute(values, mask, 2)
    # same slot (slice 0, point 1) on days 1 and 2: samples 2 and 4
    assert out[0, 0, 1] == pytest.approx((values[2, 0, 1] + values[4, 0, 1]) / 2)
    assert np.array_equal(out[mask], values[mask])


def test_ha_fallbacks():
    values = np.array([[[4.0, 6.0]], [[0.0, 0.0]]])
    mask = np.array([[[True, True]], [[False, False]]])
    out = ha_impute(values.reshape(2, 1, 2), mask, 1)
    assert np.array_equal(out[1, 0], [4.0, 6.0])
    # a sensor with no observations takes the global mean
    v2 = np.zeros((1, 2, 2))
    v2[0, 0] = [2.0, 4.0]
    m2 = np.zeros((1, 2, 2), bool)
    m2[0, 0] = True
    assert np.array_equal(ha_impute(v2, m2, 1)[0, 1], [3.0, 3.0])
    with pytest.raises(ValueError):
        ha_impute(v2, np.zeros_like(m2), 1)


def test_knn_picks_nearest_slices():
    # sensor slices: two close to the target, one far away
    values = np.array([[[1.0, 2.0, 3.0]], [[1.1, 2.1, 30.0]], [[0.9, 1.9, 10.0]], [[9.0, 9.0, 99.0]]])
    mask = np.ones(values.shape, bool)
    mask[0, 0, 2] = False
    out = knn_impute(values, mask, 1, k=2)
    assert out[0, 0, 2] == pytest.approx(20.0)
    assert np.array_equal(out[mask], values[mask])
    with pytest.raises(ValueError):
        knn_impute(values, mask, 1, k=0)


def test_knn_beats_nothing_on_smooth_data(rng):
    base = np.sin(np.linspace(0, 3, 8))
    values = np.abs(base[None, None, :] * 50 + rng.normal(scale=1, size=(20, 3, 8))) + 10
    mask = rng.random(values.shape) < 0.7
    out = knn_impute(values, mask, 2)
    assert np.abs(out - values)[~mask].mean() < 5.0


def test_report_roundtrip_and_text(rng):
    rep = MetricsReport()
    y = rng.uniform(1, 10, 20)
    sel = np.ones(20, bool)
    rep.add("HA", "rm", 0.5, y, y * 1.1, sel, wall_seconds=1.5)
    rep.add("KNN", "rm", 0.5, y, y, sel)
    rep.add("HA", "rm", 0.1, y, y * 0.9, sel)
    text = rep.to_jsonl()
    assert "wall_seconds" not in text and "wall_seconds" in rep.to_jsonl(timing=True)
    back = MetricsReport.from_jsonl(rep.to_jsonl(timing=True))
    assert back.rows == rep.rows
    assert rep.methods() == ["HA", "KNN"] and rep.rates() == [0.1, 0.5]
    assert rep.average_maape("HA") == pytest.approx(math.atan(0.1))
    table = rep.to_text().splitlines()
    assert table[0].split() == ["pattern", "method", "10%", "50%"]
    assert "-" in table[3]          # KNN has no 10% cell
