"""Imputation error metrics, computed only over the selected (originally missing) cells."""

from __future__ import annotations

import numpy as np


def _selected(truth, prediction, eval_mask):
    truth = np.asarray(truth, dtype=np.float64)
    prediction = np.asarray(prediction, dtype=np.float64)
    if truth.shape != prediction.shape:
        raise ValueError(f"shape mismatch: truth {truth.shape} vs prediction {prediction.shape}")
    sel = np.ones(truth.shape, dtype=bool) if eval_mask is None else np.asarray(eval_mask, dtype=bool)
    if not sel.any():
        raise ValueError("metric over an empty selection")
    return truth[sel], prediction[sel]


def maape(truth, prediction, eval_mask=None) -> float:
    """Mean arctangent absolute percentage error; a zero truth value scores pi/2 unless matched exactly."""
    y, yhat = _selected(truth, prediction, eval_mask)
    err = np.abs(y - yhat)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(y != 0, err / np.abs(np.where(y != 0, y, 1.0)), np.where(err == 0, 0.0, np.inf))
    return float(np.mean(np.arctan(ratio)))


def rmse(truth, prediction, eval_mask=None) -> float:
    y, yhat = _selected(truth, prediction, eval_mask)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))
