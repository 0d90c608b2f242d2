"""Finite-difference check of every trainable parameter on a tiny model."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import EdgeSet
from .model import ModelConfig, attention_edges, forward, init_params
from .semantic import LABELS

TINY = ModelConfig(slice_len=8, graph_heads=2, graph_head_dim=4, graph_out=4, sem_dim=4,
                   sem_hidden_channels=3, sem_out=8, enc_heads=2, enc_ff_mult=2, dropout=0.0)


def tiny_problem(seed: int = 0, n_sensors: int = 6, batch: int = 3, config: ModelConfig = TINY):
    """Random inputs, ring-plus-chord edges and initialized parameters."""
    rng = np.random.default_rng(seed)
    s, length = n_sensors, config.slice_len
    pairs = [(i, (i + 1) % s) for i in range(s)] + [(0, s // 2)]
    pairs = pairs + [(j, i) for i, j in pairs]
    feats = np.column_stack([rng.integers(0, 2, len(pairs)), rng.integers(0, 2, len(pairs)),
                             rng.uniform(0.1, 1.0, len(pairs))]).astype(np.float64)
    # symmetric features for symmetric pairs
    half = len(pairs) // 2
    feats[half:] = feats[:half]
    edges = attention_edges(EdgeSet(np.array(pairs).T, feats), s)
    values = rng.uniform(0.0, 1.0, (batch, s, length))
    mask = rng.uniform(size=values.shape) < 0.6
    p_sem = rng.normal(size=(batch, s, len(LABELS) * config.sem_dim))
    target = rng.normal(size=values.shape)
    params = init_params(config, seed)
    # nonzero biases and norm affines so their gradients are exercised generically
    for name, t in params.tensors.items():
        if not name.endswith(".w"):
            t.data = t.data + rng.normal(scale=0.1, size=t.data.shape)
    return values, mask, edges, p_sem, target, params


# Some gradients are identically zero (a key bias shifts every score of a node
# equally, a per-channel conv bias is removed by the batch norm); central
# differences return rounding noise there.  The denominator therefore has a
# floor of FLOOR_FRACTION times the median gradient norm over all tensors.
FLOOR_FRACTION = 1e-3


def _norm_error(a: np.ndarray, c: np.ndarray, floor: float) -> float:
    den = max(np.linalg.norm(a), np.linalg.norm(c), floor)
    return float(np.linalg.norm(a - c) / den)


def check_model_gradients(seed: int = 0, step: float = 1e-5) -> dict[str, float]:
    """Relative error ||analytic - numeric|| / max(||analytic||, ||numeric||, floor) per parameter tensor.

    The model runs in training mode (batch statistics in the norm layer) with
    dropout disabled, and the scalar is a fixed random projection of the output.
    """
    values, mask, edges, p_sem, target, params = tiny_problem(seed)

    def loss() -> Tensor:
        out = forward(values, mask, edges, p_sem, params, training=True)
        return (out * target).sum()

    for t in params.parameters():
        t.grad = None
    loss().backward()
    analytic = {k: t.grad.copy() for k, t in params.tensors.items()}

    numerics = {}
    with ad.no_grad():
        for name, t in params.tensors.items():
            flat = t.data.reshape(-1)
            numeric = np.empty_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = float(loss().data)
                flat[i] = orig - step
                fm = float(loss().data)
                flat[i] = orig
                numeric[i] = (fp - fm) / (2 * step)
            numerics[name] = numeric
    floor = FLOOR_FRACTION * float(np.median([np.linalg.norm(g) for g in analytic.values()]))
    return {name: _norm_error(analytic[name].reshape(-1), numerics[name], floor) for name in numerics}
