"""Masked-MSE + KL training with Adam, and imputation with a trained model."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corruption import Pattern, apply_nonrandom_missing, apply_random_missing
from .data import MinMaxScaler, TrafficSeriesTensor, reslice
from .metrics import maape, rmse
from .model import AttentionEdges, GTTDIParams, ModelConfig, forward, init_params

TRAIN_RATES = tuple(round(0.1 * i, 1) for i in range(1, 10))


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, detail: str = ""):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}" + (f": {detail}" if detail else ""))
        self.epoch, self.batch = epoch, batch


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 200
    batch_size: int = 8
    kl_weight: float = 0.001
    patience: int = 60
    seed: int = 0
    pattern: Pattern = Pattern.RM
    val_rate: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "pattern", Pattern(self.pattern))
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be >= 0")


def masked_mse(pred: Tensor, truth: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared error over entries where ``mask`` is False (missing); 0 if none are."""
    if pred.shape != np.shape(truth) or pred.shape != np.shape(mask):
        raise ad.ShapeError(f"masked_mse: shapes {pred.shape}, {np.shape(truth)}, {np.shape(mask)}")
    missing = ~np.asarray(mask, dtype=bool)
    count = int(missing.sum())
    if count == 0:
        # stays in the graph; adding +0.0 clears the sign a negative sum would leave
        return ad.add(ad.scale(ad.sum_(pred), 0.0), 0.0)
    diff = (pred - np.where(missing, truth, 0.0)) * missing.astype(np.float64)
    return ad.scale(ad.sum_(diff * diff), 1.0 / count)


def kl_divergence_loss(pred: Tensor, truth: np.ndarray, eps: float = 1e-8) -> Tensor:
    """Mean over slice vectors of KL(truth distribution || predicted distribution).

    Each length-L vector becomes a distribution by clamping below at ``eps``
    and dividing by its sum.
    """
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ad.ShapeError(f"kl_divergence_loss: shapes {pred.shape} and {truth.shape}")
    t = np.maximum(truth, eps)
    p_true = t / t.sum(axis=-1, keepdims=True)
    q = ad.clamp_min(pred, eps)
    log_q = ad.log(q) - ad.log(q.sum(axis=-1, keepdims=True))
    kl = ad.sum_(p_true * (np.log(p_true) - log_q), axis=-1)
    return kl.mean()


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 0.001, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad ** 2
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        ad.zero_grad(self.params)


def _substream(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, np.uint64)[0])


def training_mask(truth: TrafficSeriesTensor, pattern: Pattern, rate: float, seed: int) -> np.ndarray:
    """Artificial observation mask (sliced layout) over a ground-truth tensor."""
    _, daily = truth.daily()
    if pattern is Pattern.RM:
        out = apply_random_missing(daily, rate, seed)
    else:
        out = apply_nonrandom_missing(daily, rate, seed)
    return reslice(out, truth.slices_per_day)


@dataclass
class Imputer:
    """Trained parameters plus the normalization and graph they were trained with."""

    params: GTTDIParams
    scaler: MinMaxScaler
    edges: AttentionEdges
    batch_size: int = 32

    def predict(self, values: np.ndarray, mask: np.ndarray, p_sem: np.ndarray) -> np.ndarray:
        """Full reconstruction in data units, eval mode."""
        out = np.empty(values.shape)
        norm = self.scaler.transform(values)
        with ad.no_grad():
            for start in range(0, values.shape[0], self.batch_size):
                sl = slice(start, start + self.batch_size)
                y = forward(norm[sl], mask[sl], self.edges, p_sem[sl], self.params, training=False)
                out[sl] = self.scaler.inverse(y.data)
        return out


def impute(values: np.ndarray, mask: np.ndarray, prediction: np.ndarray) -> np.ndarray:
    """Observed entries copied through unchanged; missing ones taken from the model output."""
    values = np.asarray(values)
    mask = np.asarray(mask, dtype=bool)
    if values.shape != mask.shape or values.shape != np.shape(prediction):
        raise ValueError(f"shape mismatch: {values.shape}, {mask.shape}, {np.shape(prediction)}")
    return np.where(mask, values, prediction)


def impute_tensor(imputer: Imputer, incomplete: TrafficSeriesTensor, p_sem: np.ndarray) -> np.ndarray:
    pred = imputer.predict(incomplete.values, incomplete.mask, p_sem)
    return impute(incomplete.values, incomplete.mask, pred)


@dataclass
class TrainResult:
    imputer: Imputer
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def evaluate_imputer(imputer: Imputer, truth: TrafficSeriesTensor, incomplete: TrafficSeriesTensor,
                     p_sem: np.ndarray) -> tuple[float, float]:
    filled = impute_tensor(imputer, incomplete, p_sem)
    sel = truth.mask & ~incomplete.mask
    if not sel.any():
        return 0.0, 0.0
    return maape(truth.values, filled, sel), rmse(truth.values, filled, sel)


def train(train_truth: TrafficSeriesTensor, val_truth: TrafficSeriesTensor, edges: AttentionEdges,
          sem_train: np.ndarray, sem_val: np.ndarray, config: TrainConfig,
          model_config: ModelConfig | None = None, val_input: TrafficSeriesTensor | None = None,
          params: GTTDIParams | None = None, verbose: bool = False) -> TrainResult:
    """Train on the training split; keep the snapshot with the lowest validation MAAPE."""
    if model_config is None:
        model_config = ModelConfig(slice_len=train_truth.slice_len)
    if params is None:
        params = init_params(model_config, config.seed)
    scaler = MinMaxScaler.fit(train_truth)
    if val_input is None:
        val_mask = training_mask(val_truth, config.pattern, config.val_rate, _substream(config.seed, 7))
        val_input = val_truth.with_mask(val_mask & val_truth.mask)

    best = params.copy()
    result = TrainResult(Imputer(best, scaler, edges))
    if config.epochs == 0:
        return result

    order_rng = np.random.default_rng(_substream(config.seed, 1))
    drop_rng = np.random.default_rng(_substream(config.seed, 2))
    opt = Adam(params.parameters(), lr=config.learning_rate)
    truth_norm = scaler.transform(train_truth.values)
    span = scaler.hi - scaler.lo
    best_score, stale = np.inf, 0
    live = Imputer(params, scaler, edges)

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        perm = order_rng.permutation(train_truth.n_samples)
        mse_sum = kl_sum = 0.0
        n_batches = 0
        for b, start in enumerate(range(0, len(perm), config.batch_size)):
            rows = np.sort(perm[start:start + config.batch_size])
            rate = TRAIN_RATES[order_rng.integers(len(TRAIN_RATES))]
            art = training_mask(train_truth, config.pattern, rate, _substream(config.seed, 3, epoch, b))[rows]
            in_mask = art & train_truth.mask[rows]
            y_true = truth_norm[rows]
            opt.zero_grad()
            try:
                pred = forward(np.where(in_mask, y_true, 0.0), in_mask, edges, sem_train[rows],
                               params, training=True, rng=drop_rng)
                mse = masked_mse(pred, y_true, in_mask | ~train_truth.mask[rows])
                # KL compares imputed slices (observed cells copied through) with the truth, in data
                # units: flows are bounded away from 0 there, so few entries sit in the eps clamp
                filled = ad.mul(pred, (~in_mask).astype(np.float64)) + np.where(in_mask, y_true, 0.0)
                kl = kl_divergence_loss(ad.scale(filled, span) + scaler.lo,
                                        np.where(train_truth.mask[rows], train_truth.values[rows], 0.0))
                loss = mse + ad.scale(kl, config.kl_weight) if config.kl_weight else mse
            except ad.NonFiniteError as exc:
                raise TrainingDivergedError(epoch, b, str(exc)) from None
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(epoch, b)
            loss.backward()
            opt.step()
            mse_sum += float(mse.data)
            kl_sum += float(kl.data)
            n_batches += 1

        val_maape, val_rmse = evaluate_imputer(live, val_truth, val_input, sem_val)
        record = {"epoch": epoch, "train_mse": mse_sum / n_batches, "train_kl": kl_sum / n_batches,
                  "val_maape": val_maape, "val_rmse": val_rmse,
                  "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
        result.log.append(record)
        if verbose:
            print(record)
        if val_maape < best_score:
            best_score, stale = val_maape, 0
            best = params.copy()
            result.best_epoch = epoch
        else:
            stale += 1
            if stale >= config.patience:
                break
    result.imputer = Imputer(best, scaler, edges)
    return result
