"""Baselines, metric reports, and the ablation harness."""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import TrafficSeriesTensor
from .metrics import maape, rmse

EVAL_RATES = tuple(round(0.1 * i, 1) for i in range(1, 10))


# ---------------------------------------------------------------- baselines

def ha_impute(values: np.ndarray, mask: np.ndarray, slices_per_day: int) -> np.ndarray:
    """Fill each gap with the mean of the same (sensor, slice id, point) over the other days.

    Falls back to the sensor mean, then the global mean.
    """
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("historical average needs at least one observed value")
    k, s, length = values.shape
    m = slices_per_day
    v = np.where(mask, values, 0.0).reshape(k // m, m, s, length)
    c = mask.reshape(k // m, m, s, length)
    sums, counts = v.sum(axis=0), c.sum(axis=0)                # (M, S, L)
    slot = np.divide(sums, counts, out=np.full(sums.shape, np.nan), where=counts > 0)
    s_counts = mask.sum(axis=(0, 2))
    sensor_mean = np.divide(np.where(mask, values, 0.0).sum(axis=(0, 2)), s_counts,
                            out=np.full(s, np.nan), where=s_counts > 0)
    global_mean = values[mask].mean()
    sensor_mean = np.where(np.isnan(sensor_mean), global_mean, sensor_mean)
    slot = np.where(np.isnan(slot), sensor_mean[None, :, None], slot)
    fill = np.broadcast_to(slot[None], (k // m, m, s, length)).reshape(k, s, length)
    return np.where(mask, values, fill)


def knn_impute(values: np.ndarray, mask: np.ndarray, slices_per_day: int, k: int = 5) -> np.ndarray:
    """Fill gaps from the k nearest slice vectors of the same sensor.

    Distance is Euclidean over co-observed points; candidates need at least one.
    Points no neighbour observes fall back to :func:`ha_impute`.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    fallback = ha_impute(values, mask, slices_per_day)
    out = np.where(mask, values, fallback)
    n_samples, n_sensors, _ = values.shape
    for s in range(n_sensors):
        m = mask[:, s, :].astype(np.float64)
        x = np.where(mask[:, s, :], values[:, s, :], 0.0)
        incomplete = np.nonzero(m.min(axis=1) == 0)[0]
        if incomplete.size == 0:
            continue
        co = m @ m.T
        x2 = x * x
        d2 = x2 @ m.T + m @ x2.T - 2.0 * (x @ x.T)
        for i in incomplete:
            cand = np.nonzero(co[i] > 0)[0]
            cand = cand[cand != i]
            if cand.size == 0:
                continue
            order = cand[np.lexsort((cand, np.round(d2[i, cand], 9)))][:k]
            miss = m[i] == 0
            cnt = m[order][:, miss].sum(axis=0)
            tot = x[order][:, miss].sum(axis=0)
            filled = np.where(cnt > 0, tot / np.maximum(cnt, 1), fallback[i, s, miss])
            out[i, s, miss] = filled
    return out


# ---------------------------------------------------------------- reports

@dataclass
class MetricsRow:
    method: str
    pattern: str
    rate: float
    maape: float
    rmse: float
    wall_seconds: float = 0.0
    seed: int = 0


@dataclass
class MetricsReport:
    rows: list[MetricsRow] = field(default_factory=list)

    def add(self, method, pattern, rate, truth, prediction, eval_mask, wall_seconds=0.0, seed=0):
        row = MetricsRow(method, str(pattern), float(rate), maape(truth, prediction, eval_mask),
                         rmse(truth, prediction, eval_mask), wall_seconds, seed)
        assert 0.0 <= row.maape <= math.pi / 2 and row.rmse >= 0.0
        self.rows.append(row)
        return row

    def extend(self, other: "MetricsReport") -> None:
        self.rows.extend(other.rows)

    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.rows))

    def rates(self) -> list[float]:
        return sorted({r.rate for r in self.rows})

    def select(self, method: str, pattern: str | None = None) -> list[MetricsRow]:
        return [r for r in self.rows if r.method == method and (pattern is None or r.pattern == pattern)]

    def average_maape(self, method: str, pattern: str | None = None) -> float:
        rows = self.select(method, pattern)
        return float(np.mean([r.maape for r in rows]))

    def to_jsonl(self, timing: bool = False) -> str:
        """Line-delimited records; wall times are left out unless asked for, so reruns compare byte-equal."""
        lines = []
        for r in self.rows:
            rec = asdict(r)
            if not timing:
                rec.pop("wall_seconds")
            lines.append(json.dumps(rec, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_jsonl(cls, text: str) -> "MetricsReport":
        return cls([MetricsRow(**json.loads(line)) for line in text.splitlines() if line.strip()])

    def to_text(self) -> str:
        """Aligned MAAPE(%)/RMSE table: one row per (pattern, method), one column per rate."""
        buf = io.StringIO()
        rates = self.rates()
        patterns = list(dict.fromkeys(r.pattern for r in self.rows))
        header = f"{'pattern':<8}{'method':<28}" + "".join(f"{int(round(100 * x)):>14}%" for x in rates)
        buf.write(header + "\n")
        buf.write("-" * len(header) + "\n")
        for pat in patterns:
            for meth in self.methods():
                cells = {r.rate: r for r in self.select(meth, pat)}
                if not cells:
                    continue
                line = f"{pat:<8}{meth:<28}"
                for x in rates:
                    r = cells.get(x)
                    line += f"{(f'{100 * r.maape:.2f}/{r.rmse:.2f}' if r else '-'):>15}"
                buf.write(line + "\n")
        buf.write("cells: MAAPE (%) / RMSE over originally missing test entries\n")
        return buf.getvalue()


def score_baselines(truth: TrafficSeriesTensor, incomplete: TrafficSeriesTensor, test_rows: np.ndarray,
                    pattern: str, rate: float, report: MetricsReport, seed: int = 0, knn_k: int = 5) -> None:
    """Run HA and KNN on the whole incomplete tensor; score on the test rows only."""
    import time

    sel = (truth.mask & ~incomplete.mask)[test_rows]
    if not sel.any():
        return
    for name, fn in (("HA", lambda: ha_impute(incomplete.values, incomplete.mask, incomplete.slices_per_day)),
                     ("KNN", lambda: knn_impute(incomplete.values, incomplete.mask,
                                                incomplete.slices_per_day, knn_k))):
        t0 = time.perf_counter()
        filled = fn()
        report.add(name, pattern, rate, truth.values[test_rows], filled[test_rows], sel,
                   time.perf_counter() - t0, seed)
