"""Synthetic road networks with diurnal, weekly, and spatially correlated traffic."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .data import RoadNetwork, Sensor, TrafficSeriesTensor, from_daily


class Topology(str, enum.Enum):
    CHAIN = "chain"
    GRID = "grid"
    TWO_CORRIDORS = "two-corridors"


@dataclass(frozen=True)
class ScenarioConfig:
    n_sensors: int = 20
    n_days: int = 30
    points_per_day: int = 48
    slices: int = 4
    topology: Topology = Topology.TWO_CORRIDORS
    noise_std: float = 0.08
    weekend_factor: float = 0.6
    seed: int = 0
    start_date: str = "2013-01-01"
    units: str = "flow"

    def __post_init__(self):
        object.__setattr__(self, "topology", Topology(self.topology))
        if self.n_sensors < 2:
            raise ValueError("a scenario needs at least 2 sensors")
        if self.n_days < 3:
            raise ValueError("a scenario needs at least 3 days")
        if self.slices < 1 or self.points_per_day % self.slices:
            raise ValueError(f"{self.slices} slices do not divide {self.points_per_day} points per day")
        if (24 * 60) % self.points_per_day:
            raise ValueError(f"{self.points_per_day} points do not tile a day in whole minutes")
        if self.noise_std < 0 or self.weekend_factor <= 0:
            raise ValueError("noise_std must be >= 0 and weekend_factor > 0")

    @property
    def interval_minutes(self) -> int:
        return 24 * 60 // self.points_per_day


_DIRS = ("N", "E", "S", "W")


def _layout(cfg: ScenarioConfig, rng: np.random.Generator) -> RoadNetwork:
    s = cfg.n_sensors
    if cfg.topology is Topology.CHAIN:
        roads = [list(range(s))]
    elif cfg.topology is Topology.TWO_CORRIDORS:
        half = s // 2
        roads = [list(range(half)), list(range(half, s))]
    else:
        n_roads = max(2, int(round(np.sqrt(s))))
        roads = [list(range(r, s, n_roads)) for r in range(n_roads)]
    sensors, segments = [None] * s, []
    for r, members in enumerate(roads):
        gaps = rng.uniform(0.5, 1.5, size=len(members))
        along = np.cumsum(gaps) - gaps[0]
        for pos, idx in zip(along, members):
            if cfg.topology is Topology.GRID:
                # alternate horizontal / vertical roads on a lattice
                xy = (float(pos), float(r)) if r % 2 == 0 else (float(r), float(pos))
            else:
                xy = (float(pos), float(10 * r))
            sensors[idx] = Sensor(f"{700000 + 1000 * r + idx}", f"R{r + 1}", xy, _DIRS[r % len(_DIRS)])
        segments += [(sensors[a].sensor_id, sensors[b].sensor_id) for a, b in zip(members, members[1:])]
    return RoadNetwork(tuple(sensors), tuple(segments), cfg.start_date)


def _bump(t, centre, width):
    return np.exp(-0.5 * ((t - centre) / width) ** 2)


def generate(cfg: ScenarioConfig) -> tuple[RoadNetwork, TrafficSeriesTensor]:
    """Network plus a fully observed (D*M, S, N/M) tensor; ``network.calendar`` maps day -> date parts."""
    rng = np.random.default_rng(cfg.seed)
    network = _layout(cfg, rng)
    s, d, n = cfg.n_sensors, cfg.n_days, cfg.points_per_day
    hours = np.arange(n) * 24.0 / n

    road_of = {}
    for i, sen in enumerate(network.sensors):
        road_of.setdefault(sen.road_id, []).append(i)
    profile = np.zeros((s, n))
    for members in road_of.values():
        am_peak, pm_peak = rng.uniform(7.0, 9.0), rng.uniform(16.5, 18.5)
        am_w, pm_w = rng.uniform(0.8, 1.5), rng.uniform(1.0, 2.0)
        am_h, pm_h = rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0)
        level = rng.uniform(150.0, 300.0)
        # amplitude and timing drift smoothly along the road
        amp = level * np.exp(np.cumsum(rng.normal(0.0, 0.12, len(members))))
        shift = np.cumsum(rng.normal(0.0, 0.15, len(members)))
        for idx, a, sh in zip(members, amp, shift):
            shape = 0.12 + am_h * _bump(hours, am_peak + sh, am_w) + pm_h * _bump(hours, pm_peak + sh, pm_w)
            shape = shape + 0.35 * _bump(hours, 13.0, 3.0)
            profile[idx] = a * shape

    weekday = np.array([network.calendar(day)[2] for day in range(d)])
    day_scale = np.where(weekday >= 5, cfg.weekend_factor, 1.0)
    road_idx = np.array([list(road_of).index(sen.road_id) for sen in network.sensors])
    road_day = 1.0 + 0.5 * cfg.noise_std * rng.standard_normal((d, len(road_of)))
    factor = day_scale[:, None] * road_day[:, road_idx]                     # (D, S)
    noise = 1.0 + cfg.noise_std * rng.standard_normal((d, s, n))
    values = np.maximum(profile[None] * factor[:, :, None] * noise, 0.0)
    tensor = from_daily(values, None, cfg.slices, interval_minutes=cfg.interval_minutes, units=cfg.units)
    return network, tensor
