"""Synthetic wind-farm data: random layouts, top-hat Jensen wakes, power curves.

Wind direction follows the meteorological convention: ``theta`` is the
compass direction the wind comes *from*, clockwise from north, so
``theta = 270`` is a westerly wind blowing towards +x.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

BETZ_LIMIT = 16.0 / 27.0
PLACEMENT_BUDGET = 10_000

# Counts of the full-scale FLORIS dataset this desk setup is scaled down from.
FULL_N_SCENARIOS = 18_280
FULL_N_TURBINE_VALUES = 1_200_862
FULL_TURBINE_RANGE = (28, 150)


class InfeasibleLayoutError(RuntimeError):
    def __init__(self, farm_index: int, placed: int, wanted: int):
        super().__init__(
            f"farm {farm_index}: placed {placed} of {wanted} turbines before exhausting "
            f"{PLACEMENT_BUDGET} placement attempts"
        )
        self.farm_index = farm_index


@dataclass(frozen=True)
class Turbine:
    x: float
    y: float
    rotor_diameter: float = 126.0
    cp: float = 0.45
    rated_power: float = 5.0e6
    cut_in: float = 3.0
    rated_speed: float = 11.4
    cut_out: float = 25.0

    def __post_init__(self):
        if self.rotor_diameter <= 0:
            raise ValueError(f"rotor diameter must be positive, got {self.rotor_diameter}")
        if not 0 < self.cp < BETZ_LIMIT:
            raise ValueError(f"Cp={self.cp} outside (0, 16/27)")
        if not self.cut_in < self.rated_speed < self.cut_out:
            raise ValueError("need cut_in < rated_speed < cut_out")

    def at(self, x: float, y: float) -> "Turbine":
        return replace(self, x=float(x), y=float(y))

    @property
    def spec(self) -> dict:
        d = asdict(self)
        del d["x"], d["y"]
        return d


@dataclass
class FarmScenario:
    turbines: list[Turbine]
    ws: float
    theta: float
    id: int = 0
    min_spacing: float = 0.0

    def __post_init__(self):
        if not self.turbines:
            raise ValueError("a scenario needs at least one turbine")
        if not 0.0 <= self.theta < 360.0:
            raise ValueError(f"wind direction {self.theta} outside [0, 360)")
        t0 = self.turbines[0]
        if not t0.cut_in <= self.ws <= t0.cut_out:
            raise ValueError(f"free-stream speed {self.ws} outside [{t0.cut_in}, {t0.cut_out}]")
        if len(self.turbines) > 1:
            d = pairwise_distances(self.positions)
            np.fill_diagonal(d, np.inf)
            if d.min() <= 0 or d.min() < self.min_spacing:
                raise ValueError(f"turbines closer than allowed ({d.min():.3f} m)")

    @property
    def positions(self) -> np.ndarray:
        return np.array([[t.x, t.y] for t in self.turbines], dtype=np.float64)

    @property
    def n_turbines(self) -> int:
        return len(self.turbines)


@dataclass
class PowerRecord:
    scenario_id: int
    speeds: np.ndarray
    powers: np.ndarray
    farm_power: float

    def __post_init__(self):
        self.speeds = np.asarray(self.speeds, dtype=np.float64)
        self.powers = np.asarray(self.powers, dtype=np.float64)


def downwind_unit(theta_deg: float) -> np.ndarray:
    """Unit vector the wind blows towards."""
    t = math.radians(theta_deg)
    return np.array([-math.sin(t), -math.cos(t)])


def pairwise_distances(xy: np.ndarray) -> np.ndarray:
    diff = xy[:, None, :] - xy[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))


def wind_frame(xy: np.ndarray, theta_deg: float) -> tuple[np.ndarray, np.ndarray]:
    """Downstream and crosswind offsets ``[source, query]`` for all pairs."""
    w = downwind_unit(theta_deg)
    diff = xy[None, :, :] - xy[:, None, :]
    along = diff @ w
    across = diff[..., 0] * w[1] - diff[..., 1] * w[0]
    return along, across


def generate_layouts(
    n_farms: int,
    turbine_count_range: Sequence[int],
    area: float,
    min_spacing: float,
    seed: int,
    rotor_diameter: float = 126.0,
) -> list[np.ndarray]:
    """Random square-site layouts by sequential rejection sampling.

    Each farm draws from its own generator seeded by ``(seed, farm index)``.
    """
    lo, hi = turbine_count_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad turbine count range {turbine_count_range}")
    if min_spacing < 2 * rotor_diameter:
        raise ValueError(f"min_spacing {min_spacing} below two rotor diameters")
    side = math.sqrt(area)
    layouts = []
    for f in range(n_farms):
        rng = np.random.default_rng([seed, 0, f])
        n = int(rng.integers(lo, hi + 1))
        pts: list[np.ndarray] = []
        attempts = 0
        while len(pts) < n:
            if attempts >= PLACEMENT_BUDGET:
                raise InfeasibleLayoutError(f, len(pts), n)
            attempts += 1
            p = rng.uniform(0.0, side, size=2)
            if all(np.hypot(*(p - q)) >= min_spacing for q in pts):
                pts.append(p)
        layouts.append(np.array(pts))
    return layouts


def jensen_deficit(
    upstream: Turbine,
    query_point: Sequence[float],
    wind_direction: float,
    k: float = 0.05,
    a: float = 1.0 / 3.0,
) -> float:
    """Fractional top-hat velocity deficit behind ``upstream`` at ``query_point``."""
    if k <= 0 or not 0 < a < 0.5:
        raise ValueError("need k > 0 and 0 < a < 0.5")
    w = downwind_unit(wind_direction)
    dx = np.asarray(query_point, dtype=np.float64) - np.array([upstream.x, upstream.y])
    x = float(dx @ w)
    r = float(dx[0] * w[1] - dx[1] * w[0])
    D = upstream.rotor_diameter
    if x <= 0 or abs(r) >= D / 2 + k * x:
        return 0.0
    return 2 * a / (1 + 2 * k * x / D) ** 2


def deficit_matrix(scenario: FarmScenario, k: float = 0.05, a: float = 1.0 / 3.0) -> np.ndarray:
    """``out[i, j]`` is the deficit turbine ``i`` imposes on turbine ``j``."""
    xy = scenario.positions
    D = np.array([t.rotor_diameter for t in scenario.turbines])[:, None]
    x, r = wind_frame(xy, scenario.theta)
    inside = (x > 0) & (np.abs(r) < D / 2 + k * np.maximum(x, 0))
    return np.where(inside, 2 * a / (1 + 2 * k * np.maximum(x, 0) / D) ** 2, 0.0)


def effective_wind_speed(target: int, scenario: FarmScenario, k: float = 0.05, a: float = 1.0 / 3.0) -> float:
    """Hub speed of turbine ``target`` with root-sum-square wake superposition."""
    if not 0 <= target < scenario.n_turbines:
        raise IndexError(f"turbine {target} not in scenario")
    return float(effective_wind_speeds(scenario, k, a)[target])


def effective_wind_speeds(scenario: FarmScenario, k: float = 0.05, a: float = 1.0 / 3.0) -> np.ndarray:
    deficits = deficit_matrix(scenario, k, a)
    total = np.sqrt((deficits**2).sum(axis=0))
    return np.maximum(scenario.ws * (1.0 - total), 0.0)


def power_from_wind(v: float, t: Turbine, air_density: float = 1.225) -> float:
    if v < 0:
        raise ValueError(f"negative wind speed {v}")
    if v < t.cut_in or v > t.cut_out:
        return 0.0
    if v >= t.rated_speed:
        return t.rated_power
    area = math.pi * t.rotor_diameter**2 / 4
    return min(t.rated_power, 0.5 * air_density * area * t.cp * v**3)


@dataclass
class SimConfig:
    n_layouts: int = 100
    conditions_per_layout: int = 5
    turbine_count_range: tuple[int, int] = (4, 16)
    area: float = 2500.0**2
    min_spacing: float = 378.0
    ws_range: tuple[float, float] = (4.0, 12.0)
    n_directions: int = 36
    seed: int = 0
    k: float = 0.05
    a: float = 1.0 / 3.0
    air_density: float = 1.225
    turbine: dict = field(default_factory=lambda: Turbine(0.0, 0.0).spec)

    def __post_init__(self):
        self.turbine_count_range = tuple(int(v) for v in self.turbine_count_range)
        self.ws_range = tuple(float(v) for v in self.ws_range)
        if self.n_layouts < 1 or self.conditions_per_layout < 1:
            raise ValueError("need at least one layout and one wind condition")
        if self.n_directions < 1:
            raise ValueError("n_directions must be >= 1")
        lo, hi = self.ws_range
        proto = self.prototype()
        if not proto.cut_in <= lo <= hi <= proto.cut_out:
            raise ValueError(f"ws_range {self.ws_range} must lie within [cut_in, cut_out]")

    @property
    def n_scenarios(self) -> int:
        return self.n_layouts * self.conditions_per_layout

    def prototype(self) -> Turbine:
        return Turbine(0.0, 0.0, **self.turbine)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["turbine_count_range"] = list(self.turbine_count_range)
        d["ws_range"] = list(self.ws_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown simulation config field(s): {sorted(unknown)}")
        return cls(**d)


def desk_config(seed: int = 0) -> SimConfig:
    """500 scenarios of 4-16 turbines."""
    return SimConfig(n_layouts=100, conditions_per_layout=5, seed=seed)


def full_scale_config(seed: int = 0) -> SimConfig:
    """Scenario count and farm sizes of the original study (hours of CPU)."""
    return SimConfig(
        n_layouts=914,
        conditions_per_layout=20,
        turbine_count_range=FULL_TURBINE_RANGE,
        area=9000.0**2,
        seed=seed,
    )


def simulate_scenario(cfg: SimConfig, layout: np.ndarray, index: int) -> tuple[FarmScenario, PowerRecord]:
    rng = np.random.default_rng([cfg.seed, 1, index])
    ws = float(rng.uniform(*cfg.ws_range))
    theta = float(rng.integers(cfg.n_directions)) * 360.0 / cfg.n_directions
    proto = cfg.prototype()
    sc = FarmScenario([proto.at(x, y) for x, y in layout], ws, theta, id=index)
    speeds = effective_wind_speeds(sc, cfg.k, cfg.a)
    powers = np.array([power_from_wind(v, t, cfg.air_density) for v, t in zip(speeds, sc.turbines)])
    return sc, PowerRecord(index, speeds, powers, float(powers.sum()))


def simulate_dataset(cfg: SimConfig) -> list[tuple[FarmScenario, PowerRecord]]:
    layouts = generate_layouts(
        cfg.n_layouts,
        cfg.turbine_count_range,
        cfg.area,
        cfg.min_spacing,
        cfg.seed,
        cfg.prototype().rotor_diameter,
    )
    out = []
    for idx in range(cfg.n_scenarios):
        out.append(simulate_scenario(cfg, layouts[idx // cfg.conditions_per_layout], idx))
    return out


# -- scaling and splitting ----------------------------------------------------

FEATURES = ("ws", "distance", "n_turbines", "turbine_power", "farm_power")


@dataclass
class NormStats:
    """Per-feature min/max used for (0, 1) scaling."""

    bounds: dict[str, tuple[float, float]]

    def span(self, name: str) -> float:
        lo, hi = self.bounds[name]
        return hi - lo

    def scale(self, name: str, x):
        lo, hi = self.bounds[name]
        x = np.asarray(x, dtype=np.float64)
        if hi == lo:
            return np.zeros_like(x)
        return (x - lo) / (hi - lo)

    def unscale(self, name: str, x):
        lo, hi = self.bounds[name]
        return np.asarray(x, dtype=np.float64) * (hi - lo) + lo

    def to_dict(self) -> dict:
        return {k: {"min": lo, "max": hi} for k, (lo, hi) in self.bounds.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls({k: (float(v["min"]), float(v["max"])) for k, v in d.items()})

    @classmethod
    def fit(cls, columns: dict[str, np.ndarray]) -> "NormStats":
        bounds = {}
        for name, vals in columns.items():
            vals = np.asarray(vals, dtype=np.float64)
            lo, hi = (float(vals.min()), float(vals.max())) if vals.size else (0.0, 0.0)
            if hi == lo:
                log.warning("feature %r is constant (%g); it will scale to 0", name, lo)
            bounds[name] = (lo, hi)
        return cls(bounds)


def feature_columns(records: Iterable[tuple[FarmScenario, PowerRecord]]) -> dict[str, np.ndarray]:
    cols: dict[str, list] = {k: [] for k in FEATURES}
    for sc, rec in records:
        cols["ws"].append(sc.ws)
        cols["n_turbines"].append(sc.n_turbines)
        cols["turbine_power"].extend(rec.powers.tolist())
        cols["farm_power"].append(rec.farm_power)
        if sc.n_turbines > 1:
            d = pairwise_distances(sc.positions)
            cols["distance"].extend(d[np.triu_indices(sc.n_turbines, 1)].tolist())
    return {k: np.asarray(v, dtype=np.float64) for k, v in cols.items()}


@dataclass
class Splits:
    train: list
    val: list
    test: list

    def ids(self) -> dict[str, list[int]]:
        return {k: [rec.scenario_id for _, rec in getattr(self, k)] for k in ("train", "val", "test")}


def split_sizes(n: int) -> tuple[int, int, int]:
    n_test = int(round(0.2 * n))
    n_val = int(round(0.2 * (n - n_test)))
    return n - n_test - n_val, n_val, n_test


def normalize_and_split(records: list, seed: int) -> tuple[list, list, list, NormStats]:
    """20% test, then 80/20 train/val of the rest; scaling stats from train only."""
    n = len(records)
    if n < 5:
        raise ValueError(f"need at least 5 records to split, got {n}")
    n_train, n_val, _ = split_sizes(n)
    perm = np.random.default_rng([seed, 2]).permutation(n)
    train = [records[i] for i in perm[:n_train]]
    val = [records[i] for i in perm[n_train:n_train + n_val]]
    test = [records[i] for i in perm[n_train + n_val:]]
    stats = NormStats.fit(feature_columns(train))
    return train, val, test, stats


def select_splits(records: list, ids: dict[str, list[int]]) -> Splits:
    by_id = {rec.scenario_id: (sc, rec) for sc, rec in records}
    return Splits(*([by_id[i] for i in ids[k]] for k in ("train", "val", "test")))


# -- files ----------------------------------------------------------------------

def record_to_json(sc: FarmScenario, rec: PowerRecord) -> str:
    obj = {
        "id": rec.scenario_id,
        "ws": sc.ws,
        "theta": sc.theta,
        "turbines": [{"x": t.x, "y": t.y} for t in sc.turbines],
        "powers": rec.powers.tolist(),
        "farm_power": rec.farm_power,
        "speeds": rec.speeds.tolist(),
    }
    return json.dumps(obj, separators=(",", ":"))


def write_jsonl(records: Iterable[tuple[FarmScenario, PowerRecord]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sc, rec in records:
            fh.write(record_to_json(sc, rec) + "\n")


def read_jsonl(path: str | Path, turbine: dict | None = None) -> list[tuple[FarmScenario, PowerRecord]]:
    proto = Turbine(0.0, 0.0, **(turbine or {}))
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                sc = FarmScenario(
                    [proto.at(t["x"], t["y"]) for t in obj["turbines"]],
                    float(obj["ws"]),
                    float(obj["theta"]),
                    id=int(obj["id"]),
                )
                powers = np.asarray(obj["powers"], dtype=np.float64)
                speeds = np.asarray(obj.get("speeds", [np.nan] * len(powers)), dtype=np.float64)
                rec = PowerRecord(int(obj["id"]), speeds, powers, float(obj["farm_power"]))
            except (KeyError, TypeError, ValueError) as err:
                raise ValueError(f"{path}:{lineno}: malformed scenario ({err})") from err
            if len(rec.powers) != sc.n_turbines:
                raise ValueError(f"{path}:{lineno}: {len(rec.powers)} powers for {sc.n_turbines} turbines")
            out.append((sc, rec))
    return out
