"""Bundled synthetic instances.

``fixture-20`` and ``fixture-40`` are smooth random fuel mosaics with a few
non-fuel features; ``fixture-10`` is ``fixture-20`` shrunk by nearest
neighbour. Each instance has its own fuel catalog whose spread
probabilities were scaled once so that the untreated landscape burns a
target fraction of cells on average (18% for the 10x10 and 20x20 grids,
31% for the 40x40 grid). Regenerate with ``python -m firebreak.fixtures``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import ndimage

from .firesim import SpreadModel, run_batch
from .landscape import (
    Fuel,
    FuelCatalog,
    IgnitionZone,
    Landscape,
    WeatherScenario,
    atomic_write_text,
    load_fuels,
    load_landscape,
    load_weather,
    save_landscape,
    save_weather,
    shrink_nearest,
)

DATA = Path(str(resources.files("firebreak") / "data"))
FIXTURES = ("fixture-10", "fixture-20", "fixture-40")

BASE_FUELS = FuelCatalog({
    1: Fuel("grass", 0.9),
    2: Fuel("shrub", 0.7),
    3: Fuel("conifer", 0.55),
    4: Fuel("deciduous", 0.25),
})

WEATHER = (
    WeatherScenario(45.0, 18.0, "w0"),
    WeatherScenario(60.0, 10.0, "w1"),
    WeatherScenario(90.0, 14.0, "w2"),
    WeatherScenario(20.0, 6.0, "w3"),
)

MODEL = SpreadModel(wind_gain=1.0, speed_ref=20.0)

CALIBRATION_RUNS = 10_000


@dataclass(frozen=True)
class Fixture:
    name: str
    landscape: Landscape
    weather: tuple[WeatherScenario, ...]
    zone: IgnitionZone
    model: SpreadModel
    burned_fraction: float


def fixture_path(name: str, suffix: str = ".grid") -> Path:
    return DATA / f"{name}{suffix}"


def eval_seeds() -> list[int]:
    """The fixed 500-seed evaluation list."""
    return [int(s) for s in (DATA / "eval_seeds.txt").read_text().split()]


def load_fixture(name: str) -> Fixture:
    if name not in FIXTURES:
        raise KeyError(f"unknown fixture {name!r}; choose from {FIXTURES}")
    meta = json.loads((DATA / "fixtures.json").read_text())[name]
    return Fixture(
        name=name,
        landscape=load_landscape(fixture_path(name)),
        weather=load_weather(DATA / "weather.csv"),
        zone=IgnitionZone(tuple(meta["zone_center"]), meta["zone_radius"]),
        model=SpreadModel(meta["wind_gain"], meta["speed_ref"]),
        burned_fraction=meta["burned_fraction"],
    )


# ------------------------------------------------------------ generation

def mosaic(rows: int, cols: int, seed: int, smooth: float) -> np.ndarray:
    """Smooth random fuel mosaic with a non-fuel stream and a few rock outcrops."""
    rng = np.random.default_rng(seed)
    field = ndimage.gaussian_filter(rng.normal(size=(rows, cols)), smooth, mode="wrap")
    cuts = np.quantile(field, [0.25, 0.55, 0.8])
    codes = 1 + np.searchsorted(cuts, field)
    # a meandering stream across the lower part of the grid
    col = np.arange(cols)
    stream = (0.72 * rows + 0.1 * rows * np.sin(col / cols * 2.5 * np.pi + rng.uniform(0, 6))).astype(int)
    codes[np.clip(stream, 0, rows - 1), col] = 0
    for _ in range(max(1, rows * cols // 200)):
        r, c = rng.integers(rows), rng.integers(cols)
        codes[r, c] = 0
    return codes


def burned_fraction(landscape, weather, zone, model, runs, seed=12345) -> float:
    outcomes = run_batch(landscape, model, weather, zone, runs, seed)
    return float(np.mean([o.size for o in outcomes])) / landscape.n_cells


def calibrate(cells: np.ndarray, zone: IgnitionZone, target: float, runs: int = 3000,
              iters: int = 25) -> tuple[FuelCatalog, float]:
    """Bisect a global probability scale so the untreated burn hits ``target``."""
    rows, cols = cells.shape

    def frac(scale):
        land = Landscape(rows, cols, cells, BASE_FUELS.scaled(scale))
        return burned_fraction(land, WEATHER, zone, MODEL, runs)

    lo, hi = 0.0, 1.0 / max(f.base_spread_prob for f in BASE_FUELS.entries.values())
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if frac(mid) < target:
            lo = mid
        else:
            hi = mid
    scale = round(0.5 * (lo + hi), 6)
    catalog = BASE_FUELS.scaled(scale)
    catalog = FuelCatalog({c: Fuel(f.name, round(f.base_spread_prob, 6)) for c, f in catalog.entries.items()})
    return catalog, scale


def generate(out: Path = DATA) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    specs = {
        "fixture-20": dict(shape=(20, 20), radius=4, target=0.18),
        "fixture-40": dict(shape=(40, 40), radius=9, target=0.31),
        "fixture-10": dict(shape=(10, 10), radius=2, target=0.18),
    }
    raw20 = mosaic(20, 20, seed=20, smooth=2.0)
    raw = {
        "fixture-20": raw20,
        "fixture-40": mosaic(40, 40, seed=40, smooth=3.0),
        "fixture-10": shrink_nearest(Landscape(20, 20, raw20, BASE_FUELS), 10, 10).grid,
    }
    meta = {}
    for name, spec in specs.items():
        rows, cols = spec["shape"]
        zone = IgnitionZone((rows // 2, cols // 2), spec["radius"])
        catalog, scale = calibrate(raw[name], zone, spec["target"])
        land = Landscape(rows, cols, raw[name], catalog)
        save_landscape(land, out / f"{name}.grid")
        frac = burned_fraction(land, WEATHER, zone, MODEL, CALIBRATION_RUNS, seed=999)
        meta[name] = {"zone_center": list(zone.center), "zone_radius": zone.radius,
                      "wind_gain": MODEL.wind_gain, "speed_ref": MODEL.speed_ref,
                      "target": spec["target"], "scale": scale, "burned_fraction": round(frac, 6),
                      "calibration_runs": CALIBRATION_RUNS}
    save_weather(WEATHER, out / "weather.csv")
    seeds = np.random.SeedSequence(2024).generate_state(500, dtype=np.uint64) >> np.uint64(1)
    atomic_write_text(out / "eval_seeds.txt", "\n".join(str(s) for s in seeds.tolist()) + "\n")
    atomic_write_text(out / "fixtures.json", json.dumps(meta, indent=2) + "\n")
    return meta


if __name__ == "__main__":
    print(json.dumps(generate(), indent=2))
