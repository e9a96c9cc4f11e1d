"""Landscape grids, fuel catalogs, weather scenarios and ignition zones.

A landscape is a rectangular raster of small integer fuel codes. Code 0 is
reserved for non-fuel (rock, water, treated firebreak) and never burns.

File formats
------------
``.grid``   ``rows R`` / ``cols C`` header lines, then R lines of C
            whitespace-separated nonnegative integers.
``.fuels``  one ``code name base_spread_prob`` entry per line.
``.csv``    weather table with header ``id,wind_dir_deg,wind_speed``.

Lines starting with ``#`` and blank lines are ignored in ``.fuels`` files.
"""
from __future__ import annotations

import csv
import math
import os
import tempfile
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


class LandscapeError(ValueError):
    """Malformed landscape, catalog or weather input."""


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------- fuels

@dataclass(frozen=True)
class Fuel:
    name: str
    base_spread_prob: float


@dataclass(frozen=True)
class FuelCatalog:
    """Mapping from fuel code to its name and base spread probability."""

    entries: Mapping[int, Fuel]

    def __post_init__(self):
        entries = {int(code): fuel for code, fuel in self.entries.items()}
        if 0 not in entries:
            entries[0] = Fuel("nonfuel", 0.0)
        if entries[0].base_spread_prob != 0.0:
            raise LandscapeError("fuel code 0 is reserved for non-fuel and must have spread prob 0")
        for code, fuel in entries.items():
            if code < 0:
                raise LandscapeError(f"negative fuel code {code}")
            if not 0.0 <= fuel.base_spread_prob <= 1.0:
                raise LandscapeError(f"fuel {code}: base_spread_prob {fuel.base_spread_prob} outside [0, 1]")
        object.__setattr__(self, "entries", dict(sorted(entries.items())))

    @property
    def codes(self) -> tuple[int, ...]:
        return tuple(self.entries)

    def __contains__(self, code) -> bool:
        return int(code) in self.entries

    def prob_table(self) -> np.ndarray:
        """Array indexed by fuel code giving the base spread probability."""
        table = np.zeros(max(self.entries) + 1)
        for code, fuel in self.entries.items():
            table[code] = fuel.base_spread_prob
        return table

    def scaled(self, factor: float) -> "FuelCatalog":
        return FuelCatalog({c: Fuel(f.name, min(1.0, f.base_spread_prob * factor))
                            for c, f in self.entries.items()})


def load_fuels(path: str | os.PathLike) -> FuelCatalog:
    entries = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise LandscapeError(f"{path}:{lineno}: expected 'code name base_spread_prob'")
            try:
                code, prob = int(parts[0]), float(parts[2])
            except ValueError as exc:
                raise LandscapeError(f"{path}:{lineno}: {exc}") from None
            if code in entries:
                raise LandscapeError(f"{path}:{lineno}: duplicate fuel code {code}")
            entries[code] = Fuel(parts[1], prob)
    return FuelCatalog(entries)


def format_fuels(catalog: FuelCatalog) -> str:
    return "".join(f"{code} {fuel.name} {fuel.base_spread_prob!r}\n"
                   for code, fuel in catalog.entries.items())


def save_fuels(catalog: FuelCatalog, path: str | os.PathLike) -> None:
    atomic_write_text(path, format_fuels(catalog))


# ------------------------------------------------------------ landscape

@dataclass(frozen=True, eq=False)
class Landscape:
    """Immutable row-major grid of fuel codes plus its catalog."""

    rows: int
    cols: int
    cells: np.ndarray
    catalog: FuelCatalog

    def __post_init__(self):
        cells = np.array(self.cells, dtype=np.int64).reshape(-1)
        if self.rows < 2 or self.cols < 2:
            raise LandscapeError(f"grid must be at least 2x2, got {self.rows}x{self.cols}")
        if cells.size != self.rows * self.cols:
            raise LandscapeError(f"expected {self.rows * self.cols} cells, got {cells.size}")
        unknown = set(np.unique(cells).tolist()) - set(self.catalog.codes)
        if unknown:
            raise LandscapeError(f"unknown fuel codes {sorted(unknown)}")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    @property
    def grid(self) -> np.ndarray:
        return self.cells.reshape(self.rows, self.cols)

    @property
    def flammable(self) -> np.ndarray:
        return self.cells != 0

    def rc(self, index: int) -> tuple[int, int]:
        return divmod(int(index), self.cols)

    def index(self, row: int, col: int) -> int:
        return row * self.cols + col

    def with_firebreaks(self, cells) -> "Landscape":
        new = self.cells.copy()
        new[np.asarray(list(cells), dtype=np.int64)] = 0
        return Landscape(self.rows, self.cols, new, self.catalog)

    def __eq__(self, other):
        if not isinstance(other, Landscape):
            return NotImplemented
        return (self.rows == other.rows and self.cols == other.cols
                and np.array_equal(self.cells, other.cells)
                and self.catalog == other.catalog)

    def __hash__(self):
        return hash((self.rows, self.cols, self.cells.tobytes()))


def format_grid(rows: int, cols: int, values: Sequence, fmt=str) -> str:
    values = np.asarray(values).reshape(rows, cols)
    lines = [f"rows {rows}", f"cols {cols}"]
    lines += [" ".join(fmt(v) for v in row) for row in values.tolist()]
    return "\n".join(lines) + "\n"


def parse_grid_header(lines: list[str], path) -> tuple[int, int]:
    def header(lineno, key):
        if len(lines) < lineno:
            raise LandscapeError(f"{path}:{lineno}: missing '{key}' header")
        parts = lines[lineno - 1].split()
        if len(parts) != 2 or parts[0].lower() != key:
            raise LandscapeError(f"{path}:{lineno}: malformed header, expected '{key} <int>'")
        try:
            value = int(parts[1])
        except ValueError:
            raise LandscapeError(f"{path}:{lineno}: malformed header, '{parts[1]}' is not an integer") from None
        if value < 1:
            raise LandscapeError(f"{path}:{lineno}: malformed header, {key} must be positive")
        return value

    return header(1, "rows"), header(2, "cols")


def load_landscape(path: str | os.PathLike, catalog: FuelCatalog | None = None) -> Landscape:
    """Parse a ``.grid`` file.

    Without an explicit ``catalog`` the sibling ``.fuels`` file (same stem)
    is used. Errors carry the offending line number.
    """
    path = Path(path)
    if catalog is None:
        fuels = path.with_suffix(".fuels")
        if not fuels.exists():
            raise LandscapeError(f"{path}: no catalog given and {fuels.name} not found")
        catalog = load_fuels(fuels)
    lines = [ln for ln in path.read_text().splitlines()]
    while lines and not lines[-1].strip():
        lines.pop()
    rows, cols = parse_grid_header(lines, path)
    body = lines[2:]
    if len(body) != rows:
        raise LandscapeError(f"{path}:{len(lines)}: row count mismatch, header says {rows}, found {len(body)}")
    cells = []
    for lineno, line in enumerate(body, 3):
        parts = line.split()
        if len(parts) != cols:
            raise LandscapeError(f"{path}:{lineno}: row length mismatch, expected {cols} values, found {len(parts)}")
        for tok in parts:
            try:
                code = int(tok)
            except ValueError:
                raise LandscapeError(f"{path}:{lineno}: non-integer cell '{tok}'") from None
            if code < 0:
                raise LandscapeError(f"{path}:{lineno}: negative cell '{tok}'")
            if code not in catalog:
                raise LandscapeError(f"{path}:{lineno}: unknown fuel code {code}")
            cells.append(code)
    return Landscape(rows, cols, np.array(cells), catalog)


def save_landscape(landscape: Landscape, path: str | os.PathLike, fuels: bool = True) -> None:
    """Write ``.grid`` (and the sibling ``.fuels`` unless ``fuels=False``)."""
    path = Path(path)
    atomic_write_text(path, format_grid(landscape.rows, landscape.cols, landscape.cells))
    if fuels:
        save_fuels(landscape.catalog, path.with_suffix(".fuels"))


def shrink_nearest(landscape: Landscape, new_rows: int, new_cols: int) -> Landscape:
    """Nearest-neighbour downsampling using the pixel-centre rule.

    Output cell (i, j) copies input cell
    (floor((i + 0.5) * rows / new_rows), floor((j + 0.5) * cols / new_cols)).
    """
    if new_rows < 1 or new_cols < 1:
        raise ValueError("target dimensions must be positive")
    if new_rows > landscape.rows or new_cols > landscape.cols:
        raise ValueError("shrink_nearest cannot enlarge a grid")
    # integer arithmetic keeps the centre rule exact
    src_r = ((2 * np.arange(new_rows) + 1) * landscape.rows) // (2 * new_rows)
    src_c = ((2 * np.arange(new_cols) + 1) * landscape.cols) // (2 * new_cols)
    cells = landscape.grid[np.ix_(src_r, src_c)]
    return Landscape(new_rows, new_cols, cells, landscape.catalog)


# -------------------------------------------------------------- weather

@dataclass(frozen=True)
class WeatherScenario:
    """Wind blowing *toward* ``wind_dir_deg`` (0 = north, clockwise)."""

    wind_dir_deg: float
    wind_speed: float
    id: str = ""

    def __post_init__(self):
        if not math.isfinite(self.wind_dir_deg) or not math.isfinite(self.wind_speed):
            raise LandscapeError("weather values must be finite")
        if self.wind_speed < 0:
            raise LandscapeError(f"negative wind speed {self.wind_speed}")
        object.__setattr__(self, "wind_dir_deg", float(self.wind_dir_deg) % 360.0)
        object.__setattr__(self, "wind_speed", float(self.wind_speed))


def load_weather(path: str | os.PathLike) -> tuple[WeatherScenario, ...]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["id", "wind_dir_deg", "wind_speed"]:
            raise LandscapeError(f"{path}:1: expected header 'id,wind_dir_deg,wind_speed'")
        out = []
        for lineno, row in enumerate(reader, 2):
            try:
                out.append(WeatherScenario(float(row["wind_dir_deg"]), float(row["wind_speed"]), row["id"].strip()))
            except (TypeError, ValueError) as exc:
                raise LandscapeError(f"{path}:{lineno}: {exc}") from None
    if not out:
        raise LandscapeError(f"{path}: no weather scenarios")
    return tuple(out)


def save_weather(scenarios: Sequence[WeatherScenario], path: str | os.PathLike) -> None:
    lines = ["id,wind_dir_deg,wind_speed"]
    lines += [f"{w.id or i},{w.wind_dir_deg!r},{w.wind_speed!r}" for i, w in enumerate(scenarios)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def sample_weather(scenarios: Sequence[WeatherScenario], rng: np.random.Generator) -> WeatherScenario:
    if len(scenarios) == 0:
        raise ValueError("cannot sample from an empty weather set")
    return scenarios[int(rng.integers(len(scenarios)))]


# ------------------------------------------------------------- ignition

@dataclass(frozen=True)
class IgnitionZone:
    """Cells within Euclidean ``radius`` of ``center``.

    With ``ring=True`` only cells whose rounded distance equals ``radius``
    are used (the circumference reading).
    """

    center: tuple[int, int]
    radius: int
    ring: bool = False

    def __post_init__(self):
        object.__setattr__(self, "center", (int(self.center[0]), int(self.center[1])))
        if self.radius < 0:
            raise LandscapeError("ignition radius must be nonnegative")

    def cells(self, rows: int, cols: int) -> np.ndarray:
        """Sorted row-major indices of the zone; raises if it leaves the grid."""
        return _zone_cells(self, rows, cols)


@lru_cache(maxsize=64)
def _zone_cells(zone: IgnitionZone, rows: int, cols: int) -> np.ndarray:
    r0, c0 = zone.center
    if not (zone.radius <= r0 < rows - zone.radius and zone.radius <= c0 < cols - zone.radius):
        raise LandscapeError(f"ignition zone {zone} does not fit in a {rows}x{cols} grid")
    rr, cc = np.mgrid[0:rows, 0:cols]
    dist = np.hypot(rr - r0, cc - c0)
    if zone.ring:
        inside = np.rint(dist) == zone.radius
    else:
        inside = dist <= zone.radius
    cells = np.flatnonzero(inside)
    cells.setflags(write=False)
    return cells


def default_zone(rows: int, cols: int, radius: int) -> IgnitionZone:
    return IgnitionZone((rows // 2, cols // 2), radius)


def sample_ignition(landscape: Landscape, zone: IgnitionZone, rng: np.random.Generator) -> int:
    """Uniform draw over the flammable cells of the zone."""
    candidates = zone.cells(landscape.rows, landscape.cols)
    candidates = candidates[landscape.cells[candidates] != 0]
    if candidates.size == 0:
        raise LandscapeError("ignition zone fully non-flammable")
    return int(candidates[rng.integers(candidates.size)])
