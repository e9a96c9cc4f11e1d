"""Stochastic cellular-automaton fire spread with quenched edge randomness.

Every directed neighbour pair (i -> j) gets a threshold u_ij in [0, 1) from
a counter-based hash of (seed, i, j). The edge transmits fire iff its spread
probability exceeds the threshold, so one fire is a pure reachability
problem over the active edges. Removing fuel can only delete edges, which
makes burned sets monotone under treatment for a fixed seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numba
import numpy as np

from .landscape import (
    IgnitionZone,
    Landscape,
    WeatherScenario,
    atomic_write_bytes,
    atomic_write_text,
    format_grid,
    sample_ignition,
    sample_weather,
)

# Ordered so that, for a child cell, parents are visited in increasing
# cell-index order (parent = child - (dr * cols + dc)); any cols >= 2.
DIRECTIONS: tuple[tuple[int, int], ...] = (
    (1, 1), (1, 0), (1, -1), (0, 1), (0, -1), (-1, 1), (-1, 0), (-1, -1),
)

_CHUNK = 256
_M64 = (1 << 64) - 1


@dataclass(frozen=True)
class SpreadModel:
    wind_gain: float = 1.0
    speed_ref: float = 20.0

    def __post_init__(self):
        if self.wind_gain < 0:
            raise ValueError("wind_gain must be nonnegative")
        if self.speed_ref <= 0:
            raise ValueError("speed_ref must be positive")


def bearing(dr: int, dc: int) -> float:
    """Compass bearing in degrees of a grid step (row index grows southward)."""
    return math.degrees(math.atan2(dc, -dr)) % 360.0


def wind_factor(model: SpreadModel, weather: WeatherScenario, dr: int, dc: int) -> float:
    delta = math.radians(bearing(dr, dc) - weather.wind_dir_deg)
    return max(0.0, 1.0 + model.wind_gain * (weather.wind_speed / model.speed_ref) * math.cos(delta))


def edge_prob(landscape: Landscape, model: SpreadModel, weather: WeatherScenario,
              src: int, dst: int) -> float:
    """Probability that fire in cell ``src`` is transmitted to neighbour ``dst``."""
    r0, c0 = landscape.rc(src)
    r1, c1 = landscape.rc(dst)
    dr, dc = r1 - r0, c1 - c0
    if not (0 <= src < landscape.n_cells and 0 <= dst < landscape.n_cells) \
            or max(abs(dr), abs(dc)) != 1:
        raise ValueError(f"cells {src} and {dst} are not 8-neighbours")
    base = landscape.catalog.entries[int(landscape.cells[dst])].base_spread_prob
    return min(1.0, max(0.0, base * wind_factor(model, weather, dr, dc)))


# ------------------------------------------------------------ thresholds

def _mix64(x: np.ndarray) -> np.ndarray:
    """splitmix64 finaliser on uint64 arrays (wrapping arithmetic)."""
    with np.errstate(over="ignore"):
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def edge_thresholds(seeds, src, dst) -> np.ndarray:
    """Quenched thresholds u(seed, src, dst) in [0, 1), broadcasting inputs."""
    seeds = np.asarray(seeds, dtype=np.uint64)
    src = np.asarray(src, dtype=np.uint64)
    dst = np.asarray(dst, dtype=np.uint64)
    h = _mix64(_mix64(_mix64(seeds) ^ src) ^ dst)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def edge_threshold(seed: int, src: int, dst: int) -> float:
    return float(edge_thresholds(np.array([seed]), np.array([src]), np.array([dst]))[0])


@numba.njit(cache=True)
def _mix64_nb(x):
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


@numba.njit(cache=True)
def _spread_nb(flammable, probs, dst, widx, ignitions, seeds, parent, depth):
    """Level-synchronous BFS per run, hashing thresholds only for edges it inspects.

    Frontiers are scanned in increasing cell order and a cell is claimed by
    its first discoverer, which gives the smallest-index parent.
    """
    n = flammable.shape[0]
    frontier = np.empty(n, np.int64)
    nxt = np.empty(n, np.int64)
    scale = 1.0 / 9007199254740992.0
    for b in range(ignitions.shape[0]):
        ign = ignitions[b]
        if not flammable[ign]:
            continue
        p = probs[widx[b]]
        hs = _mix64_nb(seeds[b])
        depth[b, ign] = 0
        frontier[0] = ign
        nf = 1
        level = 0
        while nf > 0:
            level += 1
            nn = 0
            for k in range(nf):
                i = frontier[k]
                hi = _mix64_nb(hs ^ np.uint64(i))
                for d in range(dst.shape[0]):
                    j = dst[d, i]
                    if j < 0 or depth[b, j] >= 0 or not flammable[j]:
                        continue
                    u = np.float64(_mix64_nb(hi ^ np.uint64(j)) >> np.uint64(11)) * scale
                    if p[d, i] > u:
                        depth[b, j] = level
                        parent[b, j] = i
                        nxt[nn] = j
                        nn += 1
            frontier[:nn] = np.sort(nxt[:nn])
            nf = nn


# -------------------------------------------------------------- outcomes

@dataclass(frozen=True, eq=False)
class FireOutcome:
    """One realised fire: BFS depth and parent of every cell (-1 if none)."""

    rows: int
    cols: int
    ignition: int
    parent: np.ndarray
    depth: np.ndarray

    @cached_property
    def burned_mask(self) -> np.ndarray:
        return self.depth >= 0

    @property
    def size(self) -> int:
        return int(np.count_nonzero(self.burned_mask))

    @property
    def burned(self) -> frozenset[int]:
        return frozenset(np.flatnonzero(self.burned_mask).tolist())

    @property
    def edges(self) -> frozenset[tuple[int, int]]:
        children = np.flatnonzero(self.parent >= 0)
        return frozenset(zip(self.parent[children].tolist(), children.tolist()))

    def __eq__(self, other):
        if not isinstance(other, FireOutcome):
            return NotImplemented
        return (self.rows, self.cols, self.ignition) == (other.rows, other.cols, other.ignition) \
            and np.array_equal(self.parent, other.parent) and np.array_equal(self.depth, other.depth)


def _shift_slices(dr: int, dc: int, rows: int, cols: int):
    """(source, destination) slices moving a grid by (dr, dc)."""
    def axis(d, n):
        if d >= 0:
            return slice(0, n - d), slice(d, n)
        return slice(-d, n), slice(0, n + d)
    (sr, tr), (sc, tc) = axis(dr, rows), axis(dc, cols)
    return (slice(None), sr, sc), (slice(None), tr, tc)


class _Kernel:
    """Precomputed per-landscape geometry and per-weather spread probabilities."""

    def __init__(self, landscape: Landscape, model: SpreadModel, weathers: Sequence[WeatherScenario]):
        rows, cols = landscape.rows, landscape.cols
        self.rows, self.cols = rows, cols
        grid = landscape.grid
        base = landscape.catalog.prob_table()
        idx = np.arange(rows * cols, dtype=np.int64).reshape(rows, cols)
        self.flammable = grid != 0
        self._flat = None
        self.slices = [_shift_slices(dr, dc, rows, cols) for dr, dc in DIRECTIONS]
        # probs[w, d, r, c]: spread prob from (r, c) to its d-neighbour
        self.probs = np.zeros((len(weathers), len(DIRECTIONS), rows, cols))
        self.src_idx = np.zeros((len(DIRECTIONS), rows, cols), dtype=np.int64)
        self.dst_idx = np.zeros((len(DIRECTIONS), rows, cols), dtype=np.int64)
        self.inside = np.zeros((len(DIRECTIONS), rows, cols), dtype=bool)
        self.parent_idx = np.zeros((len(DIRECTIONS), rows, cols), dtype=np.int64)
        for d, (dr, dc) in enumerate(DIRECTIONS):
            src, dst = self.slices[d]
            self.inside[d][src[1:]] = True
            self.src_idx[d] = idx
            self.dst_idx[d][src[1:]] = idx[dst[1:]]
            self.parent_idx[d] = idx - (dr * cols + dc)
            nbr_base = np.zeros((rows, cols))
            nbr_base[src[1:]] = base[grid[dst[1:]]]
            for w, weather in enumerate(weathers):
                wf = wind_factor(model, weather, dr, dc)
                self.probs[w, d] = np.minimum(1.0, np.maximum(0.0, nbr_base * wf)) * self.inside[d]

    def active(self, widx: np.ndarray, seeds: np.ndarray) -> np.ndarray:
        u = edge_thresholds(seeds[:, None, None, None], self.src_idx[None], self.dst_idx[None])
        return (self.probs[widx] > u) & self.inside[None]

    def spread(self, widx, ignitions, seeds):
        """(parent, depth) arrays of shape (B, N) for a batch of fires."""
        b, n = len(ignitions), self.rows * self.cols
        parent = np.full((b, n), -1, dtype=np.int64)
        depth = np.full((b, n), -1, dtype=np.int64)
        if self._flat is None:
            dst = np.where(self.inside, self.dst_idx, -1).reshape(len(DIRECTIONS), n)
            self._flat = (self.flammable.reshape(n), self.probs.reshape(len(self.probs), len(DIRECTIONS), n),
                          np.ascontiguousarray(dst))
        flam, probs, dst = self._flat
        _spread_nb(flam, probs, dst, widx, ignitions, seeds, parent, depth)
        return parent, depth

    def spread_reference(self, widx, ignitions, seeds):
        """Vectorised all-edges implementation of :meth:`spread`, kept as a cross-check."""
        rows, cols = self.rows, self.cols
        b = len(ignitions)
        active = self.active(widx, seeds)
        n = rows * cols
        parent = np.full((b, rows, cols), -1, dtype=np.int64)
        depth = np.full((b, rows, cols), -1, dtype=np.int64)
        frontier = np.zeros((b, rows, cols), dtype=bool)
        ir, ic = np.divmod(ignitions, cols)
        lit = self.flammable[ir, ic]
        frontier[np.flatnonzero(lit), ir[lit], ic[lit]] = True
        depth[frontier] = 0
        visited = frontier.copy()
        level = 0
        while frontier.any():
            level += 1
            new = np.zeros_like(frontier)
            for d in range(len(DIRECTIONS)):
                src, dst = self.slices[d]
                reach = np.zeros_like(frontier)
                reach[dst] = (frontier & active[:, d])[src]
                reach &= ~visited
                reach &= ~new
                reach &= self.flammable
                if reach.any():
                    new |= reach
                    parent[reach] = np.broadcast_to(self.parent_idx[d], reach.shape)[reach]
            depth[new] = level
            visited |= new
            frontier = new
        return parent.reshape(b, n), depth.reshape(b, n)


def _simulate(kernel: _Kernel, widx, ignitions, seeds, reference: bool = False) -> list[FireOutcome]:
    out = []
    widx = np.asarray(widx, dtype=np.int64)
    ignitions = np.asarray(ignitions, dtype=np.int64)
    seeds = np.asarray(seeds, dtype=np.uint64)
    spread = kernel.spread_reference if reference else kernel.spread
    for lo in range(0, len(ignitions), _CHUNK):
        sl = slice(lo, lo + _CHUNK)
        parent, depth = spread(widx[sl], ignitions[sl], seeds[sl])
        for k, ign in enumerate(ignitions[sl].tolist()):
            out.append(FireOutcome(kernel.rows, kernel.cols, ign, parent[k], depth[k]))
    return out


def simulate_fire(landscape: Landscape, model: SpreadModel, weather: WeatherScenario,
                  ignition: int, seed: int, reference: bool = False) -> FireOutcome:
    """One fire. ``reference=True`` uses the slow all-edges implementation."""
    if not 0 <= ignition < landscape.n_cells:
        raise ValueError(f"ignition {ignition} outside a {landscape.rows}x{landscape.cols} grid")
    kernel = _Kernel(landscape, model, [weather])
    return _simulate(kernel, [0], [ignition], [seed & _M64], reference)[0]


def draw_run(rng: np.random.Generator, weathers, ignition_landscape: Landscape, zone: IgnitionZone):
    """Weather index, ignition cell and simulation seed for one run."""
    weather = sample_weather(range(len(weathers)), rng)
    ignition = sample_ignition(ignition_landscape, zone, rng)
    seed = int(rng.integers(0, 2**63))
    return weather, ignition, seed


def run_keyed(landscape: Landscape, model: SpreadModel, weathers: Sequence[WeatherScenario],
              zone: IgnitionZone, keys: Sequence, ignition_landscape: Landscape | None = None
              ) -> list[FireOutcome]:
    """One fire per key; run inputs come from ``np.random.default_rng(key)``.

    Ignitions are drawn against ``ignition_landscape`` (default: the
    landscape itself). Passing the untreated landscape keeps ignition points
    fixed across treatments; a treated ignition cell then yields no fire.
    """
    if len(weathers) == 0:
        raise ValueError("empty weather set")
    ign_land = landscape if ignition_landscape is None else ignition_landscape
    runs = [draw_run(np.random.default_rng(key), weathers, ign_land, zone) for key in keys]
    if not runs:
        return []
    widx, ignitions, seeds = zip(*runs)
    return _simulate(_Kernel(landscape, model, weathers), widx, ignitions, seeds)


def run_batch(landscape: Landscape, model: SpreadModel, weathers: Sequence[WeatherScenario],
              zone: IgnitionZone, n: int, master_seed: int,
              ignition_landscape: Landscape | None = None) -> list[FireOutcome]:
    """``n`` independent fires; run r depends only on (master_seed, r)."""
    if n < 1:
        raise ValueError("run_batch needs n >= 1")
    keys = [(int(master_seed), r) for r in range(n)]
    return run_keyed(landscape, model, weathers, zone, keys, ignition_landscape)


def average_burned(outcomes: Sequence[FireOutcome]) -> float:
    if len(outcomes) == 0:
        raise ValueError("average_burned of no outcomes")
    return float(np.mean([o.size for o in outcomes]))


# ------------------------------------------------------------ burn maps

@dataclass(frozen=True, eq=False)
class BurnProbabilityMap:
    rows: int
    cols: int
    probs: np.ndarray

    @property
    def grid(self) -> np.ndarray:
        return self.probs.reshape(self.rows, self.cols)

    def to_text(self, digits: int = 6) -> str:
        return format_grid(self.rows, self.cols, self.probs, fmt=lambda v: f"{v:.{digits}f}")

    def save(self, path, pgm_path=None) -> None:
        atomic_write_text(path, self.to_text())
        if pgm_path is not None:
            atomic_write_bytes(pgm_path, to_pgm(self.rows, self.cols, self.probs))


def to_pgm(rows: int, cols: int, values) -> bytes:
    """Binary 8-bit PGM with pixel = round(255 * value), values in [0, 1]."""
    pix = np.rint(255.0 * np.clip(np.asarray(values, dtype=float), 0.0, 1.0)).astype(np.uint8)
    return f"P5\n{cols} {rows}\n255\n".encode() + pix.reshape(rows, cols).tobytes()


def burn_probability_map(outcomes: Sequence[FireOutcome]) -> BurnProbabilityMap:
    if len(outcomes) == 0:
        raise ValueError("burn_probability_map of no outcomes")
    shapes = {(o.rows, o.cols) for o in outcomes}
    if len(shapes) != 1:
        raise ValueError(f"outcomes come from different grid sizes: {sorted(shapes)}")
    rows, cols = shapes.pop()
    counts = np.sum([o.burned_mask for o in outcomes], axis=0)
    return BurnProbabilityMap(rows, cols, counts / len(outcomes))
