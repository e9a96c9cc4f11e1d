"""Firebreak placement as an episodic MDP.

The agent sees the fuel grid, picks one available cell per step, and the
cell becomes non-fuel. After ``floor(alpha * |N|)`` placements a batch of
fires is simulated on the treated grid and the only nonzero reward,
``k * average_burned``, is emitted.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import firesim
from .firesim import SpreadModel
from .landscape import IgnitionZone, Landscape, WeatherScenario, atomic_write_text


class ConfigError(ValueError):
    pass


class IllegalActionError(ValueError):
    pass


def max_firebreaks(n_cells: int, alpha: float) -> int:
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    # tolerance absorbs products like 0.29 * 100 = 28.999999999999996
    budget = math.floor(alpha * n_cells + 1e-9)
    if budget < 1:
        raise ConfigError(f"alpha={alpha} allows no firebreak on {n_cells} cells")
    return budget


@dataclass(frozen=True)
class EnvConfig:
    zone: IgnitionZone
    weather: tuple[WeatherScenario, ...]
    model: SpreadModel = SpreadModel()
    alpha: float = 0.05
    k: float | None = None          # None -> -1 / |N|
    sims_per_eval: int = 32
    initial_forbidden: frozenset[int] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "weather", tuple(self.weather))
        object.__setattr__(self, "initial_forbidden", frozenset(int(c) for c in self.initial_forbidden))
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.sims_per_eval < 1:
            raise ConfigError("sims_per_eval must be >= 1")
        if not self.weather:
            raise ConfigError("weather set is empty")

    def budget(self, n_cells: int) -> int:
        return max_firebreaks(n_cells, self.alpha)

    def reward_scale(self, n_cells: int) -> float:
        return -1.0 / n_cells if self.k is None else self.k


class Obs(NamedTuple):
    """Compact observation: fuel codes, placed-firebreak flags, action mask."""

    codes: np.ndarray
    placed: np.ndarray
    mask: np.ndarray


@dataclass(frozen=True, eq=False)
class Transition:
    """One replay record. ``episode``/``t`` locate it inside its episode.

    ``n_return``, ``n_state`` and ``n_discount`` cache the truncated n-step
    return once the episode is complete (``n_state`` is None when the
    episode ends inside the window).
    """

    state: Obs
    action: int
    reward: float
    next_state: Obs
    done: bool
    is_demo: bool = False
    episode: int = 0
    t: int = 0
    n_return: float | None = None
    n_state: Obs | None = None
    n_discount: float = 0.0

    def __eq__(self, other):
        if not isinstance(other, Transition):
            return NotImplemented
        def same(a, b):
            if a is None or b is None:
                return a is b
            return all(np.array_equal(x, y) for x, y in zip(a, b))
        return (self.action, self.reward, self.done, self.is_demo, self.episode, self.t,
                self.n_return, self.n_discount) == \
            (other.action, other.reward, other.done, other.is_demo, other.episode, other.t,
             other.n_return, other.n_discount) \
            and same(self.state, other.state) and same(self.next_state, other.next_state) \
            and same(self.n_state, other.n_state)


@dataclass(frozen=True, eq=False)
class EnvState:
    grid: Landscape
    base: Landscape
    forbidden: frozenset[int]
    placed: tuple[int, ...] = ()

    @property
    def t(self) -> int:
        return len(self.placed)

    def available(self) -> np.ndarray:
        return action_mask(self)

    def observe(self) -> Obs:
        placed = np.zeros(self.grid.n_cells, dtype=bool)
        placed[list(self.placed)] = True
        return Obs(self.grid.cells.astype(np.uint8), placed, action_mask(self))

    def __eq__(self, other):
        if not isinstance(other, EnvState):
            return NotImplemented
        return (self.grid == other.grid and self.base == other.base
                and self.forbidden == other.forbidden and self.placed == other.placed)


def reset(config: EnvConfig, base: Landscape, seed: int | None = None) -> EnvState:
    """Pristine state; ``seed`` is accepted for interface symmetry only."""
    nonfuel = np.flatnonzero(base.cells == 0).tolist()
    bad = [c for c in config.initial_forbidden if not 0 <= c < base.n_cells]
    if bad:
        raise ConfigError(f"initial_forbidden cells outside the grid: {sorted(bad)}")
    forbidden = frozenset(nonfuel) | config.initial_forbidden
    budget = config.budget(base.n_cells)
    if base.n_cells - len(forbidden) < budget:
        raise ConfigError(f"budget {budget} exceeds the {base.n_cells - len(forbidden)} available cells")
    config.zone.cells(base.rows, base.cols)
    return EnvState(base, base, forbidden)


def action_mask(state: EnvState) -> np.ndarray:
    mask = state.grid.cells != 0
    if state.forbidden:
        mask[list(state.forbidden)] = False
    return mask


def place(state: EnvState, action: int) -> EnvState:
    """Deterministic part of a step: treat ``action`` and forbid it."""
    action = int(action)
    if not 0 <= action < state.grid.n_cells:
        raise IllegalActionError(f"action {action} outside the grid")
    if action in state.forbidden or state.grid.cells[action] == 0:
        raise IllegalActionError(f"cell {action} is forbidden or non-fuel")
    return EnvState(state.grid.with_firebreaks([action]), state.base,
                    state.forbidden | {action}, state.placed + (action,))


def evaluate_grid(state: EnvState, config: EnvConfig, master_seed: int) -> np.ndarray:
    """Burned-cell counts of ``sims_per_eval`` fires on the current grid."""
    outcomes = firesim.run_batch(state.grid, config.model, config.weather, config.zone,
                                 config.sims_per_eval, master_seed, ignition_landscape=state.base)
    return np.array([o.size for o in outcomes])


def step(state: EnvState, action: int, config: EnvConfig, rng: np.random.Generator):
    """Returns ``(next_state, reward, done, info)``.

    ``info['burned']`` holds the per-fire burned counts on the terminal step
    and ``info['eval_seed']`` the master seed used to simulate them.
    """
    budget = config.budget(state.grid.n_cells)
    if state.t >= budget:
        raise IllegalActionError("episode already finished")
    nxt = place(state, action)
    if nxt.t < budget:
        return nxt, 0.0, False, {}
    eval_seed = int(rng.integers(0, 2**63))
    burned = evaluate_grid(nxt, config, eval_seed)
    reward = float(np.mean(burned)) * config.reward_scale(state.grid.n_cells)
    return nxt, reward, True, {"burned": burned, "eval_seed": eval_seed}


class FirebreakEnv:
    """Stateful wrapper pairing a configuration, a landscape and an RNG."""

    def __init__(self, config: EnvConfig, base: Landscape, seed: int = 0):
        self.config = config
        self.base = base
        self.budget = config.budget(base.n_cells)
        self.rng = np.random.default_rng(seed)
        self.state = reset(config, base)

    @property
    def n_actions(self) -> int:
        return self.base.n_cells

    def reset(self, seed: int | None = None) -> EnvState:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = reset(self.config, self.base, seed)
        return self.state

    def step(self, action: int):
        self.state, reward, done, info = step(self.state, action, self.config, self.rng)
        return self.state, reward, done, info


# ------------------------------------------------------------- encoding

class StateEncoder:
    """One-hot fuel channels (in catalog code order) plus a placed channel."""

    def __init__(self, codes: Sequence[int], rows: int, cols: int):
        self.codes = np.asarray(sorted(codes), dtype=np.int64)
        self.rows, self.cols = rows, cols

    @classmethod
    def for_landscape(cls, landscape: Landscape) -> "StateEncoder":
        return cls(landscape.catalog.codes, landscape.rows, landscape.cols)

    @property
    def channels(self) -> int:
        return len(self.codes) + 1

    def encode_batch(self, codes: np.ndarray, placed: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes).reshape(len(codes), -1)
        onehot = codes[:, None, :] == self.codes[None, :, None]
        out = np.concatenate([onehot, np.asarray(placed, dtype=bool)[:, None, :]], axis=1)
        return out.astype(np.float32).reshape(len(codes), self.channels, self.rows, self.cols)

    def encode(self, obs: Obs) -> np.ndarray:
        return self.encode_batch(obs.codes[None], obs.placed[None])[0]


def encode_state(state: EnvState) -> np.ndarray:
    """(channels, rows, cols) float array; see :class:`StateEncoder`."""
    return StateEncoder.for_landscape(state.base).encode(state.observe())


# ---------------------------------------------------------------- traces

def trace_csv(placed: Sequence[int], reward: float, burned: Sequence[int]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "index", "value"])
    for i, cell in enumerate(placed):
        w.writerow(["placed", i, cell])
    w.writerow(["reward", 0, repr(float(reward))])
    for i, b in enumerate(burned):
        w.writerow(["burned", i, int(b)])
    return buf.getvalue()


def save_trace(path, placed, reward, burned) -> None:
    atomic_write_text(path, trace_csv(placed, reward, burned))
