"""Experiment plumbing: configuration files, commands and reports.

A configuration file is flat ``key = value`` text. Blank lines and ``#``
comments are ignored. Recognised keys:

``fixture``         bundled instance name; supplies landscape, weather and
                    ignition zone, and presets ``forbid_zone = true`` and
                    ``k = -1``
``landscape``       path to a ``.grid`` file (fuels from ``fuels`` or the
                    sibling ``.fuels`` file)
``fuels``, ``weather``
``zone_center``     ``row,col``; ``zone_radius``; ``zone_ring``
``forbid_zone``     forbid treating the ignition zone itself
``initial_forbidden`` comma-separated cell indices
``wind_gain``, ``speed_ref``, ``alpha``, ``k``, ``sims_per_eval``
``n_sims``          fires for ``simulate`` (default 500)
``demos``           demonstration file for ``pretrain``/``train``
``eval_seeds``      file of evaluation seeds (default: the bundled list)

plus every :class:`~firebreak.agent.TrainConfig` field.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import agent as agentmod
from . import dpv, firesim, fixtures
from . import nn as qnn
from .agent import TrainConfig, Trainer
from .env import ConfigError, EnvConfig, FirebreakEnv, StateEncoder, place, reset
from .landscape import (
    IgnitionZone,
    Landscape,
    LandscapeError,
    atomic_write_bytes,
    atomic_write_text,
    default_zone,
    format_grid,
    load_fuels,
    load_landscape,
    load_weather,
    save_landscape,
    shrink_nearest,
)

log = logging.getLogger("firebreak")

ENV_KEYS = {"fixture", "landscape", "fuels", "weather", "zone_center", "zone_radius", "zone_ring",
            "forbid_zone", "initial_forbidden", "wind_gain", "speed_ref", "alpha", "k",
            "sims_per_eval"}
RUN_KEYS = {"n_sims", "demos", "eval_seeds"}
POLICIES = ("trained", "baseline", "random")


# ------------------------------------------------------------ config

def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    return parse_config_text(path.read_text(), str(path))


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _convert(name: str, value: str, kind):
    try:
        if kind is bool:
            return _bool(value)
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name}: {value!r} ({exc})") from None


def _train_config(values: dict[str, str], seed: int) -> TrainConfig:
    defaults = TrainConfig()
    kw = {}
    for name in TrainConfig.field_names():
        if name in values:
            kind = type(getattr(defaults, name))
            kw[name] = _convert(name, values[name], kind)
    kw["seed"] = seed
    try:
        return TrainConfig(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


@dataclass
class ExperimentSpec:
    landscape: Landscape
    landscape_path: Path | None
    weather_path: Path | None
    env: EnvConfig
    train: TrainConfig
    out: Path
    seed: int = 0
    n_sims: int = 500
    demos: Path | None = None
    eval_seeds: tuple[int, ...] = ()
    values: dict = field(default_factory=dict)

    def make_env(self, seed: int | None = None) -> FirebreakEnv:
        return FirebreakEnv(self.env, self.landscape, self.seed if seed is None else seed)

    def with_train(self, **changes) -> "ExperimentSpec":
        return replace(self, train=replace(self.train, **changes))


def build_spec(values: dict[str, str], seed: int = 0, out=".") -> ExperimentSpec:
    """Validate a parsed configuration and resolve every referenced file."""
    unknown = set(values) - ENV_KEYS - RUN_KEYS - set(TrainConfig.field_names())
    if unknown:
        raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
    v = dict(values)
    landscape_path = weather_path = None
    zone = None
    if "fixture" in v:
        try:
            fx = fixtures.load_fixture(v["fixture"])
        except KeyError as exc:
            raise ConfigError(str(exc.args[0])) from None
        landscape, weather, zone = fx.landscape, fx.weather, fx.zone
        landscape_path = fixtures.fixture_path(fx.name)
        weather_path = fixtures.DATA / "weather.csv"
        model = fx.model
        v.setdefault("forbid_zone", "true")
        v.setdefault("k", "-1")
    else:
        if "landscape" not in v or "weather" not in v:
            raise ConfigError("config needs either 'fixture' or both 'landscape' and 'weather'")
        landscape_path, weather_path = Path(v["landscape"]), Path(v["weather"])
        for p in (landscape_path, weather_path):
            if not p.is_file():
                raise ConfigError(f"file {p} not found")
        try:
            catalog = None
            if "fuels" in v:
                if not Path(v["fuels"]).is_file():
                    raise ConfigError(f"file {v['fuels']} not found")
                catalog = load_fuels(v["fuels"])
            landscape = load_landscape(landscape_path, catalog)
            weather = load_weather(weather_path)
        except LandscapeError as exc:
            raise ConfigError(str(exc)) from None
        model = firesim.SpreadModel()
    model = firesim.SpreadModel(_convert("wind_gain", v.get("wind_gain", str(model.wind_gain)), float),
                                _convert("speed_ref", v.get("speed_ref", str(model.speed_ref)), float))
    if "zone_center" in v or "zone_radius" in v or zone is None:
        radius = _convert("zone_radius", v.get("zone_radius", "2"), int)
        if "zone_center" in v:
            try:
                r, c = (int(x) for x in v["zone_center"].split(","))
            except ValueError:
                raise ConfigError(f"zone_center must be 'row,col', got {v['zone_center']!r}") from None
            zone = IgnitionZone((r, c), radius, _convert("zone_ring", v.get("zone_ring", "false"), bool))
        else:
            zone = default_zone(landscape.rows, landscape.cols, radius)
    try:
        zone_cells = zone.cells(landscape.rows, landscape.cols)
    except LandscapeError as exc:
        raise ConfigError(str(exc)) from None
    forbidden = set()
    if v.get("initial_forbidden", "").strip():
        forbidden |= {_convert("initial_forbidden", x, int) for x in v["initial_forbidden"].split(",")}
    if _convert("forbid_zone", v.get("forbid_zone", "false"), bool):
        forbidden |= set(zone_cells.tolist())
    k = v.get("k")
    env = EnvConfig(zone, weather, model,
                    alpha=_convert("alpha", v.get("alpha", "0.05"), float),
                    k=None if k is None else _convert("k", k, float),
                    sims_per_eval=_convert("sims_per_eval", v.get("sims_per_eval", "32"), int),
                    initial_forbidden=frozenset(forbidden))
    if landscape.flammable.any():
        reset(env, landscape)   # budget / forbidden-set validation
    if "eval_seeds" in v:
        p = Path(v["eval_seeds"])
        if not p.is_file():
            raise ConfigError(f"file {p} not found")
        seeds = tuple(int(s) for s in p.read_text().split())
    else:
        seeds = tuple(fixtures.eval_seeds())
    demos = Path(v["demos"]) if "demos" in v else None
    return ExperimentSpec(landscape, landscape_path, weather_path, env, _train_config(v, seed),
                          Path(out), seed, _convert("n_sims", v.get("n_sims", "500"), int),
                          demos, seeds, values)


# ------------------------------------------------------------ helpers

def csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in row])
    return buf.getvalue()


def _out(spec: ExperimentSpec, name: str) -> Path:
    spec.out.mkdir(parents=True, exist_ok=True)
    return spec.out / name


def treated_grid(spec: ExperimentSpec, placed: Sequence[int]):
    """Apply ``placed`` through the env so every placement is validated."""
    budget = spec.env.budget(spec.landscape.n_cells)
    if len(placed) != budget:
        raise ConfigError(f"a policy must place exactly {budget} firebreaks, got {len(placed)}")
    state = reset(spec.env, spec.landscape)
    for a in placed:
        state = place(state, a)
    return state


# -------------------------------------------------------------- simulate

def cmd_simulate(spec: ExperimentSpec) -> dict:
    """Untreated burn-probability map plus mean burned fraction."""
    if not spec.landscape.flammable.any():
        # nothing can ignite: every fire burns zero cells
        bmap = firesim.BurnProbabilityMap(spec.landscape.rows, spec.landscape.cols,
                                          np.zeros(spec.landscape.n_cells))
        return _write_simulation(spec, bmap, 0.0)
    outcomes = firesim.run_batch(spec.landscape, spec.env.model, spec.env.weather, spec.env.zone,
                                 spec.n_sims, spec.seed)
    return _write_simulation(spec, firesim.burn_probability_map(outcomes), firesim.average_burned(outcomes))


def _write_simulation(spec: ExperimentSpec, bmap, mean: float) -> dict:
    bmap.save(_out(spec, "burn_probability.txt"), _out(spec, "burn_probability.pgm"))
    pct = 100.0 * mean / spec.landscape.n_cells
    atomic_write_text(_out(spec, "simulate.csv"),
                      csv_text(["n_sims", "seed", "mean_burned", "mean_burned_pct"],
                               [[spec.n_sims, spec.seed, mean, pct]]))
    return {"mean_burned": mean, "mean_burned_pct": pct, "map": bmap}


# -------------------------------------------------------------- demos

def cmd_demo_gen(spec: ExperimentSpec, episodes: int | None = None) -> Path:
    episodes = spec.train.demo_episodes if episodes is None else episodes
    env = spec.make_env()
    demos = dpv.generate_demonstrations(env, episodes, spec.train.sims_per_step, spec.seed)
    path = _out(spec, "demos.jsonl")
    dpv.save_demonstrations(path, demos, spec.landscape.rows, spec.landscape.cols)
    return path


def _load_demos(spec: ExperimentSpec, path=None):
    path = Path(path or spec.demos or spec.out / "demos.jsonl")
    if not path.is_file():
        raise ConfigError(f"demonstration file {path} not found (run demo-gen or pass --no-demos)")
    demos, rows, cols = dpv.load_demonstrations(path)
    if (rows, cols) != (spec.landscape.rows, spec.landscape.cols):
        raise ConfigError(f"demonstrations are {rows}x{cols}, landscape is "
                          f"{spec.landscape.rows}x{spec.landscape.cols}")
    return demos


# -------------------------------------------------------------- training

def curve_csv(curve: Sequence[dict]) -> str:
    return csv_text(["episode", "return", "epsilon", "loss", "eval_burned_pct"],
                    [[r["episode"], r["return"], r["epsilon"], r["loss"], r["eval_burned_pct"]]
                     for r in curve])


def _save_trainer(trainer: Trainer, path: Path) -> None:
    buf = io.BytesIO()
    torch.save(trainer.state_dict(), buf)
    atomic_write_bytes(path, buf.getvalue())


def _load_trainer(spec: ExperimentSpec, path) -> Trainer:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"trainer state {path} not found")
    state = torch.load(path, weights_only=False)
    config = TrainConfig(**state["config"])
    trainer = Trainer(spec.make_env(), config)
    trainer.load_state_dict(state)
    return trainer


def cmd_pretrain(spec: ExperimentSpec, demos_path=None) -> Trainer:
    trainer = Trainer(spec.make_env(), spec.train, _load_demos(spec, demos_path))
    trainer.pretrain()
    atomic_write_text(_out(spec, "pretrain_loss.csv"),
                      csv_text(["step", "loss"], enumerate(trainer.pretrain_losses)))
    _save_trainer(trainer, _out(spec, "pretrained.pt"))
    qnn.save_checkpoint(_out(spec, "pretrained.npz"), trainer.online, {"stage": "pretrain"})
    return trainer


def make_evaluator(spec: ExperimentSpec, n_fires: int):
    seeds = spec.eval_seeds[:n_fires]

    def evaluate(net):
        placed = agentmod.greedy_placement(net, spec.make_env(), StateEncoder.for_landscape(spec.landscape))
        return evaluate_placement(spec, placed, seeds).mean_pct
    return evaluate


def cmd_train(spec: ExperimentSpec, no_demos: bool = False, demos_path=None, init=None,
              stop_after: int | None = None) -> Trainer:
    """Pre-train (unless ``no_demos``) then train; ``init`` resumes a saved trainer.

    ``stop_after`` ends the run early at that episode count, as if interrupted.
    """
    ckpt_dir = spec.out / "checkpoints"
    if init is not None:
        trainer = _load_trainer(spec, init)
        trainer.config = replace(trainer.config, episodes=spec.train.episodes)
    else:
        demos = [] if no_demos else _load_demos(spec, demos_path)
        trainer = Trainer(spec.make_env(), spec.train, demos)
        if not no_demos:
            trainer.pretrain()

    def on_checkpoint(t: Trainer):
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        _save_trainer(t, ckpt_dir / f"episode-{t.episode:06d}.pt")
        _save_trainer(t, ckpt_dir / "last.pt")

    target = trainer.config.episodes if stop_after is None else min(stop_after, trainer.config.episodes)
    evaluator = make_evaluator(spec, trainer.config.eval_fires) if trainer.config.eval_every else None
    trainer.train(target, evaluator, on_checkpoint)
    atomic_write_text(_out(spec, "curve.csv"), curve_csv(trainer.curve))
    qnn.save_checkpoint(_out(spec, "model.npz"), trainer.online,
                        {"episodes": trainer.episode, "algo": trainer.config.algo})
    _save_trainer(trainer, _out(spec, "trainer.pt"))
    return trainer


def smoothed_return(curve: Sequence[dict], window: int = 100) -> float:
    """Mean return over the last ``window`` episodes."""
    if not curve:
        raise ValueError("empty learning curve")
    return float(np.mean([r["return"] for r in curve[-window:]]))


# ------------------------------------------------------------ evaluation

@dataclass
class EvalReport:
    policy: str
    placed: tuple[int, ...]
    seeds: tuple[int, ...]
    burned: np.ndarray
    n_cells: int

    @property
    def mean_pct(self) -> float:
        return 100.0 * float(np.mean(self.burned)) / self.n_cells

    @property
    def std_pct(self) -> float:
        return 100.0 * float(np.std(self.burned)) / self.n_cells

    def summary_csv(self) -> str:
        return csv_text(["policy", "mean_burned_pct", "std_burned_pct", "n_fires", "placed"],
                        [[self.policy, self.mean_pct, self.std_pct, len(self.burned),
                          " ".join(map(str, self.placed))]])

    def fires_csv(self) -> str:
        return csv_text(["seed", "burned"], zip(self.seeds, self.burned.tolist()))


def evaluate_placement(spec: ExperimentSpec, placed: Sequence[int], seeds=None,
                       policy: str = "custom") -> EvalReport:
    seeds = tuple(spec.eval_seeds if seeds is None else seeds)
    state = treated_grid(spec, placed)
    outcomes = firesim.run_keyed(state.grid, spec.env.model, spec.env.weather, spec.env.zone,
                                 [(s,) for s in seeds], ignition_landscape=spec.landscape)
    return EvalReport(policy, tuple(int(a) for a in placed), seeds,
                      np.array([o.size for o in outcomes]), spec.landscape.n_cells)


def random_placement(spec: ExperimentSpec, seed: int) -> tuple[int, ...]:
    rng = np.random.default_rng(seed)
    state = reset(spec.env, spec.landscape)
    for _ in range(spec.env.budget(spec.landscape.n_cells)):
        available = np.flatnonzero(state.available())
        state = place(state, int(available[rng.integers(available.size)]))
    return state.placed


def baseline_placement(spec: ExperimentSpec, seed: int) -> tuple[int, ...]:
    env = spec.make_env(seed)
    for _ in dpv.baseline_rollout(env, spec.train.sims_per_step, None, seed):
        pass
    return env.state.placed


def trained_placement(spec: ExperimentSpec, checkpoint) -> tuple[int, ...]:
    path = Path(checkpoint) if checkpoint else None
    if path is None or not path.is_file():
        raise ConfigError(f"checkpoint {checkpoint} not found")
    net, _ = qnn.load_checkpoint(path)
    encoder = StateEncoder.for_landscape(spec.landscape)
    if net.config["in_channels"] != encoder.channels or \
            (net.config["rows"], net.config["cols"]) != (spec.landscape.rows, spec.landscape.cols):
        raise ConfigError(f"checkpoint {path} does not match the landscape")
    return agentmod.greedy_placement(net, spec.make_env(), encoder)


def cmd_evaluate(spec: ExperimentSpec, policy: str, checkpoint=None) -> EvalReport:
    if policy == "trained":
        placed = trained_placement(spec, checkpoint)
    elif policy == "baseline":
        placed = baseline_placement(spec, spec.seed)
    elif policy == "random":
        placed = random_placement(spec, spec.seed)
    else:
        raise ConfigError(f"unknown policy {policy!r}; choose from {POLICIES}")
    report = evaluate_placement(spec, placed, policy=policy)
    atomic_write_text(_out(spec, f"eval_{policy}.csv"), report.summary_csv())
    atomic_write_text(_out(spec, f"eval_{policy}_fires.csv"), report.fires_csv())
    return report


# ---------------------------------------------------------------- GradCAM

def cmd_gradcam(spec: ExperimentSpec, checkpoint, episode_seed: int = 0) -> list[np.ndarray]:
    """Greedy rollout; one attention map per step for the chosen cell.

    Maps are written as text and PGM; ``gradcam.csv`` lists the chosen cell per step.
    """
    path = Path(checkpoint) if checkpoint else None
    if path is None or not path.is_file():
        raise ConfigError(f"checkpoint {checkpoint} not found")
    net, _ = qnn.load_checkpoint(path)
    encoder = StateEncoder.for_landscape(spec.landscape)
    state = spec.make_env(episode_seed).reset(episode_seed)
    maps, rows = [], []
    for t in range(spec.env.budget(spec.landscape.n_cells)):
        obs = state.observe()
        action = agentmod.greedy_action(net, obs, encoder)
        cam = qnn.grad_cam(net, encoder.encode(obs), action, obs.mask)
        maps.append(cam)
        r, c = spec.landscape.rc(action)
        rows.append([t, action, r, c])
        atomic_write_text(_out(spec, f"gradcam_step{t:03d}.txt"),
                          format_grid(spec.landscape.rows, spec.landscape.cols, cam.ravel(),
                                      fmt=lambda x: f"{x:.6f}"))
        atomic_write_bytes(_out(spec, f"gradcam_step{t:03d}.pgm"),
                           firesim.to_pgm(spec.landscape.rows, spec.landscape.cols, cam.ravel()))
        state = place(state, action)
    atomic_write_text(_out(spec, "gradcam.csv"), csv_text(["step", "cell", "row", "col"], rows))
    return maps


# ----------------------------------------------------------------- shrink

def cmd_shrink(spec: ExperimentSpec, rows: int, cols: int) -> Path:
    try:
        small = shrink_nearest(spec.landscape, rows, cols)
    except (LandscapeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    path = _out(spec, f"landscape-{rows}x{cols}.grid")
    save_landscape(small, path)
    return path


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")
