"""Downstream protection value and the greedy DPV demonstrator.

The DPV of a cell is the value burned downstream of it in the propagation
tree, averaged over simulated fires. Treating the top-DPV cell cuts off the
largest expected share of the fire.
"""
from __future__ import annotations

import json
from typing import Sequence

import numpy as np

from . import env as envmod
from .env import EnvConfig, EnvState, FirebreakEnv, Obs, Transition
from .firesim import FireOutcome, run_batch
from .landscape import atomic_write_text


def _check_values(values, n: int) -> np.ndarray:
    if values is None:
        return np.ones(n)
    values = np.asarray(values, dtype=float)
    if values.shape != (n,):
        raise ValueError(f"values has shape {values.shape}, expected ({n},)")
    return values


def subtree_values(outcome: FireOutcome, values=None) -> np.ndarray:
    """Sum of ``values`` over the propagation subtree rooted at each cell."""
    return _subtree_batch([outcome], values)[0]


def _subtree_batch(outcomes: Sequence[FireOutcome], values) -> np.ndarray:
    n = outcomes[0].rows * outcomes[0].cols
    values = _check_values(values, n)
    depth = np.stack([o.depth for o in outcomes])
    parent = np.stack([o.parent for o in outcomes])
    acc = np.where(depth >= 0, values[None, :], 0.0)
    # leaves first: every child is folded into its parent before the parent moves up
    for level in range(int(depth.max(initial=0)), 0, -1):
        b, j = np.nonzero(depth == level)
        np.add.at(acc, (b, parent[b, j]), acc[b, j])
    return acc


def dpv_scores(outcomes: Sequence[FireOutcome], values=None) -> np.ndarray:
    if len(outcomes) == 0:
        raise ValueError("dpv_scores needs at least one outcome")
    return _subtree_batch(outcomes, values).mean(axis=0)


def baseline_step(state: EnvState, config: EnvConfig, sims_per_step: int = 32,
                  values=None, master_seed: int = 0) -> int:
    """Available cell with the largest DPV on the current grid (ties: lowest index)."""
    mask = envmod.action_mask(state)
    if not mask.any():
        raise envmod.IllegalActionError("no available cell")
    outcomes = run_batch(state.grid, config.model, config.weather, config.zone,
                         sims_per_step, master_seed, ignition_landscape=state.base)
    scores = dpv_scores(outcomes, values)
    scores = np.where(mask, scores, -np.inf)
    # argmax returns the first maximum; all-zero scores fall back to the first available cell
    return int(np.argmax(scores))


def baseline_rollout(env: FirebreakEnv, sims_per_step: int = 32, values=None, seed: int = 0):
    """Play one demonstrator episode; yields ``(state, action, reward, next_state, done, info)``."""
    state = env.reset(seed)
    done = False
    while not done:
        action = baseline_step(state, env.config, sims_per_step, values,
                               master_seed=int(env.rng.integers(0, 2**63)))
        nxt, reward, done, info = env.step(action)
        yield state, action, reward, nxt, done, info
        state = nxt


def generate_demonstrations(env: FirebreakEnv, episodes: int, sims_per_step: int = 32,
                            seed: int = 0, values=None) -> list[Transition]:
    """Demonstrator transitions for ``episodes`` episodes, flagged ``is_demo``."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    seeds = np.random.SeedSequence(seed).generate_state(episodes, dtype=np.uint64)
    out = []
    for ep, ep_seed in enumerate(seeds.tolist()):
        for t, (s, a, r, s2, done, _) in enumerate(baseline_rollout(env, sims_per_step, values, ep_seed)):
            out.append(Transition(s.observe(), a, r, s2.observe(), done, True, ep, t))
    return out


# ------------------------------------------------------- demo files
#
# JSON lines. Line 1 is a header
#   {"format": "firebreak-demos", "version": 1, "rows": R, "cols": C, "count": n}
# followed by one object per transition with keys episode, t, action,
# reward, done, is_demo, state, next_state. A state is
#   {"codes": [R*C ints], "placed": [cell...], "blocked": [cell...]}
# where "blocked" lists the cells whose action-mask entry is false.

DEMO_FORMAT = "firebreak-demos"
DEMO_VERSION = 1


def _obs_to_json(obs: Obs) -> dict:
    return {"codes": obs.codes.astype(int).tolist(),
            "placed": np.flatnonzero(obs.placed).tolist(),
            "blocked": np.flatnonzero(~obs.mask).tolist()}


def _obs_from_json(d: dict, n: int) -> Obs:
    codes = np.asarray(d["codes"], dtype=np.uint8)
    if codes.shape != (n,):
        raise ValueError(f"state has {codes.size} cells, expected {n}")
    placed = np.zeros(n, dtype=bool)
    placed[d["placed"]] = True
    mask = np.ones(n, dtype=bool)
    mask[d["blocked"]] = False
    return Obs(codes, placed, mask)


def dump_demonstrations(transitions: Sequence[Transition], rows: int, cols: int) -> str:
    lines = [json.dumps({"format": DEMO_FORMAT, "version": DEMO_VERSION,
                         "rows": rows, "cols": cols, "count": len(transitions)})]
    for tr in transitions:
        lines.append(json.dumps({
            "episode": tr.episode, "t": tr.t, "action": int(tr.action), "reward": tr.reward,
            "done": bool(tr.done), "is_demo": bool(tr.is_demo),
            "state": _obs_to_json(tr.state), "next_state": _obs_to_json(tr.next_state)}))
    return "\n".join(lines) + "\n"


def save_demonstrations(path, transitions: Sequence[Transition], rows: int, cols: int) -> None:
    atomic_write_text(path, dump_demonstrations(transitions, rows, cols))


def load_demonstrations(path) -> tuple[list[Transition], int, int]:
    """Returns ``(transitions, rows, cols)``."""
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != DEMO_FORMAT:
            raise ValueError(f"{path}: not a demonstration file")
        if header.get("version") != DEMO_VERSION:
            raise ValueError(f"{path}: unsupported demonstration format version {header.get('version')}")
        rows, cols = header["rows"], header["cols"]
        out = []
        for lineno, line in enumerate(fh, 2):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                out.append(Transition(
                    _obs_from_json(d["state"], rows * cols), int(d["action"]), float(d["reward"]),
                    _obs_from_json(d["next_state"], rows * cols), bool(d["done"]),
                    bool(d["is_demo"]), int(d["episode"]), int(d["t"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad transition record ({exc})") from None
    if len(out) != header["count"]:
        raise ValueError(f"{path}: header announces {header['count']} records, found {len(out)}")
    return out, rows, cols
