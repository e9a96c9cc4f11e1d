"""Value-based agents learning from demonstrations.

Covers the replay buffer with a protected demonstration region, epsilon-
greedy acting, the DQN / double-DQN bootstrap targets, the four-term loss
(TD, n-step, large-margin imitation, L2), demonstration pre-training and
the episodic training loop.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Sequence

import numpy as np
import torch

from . import nn as qnn
from .env import FirebreakEnv, Obs, StateEncoder, Transition, place

ALGOS = ("dqn", "double_dqn", "dueling_double_dqn")
ALGO_ALIASES = {"dqn": "dqn", "2dqn": "double_dqn", "double_dqn": "double_dqn",
                "ddqn": "dueling_double_dqn", "dueling_double_dqn": "dueling_double_dqn"}


@dataclass
class TrainConfig:
    algo: str = "dqn"
    arch: str = "small"
    capacity: int = 100_000
    batch_size: int = 64
    target_sync: int = 200          # C: episodes in training, steps in pre-training
    episodes: int = 20_000
    lr: float = 5e-5
    gamma: float = 1.0
    eps_start: float = 1.0
    eps_decay: float = 0.005
    eps_min: float = 0.001
    lambda1: float = 1.0            # n-step
    lambda2: float = 1.0            # margin
    lambda3: float = 1e-5           # L2
    margin: float = 0.8
    n_step: int = 10
    pretrain_steps: int = 2000
    demo_episodes: int = 1000
    sims_per_step: int = 32
    dropout: float = 0.1
    seed: int = 0
    eval_every: int = 0
    eval_fires: int = 500
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.algo not in ALGO_ALIASES:
            raise ValueError(f"unknown algorithm {self.algo!r}; choose from {sorted(ALGO_ALIASES)}")
        self.algo = ALGO_ALIASES[self.algo]
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        for name in ("eps_start", "eps_decay", "eps_min"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.n_step < 1:
            raise ValueError("n_step must be >= 1")
        if self.batch_size < 1 or self.capacity < 1 or self.target_sync < 1:
            raise ValueError("batch_size, capacity and target_sync must be positive")

    @property
    def dueling(self) -> bool:
        return self.algo == "dueling_double_dqn"

    @property
    def double(self) -> bool:
        return self.algo != "dqn"

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


# ---------------------------------------------------------------- buffer

class ReplayBuffer:
    """Fixed demonstration prefix plus a FIFO ring of agent transitions."""

    def __init__(self, capacity: int, demos: Sequence[Transition] = ()):
        demos = tuple(demos)
        if any(not t.is_demo for t in demos):
            raise ValueError("demonstration region only accepts is_demo transitions")
        if len(demos) > capacity:
            raise ValueError(f"{len(demos)} demonstrations exceed capacity {capacity}")
        self.capacity = capacity
        self.demos = demos
        self.agent: list[Transition] = []
        self._pos = 0

    @property
    def agent_capacity(self) -> int:
        return self.capacity - len(self.demos)

    def __len__(self) -> int:
        return len(self.demos) + len(self.agent)

    def __getitem__(self, i: int) -> Transition:
        if i < len(self.demos):
            return self.demos[i]
        return self.agent[i - len(self.demos)]

    def push(self, transition: Transition) -> None:
        if transition.is_demo:
            raise ValueError("demonstrations are fixed at construction")
        if self.agent_capacity == 0:
            return
        if len(self.agent) < self.agent_capacity:
            self.agent.append(transition)
        else:
            self.agent[self._pos] = transition
        self._pos = (self._pos + 1) % self.agent_capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        """Uniform draw with replacement."""
        if len(self) == 0:
            raise ValueError("cannot sample from an empty buffer")
        return [self[i] for i in rng.integers(len(self), size=batch_size).tolist()]

    def state_dict(self) -> dict:
        return {"capacity": self.capacity, "demos": list(self.demos),
                "agent": list(self.agent), "pos": self._pos}

    @classmethod
    def from_state_dict(cls, d: dict) -> "ReplayBuffer":
        buf = cls(d["capacity"], d["demos"])
        buf.agent = list(d["agent"])
        buf._pos = d["pos"]
        return buf


# -------------------------------------------------------- n-step returns

def n_step_return(window: Sequence[Transition], gamma: float, n: int):
    """Truncated return over the first ``n`` records of ``window``.

    Returns ``(partial_return, bootstrap_obs or None, gamma**k)`` where k is
    the number of rewards summed. Ends early at a terminal transition.
    """
    if len(window) == 0:
        raise ValueError("empty window")
    first = window[0]
    total, k = 0.0, 0
    for k, tr in enumerate(window[:n]):
        if tr.episode != first.episode or tr.is_demo != first.is_demo or tr.t != first.t + k:
            raise ValueError("window mixes transitions from different episodes")
        total += gamma ** k * tr.reward
        if tr.done:
            return total, None, 0.0
    k += 1
    return total, window[k - 1].next_state, gamma ** k


def attach_n_step(episode: Sequence[Transition], gamma: float, n: int) -> list[Transition]:
    """Copies of one episode's transitions with the n-step cache filled in."""
    out = []
    for t in range(len(episode)):
        ret, obs, disc = n_step_return(episode[t:t + n], gamma, n)
        tr = episode[t]
        out.append(Transition(tr.state, tr.action, tr.reward, tr.next_state, tr.done,
                              tr.is_demo, tr.episode, tr.t, ret, obs, disc))
    return out


def split_episodes(transitions: Sequence[Transition]) -> list[list[Transition]]:
    episodes: dict[int, list[Transition]] = {}
    for tr in transitions:
        episodes.setdefault(tr.episode, []).append(tr)
    return [sorted(ep, key=lambda tr: tr.t) for ep in episodes.values()]


# ----------------------------------------------------------------- batch

class Batch(NamedTuple):
    states: torch.Tensor
    masks: torch.Tensor
    actions: torch.Tensor
    rewards: torch.Tensor
    next_states: torch.Tensor
    next_masks: torch.Tensor
    dones: torch.Tensor
    is_demo: torch.Tensor
    n_returns: torch.Tensor
    n_states: torch.Tensor
    n_masks: torch.Tensor
    n_discounts: torch.Tensor
    n_boot: torch.Tensor


def collate(transitions: Sequence[Transition], encoder: StateEncoder) -> Batch:
    if len(transitions) == 0:
        raise ValueError("empty batch")

    def enc(obs_list):
        codes = np.stack([o.codes for o in obs_list])
        placed = np.stack([o.placed for o in obs_list])
        return torch.from_numpy(encoder.encode_batch(codes, placed)), \
            torch.from_numpy(np.stack([o.mask for o in obs_list]))

    states, masks = enc([t.state for t in transitions])
    nxt, nmasks = enc([t.next_state for t in transitions])
    boot = [t.n_state is not None for t in transitions]
    n_obs = [t.n_state if t.n_state is not None else t.next_state for t in transitions]
    n_states, n_masks = enc(n_obs)
    n_returns = [t.reward if t.n_return is None else t.n_return for t in transitions]
    f64 = lambda xs: torch.tensor(xs, dtype=torch.float64)
    return Batch(states, masks,
                 torch.tensor([t.action for t in transitions], dtype=torch.int64),
                 f64([t.reward for t in transitions]), nxt, nmasks,
                 torch.tensor([t.done for t in transitions]),
                 torch.tensor([t.is_demo for t in transitions]),
                 f64(n_returns), n_states, n_masks,
                 f64([t.n_discount for t in transitions]), torch.tensor(boot))


# ---------------------------------------------------------------- acting

def eps_schedule(eps: float, config: TrainConfig) -> float:
    return max(config.eps_min, eps * (1.0 - config.eps_decay))


def greedy_action(net: qnn.QNetwork, obs: Obs, encoder: StateEncoder) -> int:
    if not obs.mask.any():
        raise qnn.StateError("no available action")
    with torch.no_grad():
        q = qnn.forward(net, encoder.encode(obs)[None], obs.mask[None])[0]
    # numpy argmax: first maximum, i.e. smallest index on ties
    return int(np.argmax(q.numpy()))


def act(net: qnn.QNetwork, obs: Obs, eps: float, rng: np.random.Generator,
        encoder: StateEncoder) -> int:
    available = np.flatnonzero(obs.mask)
    if available.size == 0:
        raise qnn.StateError("no available action")
    if rng.random() < eps:
        return int(available[rng.integers(available.size)])
    return greedy_action(net, obs, encoder)


# --------------------------------------------------------------- targets

def _max_available(net: qnn.QNetwork, states, masks) -> torch.Tensor:
    return qnn.forward(net, states, masks).max(dim=1).values.to(torch.float64)


def td_target(batch: Batch, target_net: qnn.QNetwork, gamma: float) -> torch.Tensor:
    """r + gamma * max_a' q_target(s', a') over available a'; r at terminals."""
    with torch.no_grad():
        boot = _max_available(target_net, batch.next_states, batch.next_masks)
        return torch.where(batch.dones, batch.rewards, batch.rewards + gamma * boot)


def double_td_target(batch: Batch, online: qnn.QNetwork, target_net: qnn.QNetwork,
                     gamma: float) -> torch.Tensor:
    """Online network selects the next action, target network evaluates it."""
    with torch.no_grad():
        q_online = qnn.forward(online, batch.next_states, batch.next_masks)
        best = q_online.argmax(dim=1, keepdim=True)
        q_target = qnn.forward(target_net, batch.next_states, batch.next_masks)
        boot = q_target.gather(1, best).squeeze(1).to(torch.float64)
        return torch.where(batch.dones, batch.rewards, batch.rewards + gamma * boot)


def n_step_target(batch: Batch, target_net: qnn.QNetwork) -> torch.Tensor:
    with torch.no_grad():
        boot = _max_available(target_net, batch.n_states, batch.n_masks)
        return torch.where(batch.n_boot, batch.n_returns + batch.n_discounts * boot, batch.n_returns)


# ----------------------------------------------------------------- losses

def margin_loss(q_row: torch.Tensor, a_e: int, margin: float, mask=None) -> torch.Tensor:
    """max_a [q(a) + margin * (a != a_e)] - q(a_e), over unmasked actions."""
    q_row = torch.as_tensor(q_row)
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=torch.bool)
        if not mask[a_e]:
            raise ValueError(f"expert action {a_e} is masked")
        q_row = q_row.masked_fill(~mask, float("-inf"))
    bonus = torch.full_like(q_row, margin)
    bonus[a_e] = 0.0
    return (q_row + bonus).max() - q_row[a_e]


def _margin_terms(q_all: torch.Tensor, actions: torch.Tensor, margin: float) -> torch.Tensor:
    bonus = torch.full_like(q_all, margin)
    bonus.scatter_(1, actions[:, None], 0.0)
    return (q_all + bonus).max(dim=1).values - q_all.gather(1, actions[:, None]).squeeze(1)


def n_step_loss(window: Sequence[Transition], net: qnn.QNetwork, target_net: qnn.QNetwork,
                gamma: float, n: int, encoder: StateEncoder) -> torch.Tensor:
    """Squared error between q(s_t, a_t) and the n-step return of ``window``."""
    ret, obs, disc = n_step_return(window, gamma, n)
    first = window[0]
    q = qnn.forward(net, encoder.encode(first.state)[None], first.state.mask[None])[0, first.action]
    target = torch.tensor(ret, dtype=torch.float64)
    if obs is not None:
        with torch.no_grad():
            boot = qnn.forward(target_net, encoder.encode(obs)[None], obs.mask[None]).max()
        target = target + disc * boot.to(torch.float64)
    return (target - q.to(torch.float64)) ** 2


class LossParts(NamedTuple):
    total: torch.Tensor
    td: float
    n_step: float
    margin: float
    l2: float


def global_loss(batch: Batch, online: qnn.QNetwork, target_net: qnn.QNetwork,
                config: TrainConfig, training: bool = True) -> LossParts:
    """TD + lambda1 * n-step + lambda2 * margin + lambda3 * L2.

    Bootstrap values are computed without gradient.
    """
    if len(batch.actions) == 0:
        raise ValueError("empty batch")
    if config.double:
        target = double_td_target(batch, online, target_net, config.gamma)
    else:
        target = td_target(batch, target_net, config.gamma)
    q_all = online(batch.states.to(next(online.parameters()).dtype), batch.masks, training)
    q_sa = q_all.gather(1, batch.actions[:, None]).squeeze(1).to(torch.float64)
    j_dq = ((target - q_sa) ** 2).mean()
    total = j_dq
    j_n = j_e = l2 = torch.zeros((), dtype=torch.float64)
    if config.lambda1:
        j_n = ((n_step_target(batch, target_net) - q_sa) ** 2).mean()
        total = total + config.lambda1 * j_n
    if config.lambda2:
        terms = _margin_terms(q_all, batch.actions, config.margin).to(torch.float64)
        j_e = torch.where(batch.is_demo, terms, 0.0).mean()
        total = total + config.lambda2 * j_e
    if config.lambda3:
        l2 = qnn.l2_penalty(online).to(torch.float64)
        total = total + config.lambda3 * l2
    return LossParts(total, float(j_dq.detach()), float(j_n.detach()), float(j_e.detach()), float(l2.detach()))


# --------------------------------------------------------------- training

def build_networks(encoder: StateEncoder, config: TrainConfig):
    online = qnn.QNetwork(encoder.channels, encoder.rows, encoder.cols, config.arch,
                          config.dueling, config.dropout, seed=config.seed)
    target = qnn.clone(online)
    return online, target


class Trainer:
    """Owns networks, optimiser, buffer and RNG streams for one run."""

    def __init__(self, env: FirebreakEnv, config: TrainConfig, demos: Sequence[Transition] = ()):
        self.env = env
        self.config = config
        self.encoder = StateEncoder.for_landscape(env.base)
        self.online, self.target = build_networks(self.encoder, config)
        self.optimizer = qnn.make_optimizer(self.online, config.lr)
        demos = [tr for ep in split_episodes(demos)
                 for tr in attach_n_step(ep, config.gamma, config.n_step)]
        self.buffer = ReplayBuffer(config.capacity, demos)
        self.rng = np.random.default_rng([config.seed, 1])
        self.eps = config.eps_start
        self.episode = 0
        self.pretrain_done = 0
        self.curve: list[dict] = []
        self.pretrain_losses: list[float] = []

    def update(self) -> float:
        batch = collate(self.buffer.sample(self.config.batch_size, self.rng), self.encoder)
        parts = global_loss(batch, self.online, self.target, self.config)
        self.optimizer.zero_grad(set_to_none=True)
        parts.total.backward()
        self.optimizer.step()
        return float(parts.total.detach())

    def pretrain(self, steps: int | None = None) -> list[float]:
        """Gradient steps on demonstrations only; target sync every C steps."""
        steps = self.config.pretrain_steps if steps is None else steps
        if steps and len(self.buffer) == 0:
            raise ValueError("pre-training needs demonstrations in the buffer")
        if self.buffer.agent:
            raise ValueError("pre-training expects a demonstration-only buffer")
        losses = []
        for _ in range(steps):
            losses.append(self.update())
            self.pretrain_done += 1
            if self.pretrain_done % self.config.target_sync == 0:
                qnn.sync_target(self.online, self.target)
        self.pretrain_losses.extend(losses)
        return losses

    def episode_seed(self, episode: int) -> int:
        return int(np.random.SeedSequence([self.config.seed, 2, episode]).generate_state(1, np.uint64)[0] >> 1)

    def run_episode(self) -> dict:
        env = self.env
        state = env.reset(self.episode_seed(self.episode))
        transitions, done, ret, t = [], False, 0.0, 0
        while not done:
            obs = state.observe()
            action = act(self.online, obs, self.eps, self.rng, self.encoder)
            state, reward, done, _ = env.step(action)
            transitions.append(Transition(obs, action, reward, state.observe(), done, False,
                                          self.episode, t))
            ret += reward
            t += 1
        for tr in attach_n_step(transitions, self.config.gamma, self.config.n_step):
            self.buffer.push(tr)
        losses = [self.update() for _ in transitions]
        row = {"episode": self.episode, "return": ret, "epsilon": self.eps,
               "loss": float(np.mean(losses)), "eval_burned_pct": ""}
        self.episode += 1
        self.eps = eps_schedule(self.eps, self.config)
        if self.episode % self.config.target_sync == 0:
            qnn.sync_target(self.online, self.target)
        return row

    def train(self, episodes: int | None = None, evaluator=None, on_checkpoint=None) -> list[dict]:
        """Run until ``episodes`` training episodes have been played in total."""
        episodes = self.config.episodes if episodes is None else episodes
        while self.episode < episodes:
            row = self.run_episode()
            if evaluator is not None and self.config.eval_every and self.episode % self.config.eval_every == 0:
                row["eval_burned_pct"] = evaluator(self.online)
            self.curve.append(row)
            if on_checkpoint is not None and self.config.checkpoint_every \
                    and self.episode % self.config.checkpoint_every == 0:
                on_checkpoint(self)
        return self.curve

    # ------------------------------------------------------------ resume

    def state_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "online": self.online.state_dict(), "target": self.target.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "dropout_online": self.online.dropout_rng.get_state(),
            "dropout_target": self.target.dropout_rng.get_state(),
            "buffer": self.buffer.state_dict(),
            "rng": self.rng.bit_generator.state,
            "eps": self.eps, "episode": self.episode, "pretrain_done": self.pretrain_done,
            "curve": list(self.curve), "pretrain_losses": list(self.pretrain_losses),
        }

    def load_state_dict(self, d: dict) -> None:
        self.online.load_state_dict(d["online"])
        self.target.load_state_dict(d["target"])
        self.optimizer.load_state_dict(d["optimizer"])
        self.online.dropout_rng.set_state(d["dropout_online"])
        self.target.dropout_rng.set_state(d["dropout_target"])
        self.buffer = ReplayBuffer.from_state_dict(d["buffer"])
        self.rng.bit_generator.state = d["rng"]
        self.eps, self.episode, self.pretrain_done = d["eps"], d["episode"], d["pretrain_done"]
        self.curve = list(d["curve"])
        self.pretrain_losses = list(d["pretrain_losses"])


def greedy_placement(net: qnn.QNetwork, env: FirebreakEnv, encoder: StateEncoder) -> tuple[int, ...]:
    """Placed cells of a greedy episode (no terminal simulation)."""
    state = env.reset()
    for _ in range(env.budget):
        state = place(state, greedy_action(net, state.observe(), encoder))
    return state.placed
