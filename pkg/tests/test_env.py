import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_landscape
from firebreak import firesim
from firebreak.env import (
    ConfigError,
    EnvConfig,
    FirebreakEnv,
    IllegalActionError,
    StateEncoder,
    action_mask,
    encode_state,
    evaluate_grid,
    max_firebreaks,
    place,
    reset,
    step,
    trace_csv,
)
from firebreak.firesim import SpreadModel
from firebreak.landscape import Fuel, FuelCatalog, IgnitionZone, Landscape, WeatherScenario

WIND = (WeatherScenario(45.0, 10.0, "a"), WeatherScenario(200.0, 5.0, "b"))


def config(**kw):
    base = dict(zone=IgnitionZone((5, 5), 2), weather=WIND, sims_per_eval=8)
    base.update(kw)
    return EnvConfig(**base)


@pytest.mark.parametrize("n,expected", [(400, 20), (1600, 80), (100, 5), (1000, 50)])
def test_max_firebreaks_examples(n, expected):
    assert max_firebreaks(n, 0.05) == expected


def test_max_firebreaks_degenerate():
    with pytest.raises(ConfigError):
        max_firebreaks(10, 0.05)
    with pytest.raises(ConfigError):
        max_firebreaks(100, 1.0)


@given(st.integers(1, 10**6), st.integers(1, 99))
def test_max_firebreaks_is_floor(n, pct):
    alpha = pct / 100
    exact = n * pct // 100
    if exact == 0:
        with pytest.raises(ConfigError):
            max_firebreaks(n, alpha)
    else:
        assert max_firebreaks(n, alpha) == exact


def test_reset_all_fuel():
    state = reset(config(), make_landscape(10, 10, [1] * 100))
    assert state.available().sum() == 100
    assert state.t == 0 and state.placed == ()


def test_reset_forbids_nonfuel():
    cells = [1] * 100
    for c in range(0, 100, 10):
        cells[c] = 0
    state = reset(config(), make_landscape(10, 10, cells))
    assert state.forbidden == frozenset(range(0, 100, 10))
    assert state.available().sum() == 90


def test_reset_deterministic_and_initial_forbidden():
    land = make_landscape(10, 10, seed=3)
    cfg = config(initial_forbidden={1, 2})
    assert reset(cfg, land, 5) == reset(cfg, land, 5)
    assert {1, 2} <= reset(cfg, land).forbidden


def test_reset_rejects_impossible_budget():
    cells = [0] * 100
    cells[:3] = [1, 1, 1]
    with pytest.raises(ConfigError):
        reset(config(zone=IgnitionZone((0, 0), 0)), make_landscape(10, 10, cells))


def test_place_updates_grid_mask_and_encoding():
    land = make_landscape(10, 10, [1] * 100)
    state = place(reset(config(), land), 37)
    assert state.grid.cells[37] == 0 and 37 in state.forbidden and state.t == 1
    mask = action_mask(state)
    assert not mask[37] and mask.sum() == 99
    enc = encode_state(state)
    assert enc[0].reshape(-1)[37] == 1 and enc[-1].reshape(-1)[37] == 1
    assert enc[-1].sum() == 1


def test_encoding_channels():
    cat = FuelCatalog({1: Fuel("a", 0.5), 2: Fuel("b", 0.5), 3: Fuel("c", 0.5)})
    land = Landscape(4, 4, [1] * 16, cat)
    enc = encode_state(reset(config(zone=IgnitionZone((2, 2), 1), alpha=0.1), land))
    assert enc.shape == (5, 4, 4)
    assert enc[1].sum() == 16 and enc[[0, 2, 3, 4]].sum() == 0


def test_native_nonfuel_differs_from_placed():
    land = make_landscape(10, 10, [0] + [1] * 99)
    state = place(reset(config(), land), 1)
    enc = encode_state(state)
    enc = enc.reshape(enc.shape[0], -1)
    assert enc[0, 0] == enc[0, 1] == 1
    assert enc[-1, 0] == 0 and enc[-1, 1] == 1


@pytest.mark.parametrize("bad", [0, 100, -1])
def test_illegal_actions(bad):
    land = make_landscape(10, 10, [0] + [1] * 99)
    state = reset(config(), land)
    with pytest.raises(IllegalActionError):
        step(state, bad, config(), np.random.default_rng(0))


def test_stepping_a_placed_cell_fails():
    state = place(reset(config(), make_landscape(10, 10, [1] * 100)), 4)
    with pytest.raises(IllegalActionError):
        place(state, 4)


def test_terminal_reward_hand_case():
    # 5x5, column 3 is non-fuel: left block has 15 cells, budget is 1
    cat = FuelCatalog({1: Fuel("dry", 1.0)})
    cells = np.ones((5, 5), int)
    cells[:, 3] = 0
    land = Landscape(5, 5, cells, cat)
    cfg = EnvConfig(IgnitionZone((2, 1), 0), (WeatherScenario(0, 0),), SpreadModel(wind_gain=0.0),
                    alpha=0.05, k=-1.0, sims_per_eval=4)
    state = reset(cfg, land)
    nxt, reward, done, info = step(state, 4, cfg, np.random.default_rng(0))
    assert done and reward == -15.0
    assert info["burned"].tolist() == [15] * 4


def test_default_k_normalises_by_grid_size():
    cfg = config()
    assert cfg.reward_scale(100) == -0.01
    assert config(k=-1.0).reward_scale(100) == -1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32))
def test_episode_rewards_sparse_and_terminal_exact(seed):
    land = make_landscape(10, 10, seed=seed % 1000)
    env = FirebreakEnv(config(), land, seed)
    rng = np.random.default_rng(seed)
    state, rewards, done = env.reset(seed), [], False
    while not done:
        avail = np.flatnonzero(state.available())
        state, r, done, info = env.step(int(rng.choice(avail)))
        rewards.append(r)
    assert len(rewards) == 5 and all(r == 0.0 for r in rewards[:-1])
    outcomes = firesim.run_batch(state.grid, env.config.model, env.config.weather, env.config.zone,
                                 env.config.sims_per_eval, info["eval_seed"], ignition_landscape=land)
    assert rewards[-1] == firesim.average_burned(outcomes) * (-1 / 100)
    assert sum(rewards) == rewards[-1]


def test_more_treatment_never_burns_more():
    land = make_landscape(10, 10, seed=9)
    cfg = config(sims_per_eval=64)
    rng = np.random.default_rng(1)
    state = reset(cfg, land)
    previous = evaluate_grid(state, cfg, 123)
    for _ in range(5):
        state = place(state, int(rng.choice(np.flatnonzero(state.available()))))
        burned = evaluate_grid(state, cfg, 123)
        assert np.all(burned <= previous)
        previous = burned


def test_env_wrapper_deterministic():
    land = make_landscape(10, 10, [1] * 50 + [3] * 50)
    out = []
    for _ in range(2):
        env = FirebreakEnv(config(), land, 0)
        env.reset(42)
        for a in (11, 12, 13, 14, 15):
            res = env.step(a)
        out.append(res[1])
    assert out[0] == out[1]


def test_encoder_batch_matches_single():
    land = make_landscape(6, 7, seed=4)
    enc = StateEncoder.for_landscape(land)
    s = place(reset(config(zone=IgnitionZone((3, 3), 1)), land), 2)
    o = s.observe()
    batch = enc.encode_batch(np.stack([o.codes, o.codes]), np.stack([o.placed, o.placed]))
    assert np.array_equal(batch[1], enc.encode(o))
    assert np.array_equal(enc.encode(o), encode_state(s))


def test_trace_csv():
    text = trace_csv([3, 9], -1.5, [2, 4])
    assert text.splitlines() == ["kind,index,value", "placed,0,3", "placed,1,9", "reward,0,-1.5",
                                 "burned,0,2", "burned,1,4"]
