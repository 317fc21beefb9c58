from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from envs import LIFT, achieved_goal
from errors import ConfigurationError, EmptyStoreError, EpisodeValidationError
from replay import (EpisodeRecord, HERConfig, ReplayBuffer, Transition, her_substitute, load_buffer,
                    recompute_reward, sample_batch, save_buffer, stack_batch)


def make_obs(x, y=0.5, z=0.0):
    obs = np.zeros(13)
    obs[3:6] = [x, y, z]
    return obs


def make_episode(episode_id=0, length=50, mask=(1, 1, 1), goal=(0.9, 0.9, 0.3)):
    """方块x坐标每步+0.1，相邻已达成目标之间互相超出ε"""
    mask = np.array(mask, dtype=np.int8)
    transitions = [
        Transition(obs=make_obs(0.1 * t), goal=np.array(goal, dtype=np.float64), mask=mask,
                   action=np.zeros(4), obs_next=make_obs(0.1 * (t + 1)), episode_id=episode_id, t=t)
        for t in range(length)
    ]
    return EpisodeRecord(transitions=transitions, terminal_success=np.array([False, True, False]))


def test_store_evicts_oldest_whole_episodes():
    buffer = ReplayBuffer(capacity=100, env_tag=LIFT)
    for i in range(3):
        buffer.store_episode(make_episode(i))
    assert len(buffer) == 100
    assert [ep.episode_id for ep in buffer.episodes] == [1, 2]


def test_capacity_never_exceeded():
    buffer = ReplayBuffer(capacity=120, env_tag=LIFT)
    for i in range(10):
        buffer.store_episode(make_episode(i, length=7 + i))
        assert len(buffer) <= 120
    ids = [ep.episode_id for ep in buffer.episodes]
    assert ids == sorted(ids) and ids[-1] == 9


def test_store_rejects_malformed_episodes():
    buffer = ReplayBuffer(capacity=100, env_tag=LIFT)
    with pytest.raises(EpisodeValidationError):
        buffer.store_episode(EpisodeRecord(transitions=[], terminal_success=np.zeros(3, dtype=bool)))
    episode = make_episode()
    episode.transitions[3] = replace(episode.transitions[3], t=7)
    with pytest.raises(EpisodeValidationError):
        buffer.store_episode(episode)
    episode = make_episode()
    episode.transitions[1] = replace(episode.transitions[1], mask=np.array([1, 0, 1], dtype=np.int8))
    with pytest.raises(EpisodeValidationError):
        buffer.store_episode(episode)
    with pytest.raises(EpisodeValidationError):
        buffer.store_episode(make_episode(mask=(1, 1)))


def test_store_then_read_back_is_identical():
    buffer = ReplayBuffer(capacity=100, env_tag=LIFT)
    episode = make_episode()
    buffer.store_episode(episode)
    stored = buffer.episodes[0]
    for a, b in zip(stored.transitions, episode.transitions):
        assert a.obs.tobytes() == b.obs.tobytes()
        assert a.goal.tobytes() == b.goal.tobytes()


def test_her_substitute_last_step_uses_final_observation():
    episode = make_episode()
    rng = np.random.default_rng(0)
    tr = her_substitute(episode, 49, rng, LIFT)
    assert_array_equal(tr.goal, achieved_goal(episode.transitions[49].obs_next, LIFT))
    assert tr.reward == 0.0
    assert tr.relabeled


def test_her_substitute_preserves_everything_but_goal():
    episode = make_episode(mask=(1, 0, 1))
    rng = np.random.default_rng(1)
    for t in (0, 10, 48):
        original = episode.transitions[t]
        tr = her_substitute(episode, t, rng, LIFT)
        assert_array_equal(tr.obs, original.obs)
        assert_array_equal(tr.obs_next, original.obs_next)
        assert_array_equal(tr.action, original.action)
        assert_array_equal(tr.mask, original.mask)
        later = [achieved_goal(episode.transitions[s].obs_next, LIFT) for s in range(t, 50)]
        assert any(np.array_equal(tr.goal, g) for g in later)


def test_her_substitute_offset_is_uniform():
    episode = make_episode()
    rng = np.random.default_rng(2)
    t = 40
    n_draws = 100_000
    counts = np.zeros(10)
    for _ in range(n_draws):
        goal = her_substitute(episode, t, rng, LIFT).goal
        offset = int(round(goal[0] / 0.1)) - t
        counts[offset - 1] += 1
    assert counts.sum() == n_draws
    assert np.all(np.abs(counts / n_draws - 0.1) < 0.01)


def test_her_substitute_rejects_out_of_range():
    with pytest.raises(IndexError):
        her_substitute(make_episode(), 50, np.random.default_rng(0), LIFT)
    with pytest.raises(IndexError):
        her_substitute(make_episode(), -1, np.random.default_rng(0), LIFT)


def test_recompute_reward():
    tr = make_episode().transitions[0]
    assert recompute_reward(replace(tr, goal=np.array([0.1, 0.5, 0.0])), LIFT) == 0.0
    assert recompute_reward(replace(tr, goal=np.array([0.1, 0.5, 0.3])), LIFT) == -1.0
    zero = replace(tr, goal=np.array([0.9, 0.9, 0.9]), mask=np.zeros(3, dtype=np.int8))
    assert recompute_reward(zero, LIFT) == 0.0
    assert recompute_reward(zero, LIFT) == recompute_reward(zero, LIFT)


def test_sample_batch_relabel_fraction():
    buffer = ReplayBuffer(capacity=1000, env_tag=LIFT)
    for i in range(4):
        buffer.store_episode(make_episode(i))
    rng = np.random.default_rng(3)
    relabeled = 0
    for _ in range(100):
        relabeled += sum(tr.relabeled for tr in sample_batch(buffer, 1000, HERConfig(k=6), rng))
    assert abs(relabeled / 100_000 - 6 / 7) < 0.01


def test_sample_batch_without_her_and_mask_preservation():
    buffer = ReplayBuffer(capacity=1000, env_tag=LIFT)
    buffer.store_episode(make_episode(mask=(1, 1, 0)))
    batch = sample_batch(buffer, 256, HERConfig(k=0), np.random.default_rng(4))
    assert not any(tr.relabeled for tr in batch)
    assert all(tr.reward is not None for tr in batch)
    for tr in batch:
        assert_array_equal(tr.mask, [1, 1, 0])
    her_batch = sample_batch(buffer, 256, HERConfig(k=6), np.random.default_rng(4))
    for tr in her_batch:
        assert_array_equal(tr.mask, [1, 1, 0])


def test_sample_batch_errors():
    buffer = ReplayBuffer(capacity=100, env_tag=LIFT)
    with pytest.raises(EmptyStoreError):
        sample_batch(buffer, 8, HERConfig(), np.random.default_rng(0))
    buffer.store_episode(make_episode())
    with pytest.raises(ConfigurationError):
        sample_batch(buffer, 0, HERConfig(), np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        HERConfig(k=-1).validate()


def test_stack_batch_shapes():
    buffer = ReplayBuffer(capacity=100, env_tag=LIFT)
    buffer.store_episode(make_episode())
    arrays = stack_batch(sample_batch(buffer, 16, HERConfig(), np.random.default_rng(0)))
    assert arrays["obs"].shape == (16, 13)
    assert arrays["goal"].shape == (16, 3)
    assert arrays["action"].shape == (16, 4)
    assert arrays["reward"].shape == (16,)


def test_buffer_snapshot_round_trip(tmp_path):
    buffer = ReplayBuffer(capacity=1000, env_tag=LIFT)
    buffer.store_episode(make_episode(0, mask=(0, 1, 1)))
    buffer.store_episode(make_episode(1, length=20))
    path = save_buffer(buffer, str(tmp_path / "buffer.csv"))
    loaded = load_buffer(path, 1000, LIFT)
    assert len(loaded) == len(buffer)
    assert [ep.episode_id for ep in loaded.episodes] == [0, 1]
    for a_ep, b_ep in zip(loaded.episodes, buffer.episodes):
        assert_array_equal(a_ep.terminal_success, b_ep.terminal_success)
        for a, b in zip(a_ep.transitions, b_ep.transitions):
            assert a.obs.tobytes() == b.obs.tobytes()
            assert a.obs_next.tobytes() == b.obs_next.tobytes()
            assert_array_equal(a.mask, b.mask)
            assert a.t == b.t
