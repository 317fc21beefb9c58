from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from curriculum import CurriculumConfig, MaskCurriculum
from ddpg import (ActorCritic, ExplorationConfig, Normalizer, RolloutConfig, TrainingState, actor_gradient,
                  critic_targets, evaluate, load_checkpoint, rollout_episode, run_epoch, save_checkpoint,
                  select_action, train_batch)
from envs import LIFT, PUSH, EnvParams, ScriptedPolicy
from errors import ConfigurationError, NumericError
from nn_core import forward, init_network
from replay import HERConfig, ReplayBuffer, sample_batch
from rollout_pool import RolloutPool


class ConstantPolicy:
    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)

    def act(self, obs, goal):
        return self.value.copy()


def zero_last_layer(net, bias=0.0):
    params = [p.copy() for p in net.parameters()]
    params[-2][:] = 0.0
    params[-1][:] = bias
    return net.with_parameters(params)


def tiny_state(seed=0, cgm=True, pool=None, env=LIFT):
    ac = ActorCritic.create(3 if env == LIFT else 2, seed, hidden_sizes=(16, 16))
    params = EnvParams(horizon=10)
    return TrainingState(
        env_tag=env,
        env_params=params,
        ac=ac,
        buffer=ReplayBuffer(10_000, env),
        curriculum=MaskCurriculum(3 if env == LIFT else 2, CurriculumConfig(), enabled=cgm),
        her=HERConfig(k=4),
        expl=ExplorationConfig(),
        rollout=RolloutConfig(n_parallel=2, n_cycles=3, horizon=10, n_batches=2, batch_size=16),
        seed=seed,
        n_eval=4,
        pool=pool,
    )


def test_normalizer_statistics_and_clip():
    norm = Normalizer(2, eps=0.01, clip=5.0)
    assert_array_equal(norm.stats().normalize([1.0, 2.0]), [1.0, 2.0])
    norm.update(np.array([[0.0, 1.0], [2.0, 1.0]]))
    assert_allclose(norm.mean, [1.0, 1.0])
    assert_allclose(norm.std, [1.0, 0.01])
    assert_allclose(norm.stats().normalize([3.0, 1.5]), [2.0, 5.0])
    restored = Normalizer.from_dict(norm.to_dict())
    assert_array_equal(restored.mean, norm.mean)


def test_eval_action_is_deterministic():
    ac = ActorCritic.create(3, seed=1)
    obs, goal = np.linspace(0, 1, 13), np.array([0.2, 0.3, 0.1])
    a = select_action(ac, obs, goal, ExplorationConfig(), train_mode=False)
    b = select_action(ac, obs, goal, ExplorationConfig(), train_mode=False)
    assert_array_equal(a, b)
    assert np.all(np.abs(a) <= 1.0)


def test_noise_free_training_action_equals_eval_action():
    ac = ActorCritic.create(3, seed=1)
    obs, goal = np.linspace(0, 1, 13), np.array([0.2, 0.3, 0.1])
    quiet = ExplorationConfig(sigma=0.0, explore_eps=0.0)
    train = select_action(ac, obs, goal, quiet, True, np.random.default_rng(0))
    assert_array_equal(train, select_action(ac, obs, goal, quiet, False))


def test_random_action_fraction():
    policy = ConstantPolicy(np.zeros(4))
    expl = ExplorationConfig(sigma=0.0, explore_eps=0.3)
    rng = np.random.default_rng(5)
    n = 100_000
    random_actions = sum(np.any(select_action(policy, None, None, expl, True, rng) != 0.0) for _ in range(n))
    assert abs(random_actions / n - 0.3) < 0.01


def test_exploration_config_validation():
    with pytest.raises(ConfigurationError):
        ExplorationConfig(sigma=-0.1).validate()
    with pytest.raises(ConfigurationError):
        RolloutConfig(gamma=1.0).validate()


def test_rollout_episode_length_and_stored_goals():
    ac = ActorCritic.create(3, seed=2)
    mask = np.array([1, 1, 0], dtype=np.int8)
    episode = rollout_episode(LIFT, ac.snapshot(), mask, ExplorationConfig(), 50, np.random.default_rng(0))
    assert len(episode) == 50
    assert [tr.t for tr in episode.transitions] == list(range(50))
    for tr in episode.transitions:
        assert tr.goal[2] == tr.obs[5]
        assert_array_equal(tr.goal[:2], episode.goal[:2])
        assert_array_equal(tr.mask, mask)


def test_rollout_with_zero_mask_is_immediately_achieved():
    policy = ConstantPolicy(np.zeros(4))
    episode = rollout_episode(PUSH, policy, np.zeros(2), ExplorationConfig(), 50, np.random.default_rng(1))
    assert episode.transitions[0].reward == 0.0
    assert episode.masked_success


def test_scripted_rollout_reaches_goal():
    episode = rollout_episode(LIFT, ScriptedPolicy(LIFT), np.ones(3), ExplorationConfig(), 50,
                              np.random.default_rng(2), train_mode=False)
    assert np.all(episode.terminal_success)
    assert episode.transitions[-1].reward == 0.0


def test_evaluate_scripted_and_untrained():
    rate, per_dim = evaluate(LIFT, ScriptedPolicy(LIFT), 10, np.random.default_rng(0))
    assert rate == 1.0
    assert per_dim.shape == (10, 3)
    ac = ActorCritic.create(3, seed=0)
    rate, _ = evaluate(LIFT, ac.snapshot(), 10, np.random.default_rng(0))
    assert rate <= 0.1
    with pytest.raises(ConfigurationError):
        evaluate(LIFT, ac, 0, np.random.default_rng(0))


def test_critic_targets_zero_and_clipped():
    ac = ActorCritic.create(3, seed=3, hidden_sizes=(8,))
    cfg = RolloutConfig()
    obs_next = np.random.default_rng(0).uniform(size=(5, 13))
    goal = np.random.default_rng(1).uniform(size=(5, 3))

    ac.critic_target = zero_last_layer(ac.critic_target, 0.0)
    assert_array_equal(critic_targets(ac, obs_next, goal, np.zeros(5), cfg), np.zeros((5, 1)))

    ac.critic_target = zero_last_layer(ac.critic_target, -100.0)
    targets = critic_targets(ac, obs_next, goal, -np.ones(5), cfg)
    assert np.all(targets == cfg.q_min)
    assert cfg.q_min == pytest.approx(-50.0)

    ac.critic_target = zero_last_layer(ac.critic_target, 10.0)
    assert np.all(critic_targets(ac, obs_next, goal, np.zeros(5), cfg) == 0.0)


def test_actor_gradient_matches_finite_differences():
    actor = init_network([5, 6, 2], ["relu", "tanh"], seed=1)
    critic = init_network([7, 6, 1], ["tanh", "linear"], seed=2)
    x = np.random.default_rng(3).normal(size=(4, 5))

    def loss(net):
        actions = forward(net, x)
        return -np.mean(forward(critic, np.concatenate([x, actions], axis=1)))

    _, grads = actor_gradient(actor, critic, x)
    params = actor.parameters()
    h = 1e-6
    for i, (p, g) in enumerate(zip(params, grads.parameters())):
        numeric = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            plus = [q.copy() for q in params]
            minus = [q.copy() for q in params]
            plus[i][idx] += h
            minus[i][idx] -= h
            numeric[idx] = (loss(actor.with_parameters(plus)) - loss(actor.with_parameters(minus))) / (2 * h)
        err = np.linalg.norm(g - numeric) / max(np.linalg.norm(g) + np.linalg.norm(numeric), 1e-12)
        assert err < 1e-3


def _filled_buffer(ac, env=LIFT, episodes=4):
    buffer = ReplayBuffer(10_000, env)
    rng = np.random.default_rng(0)
    for i in range(episodes):
        episode = rollout_episode(env, ac.snapshot(), np.ones(3), ExplorationConfig(), 20, rng, episode_id=i)
        buffer.store_episode(episode)
        ac.update_normalizers(episode, env)
    return buffer


def test_train_batch_updates_and_polyak_one_copies():
    ac = ActorCritic.create(3, seed=4, hidden_sizes=(16,))
    buffer = _filled_buffer(ac)
    batch = sample_batch(buffer, 32, HERConfig(), np.random.default_rng(1))
    cfg = RolloutConfig(polyak=1.0)
    before = [p.copy() for p in ac.critic.parameters()]
    critic_loss, objective = train_batch(ac, batch, cfg)
    assert np.isfinite(critic_loss) and np.isfinite(objective)
    assert ac.critic_adam.step == 1 and ac.actor_adam.step == 1
    assert any(not np.array_equal(a, b) for a, b in zip(before, ac.critic.parameters()))
    for a, b in zip(ac.critic_target.parameters(), ac.critic.parameters()):
        assert_array_equal(a, b)
    for a, b in zip(ac.actor_target.parameters(), ac.actor.parameters()):
        assert_array_equal(a, b)


def test_train_batch_is_reproducible():
    results = []
    for _ in range(2):
        ac = ActorCritic.create(3, seed=4, hidden_sizes=(16,))
        buffer = _filled_buffer(ac)
        rng = np.random.default_rng(9)
        losses = [train_batch(ac, sample_batch(buffer, 16, HERConfig(), rng), RolloutConfig()) for _ in range(3)]
        results.append((losses, [p.copy() for p in ac.actor.parameters()]))
    assert results[0][0] == results[1][0]
    for a, b in zip(results[0][1], results[1][1]):
        assert a.tobytes() == b.tobytes()


def test_train_batch_rejects_non_finite_loss():
    ac = ActorCritic.create(3, seed=4, hidden_sizes=(16,))
    buffer = _filled_buffer(ac)
    batch = sample_batch(buffer, 8, HERConfig(), np.random.default_rng(1))
    batch = [replace(tr, reward=np.nan) for tr in batch]
    with pytest.raises(NumericError) as info:
        train_batch(ac, batch, RolloutConfig())
    assert "critic_loss" in info.value.diagnostics
    with pytest.raises(ConfigurationError):
        train_batch(ac, [], RolloutConfig())


def test_run_epoch_bookkeeping():
    ts = tiny_state()
    stats = run_epoch(ts)
    assert stats.transitions == 3 * 2 * 10
    assert len(ts.buffer) == 60
    assert sum(stats.counts.values()) == 6
    assert ts.curriculum.tracker.counts == [4, 4, 4]
    assert 0.0 <= stats.success_rate <= 1.0
    assert abs(sum(stats.weights.values()) - 1.0) < 1e-12
    assert ts.epoch == 1
    run_epoch(ts)
    assert ts.curriculum.tracker.counts == [8, 8, 8]


def test_run_epoch_baseline_uses_full_mask_only():
    ts = tiny_state(cgm=False)
    stats = run_epoch(ts)
    assert stats.counts["111"] == 6
    assert all(v == 0 for k, v in stats.counts.items() if k != "111")


def test_run_epoch_is_deterministic_and_pool_independent():
    rows = []
    for pool in (None, None, RolloutPool(2)):
        ts = tiny_state(seed=3, pool=pool)
        rows.append([run_epoch(ts).to_row(ts.curriculum.bits) for _ in range(2)])
        if pool is not None:
            pool.shutdown()
    for other in rows[1:]:
        for a, b in zip(rows[0], other):
            assert a.keys() == b.keys()
            for key in a:
                assert a[key] == b[key] or (np.isnan(a[key]) and np.isnan(b[key]))


def test_checkpoint_round_trip(tmp_path):
    ts = tiny_state(seed=5)
    run_epoch(ts)
    save_checkpoint(ts, str(tmp_path / "ckpt"))
    fresh = tiny_state(seed=99)
    load_checkpoint(fresh, str(tmp_path / "ckpt"))
    assert fresh.epoch == ts.epoch and fresh.episodes_seen == ts.episodes_seen
    for name in ("actor", "critic", "actor_target", "critic_target"):
        for a, b in zip(getattr(fresh.ac, name).parameters(), getattr(ts.ac, name).parameters()):
            assert a.tobytes() == b.tobytes()
    assert fresh.ac.critic_adam.step == ts.ac.critic_adam.step
    assert_array_equal(fresh.ac.obs_norm.mean, ts.ac.obs_norm.mean)
    assert_array_equal(fresh.curriculum.tracker.rates, ts.curriculum.tracker.rates)
    assert_allclose(fresh.curriculum.weights, ts.curriculum.weights)
