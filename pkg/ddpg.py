"""
DDPG学习器模块 - 目标条件Actor/Critic、输入归一化、探索策略、rollout、训练步与轮次循环
"""
import json
import os
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from loguru import logger

from config import DDPG_CONFIG, ENV_CONFIG, HER_CONFIG, NN_CONFIG
from curriculum import MaskCurriculum, SuccessTracker, apply_mask
from envs import (ACTION_DIM, OBS_DIM, EnvParams, achieved_goal, goal_dim, reset, reward, step,
                  subgoal_success)
from errors import ConfigurationError, NumericError
from metrics import EpochStats
from nn_core import (AdamState, Network, adam_step, backward, forward, forward_trace, init_adam,
                     init_network, load_adam_state, load_network, polyak_update, save_adam_state, save_network)
from replay import EpisodeRecord, HERConfig, ReplayBuffer, Transition, sample_batch, stack_batch
from utils import derive_rng, derive_seed, format_float, mask_to_bits

# 随机数流标签：(运行种子, 流标签, 轮次, 循环, worker)
STREAM_ROLLOUT = 0
STREAM_TRAIN = 1
STREAM_EVAL = 2


# ============ 归一化 ============

@dataclass(frozen=True)
class NormStats:
    """归一化统计快照（不可变，可交给rollout worker）"""
    mean: np.ndarray
    std: np.ndarray
    clip: float

    def normalize(self, x) -> np.ndarray:
        return np.clip((np.asarray(x, dtype=np.float64) - self.mean) / self.std, -self.clip, self.clip)


class Normalizer:
    """运行均值/标准差，标准差下限为eps，归一化后截断到±clip"""

    def __init__(self, size: int, eps: float = None, clip: float = None):
        self.size = size
        self.eps = DDPG_CONFIG["norm_eps"] if eps is None else eps
        self.clip = DDPG_CONFIG["norm_clip"] if clip is None else clip
        self.total = np.zeros(size)
        self.total_sq = np.zeros(size)
        self.count = 0

    def update(self, values):
        values = np.asarray(values, dtype=np.float64).reshape(-1, self.size)
        self.total += values.sum(axis=0)
        self.total_sq += np.square(values).sum(axis=0)
        self.count += values.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.total / self.count if self.count else np.zeros(self.size)

    @property
    def std(self) -> np.ndarray:
        if not self.count:
            return np.ones(self.size)
        var = self.total_sq / self.count - np.square(self.mean)
        return np.sqrt(np.maximum(self.eps ** 2, var))

    def stats(self) -> NormStats:
        return NormStats(mean=self.mean.copy(), std=self.std.copy(), clip=self.clip)

    def to_dict(self) -> Dict:
        return {"size": self.size, "eps": self.eps, "clip": self.clip, "count": self.count,
                "total": self.total.tolist(), "total_sq": self.total_sq.tolist()}

    @classmethod
    def from_dict(cls, data: Dict) -> "Normalizer":
        norm = cls(data["size"], data["eps"], data["clip"])
        norm.total = np.asarray(data["total"], dtype=np.float64)
        norm.total_sq = np.asarray(data["total_sq"], dtype=np.float64)
        norm.count = int(data["count"])
        return norm


# ============ 配置 ============

@dataclass(frozen=True)
class ExplorationConfig:
    """σ：高斯动作噪声；explore_eps：均匀随机动作比例"""
    sigma: float = DDPG_CONFIG["sigma"]
    explore_eps: float = DDPG_CONFIG["explore_eps"]

    def validate(self):
        if self.sigma < 0:
            raise ConfigurationError(f"σ不能为负: {self.sigma}")
        if not 0.0 <= self.explore_eps <= 1.0:
            raise ConfigurationError(f"探索率必须在[0,1]内: {self.explore_eps}")


@dataclass(frozen=True)
class RolloutConfig:
    n_parallel: int = DDPG_CONFIG["n_parallel"]
    n_cycles: int = DDPG_CONFIG["n_cycles"]
    horizon: int = ENV_CONFIG["horizon"]
    n_batches: int = DDPG_CONFIG["n_batches"]
    batch_size: int = HER_CONFIG["batch_size"]
    gamma: float = DDPG_CONFIG["gamma"]
    polyak: float = DDPG_CONFIG["polyak"]
    lr_actor: float = NN_CONFIG["lr_actor"]
    lr_critic: float = NN_CONFIG["lr_critic"]
    action_l2: float = DDPG_CONFIG["action_l2"]

    def validate(self):
        for name in ("n_parallel", "n_cycles", "horizon", "n_batches", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name}必须为正: {getattr(self, name)}")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigurationError(f"γ必须在(0,1)内: {self.gamma}")
        if not 0.0 <= self.polyak <= 1.0:
            raise ConfigurationError(f"τ_polyak必须在[0,1]内: {self.polyak}")
        if self.lr_actor <= 0 or self.lr_critic <= 0:
            raise ConfigurationError("学习率必须为正")
        if self.action_l2 < 0:
            raise ConfigurationError(f"action_l2不能为负: {self.action_l2}")

    @property
    def q_min(self) -> float:
        return -1.0 / (1.0 - self.gamma)


# ============ Actor/Critic ============

@dataclass(frozen=True)
class PolicySnapshot:
    """rollout worker 使用的只读策略：actor参数 + 归一化统计"""
    actor: Network
    obs_stats: NormStats
    goal_stats: NormStats

    def act(self, obs, goal) -> np.ndarray:
        x = np.concatenate([self.obs_stats.normalize(obs), self.goal_stats.normalize(goal)], axis=-1)
        return forward(self.actor, x)


@dataclass
class ActorCritic:
    """主网络、目标网络、Adam状态与输入归一化器"""
    actor: Network
    critic: Network
    actor_target: Network
    critic_target: Network
    actor_adam: AdamState
    critic_adam: AdamState
    obs_norm: Normalizer
    goal_norm: Normalizer

    @classmethod
    def create(cls, goal_size: int, seed: int, hidden_sizes=None, obs_size: int = OBS_DIM,
               action_size: int = ACTION_DIM) -> "ActorCritic":
        """
        构建 actor [obs+goal, hidden..., action](tanh输出) 与 critic [obs+goal+action, hidden..., 1]

        目标网络初始与主网络相同。
        """
        hidden = list(hidden_sizes or NN_CONFIG["hidden_sizes"])
        in_size = obs_size + goal_size
        hidden_acts = ["relu"] * len(hidden)
        actor = init_network([in_size] + hidden + [action_size], hidden_acts + ["tanh"], seed)
        critic = init_network([in_size + action_size] + hidden + [1], hidden_acts + ["linear"], seed + 1)
        logger.info(f"Actor/Critic初始化完成，隐藏层: {hidden}，参数量: {actor.n_params}/{critic.n_params}")
        return cls(actor=actor, critic=critic, actor_target=actor, critic_target=critic,
                   actor_adam=init_adam(actor), critic_adam=init_adam(critic),
                   obs_norm=Normalizer(obs_size), goal_norm=Normalizer(goal_size))

    def preprocess(self, obs, goal) -> np.ndarray:
        return np.concatenate([self.obs_norm.stats().normalize(obs),
                               self.goal_norm.stats().normalize(goal)], axis=-1)

    def snapshot(self) -> PolicySnapshot:
        return PolicySnapshot(actor=self.actor, obs_stats=self.obs_norm.stats(),
                              goal_stats=self.goal_norm.stats())

    def act(self, obs, goal) -> np.ndarray:
        return self.snapshot().act(obs, goal)

    def update_normalizers(self, episode: EpisodeRecord, env_tag: str):
        """用回合中的观测、存储目标与已达成目标更新归一化统计"""
        obs = np.stack([episode.transitions[0].obs] + [tr.obs_next for tr in episode.transitions])
        self.obs_norm.update(obs)
        self.goal_norm.update(np.stack([tr.goal for tr in episode.transitions]))
        self.goal_norm.update(episode.achieved_goals(env_tag))


# ============ 动作选择与rollout ============

def select_action(policy, obs, goal, expl: ExplorationConfig, train_mode: bool,
                  rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    选择动作

    训练模式：先抽一个均匀数，小于explore_eps时返回[-1,1]^d内均匀随机动作，
    否则返回actor输出加逐维高斯噪声并截断；评估模式直接返回actor输出。
    """
    action = np.asarray(policy.act(obs, goal), dtype=np.float64)
    if not train_mode:
        return action
    if rng.random() < expl.explore_eps:
        return rng.uniform(-1.0, 1.0, size=action.shape)
    return np.clip(action + rng.normal(0.0, expl.sigma, size=action.shape), -1.0, 1.0)


def rollout_episode(env_tag: str, policy, mask, expl: ExplorationConfig, horizon: int,
                    rng: np.random.Generator, params: EnvParams = None, episode_id: int = 0,
                    train_mode: bool = True) -> EpisodeRecord:
    """
    运行一个完整回合

    每步存储的目标为 apply_mask(goal, achieved(o_t), mask)，奖励只考虑未被掩码的维度。

    Args:
        env_tag: 环境标签
        policy: 具有 act(obs, goal) 的策略（PolicySnapshot、ActorCritic或ScriptedPolicy）
        mask: 目标掩码
        expl: 探索配置
        horizon: 回合长度T
        rng: worker随机数发生器（先抽环境种子，再用于动作噪声）
        params: 环境常量
        episode_id: 回合ID
        train_mode: 是否加入探索

    Returns:
        EpisodeRecord: T个转移与终止时相对原始目标的逐维成功
    """
    params = replace(params or EnvParams(), horizon=horizon)
    state, goal = reset(env_tag, derive_seed(rng), params)
    tag = state.env_tag
    mask = np.asarray(mask, dtype=np.int8)
    transitions = []
    while state.t < state.horizon:
        obs = state.obs.to_vector()
        masked_goal = apply_mask(goal, achieved_goal(obs, tag), mask)
        action = select_action(policy, obs, masked_goal, expl, train_mode, rng)
        nxt = step(state, action)
        obs_next = nxt.obs.to_vector()
        r = reward(achieved_goal(obs_next, tag), masked_goal, mask, params.success_eps)
        transitions.append(Transition(obs=obs, goal=masked_goal, mask=mask, action=np.asarray(action),
                                      obs_next=obs_next, episode_id=episode_id, t=state.t, reward=r))
        state = nxt
    terminal = subgoal_success(achieved_goal(state.obs, tag), goal, params.success_eps)
    return EpisodeRecord(transitions=transitions, terminal_success=terminal, goal=goal)


def evaluate(env_tag: str, policy, n_eval: int, rng: np.random.Generator, horizon: int = None,
             params: EnvParams = None) -> Tuple[float, np.ndarray]:
    """
    用确定性策略和未掩码目标评估n_eval个回合

    Returns:
        Tuple[float, np.ndarray]: (成功率, n_eval×n 的逐维成功矩阵)；成功指终止时所有维度都在ε内
    """
    if n_eval <= 0:
        raise ConfigurationError(f"n_eval必须为正: {n_eval}")
    params = params or EnvParams()
    horizon = horizon or params.horizon
    full = np.ones(goal_dim(env_tag), dtype=np.int8)
    matrix = np.zeros((n_eval, len(full)), dtype=bool)
    for i in range(n_eval):
        episode = rollout_episode(env_tag, policy, full, ExplorationConfig(0.0, 0.0), horizon, rng,
                                  params, episode_id=i, train_mode=False)
        matrix[i] = episode.terminal_success
    rate = float(np.mean(np.all(matrix, axis=1)))
    return rate, matrix


# ============ 训练 ============

def actor_gradient(actor: Network, critic: Network, x: np.ndarray, action_l2: float = 0.0):
    """
    actor损失 -mean Q(x, π(x)) + action_l2·mean(π(x)²) 对actor参数的梯度（critic冻结）

    Returns:
        Tuple[float, Gradients]: (mean Q, 梯度)
    """
    batch = x.shape[0]
    actor_trace = forward_trace(actor, x)
    actions = actor_trace.output
    critic_in = np.concatenate([x, actions], axis=1)
    critic_trace = forward_trace(critic, critic_in)
    objective = float(np.mean(critic_trace.output))

    q_grads = backward(critic, critic_in, np.full((batch, 1), -1.0 / batch), critic_trace)
    d_action = q_grads.input_grad[:, -actions.shape[1]:]
    if action_l2:
        d_action = d_action + action_l2 * 2.0 * actions / actions.size
    return objective, backward(actor, x, d_action, actor_trace)


def critic_targets(ac: ActorCritic, obs_next, goal, rewards, cfg: RolloutConfig) -> np.ndarray:
    """y = r + γ·Q'(o', g, π'(o', g))，截断到 [-1/(1-γ), 0]，形状 (B, 1)"""
    x_next = ac.preprocess(obs_next, goal)
    next_actions = forward(ac.actor_target, x_next)
    q_next = forward(ac.critic_target, np.concatenate([x_next, next_actions], axis=1))
    return np.clip(np.asarray(rewards, dtype=np.float64)[:, None] + cfg.gamma * q_next, cfg.q_min, 0.0)


def train_batch(ac: ActorCritic, batch: List[Transition], cfg: RolloutConfig) -> Tuple[float, float]:
    """
    单个小批量的DDPG更新：critic TD回归、actor经critic输入梯度上升、各一步Adam、两个目标网络Polyak平均

    Returns:
        Tuple[float, float]: (critic均方TD误差, actor目标 mean Q)
    """
    if not batch:
        raise ConfigurationError("训练批为空")
    arrays = stack_batch(batch)
    size = len(batch)
    x = ac.preprocess(arrays["obs"], arrays["goal"])
    target = critic_targets(ac, arrays["obs_next"], arrays["goal"], arrays["reward"], cfg)

    critic_in = np.concatenate([x, arrays["action"]], axis=1)
    trace = forward_trace(ac.critic, critic_in)
    error = trace.output - target
    critic_loss = float(np.mean(np.square(error)))
    if not np.isfinite(critic_loss):
        raise NumericError("critic损失非有限", diagnostics={
            "critic_loss": critic_loss,
            "target_range": (float(np.nanmin(target)), float(np.nanmax(target))),
            "q_finite": bool(np.all(np.isfinite(trace.output))),
            "adam_step": ac.critic_adam.step,
        })
    critic_grads = backward(ac.critic, critic_in, 2.0 * error / size, trace)

    # actor梯度基于本步更新前的critic
    objective, actor_grads = actor_gradient(ac.actor, ac.critic, x, cfg.action_l2)
    if not np.isfinite(objective):
        raise NumericError("actor目标非有限", diagnostics={"actor_objective": objective,
                                                       "adam_step": ac.actor_adam.step})

    ac.critic, ac.critic_adam = adam_step(ac.critic, critic_grads, ac.critic_adam, cfg.lr_critic)
    ac.actor, ac.actor_adam = adam_step(ac.actor, actor_grads, ac.actor_adam, cfg.lr_actor)
    ac.critic_target = polyak_update(ac.critic_target, ac.critic, cfg.polyak)
    ac.actor_target = polyak_update(ac.actor_target, ac.actor, cfg.polyak)
    return critic_loss, objective


# ============ 轮次循环 ============

@dataclass
class TrainingState:
    """一次运行的全部可变状态，由单个协调者持有"""
    env_tag: str
    env_params: EnvParams
    ac: ActorCritic
    buffer: ReplayBuffer
    curriculum: MaskCurriculum
    her: HERConfig
    expl: ExplorationConfig
    rollout: RolloutConfig
    seed: int
    n_eval: int
    epoch: int = 0
    episodes_seen: int = 0
    pool: Optional[object] = None


def _collect_cycle(ts: TrainingState, weights: np.ndarray, cycle: int) -> List[EpisodeRecord]:
    """为每个worker抽掩码并运行rollout，结果按worker顺序返回"""
    policy = ts.ac.snapshot()
    jobs = []
    for worker in range(ts.rollout.n_parallel):
        rng = derive_rng(ts.seed, STREAM_ROLLOUT, ts.epoch, cycle, worker)
        mask = ts.curriculum.sample(rng, weights)
        jobs.append((mask, rng, ts.episodes_seen + worker))

    def run(job):
        mask, rng, episode_id = job
        return rollout_episode(ts.env_tag, policy, mask, ts.expl, ts.rollout.horizon, rng,
                               ts.env_params, episode_id=episode_id)

    if ts.pool is not None:
        episodes = ts.pool.map(run, jobs)
    else:
        episodes = [run(job) for job in jobs]
    ts.episodes_seen += len(jobs)
    return episodes


def run_epoch(ts: TrainingState) -> EpochStats:
    """
    执行一个训练轮次：n_r 个循环（每循环 n_p 个rollout + 若干优化步），然后评估、
    更新成功率跟踪器并重算下一轮的掩码权重
    """
    weights = ts.curriculum.weights.copy()
    bits = ts.curriculum.bits
    counts = {b: 0 for b in bits}
    train_hits = {b: 0 for b in bits}
    critic_losses, objectives = [], []
    transitions = 0

    for cycle in range(ts.rollout.n_cycles):
        for episode in _collect_cycle(ts, weights, cycle):
            ts.buffer.store_episode(episode)
            ts.ac.update_normalizers(episode, ts.env_tag)
            key = mask_to_bits(episode.mask)
            counts[key] += 1
            train_hits[key] += int(episode.masked_success)
            transitions += len(episode)

        rng = derive_rng(ts.seed, STREAM_TRAIN, ts.epoch, cycle)
        for _ in range(ts.rollout.n_batches):
            batch = sample_batch(ts.buffer, ts.rollout.batch_size, ts.her, rng)
            loss, objective = train_batch(ts.ac, batch, ts.rollout)
            critic_losses.append(loss)
            objectives.append(objective)
        logger.debug(f"第{ts.epoch}轮 循环{cycle}: 缓冲区转移数 {len(ts.buffer)}")

    rate, per_dim = evaluate(ts.env_tag, ts.ac.snapshot(), ts.n_eval,
                             derive_rng(ts.seed, STREAM_EVAL, ts.epoch), ts.rollout.horizon, ts.env_params)
    ts.curriculum.record_evaluation(per_dim)
    stats = EpochStats(
        epoch=ts.epoch,
        success_rate=rate,
        dim_rates=ts.curriculum.tracker.rates.tolist(),
        estimates=ts.curriculum.estimates(),
        weights={b: float(w) for b, w in zip(bits, weights)},
        counts=counts,
        train_success={b: train_hits[b] / counts[b] for b in bits if counts[b]},
        critic_loss=float(np.mean(critic_losses)) if critic_losses else float("nan"),
        actor_objective=float(np.mean(objectives)) if objectives else float("nan"),
        transitions=transitions,
    )
    ts.curriculum.refresh_weights()
    logger.info(f"第{ts.epoch}轮完成，评估成功率: {format_float(rate)}，逐维成功率: "
                f"{[round(r, 3) for r in stats.dim_rates]}，critic损失: {format_float(stats.critic_loss)}")
    ts.epoch += 1
    return stats


# ============ 检查点 ============

CHECKPOINT_NETWORKS = ("actor", "critic", "actor_target", "critic_target")


def save_checkpoint(ts: TrainingState, directory: str) -> str:
    """写出网络、Adam状态、归一化统计与跟踪器窗口"""
    os.makedirs(directory, exist_ok=True)
    for name in CHECKPOINT_NETWORKS:
        save_network(getattr(ts.ac, name), os.path.join(directory, f"{name}.bin"))
    save_adam_state(ts.ac.actor_adam, ts.ac.actor, os.path.join(directory, "actor_adam.bin"))
    save_adam_state(ts.ac.critic_adam, ts.ac.critic, os.path.join(directory, "critic_adam.bin"))
    with open(os.path.join(directory, "normalizer.json"), "w", encoding="utf-8") as f:
        json.dump({"obs": ts.ac.obs_norm.to_dict(), "goal": ts.ac.goal_norm.to_dict()}, f)
    with open(os.path.join(directory, "tracker.json"), "w", encoding="utf-8") as f:
        json.dump({"epoch": ts.epoch, "episodes_seen": ts.episodes_seen,
                   "tracker": ts.curriculum.tracker.to_dict()}, f)
    logger.info(f"检查点已保存: {directory}")
    return directory


def load_checkpoint(ts: TrainingState, directory: str) -> TrainingState:
    """从检查点目录恢复学习器与课程状态（缓冲区由调用方单独恢复）"""
    nets = {name: load_network(os.path.join(directory, f"{name}.bin")) for name in CHECKPOINT_NETWORKS}
    with open(os.path.join(directory, "normalizer.json"), "r", encoding="utf-8") as f:
        norms = json.load(f)
    with open(os.path.join(directory, "tracker.json"), "r", encoding="utf-8") as f:
        progress = json.load(f)
    ts.ac = ActorCritic(
        actor=nets["actor"], critic=nets["critic"],
        actor_target=nets["actor_target"], critic_target=nets["critic_target"],
        actor_adam=load_adam_state(os.path.join(directory, "actor_adam.bin")),
        critic_adam=load_adam_state(os.path.join(directory, "critic_adam.bin")),
        obs_norm=Normalizer.from_dict(norms["obs"]), goal_norm=Normalizer.from_dict(norms["goal"]),
    )
    ts.curriculum.tracker = SuccessTracker.from_dict(progress["tracker"])
    ts.curriculum.refresh_weights()
    ts.epoch = int(progress["epoch"])
    ts.episodes_seen = int(progress["episodes_seen"])
    logger.info(f"已从检查点恢复: {directory}，下一轮: {ts.epoch}")
    return ts


def load_policy(directory: str) -> PolicySnapshot:
    """读取检查点中的actor与归一化统计，用于轨迹导出"""
    with open(os.path.join(directory, "normalizer.json"), "r", encoding="utf-8") as f:
        norms = json.load(f)
    return PolicySnapshot(actor=load_network(os.path.join(directory, "actor.bin")),
                          obs_stats=Normalizer.from_dict(norms["obs"]).stats(),
                          goal_stats=Normalizer.from_dict(norms["goal"]).stats())
