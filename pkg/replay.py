"""
经验回放模块 - 按回合存储的FIFO回放缓冲区、HER future 目标替换与奖励重算
"""
import os
from collections import deque
from dataclasses import dataclass, replace
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from loguru import logger

from config import ENV_CONFIG, HER_CONFIG
from envs import OBS_DIM, ACTION_DIM, achieved_goal, goal_dim, resolve_env_tag, reward
from errors import ConfigurationError, EmptyStoreError, EpisodeValidationError, InputError


@dataclass(frozen=True)
class Transition:
    """状态转移 (o_t, g, m, a_t, o_{t+1})，goal为rollout时使用的掩码后目标"""
    obs: np.ndarray
    goal: np.ndarray
    mask: np.ndarray
    action: np.ndarray
    obs_next: np.ndarray
    episode_id: int
    t: int
    reward: Optional[float] = None
    relabeled: bool = False


@dataclass
class EpisodeRecord:
    """一个完整回合的转移序列及终止时的逐维成功"""
    transitions: List[Transition]
    terminal_success: np.ndarray
    goal: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.transitions)

    @property
    def episode_id(self) -> int:
        return self.transitions[0].episode_id

    @property
    def mask(self) -> np.ndarray:
        return self.transitions[0].mask

    @property
    def masked_success(self) -> bool:
        """终止时所有未被掩码的维度是否都成功"""
        return bool(np.all(np.asarray(self.terminal_success)[self.mask == 1]))

    def validate(self, env_tag: str = None):
        if not self.transitions:
            raise EpisodeValidationError("回合为空")
        first = self.transitions[0]
        n = len(first.mask) if env_tag is None else goal_dim(env_tag)
        for i, tr in enumerate(self.transitions):
            if tr.t != i:
                raise EpisodeValidationError(f"步序号不连续: 位置{i}上为t={tr.t}")
            if tr.episode_id != first.episode_id:
                raise EpisodeValidationError(f"回合ID不一致: {tr.episode_id} != {first.episode_id}")
            if len(tr.goal) != n or len(tr.mask) != n:
                raise EpisodeValidationError(f"第{i}步目标/掩码长度不等于目标维度{n}")
            if not np.array_equal(tr.mask, first.mask):
                raise EpisodeValidationError(f"第{i}步掩码与回合掩码不一致")
            if len(tr.obs) != OBS_DIM or len(tr.obs_next) != OBS_DIM or len(tr.action) != ACTION_DIM:
                raise EpisodeValidationError(f"第{i}步观测或动作维度错误")
        if len(self.terminal_success) != n:
            raise EpisodeValidationError(f"终止成功向量长度应为{n}")

    def achieved_goals(self, env_tag: str) -> np.ndarray:
        """achieved(o_0..o_T)，形状 (T+1, n)"""
        obs = [self.transitions[0].obs] + [tr.obs_next for tr in self.transitions]
        return achieved_goal(np.stack(obs), env_tag)


@dataclass(frozen=True)
class HERConfig:
    """k：每k个HER修改的样本对应1个未修改样本"""
    k: int = HER_CONFIG["her_k"]
    strategy: str = HER_CONFIG["strategy"]

    def validate(self):
        if int(self.k) != self.k or self.k < 0:
            raise ConfigurationError(f"hindsight比例k必须为非负整数: {self.k}")
        if self.strategy != "future":
            raise ConfigurationError(f"仅支持future策略，收到: {self.strategy}")

    @property
    def relabel_probability(self) -> float:
        return self.k / (self.k + 1.0)


def recompute_reward(transition: Transition, env_tag: str, eps: float = None) -> float:
    """依据 o_{t+1} 重新计算稀疏奖励（遵循转移自身的掩码）"""
    eps = ENV_CONFIG["success_eps"] if eps is None else eps
    return reward(achieved_goal(transition.obs_next, env_tag), transition.goal, transition.mask, eps)


def her_substitute(episode: EpisodeRecord, t: int, rng: np.random.Generator, env_tag: str,
                   eps: float = None) -> Transition:
    """
    HER future 替换：把第t步的目标换成 achieved(o_{t+l})，l 在 [1, T-t] 中均匀抽取

    Args:
        episode: 回合记录
        t: 步序号，0 ≤ t < T
        rng: 随机数发生器
        env_tag: 环境标签
        eps: 成功阈值

    Returns:
        Transition: 替换目标并重算奖励后的副本，掩码不变
    """
    horizon = len(episode)
    if not 0 <= t < horizon:
        raise IndexError(f"步序号越界: t={t}, 回合长度={horizon}")
    offset = int(rng.integers(1, horizon - t + 1))
    # o_{t+l} 是第 t+l-1 步转移的 o_next
    future_obs = episode.transitions[t + offset - 1].obs_next
    new_goal = achieved_goal(future_obs, env_tag)
    relabeled = replace(episode.transitions[t], goal=new_goal, relabeled=True)
    return replace(relabeled, reward=recompute_reward(relabeled, env_tag, eps))


class ReplayBuffer:
    """以转移数计容量的回合级FIFO缓冲区，超出时整回合淘汰最旧者"""

    def __init__(self, capacity: int = None, env_tag: str = "lift-world", success_eps: float = None):
        self.capacity = int(capacity or HER_CONFIG["capacity"])
        if self.capacity <= 0:
            raise ConfigurationError(f"缓冲区容量必须为正: {self.capacity}")
        self.env_tag = resolve_env_tag(env_tag)
        self.success_eps = ENV_CONFIG["success_eps"] if success_eps is None else success_eps
        self._episodes = deque()
        self._n_transitions = 0
        self._offsets = None
        logger.info(f"回放缓冲区初始化完成，容量: {self.capacity}，环境: {self.env_tag}")

    def __len__(self):
        return self._n_transitions

    @property
    def episodes(self) -> List[EpisodeRecord]:
        return list(self._episodes)

    @property
    def n_episodes(self) -> int:
        return len(self._episodes)

    def store_episode(self, episode: EpisodeRecord):
        """追加一个回合，超出容量时淘汰最旧的整回合"""
        episode.validate(self.env_tag)
        if len(episode) > self.capacity:
            raise EpisodeValidationError(f"回合长度{len(episode)}超过缓冲区容量{self.capacity}")
        self._episodes.append(episode)
        self._n_transitions += len(episode)
        evicted = 0
        while self._n_transitions > self.capacity:
            old = self._episodes.popleft()
            self._n_transitions -= len(old)
            evicted += 1
        if evicted:
            logger.debug(f"淘汰最旧回合{evicted}个，当前转移数: {self._n_transitions}")
        self._offsets = None

    def _cumulative(self) -> np.ndarray:
        if self._offsets is None:
            self._offsets = np.cumsum([len(ep) for ep in self._episodes])
        return self._offsets

    def locate(self, index: int):
        """全局转移下标 -> (回合, 步序号)"""
        offsets = self._cumulative()
        ep_idx = int(np.searchsorted(offsets, index, side="right"))
        start = 0 if ep_idx == 0 else int(offsets[ep_idx - 1])
        return self._episodes[ep_idx], index - start


def sample_batch(buffer: ReplayBuffer, batch_size: int, her: HERConfig,
                 rng: np.random.Generator) -> List[Transition]:
    """
    均匀采样batch_size个转移，每个以概率 k/(k+1) 独立进行HER替换，所有奖励统一重算

    随机数消耗顺序固定：先抽全部下标，再抽全部替换标志，最后按顺序抽各替换的l。
    """
    if len(buffer) == 0:
        raise EmptyStoreError("回放缓冲区为空，无法采样")
    if batch_size <= 0:
        raise ConfigurationError(f"batch_size必须为正: {batch_size}")
    indices = rng.integers(0, len(buffer), size=batch_size)
    relabel = rng.random(batch_size) < her.relabel_probability

    batch = []
    for index, flag in zip(indices, relabel):
        episode, t = buffer.locate(int(index))
        if flag:
            batch.append(her_substitute(episode, t, rng, buffer.env_tag, buffer.success_eps))
        else:
            tr = episode.transitions[t]
            batch.append(replace(tr, reward=recompute_reward(tr, buffer.env_tag, buffer.success_eps),
                                 relabeled=False))
    return batch


def stack_batch(batch: List[Transition]) -> Dict[str, np.ndarray]:
    """转移列表 -> 按行堆叠的数组"""
    return {
        "obs": np.stack([tr.obs for tr in batch]),
        "goal": np.stack([tr.goal for tr in batch]),
        "mask": np.stack([tr.mask for tr in batch]),
        "action": np.stack([tr.action for tr in batch]),
        "obs_next": np.stack([tr.obs_next for tr in batch]),
        "reward": np.array([tr.reward for tr in batch], dtype=np.float64),
    }


# ============ 快照读写 ============

def _snapshot_columns(n: int) -> List[str]:
    cols = ["episode_id", "t"]
    cols += [f"obs_{i}" for i in range(OBS_DIM)]
    cols += [f"goal_{i}" for i in range(n)]
    cols += [f"mask_{i}" for i in range(n)]
    cols += [f"action_{i}" for i in range(ACTION_DIM)]
    cols += [f"obs_next_{i}" for i in range(OBS_DIM)]
    cols += ["reward"]
    cols += [f"success_{i}" for i in range(n)]
    return cols


def save_buffer(buffer: ReplayBuffer, path: str) -> str:
    """把缓冲区写成CSV快照，每行一个转移"""
    n = goal_dim(buffer.env_tag)
    rows = []
    for ep in buffer.episodes:
        success = [int(s) for s in ep.terminal_success]
        for tr in ep.transitions:
            rows.append([tr.episode_id, tr.t, *tr.obs, *tr.goal, *[int(m) for m in tr.mask],
                         *tr.action, *tr.obs_next,
                         np.nan if tr.reward is None else tr.reward, *success])
    frame = pd.DataFrame(rows, columns=_snapshot_columns(n))
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")
    logger.info(f"回放缓冲区快照已保存: {path}，回合数: {buffer.n_episodes}，转移数: {len(buffer)}")
    return path


def load_buffer(path: str, capacity: int = None, env_tag: str = "lift-world",
                success_eps: float = None) -> ReplayBuffer:
    """读取 save_buffer 写出的快照"""
    if not os.path.exists(path):
        raise InputError(f"缓冲区快照不存在: {path}")
    buffer = ReplayBuffer(capacity, env_tag, success_eps)
    n = goal_dim(buffer.env_tag)
    frame = pd.read_csv(path, float_precision="round_trip")
    missing = set(_snapshot_columns(n)) - set(frame.columns)
    if missing:
        raise InputError(f"缓冲区快照缺少列: {sorted(missing)}")

    def cols(prefix, count):
        return frame[[f"{prefix}_{i}" for i in range(count)]].to_numpy(dtype=np.float64)

    obs, obs_next = cols("obs", OBS_DIM), cols("obs_next", OBS_DIM)
    goals, actions = cols("goal", n), cols("action", ACTION_DIM)
    masks = cols("mask", n).astype(np.int8)
    success = cols("success", n).astype(bool)
    rewards = frame["reward"].to_numpy(dtype=np.float64)
    ids = frame["episode_id"].to_numpy(dtype=np.int64)
    steps = frame["t"].to_numpy(dtype=np.int64)

    start = 0
    for end in list(np.flatnonzero(np.diff(ids) != 0) + 1) + [len(frame)]:
        transitions = [
            Transition(obs=obs[i], goal=goals[i], mask=masks[i], action=actions[i], obs_next=obs_next[i],
                       episode_id=int(ids[i]), t=int(steps[i]),
                       reward=None if np.isnan(rewards[i]) else float(rewards[i]))
            for i in range(start, end)
        ]
        if transitions:
            buffer.store_episode(EpisodeRecord(transitions=transitions, terminal_success=success[start]))
        start = end
    logger.info(f"回放缓冲区快照已加载: {path}，回合数: {buffer.n_episodes}")
    return buffer
