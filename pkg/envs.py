"""
环境模块 - 运动学目标条件环境（平面推动 planar-push / 抓取放置 lift-world）

观测向量布局(13维)：夹爪xyz | 方块xyz | 夹爪速度 | 方块速度 | 抓取状态
动作向量布局(4维)：dx, dy, dz, 抓取指令，均截断到[-1,1]
"""
import os
from dataclasses import dataclass, field, replace
from typing import List, Tuple

import numpy as np
import pandas as pd
from loguru import logger

from config import ENV_CONFIG, ENV_TAGS
from errors import ConfigurationError, EpisodeOverrunError, ShapeError


PUSH = "planar-push"
LIFT = "lift-world"
GOAL_DIMS = {PUSH: 2, LIFT: 3}
OBS_DIM = 13
ACTION_DIM = 4


def resolve_env_tag(name: str) -> str:
    """'push'/'lift'或完整标签 -> 完整标签"""
    if name not in ENV_TAGS:
        raise ConfigurationError(f"未知环境: {name}，可选: {sorted(ENV_TAGS)}")
    return ENV_TAGS[name]


def goal_dim(env_tag: str) -> int:
    return GOAL_DIMS[resolve_env_tag(env_tag)]


@dataclass(frozen=True)
class EnvParams:
    """环境常量，默认值来自 ENV_CONFIG"""
    horizon: int = ENV_CONFIG["horizon"]
    step_size: float = ENV_CONFIG["step_size"]
    attach_radius: float = ENV_CONFIG["attach_radius"]
    gravity_rate: float = ENV_CONFIG["gravity_rate"]
    success_eps: float = ENV_CONFIG["success_eps"]
    workspace_low: Tuple[float, float, float] = ENV_CONFIG["workspace_low"]
    workspace_high: Tuple[float, float, float] = ENV_CONFIG["workspace_high"]
    spawn_margin: float = ENV_CONFIG["spawn_margin"]
    lift_goal_z_max: float = ENV_CONFIG["lift_goal_z_max"]
    lift_gripper_z_max: float = ENV_CONFIG["lift_gripper_z_max"]
    block_height: float = ENV_CONFIG["block_height"]
    contact_radius: float = ENV_CONFIG["contact_radius"]

    def validate(self):
        if self.horizon <= 0:
            raise ConfigurationError(f"horizon必须为正: {self.horizon}")
        for name in ("step_size", "attach_radius", "gravity_rate", "success_eps", "contact_radius"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name}必须为正: {getattr(self, name)}")
        if self.contact_radius <= self.step_size * np.sqrt(2.0):
            raise ConfigurationError("contact_radius必须大于单步最大xy位移 step_size·√2")


@dataclass(frozen=True)
class Observation:
    """环境观测"""
    gripper: np.ndarray
    block: np.ndarray
    gripper_vel: np.ndarray
    block_vel: np.ndarray
    grasp: float

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.gripper, self.block, self.gripper_vel,
                               self.block_vel, [self.grasp]]).astype(np.float64)

    @classmethod
    def from_vector(cls, vec) -> "Observation":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (OBS_DIM,):
            raise ShapeError(f"观测向量应为{OBS_DIM}维，收到{vec.shape}")
        return cls(gripper=vec[0:3].copy(), block=vec[3:6].copy(), gripper_vel=vec[6:9].copy(),
                   block_vel=vec[9:12].copy(), grasp=float(vec[12]))


@dataclass(frozen=True)
class EnvState:
    """环境状态：观测 + 时间步 + 环境标签"""
    obs: Observation
    goal: np.ndarray
    t: int
    horizon: int
    env_tag: str
    attached: bool = False
    params: EnvParams = field(default_factory=EnvParams)


def reset(env_tag: str, seed: int, params: EnvParams = None) -> Tuple[EnvState, np.ndarray]:
    """
    重置环境：夹爪与方块放在互不重叠的随机位置，目标在目标空间内均匀采样

    Args:
        env_tag: 'planar-push' 或 'lift-world'（也接受 push/lift）
        seed: 随机种子，同种子结果完全一致
        params: 环境常量

    Returns:
        Tuple[EnvState, np.ndarray]: (初始状态, 目标)
    """
    tag = resolve_env_tag(env_tag)
    params = params or EnvParams()
    params.validate()
    rng = np.random.default_rng(seed)

    low = np.asarray(params.workspace_low, dtype=np.float64)
    high = np.asarray(params.workspace_high, dtype=np.float64)
    lo_xy, hi_xy = low[:2] + params.spawn_margin, high[:2] - params.spawn_margin

    block_xy = rng.uniform(lo_xy, hi_xy)
    while True:
        gripper_xy = rng.uniform(lo_xy, hi_xy)
        if np.linalg.norm(gripper_xy - block_xy) >= 2.0 * params.contact_radius:
            break
    gripper_z = 0.0 if tag == PUSH else rng.uniform(low[2], params.lift_gripper_z_max)

    if tag == PUSH:
        goal = rng.uniform(lo_xy, hi_xy)
    else:
        goal = np.concatenate([rng.uniform(lo_xy, hi_xy), [rng.uniform(low[2], params.lift_goal_z_max)]])

    obs = Observation(
        gripper=np.array([gripper_xy[0], gripper_xy[1], gripper_z]),
        block=np.array([block_xy[0], block_xy[1], 0.0]),
        gripper_vel=np.zeros(3),
        block_vel=np.zeros(3),
        grasp=0.0,
    )
    state = EnvState(obs=obs, goal=goal, t=0, horizon=params.horizon, env_tag=tag,
                     attached=False, params=params)
    return state, goal.copy()


def _push_block(gripper: np.ndarray, gripper_old: np.ndarray, block: np.ndarray,
                params: EnvParams) -> np.ndarray:
    """夹爪低于方块高度且与方块重叠时，把方块沿接触方向推到恰好 contact_radius 处"""
    new_block = block.copy()
    new_block[2] = 0.0
    if gripper[2] >= params.block_height:
        return new_block
    offset = block[:2] - gripper[:2]
    dist = float(np.hypot(offset[0], offset[1]))
    if dist >= params.contact_radius:
        return new_block
    if dist > 0.0:
        direction = offset / dist
    else:
        motion = gripper[:2] - gripper_old[:2]
        norm = float(np.hypot(motion[0], motion[1]))
        if norm == 0.0:
            return new_block
        direction = motion / norm
    xy = gripper[:2] + direction * params.contact_radius
    low = np.asarray(params.workspace_low)[:2]
    high = np.asarray(params.workspace_high)[:2]
    new_block[:2] = np.clip(xy, low, high)
    return new_block


def _lift_block(gripper: np.ndarray, block: np.ndarray, grasp_cmd: float, attached: bool,
                params: EnvParams) -> Tuple[np.ndarray, bool]:
    """抓取指令>0且在吸附半径内则吸附并跟随夹爪，否则方块以重力速率下落到桌面"""
    if grasp_cmd > 0.0 and (attached or np.linalg.norm(gripper - block) <= params.attach_radius):
        return gripper.copy(), True
    new_block = block.copy()
    new_block[2] = max(0.0, new_block[2] - params.gravity_rate)
    return new_block, False


def step(state: EnvState, action) -> EnvState:
    """
    环境前进一步（不修改传入状态）

    Args:
        state: 当前状态
        action: (dx, dy, dz, grasp)，每个分量先截断到[-1,1]

    Returns:
        EnvState: 新状态，t加1
    """
    if state.t >= state.horizon:
        raise EpisodeOverrunError(f"回合已结束(t={state.t}, T={state.horizon})")
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (ACTION_DIM,):
        raise ShapeError(f"动作应为{ACTION_DIM}维，收到{action.shape}")
    action = np.clip(action, -1.0, 1.0)

    params = state.params
    low = np.asarray(params.workspace_low, dtype=np.float64)
    high = np.asarray(params.workspace_high, dtype=np.float64)
    gripper_old = state.obs.gripper
    block_old = state.obs.block

    gripper = np.clip(gripper_old + action[:3] * params.step_size, low, high)
    if state.env_tag == PUSH:
        block = _push_block(gripper, gripper_old, block_old, params)
        attached = False
    else:
        block, attached = _lift_block(gripper, block_old, action[3], state.attached, params)

    obs = Observation(
        gripper=gripper,
        block=block,
        gripper_vel=gripper - gripper_old,
        block_vel=block - block_old,
        grasp=1.0 if attached else 0.0,
    )
    return replace(state, obs=obs, t=state.t + 1, attached=attached)


def achieved_goal(obs, env_tag: str) -> np.ndarray:
    """观测 -> 目标空间投影：推动为方块(x,y)，抓取为方块(x,y,z)"""
    n = goal_dim(env_tag)
    if isinstance(obs, Observation):
        block = obs.block
    else:
        block = np.asarray(obs, dtype=np.float64)[..., 3:6]
    return np.array(block[..., :n], dtype=np.float64)


def subgoal_success(achieved, goal, eps: float) -> np.ndarray:
    """逐维成功：|achieved_i - goal_i| ≤ ε"""
    achieved = np.asarray(achieved, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    if achieved.shape != goal.shape:
        raise ShapeError(f"achieved{achieved.shape}与goal{goal.shape}长度不一致")
    if not eps > 0:
        raise ConfigurationError(f"ε必须为正: {eps}")
    return np.abs(achieved - goal) <= eps


def reward(achieved, goal, mask, eps: float) -> float:
    """稀疏奖励：所有未被掩码的维度都成功时为0，否则为-1"""
    mask = np.asarray(mask)
    success = subgoal_success(achieved, goal, eps)
    if mask.shape != success.shape:
        raise ShapeError(f"掩码长度{mask.shape}与目标长度{success.shape}不一致")
    return 0.0 if bool(np.all(success[mask == 1])) else -1.0


class ScriptedPolicy:
    """
    脚本专家策略，用于验证环境可解

    lift-world：移动到方块 -> 抓取 -> 移动到目标
    planar-push：抬起 -> 移到方块背后(相对目标方向) -> 落下 -> 直线推向目标
    """

    def __init__(self, env_tag: str, params: EnvParams = None):
        self.env_tag = resolve_env_tag(env_tag)
        self.params = params or EnvParams()

    def act(self, obs, goal) -> np.ndarray:
        obs = obs if isinstance(obs, Observation) else Observation.from_vector(obs)
        goal = np.asarray(goal, dtype=np.float64)
        if self.env_tag == LIFT:
            return self._lift_action(obs, goal)
        return self._push_action(obs, goal)

    def _toward(self, source: np.ndarray, target: np.ndarray) -> np.ndarray:
        return np.clip((target - source) / self.params.step_size, -1.0, 1.0)

    def _lift_action(self, obs: Observation, goal: np.ndarray) -> np.ndarray:
        target = goal if obs.grasp > 0.5 else obs.block
        action = np.zeros(ACTION_DIM)
        action[:3] = self._toward(obs.gripper, target)
        action[3] = 1.0
        return action

    def _push_action(self, obs: Observation, goal: np.ndarray) -> np.ndarray:
        p = self.params
        action = np.zeros(ACTION_DIM)
        block_xy, gripper = obs.block[:2], obs.gripper
        diff = goal[:2] - block_xy
        dist = float(np.hypot(diff[0], diff[1]))
        if dist < 1e-9:
            return action

        direction = diff / dist
        behind = block_xy - direction * p.contact_radius
        at_behind = np.hypot(*(gripper[:2] - behind)) < 1e-6

        if at_behind:
            if gripper[2] >= p.block_height:
                action[2] = -1.0
            else:
                # 动作方向与推动方向平行，方块位移与夹爪位移相同
                push = diff / p.step_size
                action[:2] = push / max(1.0, float(np.max(np.abs(push))))
        elif gripper[2] < p.block_height:
            action[2] = 1.0
        else:
            action[:2] = self._toward(gripper[:2], behind)
        return action


def rollout_trajectory(env_tag: str, seed: int, policy, params: EnvParams = None,
                       mask=None) -> pd.DataFrame:
    """
    运行一个完整回合并返回逐步轨迹表

    Args:
        env_tag: 环境标签
        seed: 重置种子
        policy: 具有 act(obs_vector, goal) 的策略
        params: 环境常量
        mask: 计算奖励用的目标掩码，默认全1

    Returns:
        pd.DataFrame: 每步一行 (t, 夹爪xyz, 方块xyz, grasp, 动作, reward)
    """
    state, goal = reset(env_tag, seed, params)
    mask = np.ones(len(goal), dtype=np.int8) if mask is None else np.asarray(mask)
    rows = []
    while state.t < state.horizon:
        action = np.clip(np.asarray(policy.act(state.obs.to_vector(), goal), dtype=np.float64), -1.0, 1.0)
        nxt = step(state, action)
        r = reward(achieved_goal(nxt.obs, state.env_tag), goal, mask, state.params.success_eps)
        rows.append(_trajectory_row(state.t, nxt.obs, action, r))
        state = nxt
    return pd.DataFrame(rows, columns=TRAJECTORY_COLUMNS)


TRAJECTORY_COLUMNS = [
    "t", "gripper_x", "gripper_y", "gripper_z", "block_x", "block_y", "block_z", "grasp",
    "action_dx", "action_dy", "action_dz", "action_grasp", "reward",
]


def _trajectory_row(t: int, obs: Observation, action: np.ndarray, r: float) -> List:
    return [t, *obs.gripper.tolist(), *obs.block.tolist(), obs.grasp, *action.tolist(), r]


def dump_trajectory(frame: pd.DataFrame, path: str) -> str:
    """写出轨迹CSV（浮点按%.17g保证可精确读回）"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")
    logger.info(f"轨迹已写出: {path}, 共{len(frame)}步")
    return path
