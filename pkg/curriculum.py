"""
课程模块 - 目标掩码空间、掩码应用、子目标成功率跟踪、难度估计与掩码采样
"""
from collections import deque
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from loguru import logger

from config import CURRICULUM_CONFIG
from errors import ConfigurationError, ShapeError
from utils import mask_to_bits


SAMPLING_FORMS = ("proximity", "literal")


@dataclass(frozen=True)
class CurriculumConfig:
    """c_g：目标成功率；κ：分布锐度；form：proximity 或 literal"""
    target_success: float = CURRICULUM_CONFIG["target_success"]
    kappa: float = CURRICULUM_CONFIG["kappa"]
    form: str = CURRICULUM_CONFIG["form"]
    include_zero_mask: bool = CURRICULUM_CONFIG["include_zero_mask"]

    def validate(self):
        if not 0.0 <= self.target_success <= 1.0:
            raise ConfigurationError(f"c_g必须在[0,1]内: {self.target_success}")
        if self.kappa < 0:
            raise ConfigurationError(f"κ不能为负: {self.kappa}")
        if self.form not in SAMPLING_FORMS:
            raise ConfigurationError(f"未知采样形式: {self.form}，可选: {SAMPLING_FORMS}")


def enumerate_masks(n: int, include_zero: bool = False) -> List[np.ndarray]:
    """
    按二进制计数顺序枚举全部 2^n 个掩码

    Args:
        n: 目标维度，1 ≤ n ≤ 16
        include_zero: 是否包含全0掩码

    Returns:
        List[np.ndarray]: 掩码列表，位串从左到右对应目标维度0..n-1
    """
    if not isinstance(n, (int, np.integer)) or not 1 <= n <= CURRICULUM_CONFIG["max_goal_dim"]:
        raise ConfigurationError(f"目标维度必须在[1, {CURRICULUM_CONFIG['max_goal_dim']}]内: {n}")
    masks = []
    for i in range(2 ** n):
        if i == 0 and not include_zero:
            continue
        bits = format(i, f"0{n}b")
        masks.append(np.array([int(c) for c in bits], dtype=np.int8))
    return masks


def apply_mask(goal, achieved, mask) -> np.ndarray:
    """g ⊙ m + f(o_t) ⊙ (1 - m)：被掩码的维度取当前已达成值"""
    goal = np.asarray(goal, dtype=np.float64)
    achieved = np.asarray(achieved, dtype=np.float64)
    mask = np.asarray(mask)
    if not goal.shape == achieved.shape == mask.shape:
        raise ShapeError(f"goal{goal.shape}、achieved{achieved.shape}、mask{mask.shape}长度不一致")
    return np.where(mask == 1, goal, achieved)


class SuccessTracker:
    """每个目标维度一个长度为h的环形缓冲，记录最近h次评估回合的成功"""

    def __init__(self, n: int, window: int = None):
        self.n = int(n)
        self.window = int(window or CURRICULUM_CONFIG["tracker_window"])
        if self.n <= 0 or self.window <= 0:
            raise ConfigurationError(f"跟踪器维度与窗口必须为正: n={n}, h={window}")
        self._buffers = [deque(maxlen=self.window) for _ in range(self.n)]

    def record_evaluation(self, per_dim_success: Sequence[bool]):
        """推入一次评估回合的逐维成功，满时淘汰最旧项"""
        values = np.asarray(per_dim_success, dtype=bool)
        if values.shape != (self.n,):
            raise ShapeError(f"逐维成功向量长度应为{self.n}，收到{values.shape}")
        for buf, v in zip(self._buffers, values):
            buf.append(bool(v))

    def record_matrix(self, per_dim_matrix):
        """按行推入多次评估结果"""
        for row in np.asarray(per_dim_matrix, dtype=bool):
            self.record_evaluation(row)

    @property
    def rates(self) -> np.ndarray:
        """逐维成功率，空缓冲为0"""
        return np.array([sum(buf) / len(buf) if buf else 0.0 for buf in self._buffers])

    @property
    def counts(self) -> List[int]:
        return [len(buf) for buf in self._buffers]

    def to_dict(self) -> Dict:
        return {"n": self.n, "window": self.window,
                "buffers": [[bool(v) for v in buf] for buf in self._buffers]}

    @classmethod
    def from_dict(cls, data: Dict) -> "SuccessTracker":
        tracker = cls(data["n"], data["window"])
        for buf, values in zip(tracker._buffers, data["buffers"]):
            buf.extend(bool(v) for v in values)
        return tracker


def estimate_mask_success(tracker: SuccessTracker, mask) -> float:
    """c_m = 未被掩码维度成功率之积（空积为1）"""
    mask = np.asarray(mask)
    if mask.shape != (tracker.n,):
        raise ShapeError(f"掩码长度{mask.shape}与跟踪器维度{tracker.n}不一致")
    return float(np.prod(tracker.rates[mask == 1]))


def mask_weights(tracker: SuccessTracker, masks: Sequence, cfg: CurriculumConfig) -> np.ndarray:
    """
    计算掩码采样概率

    proximity: w = (1 - |c_m - c_g|)^κ ；literal: w = |c_m - c_g|^κ
    归一化后和为1；所有原始权重都 < 1e-12 时退化为均匀分布。
    """
    if len(masks) == 0:
        raise ConfigurationError("掩码列表为空")
    estimates = np.array([estimate_mask_success(tracker, m) for m in masks])
    gap = np.abs(estimates - cfg.target_success)
    base = 1.0 - gap if cfg.form == "proximity" else gap
    raw = np.power(base, cfg.kappa)
    if np.all(raw < CURRICULUM_CONFIG["uniform_fallback"]):
        logger.warning(f"掩码原始权重全部过小，退回均匀采样 (form={cfg.form}, κ={cfg.kappa})")
        return np.full(len(masks), 1.0 / len(masks))
    return raw / raw.sum()


def sample_mask(weights, masks: Sequence, rng: np.random.Generator) -> np.ndarray:
    """按类别分布抽取一个掩码"""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(masks),):
        raise ShapeError(f"权重长度{weights.shape}与掩码个数{len(masks)}不一致")
    index = int(rng.choice(len(masks), p=weights))
    return np.array(masks[index], dtype=np.int8)


class MaskCurriculum:
    """
    掩码课程：持有掩码空间、成功率跟踪器与每轮冻结的采样权重

    关闭CGM时始终返回全1掩码，但跟踪器照常更新以便记录估计值。
    """

    def __init__(self, n: int, cfg: CurriculumConfig = None, enabled: bool = True,
                 window: int = None):
        self.cfg = cfg or CurriculumConfig()
        self.cfg.validate()
        self.enabled = enabled
        self.masks = enumerate_masks(n, self.cfg.include_zero_mask)
        self.bits = [mask_to_bits(m) for m in self.masks]
        self.full_mask = np.ones(n, dtype=np.int8)
        self.tracker = SuccessTracker(n, window)
        self.weights = self._compute_weights()
        logger.info(f"掩码课程初始化完成，维度: {n}，掩码数: {len(self.masks)}，"
                    f"CGM: {'开启' if enabled else '关闭'}，c_g={self.cfg.target_success}，κ={self.cfg.kappa}")

    def _compute_weights(self) -> np.ndarray:
        if not self.enabled:
            return np.array([1.0 if b == mask_to_bits(self.full_mask) else 0.0 for b in self.bits])
        return mask_weights(self.tracker, self.masks, self.cfg)

    def refresh_weights(self) -> np.ndarray:
        """轮次结束后依据最新跟踪器重新计算权重"""
        self.weights = self._compute_weights()
        return self.weights

    def sample(self, rng: np.random.Generator, weights: Optional[np.ndarray] = None) -> np.ndarray:
        if not self.enabled:
            return self.full_mask.copy()
        return sample_mask(self.weights if weights is None else weights, self.masks, rng)

    def record_evaluation(self, per_dim_matrix):
        self.tracker.record_matrix(per_dim_matrix)

    def estimates(self) -> Dict[str, float]:
        """各掩码的估计成功率 c_m"""
        return {b: estimate_mask_success(self.tracker, m) for b, m in zip(self.bits, self.masks)}
