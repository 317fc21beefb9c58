"""
指标模块 - 每轮统计、指标CSV模式、达标轮数、分位数汇总与条件独立性检验
"""
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from loguru import logger

from config import HARNESS_CONFIG
from errors import ConfigurationError, InputError


SCHEMA_LINE = f"# schema_version={HARNESS_CONFIG['schema_version']}"


@dataclass
class EpochStats:
    """单轮统计：评估成功率、逐维成功率、各掩码估计值/权重/采样次数/训练成功率、损失"""
    epoch: int
    success_rate: float
    dim_rates: List[float]
    estimates: Dict[str, float]
    weights: Dict[str, float]
    counts: Dict[str, int]
    train_success: Dict[str, float] = field(default_factory=dict)
    critic_loss: float = float("nan")
    actor_objective: float = float("nan")
    transitions: int = 0

    def to_row(self, bits: Sequence[str]) -> Dict:
        row = {"epoch": self.epoch, "success_rate": self.success_rate}
        for i, rate in enumerate(self.dim_rates):
            row[f"rate_d{i}"] = rate
        for prefix, values in (("est", self.estimates), ("weight", self.weights), ("count", self.counts)):
            for b in bits:
                row[f"{prefix}_{b}"] = values.get(b, 0)
        for b in bits:
            row[f"train_{b}"] = self.train_success.get(b, float("nan"))
        row["critic_loss"] = self.critic_loss
        row["actor_objective"] = self.actor_objective
        row["transitions"] = self.transitions
        return row


def metrics_columns(n: int, bits: Sequence[str]) -> List[str]:
    cols = ["epoch", "success_rate"] + [f"rate_d{i}" for i in range(n)]
    for prefix in ("est", "weight", "count", "train"):
        cols += [f"{prefix}_{b}" for b in bits]
    return cols + ["critic_loss", "actor_objective", "transitions"]


def stats_frame(stats: Sequence[EpochStats], n: int, bits: Sequence[str]) -> pd.DataFrame:
    return pd.DataFrame([s.to_row(bits) for s in stats], columns=metrics_columns(n, bits))


def write_metrics(frame: pd.DataFrame, path: str) -> str:
    """首行写模式版本，再写表头与数据；浮点按%.17g"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(SCHEMA_LINE + "\n")
        frame.to_csv(f, index=False, float_format="%.17g", lineterminator="\n")
    return path


def _read_versioned_csv(path: str, expected_prefix: str) -> pd.DataFrame:
    if not os.path.isfile(path):
        raise InputError(f"文件不存在: {path}")
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline().strip()
    if not first.startswith(expected_prefix):
        raise InputError(f"模式版本不匹配: {path} 首行为 {first!r}")
    try:
        return pd.read_csv(path, comment="#", float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise InputError(f"CSV格式错误: {path}", e)


def read_metrics(path: str) -> pd.DataFrame:
    """读取指标CSV并校验模式版本与必需列"""
    frame = _read_versioned_csv(path, SCHEMA_LINE)
    missing = {"epoch", "success_rate"} - set(frame.columns)
    if missing:
        raise InputError(f"指标CSV缺少列: {sorted(missing)}")
    return frame


def mask_bits_from_columns(frame: pd.DataFrame, prefix: str = "est") -> List[str]:
    """从列名中恢复掩码位串，保持列顺序"""
    head = f"{prefix}_"
    return [c[len(head):] for c in frame.columns if c.startswith(head)]


def epochs_to_threshold(curve: Sequence[float], threshold: float = None) -> Optional[int]:
    """
    首个评估成功率 ≥ threshold 的轮次（从0计），从未达到则为None

    Args:
        curve: 每轮评估成功率
        threshold: 阈值，0 < threshold < 1
    """
    threshold = HARNESS_CONFIG["threshold"] if threshold is None else threshold
    if not 0.0 < threshold < 1.0:
        raise ConfigurationError(f"阈值必须在(0,1)内: {threshold}")
    for i, value in enumerate(curve):
        if value >= threshold:
            return i
    return None


def quartiles(values: Sequence[float]):
    """线性插值分位数，返回 (q1, median, q3)"""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan"), float("nan")
    q1, med, q3 = np.percentile(arr, [25, 50, 75], method="linear")
    return float(q1), float(med), float(q3)


def summarize_cell(crossings: Sequence[Optional[int]], finals: Sequence[float], budget: int,
                   n_failed: int = 0) -> Dict:
    """
    汇总同一配置多个种子的结果（先取各运行的达标轮数，再取中位数）

    未达标的运行按预算截尾计入；全部未达标时整格标记为censored。
    """
    crossings = list(crossings)
    censored_values = [budget if c is None else c for c in crossings]
    n_censored = sum(c is None for c in crossings)
    etc_q1, etc_med, etc_q3 = quartiles(censored_values)
    fin_q1, fin_med, fin_q3 = quartiles(finals)
    censored = bool(crossings) and n_censored == len(crossings)
    if censored:
        logger.warning(f"该配置所有运行均未达到阈值，按预算{budget}截尾")
    return {
        "n_runs": len(crossings),
        "n_failed": n_failed,
        "n_censored": n_censored,
        "censored": censored,
        "etc_median": etc_med,
        "etc_q1": etc_q1,
        "etc_q3": etc_q3,
        "final_median": fin_med,
        "final_q1": fin_q1,
        "final_q3": fin_q3,
    }


def summarize_run(run_dir: str, threshold: float = None) -> Dict:
    """由运行目录的指标CSV得到 (达标轮数, 最终成功率, 已运行轮数)"""
    frame = read_metrics(os.path.join(run_dir, HARNESS_CONFIG["metrics_file"]))
    curve = frame["success_rate"].tolist()
    return {
        "epochs_to_threshold": epochs_to_threshold(curve, threshold),
        "final_success": float(curve[-1]) if curve else float("nan"),
        "epochs": len(curve),
    }


def rank_correlation(a: Sequence[float], b: Sequence[float]) -> float:
    """Spearman秩相关；任一序列为常数或样本不足时返回NaN"""
    a = pd.Series(a, dtype=np.float64)
    b = pd.Series(b, dtype=np.float64)
    if len(a) < 2 or a.nunique() < 2 or b.nunique() < 2:
        return float("nan")
    return float(a.rank().corr(b.rank()))


def validate_independence(run_dir: str, write: bool = True) -> pd.DataFrame:
    """
    比较每个掩码的估计成功率 c_m 与实际训练成功率序列

    Args:
        run_dir: 运行目录
        write: 是否写出 independence.csv

    Returns:
        pd.DataFrame: 每个掩码一行 (mask, n_epochs, rank_correlation, max_gap, mean_gap, mean_est, mean_train, diverges)
    """
    frame = read_metrics(os.path.join(run_dir, HARNESS_CONFIG["metrics_file"]))
    bits = mask_bits_from_columns(frame, "est")
    if not bits or not all(f"train_{b}" in frame.columns for b in bits):
        raise InputError(f"运行目录缺少估计或训练成功率序列: {run_dir}")

    rows = []
    for b in bits:
        pair = frame[[f"est_{b}", f"train_{b}"]].dropna()
        est, train = pair[f"est_{b}"], pair[f"train_{b}"]
        corr = rank_correlation(est, train)
        gap = (est - train).abs()
        rows.append({
            "mask": b,
            "n_epochs": len(pair),
            "rank_correlation": corr,
            "max_gap": float(gap.max()) if len(pair) else float("nan"),
            "mean_gap": float(gap.mean()) if len(pair) else float("nan"),
            "mean_est": float(est.mean()) if len(pair) else float("nan"),
            "mean_train": float(train.mean()) if len(pair) else float("nan"),
            "diverges": (not math.isnan(corr)) and corr < 0.5,
        })
    report = pd.DataFrame(rows)
    for row in rows:
        corr = "未定义" if math.isnan(row["rank_correlation"]) else f"{row['rank_correlation']:.3f}"
        logger.info(f"掩码 {row['mask']}: 秩相关 {corr}，最大差 {row['max_gap']:.3f}"
                    f"{'，趋势背离' if row['diverges'] else ''}")
    if write:
        path = os.path.join(run_dir, "independence.csv")
        report.to_csv(path, index=False, float_format="%.17g")
        logger.info(f"独立性检验报告已写出: {path}")
    return report
