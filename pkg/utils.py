"""
工具函数模块
"""
import os
import sys
from typing import Iterable, Sequence

import numpy as np
from loguru import logger

from config import LOG_CONFIG


def setup_logger(level: str = None):
    """配置日志系统"""
    # 移除默认处理器
    logger.remove()

    # 添加控制台输出
    logger.add(
        sys.stdout,
        format="<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | <cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>",
        level=level or LOG_CONFIG["level"]
    )

    # 添加文件输出
    os.makedirs(os.path.dirname(LOG_CONFIG["log_file"]), exist_ok=True)
    logger.add(
        LOG_CONFIG["log_file"],
        format="{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function}:{line} - {message}",
        rotation=LOG_CONFIG["rotation"],
        retention=LOG_CONFIG["retention"],
        level=level or LOG_CONFIG["level"],
        encoding="utf-8"
    )

    return logger


def mask_to_bits(mask: Iterable) -> str:
    """掩码向量 -> 位串，如 (1,1,0) -> '110'"""
    return "".join("1" if int(m) else "0" for m in mask)


def derive_rng(*keys: int) -> np.random.Generator:
    """由(运行种子, 轮次, 循环, worker...)派生独立随机数发生器"""
    return np.random.default_rng([int(k) for k in keys])


def derive_seed(rng: np.random.Generator) -> int:
    """从随机数发生器抽取一个环境种子"""
    return int(rng.integers(0, 2**31 - 1))


def format_float(value: float) -> str:
    """日志用的短浮点格式"""
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return "n/a"
    return f"{value:.3f}"


def parse_int_list(text: str) -> Sequence[int]:
    """'1,2,3' -> [1, 2, 3]"""
    return [int(x) for x in str(text).replace(" ", "").split(",") if x]
