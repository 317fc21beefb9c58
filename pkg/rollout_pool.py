"""
Rollout工作池模块 - 并行执行rollout回合，结果按提交顺序返回
"""
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List

from loguru import logger

from config import DDPG_CONFIG


class RolloutPool:
    """rollout线程池；workers ≤ 1 时在当前线程顺序执行"""

    def __init__(self, workers: int = None):
        self.workers = max(1, int(workers or DDPG_CONFIG["workers"]))
        self._executor = None
        self._lock = threading.Lock()
        logger.info(f"Rollout工作池初始化，worker数: {self.workers}")

    def _get_executor(self) -> ThreadPoolExecutor:
        with self._lock:
            if self._executor is None:
                self._executor = ThreadPoolExecutor(max_workers=self.workers,
                                                    thread_name_prefix="rollout")
            return self._executor

    def map(self, fn: Callable, jobs: Iterable) -> List:
        """对每个任务执行fn，返回值顺序与任务顺序一致"""
        jobs = list(jobs)
        if self.workers <= 1 or len(jobs) <= 1:
            return [fn(job) for job in jobs]
        return list(self._get_executor().map(fn, jobs))

    def shutdown(self):
        with self._lock:
            if self._executor is not None:
                self._executor.shutdown(wait=True)
                self._executor = None
                logger.info("Rollout工作池已关闭")


# 全局工作池实例
_rollout_pool = None

def get_rollout_pool(workers: int = None) -> RolloutPool:
    """获取全局工作池实例，worker数变化时重建"""
    global _rollout_pool
    if _rollout_pool is not None and workers is not None and _rollout_pool.workers != max(1, int(workers)):
        _rollout_pool.shutdown()
        _rollout_pool = None
    if _rollout_pool is None:
        _rollout_pool = RolloutPool(workers)
    return _rollout_pool


def stop_rollout_pool():
    """关闭全局工作池"""
    global _rollout_pool
    if _rollout_pool is not None:
        _rollout_pool.shutdown()
        _rollout_pool = None
