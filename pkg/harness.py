"""
实验驱动模块 - 运行配置、单次实验、多种子参数扫描与汇总
"""
import json
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import dotenv
import numpy as np
import pandas as pd
from loguru import logger

from config import (ALGORITHMS, CURRICULUM_CONFIG, DDPG_CONFIG, ENV_CONFIG, HARNESS_CONFIG,
                    HER_CONFIG, NN_CONFIG, RUNS_DIR)
from curriculum import SAMPLING_FORMS, CurriculumConfig, MaskCurriculum
from ddpg import (ActorCritic, ExplorationConfig, RolloutConfig, TrainingState, load_checkpoint,
                  run_epoch, save_checkpoint)
from envs import EnvParams, goal_dim, resolve_env_tag
from errors import ConfigurationError, InputError
from metrics import (SCHEMA_LINE, epochs_to_threshold, read_metrics, stats_frame, summarize_cell,
                     summarize_run, write_metrics)
from replay import HERConfig, ReplayBuffer, load_buffer, save_buffer
from rollout_pool import get_rollout_pool

TRUE_WORDS = ("true", "on", "1", "yes")
FALSE_WORDS = ("false", "off", "0", "no")


@dataclass(frozen=True)
class RunConfig:
    """一次运行的全部参数；键名即配置文件中的键"""
    env: str = "lift"
    algo: str = "ddpg+her"
    cgm: bool = CURRICULUM_CONFIG["enabled"]
    cg: float = CURRICULUM_CONFIG["target_success"]
    kappa: float = CURRICULUM_CONFIG["kappa"]
    form: str = CURRICULUM_CONFIG["form"]
    include_zero_mask: bool = CURRICULUM_CONFIG["include_zero_mask"]
    tracker_window: int = CURRICULUM_CONFIG["tracker_window"]
    seed: int = 0
    epochs: int = HARNESS_CONFIG["epochs"]
    n_eval: int = HARNESS_CONFIG["n_eval"]
    threshold: float = HARNESS_CONFIG["threshold"]
    checkpoint_interval: int = HARNESS_CONFIG["checkpoint_interval"]
    save_buffer: bool = HARNESS_CONFIG["save_buffer"]
    hidden_sizes: Tuple[int, ...] = NN_CONFIG["hidden_sizes"]
    lr_actor: float = NN_CONFIG["lr_actor"]
    lr_critic: float = NN_CONFIG["lr_critic"]
    capacity: int = HER_CONFIG["capacity"]
    batch_size: int = HER_CONFIG["batch_size"]
    her_k: int = HER_CONFIG["her_k"]
    n_parallel: int = DDPG_CONFIG["n_parallel"]
    n_cycles: int = DDPG_CONFIG["n_cycles"]
    n_batches: int = DDPG_CONFIG["n_batches"]
    gamma: float = DDPG_CONFIG["gamma"]
    polyak: float = DDPG_CONFIG["polyak"]
    sigma: float = DDPG_CONFIG["sigma"]
    explore_eps: float = DDPG_CONFIG["explore_eps"]
    norm_clip: float = DDPG_CONFIG["norm_clip"]
    norm_eps: float = DDPG_CONFIG["norm_eps"]
    action_l2: float = DDPG_CONFIG["action_l2"]
    workers: int = DDPG_CONFIG["workers"]
    horizon: int = ENV_CONFIG["horizon"]
    step_size: float = ENV_CONFIG["step_size"]
    attach_radius: float = ENV_CONFIG["attach_radius"]
    gravity_rate: float = ENV_CONFIG["gravity_rate"]
    success_eps: float = ENV_CONFIG["success_eps"]
    contact_radius: float = ENV_CONFIG["contact_radius"]
    out: str = ""

    # ---------- 构造与读写 ----------

    @classmethod
    def from_mapping(cls, values: Dict, base: "RunConfig" = None) -> "RunConfig":
        """用字符串或原生值覆盖base中的字段，未知键报错"""
        base = base or cls()
        known = {f.name: f for f in fields(cls)}
        updates = {}
        for key, raw in values.items():
            key = key.strip().lower()
            if key not in known:
                raise ConfigurationError(f"未知配置键: {key}")
            if raw is None or (isinstance(raw, float) and np.isnan(raw)):
                continue
            updates[key] = _coerce(key, raw, getattr(base, key))
        return replace(base, **updates)

    @classmethod
    def from_file(cls, path: str, base: "RunConfig" = None) -> "RunConfig":
        if not os.path.isfile(path):
            raise ConfigurationError(f"配置文件不存在: {path}")
        return cls.from_mapping(dict(dotenv.dotenv_values(path)), base)

    def to_file(self, path: str) -> str:
        """写成 key=value 文本，字段顺序固定"""
        lines = [f"{name}={_render(value)}" for name, value in asdict(self).items()]
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
        return path

    # ---------- 校验与派生 ----------

    @property
    def env_tag(self) -> str:
        return resolve_env_tag(self.env)

    @property
    def use_her(self) -> bool:
        return self.algo == "ddpg+her"

    def validate(self) -> "RunConfig":
        """检查所有模块前置条件，任何副作用之前调用"""
        tag = self.env_tag
        if self.algo not in ALGORITHMS:
            raise ConfigurationError(f"未知算法: {self.algo}，可选: {ALGORITHMS}")
        if self.form not in SAMPLING_FORMS:
            raise ConfigurationError(f"未知采样形式: {self.form}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs不能为负: {self.epochs}")
        for name in ("n_eval", "tracker_window", "capacity", "workers", "checkpoint_interval"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name}必须为正: {getattr(self, name)}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigurationError(f"阈值必须在(0,1)内: {self.threshold}")
        if not self.hidden_sizes or any(h <= 0 for h in self.hidden_sizes):
            raise ConfigurationError(f"隐藏层尺寸必须为正: {self.hidden_sizes}")
        if self.norm_clip <= 0 or self.norm_eps <= 0:
            raise ConfigurationError("归一化参数必须为正")
        if self.seed < 0:
            raise ConfigurationError(f"种子不能为负: {self.seed}")
        if self.capacity < self.horizon:
            raise ConfigurationError(f"缓冲区容量{self.capacity}小于回合长度{self.horizon}")
        self.curriculum_config().validate()
        self.her_config().validate()
        self.exploration_config().validate()
        self.rollout_config().validate()
        self.env_params().validate()
        if goal_dim(tag) > CURRICULUM_CONFIG["max_goal_dim"]:
            raise ConfigurationError("目标维度超过上限")
        return self

    def curriculum_config(self) -> CurriculumConfig:
        return CurriculumConfig(target_success=self.cg, kappa=self.kappa, form=self.form,
                                include_zero_mask=self.include_zero_mask)

    def her_config(self) -> HERConfig:
        return HERConfig(k=self.her_k if self.use_her else 0)

    def exploration_config(self) -> ExplorationConfig:
        return ExplorationConfig(sigma=self.sigma, explore_eps=self.explore_eps)

    def rollout_config(self) -> RolloutConfig:
        return RolloutConfig(n_parallel=self.n_parallel, n_cycles=self.n_cycles, horizon=self.horizon,
                             n_batches=self.n_batches, batch_size=self.batch_size, gamma=self.gamma,
                             polyak=self.polyak, lr_actor=self.lr_actor, lr_critic=self.lr_critic,
                             action_l2=self.action_l2)

    def env_params(self) -> EnvParams:
        return EnvParams(horizon=self.horizon, step_size=self.step_size, attach_radius=self.attach_radius,
                         gravity_rate=self.gravity_rate, success_eps=self.success_eps,
                         contact_radius=self.contact_radius)

    def run_name(self) -> str:
        cgm = f"cgm-cg{self.cg:g}-k{self.kappa:g}-{self.form}" if self.cgm else "nocgm"
        return f"{self.env}_{self.algo.replace('+', '-')}_{cgm}_s{self.seed}"


def _coerce(key: str, raw, default):
    """按字段默认值的类型转换配置值"""
    if isinstance(default, bool):
        if isinstance(raw, (bool, np.bool_)):
            return bool(raw)
        text = str(raw).strip().lower()
        if text in TRUE_WORDS:
            return True
        if text in FALSE_WORDS:
            return False
        raise ConfigurationError(f"{key} 不是布尔值: {raw!r}")
    try:
        if isinstance(default, tuple):
            if isinstance(raw, (tuple, list)):
                return tuple(int(v) for v in raw)
            return tuple(int(v) for v in str(raw).replace(" ", "").split(",") if v)
        if isinstance(default, int):
            value = float(raw)
            if value != int(value):
                raise ValueError(raw)
            return int(value)
        if isinstance(default, float):
            return float(raw)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"{key} 的值无法解析: {raw!r}", e)
    return str(raw).strip()


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ============ 单次实验 ============

def _build_state(cfg: RunConfig) -> TrainingState:
    tag = cfg.env_tag
    n = goal_dim(tag)
    ac = ActorCritic.create(n, cfg.seed, cfg.hidden_sizes)
    ac.obs_norm.eps = ac.goal_norm.eps = cfg.norm_eps
    ac.obs_norm.clip = ac.goal_norm.clip = cfg.norm_clip
    return TrainingState(
        env_tag=tag,
        env_params=cfg.env_params(),
        ac=ac,
        buffer=ReplayBuffer(cfg.capacity, tag, cfg.success_eps),
        curriculum=MaskCurriculum(n, cfg.curriculum_config(), enabled=cfg.cgm, window=cfg.tracker_window),
        her=cfg.her_config(),
        expl=cfg.exploration_config(),
        rollout=cfg.rollout_config(),
        seed=cfg.seed,
        n_eval=cfg.n_eval,
        pool=get_rollout_pool(cfg.workers) if cfg.workers > 1 else None,
    )


def _checkpoint_dir(run_dir: str, epoch: int) -> str:
    return os.path.join(run_dir, "checkpoints", f"epoch_{epoch:04d}")


def latest_checkpoint(run_dir: str) -> Optional[str]:
    root = os.path.join(run_dir, "checkpoints")
    if not os.path.isdir(root):
        return None
    names = sorted(d for d in os.listdir(root) if d.startswith("epoch_"))
    return os.path.join(root, names[-1]) if names else None


def _write_checkpoint(ts: TrainingState, run_dir: str, save_buffer_snapshot: bool):
    directory = save_checkpoint(ts, _checkpoint_dir(run_dir, ts.epoch - 1))
    if save_buffer_snapshot:
        root = os.path.join(run_dir, "checkpoints")
        for name in os.listdir(root):
            old = os.path.join(root, name, "buffer.csv")
            if name != os.path.basename(directory) and os.path.exists(old):
                os.remove(old)
        save_buffer(ts.buffer, os.path.join(directory, "buffer.csv"))


def _resume(ts: TrainingState, cfg: RunConfig, run_dir: str) -> List[Dict]:
    """恢复最新检查点，返回已完成轮次的指标行"""
    directory = latest_checkpoint(run_dir)
    if directory is None:
        logger.warning(f"运行目录中没有检查点，从头开始: {run_dir}")
        return []
    load_checkpoint(ts, directory)
    snapshot = os.path.join(directory, "buffer.csv")
    if os.path.exists(snapshot):
        ts.buffer = load_buffer(snapshot, cfg.capacity, ts.env_tag, cfg.success_eps)
    else:
        logger.warning(f"检查点中没有缓冲区快照，以空缓冲区继续: {directory}")
    metrics_path = os.path.join(run_dir, HARNESS_CONFIG["metrics_file"])
    if not os.path.exists(metrics_path):
        return []
    frame = read_metrics(metrics_path)
    return frame[frame["epoch"] < ts.epoch].to_dict("records")


def run_experiment(cfg: RunConfig, resume: bool = False) -> str:
    """
    执行一次完整实验

    Args:
        cfg: 运行配置，先校验再产生任何副作用
        resume: 是否从运行目录中最新的检查点继续

    Returns:
        str: 运行目录
    """
    cfg.validate()
    run_dir = cfg.out or os.path.join(RUNS_DIR, cfg.run_name())
    os.makedirs(run_dir, exist_ok=True)
    cfg.to_file(os.path.join(run_dir, HARNESS_CONFIG["config_file"]))
    sink = logger.add(os.path.join(run_dir, "train.log"), encoding="utf-8", level="DEBUG",
                      format="{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function}:{line} - {message}")
    try:
        logger.info(f"开始实验: {cfg.run_name()}，目录: {run_dir}，轮次预算: {cfg.epochs}")
        ts = _build_state(cfg)
        n = goal_dim(ts.env_tag)
        bits = ts.curriculum.bits
        rows = _resume(ts, cfg, run_dir) if resume else []
        metrics_path = os.path.join(run_dir, HARNESS_CONFIG["metrics_file"])
        columns = list(stats_frame([], n, bits).columns)

        write_metrics(pd.DataFrame(rows, columns=columns), metrics_path)
        while ts.epoch < cfg.epochs:
            stats = run_epoch(ts)
            rows.append(stats.to_row(bits))
            write_metrics(pd.DataFrame(rows, columns=columns), metrics_path)
            if ts.epoch % cfg.checkpoint_interval == 0 or ts.epoch == cfg.epochs:
                _write_checkpoint(ts, run_dir, cfg.save_buffer)

        curve = [float(r["success_rate"]) for r in rows]
        summary = {
            "config": asdict(cfg),
            "run_name": cfg.run_name(),
            "epochs_run": len(curve),
            "curve": curve,
            "epochs_to_threshold": epochs_to_threshold(curve, cfg.threshold),
            "final_success": curve[-1] if curve else None,
            "versions": {"python": platform.python_version(), "numpy": np.__version__,
                         "pandas": pd.__version__, "schema": HARNESS_CONFIG["schema_version"]},
        }
        with open(os.path.join(run_dir, HARNESS_CONFIG["summary_file"]), "w", encoding="utf-8") as f:
            json.dump(summary, f, ensure_ascii=False, indent=2)
        logger.info(f"实验完成: {run_dir}，达标轮数: {summary['epochs_to_threshold']}，"
                    f"最终成功率: {summary['final_success']}")
        return run_dir
    finally:
        logger.remove(sink)


# ============ 参数扫描 ============

GRID_KEYS = ("env", "algo", "cgm", "cg", "kappa", "form")


def read_grid(path: str, base: RunConfig = None) -> List[RunConfig]:
    """读取网格CSV，每行一个配置，列名为RunConfig键"""
    if not os.path.isfile(path):
        raise InputError(f"网格文件不存在: {path}")
    try:
        frame = pd.read_csv(path, comment="#", dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputError(f"网格文件格式错误: {path}", e)
    if frame.empty:
        raise InputError(f"网格文件为空: {path}")
    configs = []
    for record in frame.to_dict("records"):
        values = {k: v for k, v in record.items() if str(v).strip() != ""}
        configs.append(RunConfig.from_mapping(values, base).validate())
    return configs


def _run_cell(job: Tuple[RunConfig, str]) -> Dict:
    """执行一个 (配置, 种子) 单元，失败时记录而不抛出"""
    cfg, name = job
    try:
        run_dir = run_experiment(cfg)
        result = summarize_run(run_dir, cfg.threshold)
        return {"run_dir": name, "status": "ok", "error": "", **result}
    except Exception as e:
        logger.error(f"扫描单元失败: {name}, 错误: {e}")
        return {"run_dir": name, "status": "failed", "error": str(e),
                "epochs_to_threshold": None, "final_success": float("nan"), "epochs": 0}


def sweep(grid: Sequence[RunConfig], seeds: Sequence[int], out: str, processes: int = 1) -> str:
    """
    对网格中每个配置和每个种子执行实验，并写出汇总CSV

    Args:
        grid: 配置列表
        seeds: 种子列表
        out: 输出目录，每个单元一个子目录
        processes: 并行进程数，1为顺序执行

    Returns:
        str: 汇总CSV路径
    """
    if not grid or not seeds:
        raise ConfigurationError("网格与种子列表都不能为空")
    for cfg in grid:
        cfg.validate()
    os.makedirs(out, exist_ok=True)

    jobs, owners = [], []
    for i, cfg in enumerate(grid):
        for seed in seeds:
            name = f"cell{i:02d}_{replace(cfg, seed=int(seed)).run_name()}"
            jobs.append((replace(cfg, seed=int(seed), out=os.path.join(out, name)), name))
            owners.append(i)
    logger.info(f"开始参数扫描: {len(grid)}个配置 × {len(seeds)}个种子，输出目录: {out}")

    if processes > 1:
        with ProcessPoolExecutor(max_workers=processes) as executor:
            results = list(executor.map(_run_cell, jobs))
    else:
        results = [_run_cell(job) for job in jobs]

    cells = pd.DataFrame([{"cell": owner, "seed": job[0].seed, **res}
                          for owner, job, res in zip(owners, jobs, results)])
    cells.to_csv(os.path.join(out, "cells.csv"), index=False, float_format="%.17g")

    rows = []
    threshold = grid[0].threshold
    for i, cfg in enumerate(grid):
        mine = [r for owner, r in zip(owners, results) if owner == i]
        ok = [r for r in mine if r["status"] == "ok"]
        summary = summarize_cell([r["epochs_to_threshold"] for r in ok],
                                 [r["final_success"] for r in ok], cfg.epochs,
                                 n_failed=len(mine) - len(ok))
        rows.append({**{k: _render(getattr(cfg, k)) for k in GRID_KEYS}, "epochs": cfg.epochs, **summary,
                     "run_dirs": ";".join(r["run_dir"] for r in ok)})
    aggregate = pd.DataFrame(rows)
    path = os.path.join(out, HARNESS_CONFIG["aggregate_file"])
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"{SCHEMA_LINE}; aggregation=median-of-crossings; quartiles=linear; threshold={threshold:g}\n")
        aggregate.to_csv(f, index=False, float_format="%.17g", lineterminator="\n")
    failed = sum(r["status"] != "ok" for r in results)
    logger.info(f"参数扫描完成: 共{len(results)}个单元，失败{failed}个，汇总: {path}")
    return path

