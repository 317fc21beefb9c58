"""
配置文件 - 课程目标掩码(CGM)强化学习框架
"""
import os
from dotenv import load_dotenv

# 加载环境变量
load_dotenv()

# ============ 路径配置 ============
BASE_DIR = os.path.dirname(os.path.abspath(__file__))
RUNS_DIR = os.getenv("CGM_RUNS_DIR", os.path.join(BASE_DIR, "runs"))
LOG_DIR = os.path.join(BASE_DIR, "logs")

# ============ 神经网络配置 ============
NN_CONFIG = {
    "hidden_sizes": (64, 64),
    "lr_actor": 1e-3,
    "lr_critic": 1e-3,
    "adam_beta1": 0.9,
    "adam_beta2": 0.999,
    "adam_eps": 1e-8,
}

# ============ 环境配置 ============
# 长度单位为工作空间单位，工作空间 [0,1]×[0,1]×[0,0.5]
ENV_CONFIG = {
    "horizon": 50,
    "step_size": 0.04,
    "attach_radius": 0.05,
    "gravity_rate": 0.08,
    "success_eps": 0.05,
    "workspace_low": (0.0, 0.0, 0.0),
    "workspace_high": (1.0, 1.0, 0.5),
    "spawn_margin": 0.1,          # 方块/夹爪/目标的xy采样离边界的距离
    "lift_goal_z_max": 0.45,
    "lift_gripper_z_max": 0.25,   # 夹爪初始高度上限
    "block_height": 0.05,         # 推动任务中夹爪低于该高度才与方块接触
    "contact_radius": 0.06,       # 推动接触半径，需大于单步最大xy位移 step_size·√2
}

# ============ 课程(目标掩码)配置 ============
CURRICULUM_CONFIG = {
    "enabled": True,
    "target_success": 0.1,        # c_g
    "kappa": 32.0,                # κ
    "form": "proximity",          # proximity | literal
    "include_zero_mask": False,
    "tracker_window": 10,         # h
    "max_goal_dim": 16,
    "uniform_fallback": 1e-12,
}

# ============ 经验回放/HER配置 ============
HER_CONFIG = {
    "capacity": 1_000_000,
    "batch_size": 128,
    "her_k": 6,
    "strategy": "future",
}

# ============ DDPG配置 ============
DDPG_CONFIG = {
    "n_parallel": 4,              # n_p
    "n_cycles": 64,               # n_r
    "n_batches": 40,              # 每个循环的优化步数
    "gamma": 0.98,
    "polyak": 0.05,
    "sigma": 0.2,
    "explore_eps": 0.3,
    "norm_clip": 5.0,
    "norm_eps": 0.01,
    "action_l2": 0.0,
    "workers": 1,
}

# ============ 实验配置 ============
HARNESS_CONFIG = {
    "epochs": 150,
    "n_eval": 10,
    "threshold": 0.5,
    "checkpoint_interval": 1,
    "save_buffer": False,         # 检查点是否附带回放缓冲区CSV快照（体积大）
    "metrics_file": "metrics.csv",
    "summary_file": "summary.json",
    "config_file": "config.env",
    "aggregate_file": "aggregate.csv",
    "schema_version": 1,
}

# 命令行环境名 -> 环境标签
ENV_TAGS = {
    "push": "planar-push",
    "lift": "lift-world",
    "planar-push": "planar-push",
    "lift-world": "lift-world",
}

ALGORITHMS = ("ddpg", "ddpg+her")

# ============ 日志配置 ============
LOG_CONFIG = {
    "log_file": os.path.join(LOG_DIR, "cgm.log"),
    "rotation": "10 MB",
    "retention": "7 days",
    "level": os.getenv("CGM_LOG_LEVEL", "INFO"),
}
