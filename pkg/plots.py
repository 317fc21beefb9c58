"""
绘图模块 - 由指标CSV生成学习曲线、达标轮数与逐掩码成功率SVG
"""
import os
from typing import List, Tuple

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from loguru import logger

from config import HARNESS_CONFIG
from errors import InputError
from metrics import epochs_to_threshold, mask_bits_from_columns, read_metrics

# SVG内部ID固定，不写日期
plt.rcParams["svg.hashsalt"] = "cgm"
plt.rcParams["svg.fonttype"] = "path"
# 中文标签字体，缺失时逐字回退到DejaVu Sans
plt.rcParams["font.sans-serif"] = ["SimHei", "Noto Sans CJK SC", "WenQuanYi Micro Hei", "DejaVu Sans"]
plt.rcParams["axes.unicode_minus"] = False

LEARNING_CURVE = "learning_curve.svg"
EPOCHS_TO_THRESHOLD = "epochs_to_threshold.svg"
MASK_SUCCESS = "mask_success.svg"


def _save(fig, path: str) -> str:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def emit_plots(directory: str, threshold: float = None) -> List[str]:
    """
    为运行目录或汇总目录生成3个SVG

    Args:
        directory: 含 metrics.csv 的运行目录，或含 aggregate.csv 的汇总目录
        threshold: 达标阈值，默认0.5

    Returns:
        List[str]: 生成的SVG路径
    """
    threshold = HARNESS_CONFIG["threshold"] if threshold is None else threshold
    metrics_path = os.path.join(directory, HARNESS_CONFIG["metrics_file"])
    aggregate_path = os.path.join(directory, HARNESS_CONFIG["aggregate_file"])
    if os.path.isfile(metrics_path):
        paths = _run_plots(read_metrics(metrics_path), directory, threshold)
    elif os.path.isfile(aggregate_path):
        paths = _aggregate_plots(directory, threshold)
    else:
        raise InputError(f"目录中没有指标CSV或汇总CSV: {directory}")
    logger.info(f"已生成图表: {[os.path.basename(p) for p in paths]}")
    return paths


# ============ 单次运行 ============

def _run_plots(frame: pd.DataFrame, directory: str, threshold: float) -> List[str]:
    epochs = frame["epoch"].to_numpy()
    curve = frame["success_rate"].to_numpy(dtype=np.float64)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, curve, marker="o" if len(epochs) == 1 else None, label="成功率")
    ax.axhline(threshold, color="grey", linestyle=":", linewidth=1)
    ax.set_xlabel("训练轮次")
    ax.set_ylabel("评估成功率")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="lower right")
    paths = [_save(fig, os.path.join(directory, LEARNING_CURVE))]

    crossing = epochs_to_threshold(curve.tolist(), threshold)
    fig, ax = plt.subplots(figsize=(4, 4))
    height = len(curve) if crossing is None else crossing
    ax.bar([0], [height], color="lightgrey" if crossing is None else "tab:blue",
           hatch="//" if crossing is None else None)
    ax.set_xticks([0])
    ax.set_xticklabels(["未达标(截尾)" if crossing is None else "本次运行"])
    ax.set_ylabel(f"达到{threshold:g}成功率所需轮数")
    paths.append(_save(fig, os.path.join(directory, EPOCHS_TO_THRESHOLD)))

    paths.append(_mask_plot([frame], directory))
    return paths


def _mask_plot(frames: List[pd.DataFrame], directory: str) -> str:
    """估计成功率实线、训练成功率虚线，多次运行取中位数"""
    bits = mask_bits_from_columns(frames[0], "est")
    fig, ax = plt.subplots(figsize=(7, 4))
    colors = plt.get_cmap("tab10")
    for i, b in enumerate(bits):
        est = pd.concat([f.set_index("epoch")[f"est_{b}"] for f in frames], axis=1).median(axis=1)
        marker = "o" if len(est) == 1 else None
        ax.plot(est.index, est.to_numpy(), color=colors(i % 10), marker=marker, label=b)
        if all(f"train_{b}" in f.columns for f in frames):
            train = pd.concat([f.set_index("epoch")[f"train_{b}"] for f in frames], axis=1).median(axis=1)
            ax.plot(train.index, train.to_numpy(), color=colors(i % 10), linestyle="--", marker=marker)
    ax.set_xlabel("训练轮次")
    ax.set_ylabel("成功率(实线: 估计, 虚线: 训练)")
    ax.set_ylim(-0.02, 1.02)
    if bits:
        ax.legend(title="掩码", loc="upper left", fontsize="small")
    return _save(fig, os.path.join(directory, MASK_SUCCESS))


# ============ 汇总目录 ============

def _read_aggregate(directory: str) -> pd.DataFrame:
    path = os.path.join(directory, HARNESS_CONFIG["aggregate_file"])
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline()
    if not first.startswith(f"# schema_version={HARNESS_CONFIG['schema_version']}"):
        raise InputError(f"汇总CSV模式版本不匹配: {path}")
    try:
        frame = pd.read_csv(path, comment="#", float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputError(f"汇总CSV格式错误: {path}", e)
    missing = {"cg", "kappa", "cgm", "etc_median", "etc_q1", "etc_q3", "run_dirs"} - set(frame.columns)
    if missing:
        raise InputError(f"汇总CSV缺少列: {sorted(missing)}")
    return frame


def _member_frames(directory: str, run_dirs) -> List[pd.DataFrame]:
    frames = []
    if not isinstance(run_dirs, str) or not run_dirs:
        return frames
    for name in run_dirs.split(";"):
        path = os.path.join(directory, name, HARNESS_CONFIG["metrics_file"])
        if os.path.isfile(path):
            frames.append(read_metrics(path))
    return frames


def _label(row) -> str:
    if not _as_bool(row["cgm"]):
        return f"{row.get('algo', '')} 无CGM".strip()
    return f"{row.get('algo', '')} c_g={row['cg']:g} κ={row['kappa']:g}".strip()


def _as_bool(value) -> bool:
    return str(value).strip().lower() in ("true", "1", "on", "yes")


def curve_groups(frame: pd.DataFrame) -> List[Tuple[str, pd.DataFrame]]:
    """
    把CGM配置按(环境, 算法, κ)分组，每组对应达标轮数图中的一条c_g曲线

    Returns:
        List[Tuple[str, pd.DataFrame]]: (图例标签, 按c_g排序的行)
    """
    cgm_rows = frame[frame["cgm"].map(_as_bool)].copy()
    for key in ("env", "algo"):
        cgm_rows[key] = cgm_rows[key].fillna("").astype(str) if key in cgm_rows.columns else ""
    envs = cgm_rows["env"].unique()
    groups = []
    for (env, algo, kappa), group in cgm_rows.groupby(["env", "algo", "kappa"], sort=True):
        prefix = f"{env} {algo}" if len(envs) > 1 else str(algo)
        groups.append((f"{prefix} κ={kappa:g}".strip(), group.sort_values("cg")))
    return groups


def _aggregate_plots(directory: str, threshold: float) -> List[str]:
    frame = _read_aggregate(directory)

    # 达标轮数 vs c_g，每个(算法, κ)一条线，虚线为四分位
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, group in curve_groups(frame):
        line, = ax.plot(group["cg"], group["etc_median"], marker="o", label=label)
        ax.plot(group["cg"], group["etc_q1"], linestyle="--", color=line.get_color(), linewidth=0.8)
        ax.plot(group["cg"], group["etc_q3"], linestyle="--", color=line.get_color(), linewidth=0.8)
    for _, row in frame[~frame["cgm"].map(_as_bool)].iterrows():
        ax.axhline(row["etc_median"], color="black", linestyle=":", linewidth=1, label=_label(row))
    ax.set_xlabel("目标成功率 c_g")
    ax.set_ylabel(f"达到{threshold:g}成功率所需轮数")
    if len(frame):
        ax.legend(loc="upper right", fontsize="small")
    paths = [_save(fig, os.path.join(directory, EPOCHS_TO_THRESHOLD))]

    # 每个配置的中位数学习曲线与四分位带
    fig, ax = plt.subplots(figsize=(7, 4))
    member_frames = []
    for _, row in frame.iterrows():
        members = _member_frames(directory, row["run_dirs"])
        member_frames.append(members)
        if not members:
            continue
        curves = pd.concat([m.set_index("epoch")["success_rate"] for m in members], axis=1)
        q1, med, q3 = (curves.quantile(q, axis=1, interpolation="linear") for q in (0.25, 0.5, 0.75))
        line, = ax.plot(med.index, med.to_numpy(), label=_label(row),
                        marker="o" if len(med) == 1 else None)
        ax.fill_between(med.index, q1.to_numpy(), q3.to_numpy(), color=line.get_color(), alpha=0.2)
    ax.axhline(threshold, color="grey", linestyle=":", linewidth=1)
    ax.set_xlabel("训练轮次")
    ax.set_ylabel("评估成功率")
    ax.set_ylim(-0.02, 1.02)
    if any(member_frames):
        ax.legend(loc="lower right", fontsize="small")
    paths.append(_save(fig, os.path.join(directory, LEARNING_CURVE)))

    # 逐掩码成功率：取第一个有成员运行的CGM配置
    chosen = []
    for (_, row), members in zip(frame.iterrows(), member_frames):
        if members and _as_bool(row["cgm"]):
            chosen = members
            break
    if not chosen:
        chosen = next((m for m in member_frames if m), [])
    if chosen:
        paths.append(_mask_plot(chosen, directory))
    else:
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.set_xlabel("训练轮次")
        paths.append(_save(fig, os.path.join(directory, MASK_SUCCESS)))
    return paths
