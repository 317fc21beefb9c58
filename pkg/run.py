"""
启动脚本 - 课程目标掩码(CGM)强化学习框架命令行入口

用法:
    python run.py train --env lift --algo ddpg+her --cgm on --cg 0.1 --kappa 32 --seed 1 --epochs 150 --out runs/a
    python run.py sweep --grid grids/lift_fig3.csv --seeds 1,2,3,4,5 --out runs/fig3
    python run.py plot runs/a
    python run.py validate-independence runs/a
    python run.py dump-trajectory --env lift --seed 3 --out traj.csv
"""
import argparse
import sys

from loguru import logger

from errors import ConfigurationError, InputError
from utils import parse_int_list, setup_logger

EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="run.py", description="课程目标掩码(CGM) + DDPG/HER 实验工具")
    parser.add_argument("--log-level", default=None, help="日志级别，默认读取 CGM_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="执行单次训练")
    train.add_argument("--env", choices=["push", "lift"])
    train.add_argument("--algo", choices=["ddpg", "ddpg+her"])
    train.add_argument("--cgm", choices=["on", "off"])
    train.add_argument("--cg", type=float)
    train.add_argument("--kappa", type=float)
    train.add_argument("--form", choices=["proximity", "literal"])
    train.add_argument("--seed", type=int)
    train.add_argument("--epochs", type=int)
    train.add_argument("--out")
    train.add_argument("--config", help="key=value 配置文件")
    train.add_argument("--workers", type=int, help="并行rollout线程数")
    train.add_argument("--resume", action="store_true", help="从最新检查点继续")
    train.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="覆盖任意配置键")

    sweep = sub.add_parser("sweep", help="按网格文件和种子列表批量运行")
    sweep.add_argument("--grid", required=True)
    sweep.add_argument("--seeds", required=True, help="逗号分隔，如 1,2,3,4,5")
    sweep.add_argument("--out", required=True)
    sweep.add_argument("--processes", type=int, default=1)
    sweep.add_argument("--config", help="网格行之外的公共配置文件")

    plot = sub.add_parser("plot", help="由运行目录或汇总目录生成SVG")
    plot.add_argument("directory")

    validate = sub.add_parser("validate-independence", help="比较估计与训练的逐掩码成功率")
    validate.add_argument("directory")

    dump = sub.add_parser("dump-trajectory", help="导出一个回合的逐步轨迹CSV")
    dump.add_argument("--env", required=True, choices=["push", "lift"])
    dump.add_argument("--seed", required=True, type=int)
    dump.add_argument("--out", required=True)
    dump.add_argument("--checkpoint", help="检查点目录；缺省时使用脚本策略")
    return parser


def _train_config(args):
    from harness import RunConfig

    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigurationError(f"--set 需要 key=value 形式: {item}")
        key, value = item.split("=", 1)
        overrides[key] = value
    flags = {"env": args.env, "algo": args.algo, "cg": args.cg, "kappa": args.kappa, "form": args.form,
             "seed": args.seed, "epochs": args.epochs, "out": args.out, "workers": args.workers,
             "cgm": None if args.cgm is None else args.cgm == "on"}
    overrides.update({k: v for k, v in flags.items() if v is not None})
    return RunConfig.from_mapping(overrides, cfg)


def cmd_train(args) -> int:
    from harness import run_experiment
    from rollout_pool import stop_rollout_pool

    try:
        run_dir = run_experiment(_train_config(args), resume=args.resume)
    finally:
        stop_rollout_pool()
    logger.info(f"运行目录: {run_dir}")
    return 0


def cmd_sweep(args) -> int:
    from harness import RunConfig, read_grid, sweep

    base = RunConfig.from_file(args.config) if args.config else None
    path = sweep(read_grid(args.grid, base), parse_int_list(args.seeds), args.out, args.processes)
    logger.info(f"汇总CSV: {path}")
    return 0


def cmd_plot(args) -> int:
    from plots import emit_plots

    emit_plots(args.directory)
    return 0


def cmd_validate(args) -> int:
    from metrics import validate_independence

    report = validate_independence(args.directory)
    print(report.to_string(index=False))
    return 0


def cmd_dump(args) -> int:
    from ddpg import load_policy
    from envs import ScriptedPolicy, dump_trajectory, rollout_trajectory

    policy = load_policy(args.checkpoint) if args.checkpoint else ScriptedPolicy(args.env)
    dump_trajectory(rollout_trajectory(args.env, args.seed, policy), args.out)
    return 0


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "plot": cmd_plot,
    "validate-independence": cmd_validate,
    "dump-trajectory": cmd_dump,
}


def main(argv=None) -> int:
    """主启动函数"""
    args = build_parser().parse_args(argv)
    setup_logger(args.log_level)
    logger.info("=" * 60)
    logger.info(f"  课程目标掩码(CGM)强化学习框架 - {args.command}")
    logger.info("=" * 60)
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, InputError) as e:
        logger.error(f"{type(e).__name__}: {e.message}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
