# 命令行入口
"""
afrl 命令行：

    afrl simulate      从源图像生成模拟焦点-时间扫描
    afrl train         训练学习型自动对焦策略 (DQN)
    afrl eval          在扫描集上评估策略，可与第二个策略做显著性比较
    afrl oracle-focus  对焦点堆栈扫描做全局搜索，写入最优焦度真值
    afrl export-paths  以新的平滑窗口重新导出评估轨迹

退出码：0 表示所有输出已写出；1 表示运行错误；2 表示用法错误。
"""
import argparse
import json
import logging
import os
import shutil
import sys
from typing import Dict, List, Optional

import numpy as np

from .focus_model.scan_sim import (MANIFEST_NAME, FocalStackScan, annotate_oracle_focus, discover_sources,
                                   generate_scan_set, load_scan, load_scan_set, read_manifest,
                                   render_focal_stack_scan, save_scan, write_manifest)
from .learning.dqn_train import DESK_SCALE_SETTINGS, train
from .learning.policies import LEARNED_POLICY_NAMES, POLICY_NAMES, build_policy
from .utils.bench import (PATHS_NAME, evaluate_policy, export_paths, load_report, paired_significance,
                          save_report)
from .utils.config import RunConfig
from .utils.errors import AfrlError, ConfigurationError

logger = logging.getLogger("afrl")

COMPARISON_NAME = "comparison.json"
RUN_CONFIG_NAME = "run_config.json"


def focal_grid(step: float) -> np.ndarray:
    """[0, 1] 上步长为 step 的均匀焦点网格；1/step 必须是整数"""
    n = int(round(1.0 / step))
    if n < 1 or not np.isclose(n * step, 1.0):
        raise ConfigurationError(f"focal_grid_step={step} 不能整除 [0, 1]")
    return np.linspace(0.0, 1.0, n + 1)


def _require(cfg: RunConfig, key: str, flag: str) -> str:
    value = cfg[key]
    if value is None:
        raise ConfigurationError(f"缺少 {flag} (或配置键 '{key}')")
    return value


def _write_run_config(cfg: RunConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, RUN_CONFIG_NAME), "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, ensure_ascii=False, sort_keys=True)


# --- 子命令 ---
def cmd_simulate(cfg: RunConfig) -> int:
    sources_dir = _require(cfg, 'sources_dir', '--sources')
    out_dir = _require(cfg, 'out_dir', '--out')
    sources = discover_sources(sources_dir)
    logger.info("发现 %d 个源: %s", len(sources), ", ".join(s[0] for s in sources))
    scans = generate_scan_set(sources, cfg['scan_count'], cfg['scan_length'], cfg.walk_config(),
                              base_seed=cfg['seed'], workers=cfg.resolved_workers())
    grid = focal_grid(cfg['focal_grid_step']) if cfg['focal_grid_step'] is not None else None
    os.makedirs(out_dir, exist_ok=True)
    for scan in scans:
        to_save = scan if grid is None else render_focal_stack_scan(scan, grid)
        save_scan(to_save, os.path.join(out_dir, scan.scan_id))
        kind = "simulated" if grid is None else f"stack K={len(grid)}"
        print(f"{scan.scan_id}: source={scan.source_id} T={len(scan)} sigma0={scan.sigma0:.3f} "
              f"f*∈[{scan.f_star.min():.3f}, {scan.f_star.max():.3f}] ({kind})")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    scans_dir = _require(cfg, 'scans_dir', '--scans')
    out_dir = _require(cfg, 'out_dir', '--out')
    workers = cfg.resolved_workers()
    train_cfg = cfg.train_config()
    train_scans = load_scan_set(scans_dir, workers)
    val_scans = load_scan_set(cfg['val_dir'], workers) if cfg['val_dir'] else None
    _write_run_config(cfg, out_dir)
    result = train(train_scans, train_cfg, val_scans, out_dir=out_dir, workers=workers, resume=cfg['resume'])
    print(f"{train_cfg.variant}: {result.episodes} episodes, {result.experiences} experiences, "
          f"best val MAE {result.best_val_mae:.4f}")
    status = result.status
    print(f"validations: {status['validations']}, best episode: {status['best_episode']}")
    if status["early_stop_suggested"]:
        print(f"early stop after {status['no_improvement_count']} validations without improvement")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    scans_dir = _require(cfg, 'scans_dir', '--scans')
    out_dir = _require(cfg, 'out_dir', '--out')
    workers = cfg.resolved_workers()
    scans = load_scan_set(scans_dir, workers)
    policy = build_policy(cfg['policy'], cfg['ckpt'], fixed_f0=cfg['fixed_f0'], mlr_sigma=cfg['mlr_sigma'])
    report = evaluate_policy(policy, scans, initial_f=cfg['initial_f'], workers=workers, seed=cfg['seed'])
    save_report(report, out_dir, cfg['smoothing_window'], config=cfg.to_dict())
    print(report.table_row())

    if cfg['compare'] is not None:
        other = build_policy(cfg['compare'], cfg['compare_ckpt'], fixed_f0=cfg['fixed_f0'],
                             mlr_sigma=cfg['mlr_sigma'])
        other_report = evaluate_policy(other, scans, initial_f=cfg['initial_f'], workers=workers,
                                       seed=cfg['seed'])
        save_report(other_report, os.path.join(out_dir, "compare"), cfg['smoothing_window'],
                    config=cfg.to_dict())
        p_value = paired_significance(report, other_report, cfg['bootstrap_iterations'], cfg['seed'])
        comparison = {
            "policy_a": report.policy, "policy_b": other_report.policy,
            "mae_a": report.mae, "mae_b": other_report.mae,
            "p_value": p_value, "iterations": cfg['bootstrap_iterations'], "seed": cfg['seed'],
            "test": "paired bootstrap on per-frame absolute errors (two-sided)",
        }
        with open(os.path.join(out_dir, COMPARISON_NAME), "w", encoding="utf-8") as fh:
            json.dump(comparison, fh, indent=2, ensure_ascii=False)
        print(other_report.table_row())
        print(f"paired bootstrap p = {p_value:.4g} ({cfg['policy']} vs {cfg['compare']})")
    return 0


def load_corrections(path: str) -> Dict[int, float]:
    """读取人工校正 JSON：{"位姿索引": f*}"""
    if not os.path.isfile(path):
        raise ConfigurationError(f"校正文件不存在: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"校正文件 {path} 不是有效的 JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"校正文件 {path} 必须是 {{位姿索引: f*}} 形式的 JSON 对象")
    try:
        return {int(k): float(v) for k, v in data.items()}
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"校正文件 {path} 含有无效的索引或焦度: {e}") from e


def cmd_oracle_focus(scan_dir: str, cfg: RunConfig) -> int:
    scan = load_scan(scan_dir)
    if not isinstance(scan, FocalStackScan):
        raise ConfigurationError(f"oracle-focus 需要焦点堆栈扫描，{scan_dir} 是 {type(scan).__name__}")
    corrections = None if cfg['corrections'] is None else load_corrections(cfg['corrections'])
    annotated = annotate_oracle_focus(scan, corrections)

    manifest_path = os.path.join(scan_dir, MANIFEST_NAME)
    backup = manifest_path + ".bak"
    if not os.path.exists(backup):
        shutil.copy2(manifest_path, backup)
    manifest = read_manifest(scan_dir)
    manifest["f_star"] = [float(v) for v in annotated.f_star]
    write_manifest(manifest_path, manifest)
    print(f"{scan.scan_id}: {len(annotated)} poses, f* ∈ [{annotated.f_star.min():.3f}, "
          f"{annotated.f_star.max():.3f}] written to {manifest_path}")
    return 0


def cmd_export_paths(eval_dir: str, cfg: RunConfig, out_path: Optional[str]) -> int:
    report = load_report(eval_dir)
    window = cfg['smoothing_window']
    path = out_path or os.path.join(eval_dir, f"{os.path.splitext(PATHS_NAME)[0]}_w{window}.csv")
    export_paths(report, path, window)
    print(f"{report.frame_count} frames exported to {path} (window {window})")
    return 0


# --- 参数解析 ---
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="扁平 JSON 配置文件")
    common.add_argument("--seed", type=int, help="随机种子")
    common.add_argument("--workers", type=int, help="并行线程数 (默认为可用核心数)")
    common.add_argument("--out", dest="out_dir", help="输出目录")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="覆盖任意配置键，值按 JSON 解析，可重复")
    common.add_argument("-v", "--verbose", action="store_true", help="输出 DEBUG 日志")

    parser = argparse.ArgumentParser(prog="afrl", description="基于对比度的视频自动对焦：模拟、训练与评估")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="生成模拟焦点-时间扫描")
    p.add_argument("--sources", dest="sources_dir", help="源目录：PGM 静态图像或 PGM 帧序列子目录")
    p.add_argument("--count", dest="scan_count", type=int, help="扫描数")
    p.add_argument("--length", dest="scan_length", type=int, help="每个扫描的帧数 T")
    p.add_argument("--focal-grid-step", dest="focal_grid_step", type=float,
                   help="设置后写出该网格步长的焦点堆栈扫描")

    p = sub.add_parser("train", parents=[common], help="训练学习型策略")
    p.add_argument("--scans", dest="scans_dir", help="训练扫描目录")
    p.add_argument("--val", dest="val_dir", help="验证扫描目录")
    p.add_argument("--variant", choices=LEARNED_POLICY_NAMES, help="策略变体")
    p.add_argument("--total-experiences", dest="total_experiences", type=int, help="经验总数")
    p.add_argument("--resume", help="从检查点续训")
    p.add_argument("--desk-scale", action="store_true", help="使用缩小 20 倍的回放与衰减配置")

    p = sub.add_parser("eval", parents=[common], help="评估策略")
    p.add_argument("--scans", dest="scans_dir", help="评估扫描目录")
    p.add_argument("--policy", choices=POLICY_NAMES, help="策略名")
    p.add_argument("--ckpt", help="学习型策略的检查点")
    p.add_argument("--compare", choices=POLICY_NAMES, help="对比策略名")
    p.add_argument("--compare-ckpt", dest="compare_ckpt", help="对比策略的检查点")
    p.add_argument("--initial-f", dest="initial_f", type=float, help="初始焦度 (默认 0.5)")
    p.add_argument("--fixed-f0", dest="fixed_f0", type=float, help="固定策略的焦度")
    p.add_argument("--smoothing-window", dest="smoothing_window", type=int, help="轨迹平滑窗口 (帧)")
    p.add_argument("--bootstrap-iterations", dest="bootstrap_iterations", type=int)

    p = sub.add_parser("oracle-focus", parents=[common], help="为焦点堆栈扫描计算最优焦度真值")
    p.add_argument("scan_dir", help="焦点堆栈扫描目录")
    p.add_argument("--corrections", help="人工校正 JSON：{位姿索引: f*}")

    p = sub.add_parser("export-paths", parents=[common], help="重新导出平滑轨迹")
    p.add_argument("eval_dir", help="eval 的输出目录 (含 report.json 与 paths.csv)")
    p.add_argument("--smoothing-window", dest="smoothing_window", type=int, help="平滑窗口 (帧)")
    return parser


_CONFIG_FLAGS = ("seed", "workers", "out_dir", "sources_dir", "scan_count", "scan_length", "focal_grid_step",
                 "scans_dir", "val_dir", "variant", "total_experiences", "resume", "policy", "ckpt",
                 "compare", "compare_ckpt", "initial_f", "fixed_f0", "smoothing_window",
                 "bootstrap_iterations", "corrections")


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")

    flags = {key: getattr(args, key) for key in _CONFIG_FLAGS if hasattr(args, key)}
    # export-paths 的 --out 是输出文件而不是目录
    export_out = flags.pop("out_dir", None) if args.command == "export-paths" else None
    try:
        base = DESK_SCALE_SETTINGS if getattr(args, "desk_scale", False) else None
        cfg = RunConfig.from_sources(args.config, flags, args.overrides, base=base)
        if args.command == "eval":
            for name, ckpt, flag in ((cfg['policy'], cfg['ckpt'], "--ckpt"),
                                     (cfg['compare'], cfg['compare_ckpt'], "--compare-ckpt")):
                if name in LEARNED_POLICY_NAMES and ckpt is None:
                    parser.error(f"学习型策略 {name} 需要 {flag}")
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "oracle-focus":
            return cmd_oracle_focus(args.scan_dir, cfg)
        return cmd_export_paths(args.eval_dir, cfg, export_out)
    except (AfrlError, OSError) as e:
        print(f"错误: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
