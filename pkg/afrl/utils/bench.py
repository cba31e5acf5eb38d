# 策略评估与基准比较
"""
在扫描集上评估自动对焦策略：逐帧焦度轨迹、MAE ± std、对焦帧比例、
平滑轨迹导出，以及两个策略之间的配对自助法显著性检验。

主要功能：
1. evaluate_policy：贪心回放 (无探索)，记录每帧动作后的误差
2. export_paths：居中滑动平均平滑后的轨迹 CSV
3. paired_significance：逐帧误差的配对 bootstrap p 值
4. save_report / load_report：report.json + paths.csv
"""
import concurrent.futures
import copy
import json
import logging
import os
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from threadpoolctl import threadpool_limits

from ..focus_model.image_core import DEFAULT_PATCH_SIZE
from ..focus_model.scan_sim import Scan, observe_patch, optimal_focus
from ..learning.policies import AutofocusPolicy
from .errors import ConfigurationError

logger = logging.getLogger(__name__)

IN_FOCUS_THRESHOLD = 0.1
DEFAULT_INITIAL_F = 0.5
DEFAULT_SMOOTHING_WINDOW = 5
FRAME_COLUMNS = ["scan_id", "t", "f", "f_star", "abs_error"]
PATH_COLUMNS = ["scan_id", "t", "f_raw", "f_smooth", "f_star", "abs_error"]
REPORT_NAME = "report.json"
PATHS_NAME = "paths.csv"
STD_DEFINITION = "per-frame population std (ddof=0) of |f* - f|"

# 与对比表 "指标 | 优化器" 两列对应
TABLE_LABELS = {
    "fixed": ("n/a", "fixed"),
    "hc-mgm": ("MGM", "hill-climber"),
    "hc-mlr": ("MLR", "hill-climber"),
    "rl-mgm": ("MGM", "RL"),
    "rl-mlr": ("MLR", "RL"),
    "rl-cnn": ("CNN", "RL"),
}

InitialFocus = Union[float, Dict[str, float]]


@dataclass
class EvalReport:
    """评估报告：逐帧数据 + 聚合指标"""
    frames: pd.DataFrame                # 列为 FRAME_COLUMNS，按 (scan_id, t) 排序
    policy: Dict = field(default_factory=dict)
    initial_f: InitialFocus = DEFAULT_INITIAL_F
    seed: int = 0

    @property
    def errors(self) -> np.ndarray:
        return self.frames["abs_error"].to_numpy(dtype=np.float64)

    @property
    def mae(self) -> float:
        return float(np.mean(self.errors))

    @property
    def error_std(self) -> float:
        return float(np.std(self.errors, ddof=0))

    @property
    def in_focus_fraction(self) -> float:
        errors = self.errors
        return float(np.count_nonzero(errors < IN_FOCUS_THRESHOLD)) / len(errors)

    @property
    def frame_count(self) -> int:
        return int(len(self.frames))

    @property
    def scan_ids(self) -> List[str]:
        return list(dict.fromkeys(self.frames["scan_id"]))

    def per_scan(self) -> pd.DataFrame:
        grouped = self.frames.groupby("scan_id", sort=True)["abs_error"]
        return pd.DataFrame({
            "mae": grouped.mean(),
            "in_focus_fraction": grouped.apply(lambda e: float(np.mean(e < IN_FOCUS_THRESHOLD))),
            "frames": grouped.size(),
        }).reset_index()

    def table_row(self) -> str:
        """对比表格式的一行，例如 'MGM | hill-climber | 0.102±.138 | 67.9%'"""
        metric, optimiser = TABLE_LABELS.get(self.policy.get("name"), ("?", self.policy.get("name", "?")))
        return (f"{metric} | {optimiser} | {self.mae:.3f}±{_strip_leading_zero(self.error_std)} | "
                f"{100.0 * self.in_focus_fraction:.1f}%")

    def summary(self) -> Dict:
        return {
            "policy": self.policy,
            "mae": self.mae,
            "error_std": self.error_std,
            "error_std_definition": STD_DEFINITION,
            "in_focus_fraction": self.in_focus_fraction,
            "in_focus_threshold": IN_FOCUS_THRESHOLD,
            "frames": self.frame_count,
            "scans": len(self.scan_ids),
            "initial_f": self.initial_f,
            "seed": self.seed,
            "per_scan": [{"scan_id": str(r.scan_id), "mae": float(r.mae),
                          "in_focus_fraction": float(r.in_focus_fraction), "frames": int(r.frames)}
                         for r in self.per_scan().itertuples(index=False)],
        }


def _strip_leading_zero(value: float) -> str:
    text = f"{value:.3f}"
    return text[1:] if text.startswith("0.") else text


# --- 评估 ---
def check_compatibility(policy: AutofocusPolicy, scans: Sequence[Scan]) -> None:
    """
    Raises:
        ConfigurationError: 扫描集为空、scan_id 重复、缺少 f* 真值，或帧小于补丁
    """
    if not scans:
        raise ConfigurationError("评估扫描集为空")
    ids = [s.scan_id for s in scans]
    if len(set(ids)) != len(ids):
        raise ConfigurationError(f"评估扫描集的 scan_id 有重复: {sorted({i for i in ids if ids.count(i) > 1})}")
    for scan in scans:
        optimal_focus(scan)
        if policy.needs_observation and min(scan.height, scan.width) < DEFAULT_PATCH_SIZE:
            raise ConfigurationError(
                f"策略 {policy.name} 需要 {DEFAULT_PATCH_SIZE}×{DEFAULT_PATCH_SIZE} 补丁，"
                f"扫描 {scan.scan_id} 的帧只有 {scan.width}×{scan.height}")


def rollout_policy(policy: AutofocusPolicy, scan: Scan, initial_f: float = DEFAULT_INITIAL_F) -> pd.DataFrame:
    """
    在单个扫描上贪心回放策略 (原地修改 policy 的状态)。

    第 t 帧以当前焦度 f_t 观察补丁，策略给出 f_{t+1}，误差记为 |f*_t − f_{t+1}|。
    """
    f_star = optimal_focus(scan)
    policy.reset(initial_f)
    f = policy.f
    T = len(scan)
    focus = np.empty(T, dtype=np.float64)
    for t in range(T):
        patch = observe_patch(scan, t, f) if policy.needs_observation else None
        f = policy.step(patch)
        focus[t] = f
    return pd.DataFrame({
        "scan_id": scan.scan_id,
        "t": np.arange(T, dtype=np.int64),
        "f": focus,
        "f_star": f_star.astype(np.float64),
        "abs_error": np.abs(f_star - focus),
    }, columns=FRAME_COLUMNS)


def evaluate_policy(policy: AutofocusPolicy, scans: Sequence[Scan], initial_f: InitialFocus = DEFAULT_INITIAL_F,
                    workers: int = 1, seed: int = 0) -> EvalReport:
    """
    在扫描集上评估策略。

    每个扫描使用策略的独立副本，可并行；结果按 scan_id 排序后聚合，
    因此与 workers 无关。

    Args:
        policy: 自动对焦策略
        scans: 扫描集
        initial_f: 统一的初始焦度，或 scan_id → 初始焦度
        workers: 并行线程数
        seed: 记录在报告中的种子

    Returns:
        EvalReport

    Raises:
        ConfigurationError: 策略与扫描不兼容，或缺少某个扫描的初始焦度
    """
    check_compatibility(policy, scans)
    if isinstance(initial_f, dict):
        missing = [s.scan_id for s in scans if s.scan_id not in initial_f]
        if missing:
            raise ConfigurationError(f"缺少以下扫描的初始焦度: {missing}")

    def run(scan: Scan) -> pd.DataFrame:
        f0 = initial_f[scan.scan_id] if isinstance(initial_f, dict) else initial_f
        return rollout_policy(copy.deepcopy(policy), scan, float(f0))

    with threadpool_limits(limits=1, user_api="blas"):
        with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
            results = list(executor.map(run, scans))

    order = sorted(range(len(scans)), key=lambda i: scans[i].scan_id)
    frames = pd.concat([results[i] for i in order], ignore_index=True)
    report = EvalReport(frames=frames, policy=policy.describe(), initial_f=initial_f, seed=seed)
    logger.info("%s: MAE %.4f ± %.4f，对焦帧 %.1f%% (%d 帧)", report.policy.get("name"), report.mae,
                report.error_std, 100.0 * report.in_focus_fraction, report.frame_count)
    return report


# --- 导出 ---
def smooth_paths(report: EvalReport, smoothing_window: int = DEFAULT_SMOOTHING_WINDOW) -> pd.DataFrame:
    """
    居中滑动平均，窗口在序列两端截断。平滑只影响导出，不影响任何指标。

    Raises:
        ConfigurationError: 窗口 < 1
    """
    if smoothing_window < 1:
        raise ConfigurationError(f"平滑窗口必须 ≥ 1，实际: {smoothing_window}")
    if smoothing_window % 2 == 0:
        warnings.warn(f"平滑窗口 {smoothing_window} 为偶数，居中平均不对称")
    frames = report.frames
    smooth = (frames.groupby("scan_id", sort=False)["f"]
              .transform(lambda s: s.rolling(smoothing_window, center=True, min_periods=1).mean()))
    return pd.DataFrame({
        "scan_id": frames["scan_id"],
        "t": frames["t"],
        "f_raw": frames["f"],
        "f_smooth": smooth,
        "f_star": frames["f_star"],
        "abs_error": frames["abs_error"],
    }, columns=PATH_COLUMNS)


def export_paths(report: EvalReport, path: str,
                 smoothing_window: int = DEFAULT_SMOOTHING_WINDOW) -> pd.DataFrame:
    """写出 paths.csv，浮点数以 17 位有效数字保存，可无损读回"""
    paths = smooth_paths(report, smoothing_window)
    paths.to_csv(path, index=False, float_format="%.17g")
    return paths


def save_report(report: EvalReport, out_dir: str, smoothing_window: int = DEFAULT_SMOOTHING_WINDOW,
                config: Optional[Dict] = None) -> str:
    """写出 report.json (聚合指标 + 配置回显) 与 paths.csv，返回 report.json 路径"""
    os.makedirs(out_dir, exist_ok=True)
    export_paths(report, os.path.join(out_dir, PATHS_NAME), smoothing_window)
    summary = report.summary()
    summary["smoothing_window"] = smoothing_window
    summary["config"] = config or {}
    path = os.path.join(out_dir, REPORT_NAME)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, ensure_ascii=False)
    return path


def load_report(out_dir: str) -> EvalReport:
    """从 report.json + paths.csv 还原 EvalReport"""
    report_path = os.path.join(out_dir, REPORT_NAME)
    paths_path = os.path.join(out_dir, PATHS_NAME)
    for p in (report_path, paths_path):
        if not os.path.isfile(p):
            raise ConfigurationError(f"评估目录 {out_dir} 缺少 {os.path.basename(p)}")
    try:
        with open(report_path, "r", encoding="utf-8") as fh:
            summary = json.load(fh)
        paths = pd.read_csv(paths_path, dtype={"scan_id": str})
    except (json.JSONDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ConfigurationError(f"评估目录 {out_dir} 的输出文件无法解析: {e}") from e
    if not isinstance(summary, dict):
        raise ConfigurationError(f"{report_path} 必须是 JSON 对象")
    frames = paths.rename(columns={"f_raw": "f"})
    missing = [c for c in FRAME_COLUMNS if c not in frames.columns]
    if missing:
        raise ConfigurationError(f"{paths_path} 缺少列: {', '.join(missing)}")
    frames = frames[FRAME_COLUMNS]
    return EvalReport(frames=frames, policy=summary.get("policy", {}),
                      initial_f=summary.get("initial_f", DEFAULT_INITIAL_F), seed=summary.get("seed", 0))


# --- 显著性 ---
def paired_significance(report_a: EvalReport, report_b: EvalReport, iterations: int = 10_000,
                        seed: int = 0, chunk: int = 256) -> float:
    """
    逐帧绝对误差的配对 bootstrap 双侧 p 值。

    d_i = e_a,i − e_b,i，m = mean(d)；对 d 有放回重采样得到均值分布，
    p = P(|mean* − m| ≥ |m|)。d 恒为 0 时 p = 1。

    Raises:
        ConfigurationError: 两个报告的 (scan_id, t) 索引集合不同
    """
    if iterations < 1:
        raise ConfigurationError(f"bootstrap 迭代次数必须 ≥ 1，实际: {iterations}")
    a = report_a.frames.set_index(["scan_id", "t"])["abs_error"].sort_index()
    b = report_b.frames.set_index(["scan_id", "t"])["abs_error"].sort_index()
    if len(a) != len(b) or not a.index.equals(b.index) or a.index.has_duplicates:
        raise ConfigurationError("两个报告的 (scan_id, t) 帧索引集合不一致，无法配对比较")

    d = a.to_numpy(dtype=np.float64) - b.to_numpy(dtype=np.float64)
    n = d.size
    m = float(np.mean(d))
    rng = np.random.default_rng(seed)
    extreme = 0
    done = 0
    while done < iterations:
        size = min(chunk, iterations - done)
        idx = rng.integers(0, n, size=(size, n))
        boot = d[idx].mean(axis=1)
        extreme += int(np.count_nonzero(np.abs(boot - m) >= abs(m)))
        done += size
    return extreme / iterations
