# 训练过程监控
"""
DQN 训练过程监控：记录每个 episode 的关键指标，跟踪最佳验证 MAE，
检测验证停滞并给出早停建议，最后输出训练日志表。
"""
import time
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

LOG_COLUMNS = ["episode", "experiences", "epsilon", "mean_loss", "mean_return", "val_mae", "wall_seconds"]


class TrainingMonitor:
    """
    训练监控器。

    主要功能：
    1. 记录每个 episode 的回报、损失、ε 与验证 MAE
    2. 跟踪最佳验证 MAE (越低越好)
    3. 连续 patience 轮验证无改进时建议早停
    4. 导出训练日志 DataFrame 与诊断摘要
    """

    def __init__(self, patience: Optional[int] = None, min_improvement: float = 1e-4):
        """
        Args:
            patience: 早停耐心值 (验证轮数)，None 表示从不早停
            min_improvement: 验证 MAE 的最小下降幅度，低于此值视为无改进
        """
        self.patience = patience
        self.min_improvement = min_improvement
        self.history: Dict[str, List] = {key: [] for key in LOG_COLUMNS}
        self.start_time: Optional[float] = None
        self.best_val_mae = float("inf")
        self.best_episode: Optional[int] = None
        self.no_improvement_count = 0
        self.validations = 0

    def start_monitoring(self) -> None:
        self.start_time = time.time()
        self.reset_history()

    def reset_history(self) -> None:
        for key in self.history:
            self.history[key] = []
        self.best_val_mae = float("inf")
        self.best_episode = None
        self.no_improvement_count = 0
        self.validations = 0

    def elapsed(self) -> float:
        if self.start_time is None:
            self.start_monitoring()
        return time.time() - self.start_time

    def record_validation(self, episode: int, val_mae: float) -> bool:
        """
        记录一次验证结果。

        Returns:
            是否刷新了最佳验证 MAE
        """
        self.validations += 1
        if val_mae < self.best_val_mae - self.min_improvement or self.best_episode is None:
            self.best_val_mae = float(val_mae)
            self.best_episode = episode
            self.no_improvement_count = 0
            return True
        self.no_improvement_count += 1
        return False

    def record_episode(self, episode: int, experiences: int, epsilon: float,
                       losses: List[float], rewards: List[float],
                       val_mae: Optional[float] = None) -> Dict[str, Any]:
        """记录一个 episode 的汇总，返回写入日志的那一行"""
        row = {
            "episode": episode,
            "experiences": experiences,
            "epsilon": float(epsilon),
            "mean_loss": float(np.mean(losses)) if losses else float("nan"),
            "mean_return": float(np.sum(rewards)) / max(len(rewards), 1),
            "val_mae": float("nan") if val_mae is None else float(val_mae),
            "wall_seconds": self.elapsed(),
        }
        for key in LOG_COLUMNS:
            self.history[key].append(row[key])
        return row

    def should_stop_early(self) -> bool:
        return self.patience is not None and self.no_improvement_count >= self.patience

    def get_convergence_status(self) -> Dict[str, Any]:
        return {
            "best_val_mae": self.best_val_mae,
            "best_episode": self.best_episode,
            "no_improvement_count": self.no_improvement_count,
            "early_stop_suggested": self.should_stop_early(),
            "episodes_completed": len(self.history["episode"]),
            "validations": self.validations,
        }

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=LOG_COLUMNS)

    def generate_recommendations(self) -> List[str]:
        """根据损失与验证曲线给出训练建议"""
        if len(self.history["episode"]) < 5:
            return ["需要更多 episode 数据才能提供建议"]
        recommendations = []
        losses = pd.Series(self.history["mean_loss"]).dropna()
        if len(losses) >= 10:
            head = losses.iloc[: len(losses) // 2].mean()
            tail = losses.iloc[len(losses) // 2:].mean()
            if tail > 2.0 * head:
                recommendations.append("后半程平均损失显著上升，建议降低学习率或增大 EMA 平滑")
        if self.should_stop_early():
            recommendations.append(f"连续 {self.no_improvement_count} 轮验证无改进，建议早停")
        if self.best_episode is None:
            recommendations.append("尚未进行任何验证，建议缩短 validate_every")
        if not recommendations:
            recommendations.append("训练进展正常")
        return recommendations
