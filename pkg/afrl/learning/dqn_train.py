# 深度 Q 学习训练器
"""
DQN 训练：经验回放、指数衰减的 ε-greedy 探索、EMA 目标网络、
折扣 TD 目标，以及平滑 L1 损失 + RMSProp 更新。

一个扫描就是一个 episode。标量指标变体在回放中存储组装好的状态向量；
端到端变体存储补丁编号与焦度，学习步中对采样状态的全部 N 个补丁重新编码。
"""
import json
import logging
import math
import os
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from threadpoolctl import threadpool_limits

from ..focus_model.focus_metrics import MetricKind, evaluate_metric
from ..focus_model.image_core import DEFAULT_PATCH_SIZE
from ..focus_model.scan_sim import Scan, observe_patch, optimal_focus
from ..utils.errors import (ArchitectureMismatchError, ConfigurationError, DomainError,
                            TrainingDivergedError, UsageError)
from .neural import (ENCODING_WIDTH, ConvEncoder, NetworkParams, QNetwork, all_finite, check_aligned,
                     cnn_encode, copy_params, encoder_shapes, huber_loss, huber_loss_grad,
                     init_optim_state, init_params, load_checkpoint, non_finite_activations, qnet_shapes,
                     rmsprop_step, save_checkpoint)
from .policies import (ACTIONS, E2E_STATE_WIDTH, HISTORY_LENGTH, LEARNED_POLICY_NAMES,
                       SCALAR_STATE_WIDTH, MetricNormalizer, PolicyHistory, apply_action,
                       assemble_state, checkpoint_policy, expected_checkpoint_shapes, greedy_action)
from .training_monitor import LOG_COLUMNS, TrainingMonitor

logger = logging.getLogger(__name__)

TRAIN_LOG_NAME = "train_log.csv"
BEST_CKPT_NAME = "best.ckpt"
LAST_CKPT_NAME = "last.ckpt"
DIAGNOSTICS_NAME = "diagnostics.json"
# 全尺度回放容量与 ε 衰减跨度缩小 20 倍
DESK_SCALE_SETTINGS = {"replay_capacity": 125_000, "epsilon_decay_span": 100_000, "total_experiences": 200_000}


@dataclass
class TrainConfig:
    """DQN 训练参数，默认值为全尺度配置"""
    variant: str = "rl-mgm"
    mlr_sigma: float = 4.0
    gamma: float = 0.99
    ema_beta: float = 0.005
    epsilon_start: float = 1.0
    epsilon_end: float = 0.1
    epsilon_decay_span: int = 2_000_000
    replay_capacity: int = 2_500_000
    batch_size: int = 64
    warmup: Optional[int] = None        # None 表示 10 × batch_size
    learn_every: int = 1
    total_experiences: int = 4_000_000
    learning_rate: float = 1e-5
    rmsprop_rho: float = 0.95
    rmsprop_eps: float = 1e-8
    validate_every: int = 25            # episode
    eval_initial_f: float = 0.5
    early_stop_patience: Optional[int] = None
    normalizer_stride: int = 10         # 拟合归一化尺度时的帧间隔
    seed: int = 0

    def __post_init__(self):
        violations = self.validate()
        if violations:
            raise ConfigurationError("训练配置无效: " + "; ".join(violations))
        if self.epsilon_decay_span > self.total_experiences > 0:
            warnings.warn(f"epsilon_decay_span={self.epsilon_decay_span} 大于 total_experiences="
                          f"{self.total_experiences}，训练结束时 ε 尚未衰减到 {self.epsilon_end}")

    def validate(self) -> List[str]:
        v = []
        if self.variant not in LEARNED_POLICY_NAMES:
            v.append(f"variant 必须是 {', '.join(LEARNED_POLICY_NAMES)} 之一，实际: {self.variant}")
        if not (0.0 < self.gamma < 1.0):
            v.append(f"gamma 必须位于 (0, 1)，实际: {self.gamma}")
        if not (0.0 < self.ema_beta <= 1.0):
            v.append(f"ema_beta 必须位于 (0, 1]，实际: {self.ema_beta}")
        if not (0.0 < self.epsilon_end <= self.epsilon_start <= 1.0):
            v.append(f"需要 0 < epsilon_end ≤ epsilon_start ≤ 1，实际: {self.epsilon_end}, {self.epsilon_start}")
        for name in ("epsilon_decay_span", "replay_capacity", "batch_size", "learn_every",
                     "validate_every", "normalizer_stride"):
            if getattr(self, name) < 1:
                v.append(f"{name} 必须 ≥ 1，实际: {getattr(self, name)}")
        if self.warmup is not None and self.warmup < 1:
            v.append(f"warmup 必须 ≥ 1，实际: {self.warmup}")
        if self.total_experiences < 0:
            v.append(f"total_experiences 必须 ≥ 0，实际: {self.total_experiences}")
        if not self.learning_rate > 0:
            v.append(f"learning_rate 必须为正，实际: {self.learning_rate}")
        if not (0.0 < self.rmsprop_rho < 1.0):
            v.append(f"rmsprop_rho 必须位于 (0, 1)，实际: {self.rmsprop_rho}")
        if not (0.0 <= self.eval_initial_f <= 1.0):
            v.append(f"eval_initial_f 必须位于 [0, 1]，实际: {self.eval_initial_f}")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            v.append(f"early_stop_patience 必须 ≥ 1，实际: {self.early_stop_patience}")
        if not self.mlr_sigma > 0:
            v.append(f"mlr_sigma 必须为正，实际: {self.mlr_sigma}")
        return v

    @property
    def effective_warmup(self) -> int:
        return self.warmup if self.warmup is not None else 10 * self.batch_size

    @property
    def is_end_to_end(self) -> bool:
        return self.variant == "rl-cnn"

    @property
    def metric(self) -> Optional[MetricKind]:
        return None if self.is_end_to_end else MetricKind(self.variant[3:], self.mlr_sigma)

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        """全尺度回放容量与衰减跨度缩小 20 倍的桌面配置"""
        settings = dict(DESK_SCALE_SETTINGS)
        settings.update(overrides)
        return cls(**settings)


# --- 纯函数 ---
def epsilon(t: int, cfg: TrainConfig) -> float:
    """ε(t) = start·(end/start)^(min(t, span)/span)：t=0 时为 start，t ≥ span 时为 end"""
    if t < 0:
        raise DomainError(f"经验计数必须 ≥ 0，实际: {t}")
    frac = min(t, cfg.epsilon_decay_span) / cfg.epsilon_decay_span
    return cfg.epsilon_start * (cfg.epsilon_end / cfg.epsilon_start) ** frac


def select_action(q_values, eps: float, rng: np.random.Generator) -> int:
    """ε-greedy：以概率 ε 均匀随机选动作，否则取 argmax (并列规则同策略模块)"""
    if rng.random() < eps:
        return int(rng.integers(len(ACTIONS)))
    return greedy_action(q_values)


@dataclass
class TransitionBatch:
    states: np.ndarray        # (B, W)
    actions: np.ndarray       # (B,) int
    rewards: np.ndarray       # (B,)
    next_states: np.ndarray   # (B, W)

    def __len__(self) -> int:
        return int(self.actions.shape[0])


def td_target(batch: TransitionBatch, target_params: NetworkParams, gamma: float) -> np.ndarray:
    """y_i = r_i + γ·max_a Q_target(s'_i, a)；任务视为持续任务，不做终止截断"""
    if len(batch) == 0:
        raise ConfigurationError("TD 目标需要非空的批次")
    q_next = QNetwork(target_params).forward(batch.next_states)
    return batch.rewards.astype(np.float64) + gamma * q_next.max(axis=1).astype(np.float64)


def ema_update(target_params: NetworkParams, online_params: NetworkParams, beta: float) -> NetworkParams:
    """θ_target ← β·θ_online + (1−β)·θ_target，原地更新每个参数"""
    check_aligned(target_params, online_params)
    for name, online in online_params.items():
        target = target_params[name]
        target[...] = beta * online + (1.0 - beta) * target
    return target_params


def taken_action_loss(q: np.ndarray, actions: np.ndarray, targets: np.ndarray):
    """
    只对所选动作的 Q 值计算 Huber 损失。

    Returns:
        (loss, dq)，dq 中未选动作的上游梯度恒为 0
    """
    rows = np.arange(q.shape[0])
    pred = q[rows, actions]
    targets = targets.astype(pred.dtype)
    loss = huber_loss(pred, targets)
    dq = np.zeros_like(q)
    dq[rows, actions] = huber_loss_grad(pred, targets)
    return loss, dq


# --- 经验回放 ---
class ReplayMemory:
    """
    固定容量的环形经验池：严格 FIFO 淘汰，在当前内容上均匀采样。
    """

    def __init__(self, capacity: int, state_width: int, dtype=np.float32):
        if capacity < 1:
            raise ConfigurationError(f"回放容量必须 ≥ 1，实际: {capacity}")
        self.capacity = capacity
        self.state_width = state_width
        self.states = np.zeros((capacity, state_width), dtype=dtype)
        self.next_states = np.zeros((capacity, state_width), dtype=dtype)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float64)
        self.insertions = 0

    def __len__(self) -> int:
        return min(self.insertions, self.capacity)

    def push(self, state, action: int, reward: float, next_state) -> None:
        if not (-1.0 <= reward <= 0.0):
            raise DomainError(f"奖励必须位于 [−1, 0]，实际: {reward}")
        if not (0 <= action < len(ACTIONS)):
            raise DomainError(f"动作索引必须是 0/1/2，实际: {action}")
        slot = self.insertions % self.capacity
        self.states[slot] = state
        self.next_states[slot] = next_state
        self.actions[slot] = action
        self.rewards[slot] = reward
        self.insertions += 1

    def ordered_slots(self) -> np.ndarray:
        """当前内容的槽位，按插入顺序从旧到新"""
        if self.insertions <= self.capacity:
            return np.arange(self.insertions)
        start = self.insertions % self.capacity
        return (start + np.arange(self.capacity)) % self.capacity

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if len(self) == 0:
            raise UsageError("经验池为空，无法采样")
        return rng.integers(0, len(self), size=batch_size)

    def gather(self, slots: np.ndarray) -> TransitionBatch:
        return TransitionBatch(self.states[slots], self.actions[slots], self.rewards[slots],
                               self.next_states[slots])

    def sample(self, batch_size: int, rng: np.random.Generator) -> TransitionBatch:
        return self.gather(self.sample_indices(batch_size, rng))


class PatchStore:
    """端到端变体的补丁环形缓存，补丁编号全局递增"""

    def __init__(self, capacity: int, patch_size: int = DEFAULT_PATCH_SIZE):
        self.capacity = capacity
        self.patches = np.zeros((capacity, patch_size, patch_size), dtype=np.float32)
        self.next_id = 0

    def add(self, patch: np.ndarray) -> int:
        pid = self.next_id
        self.patches[pid % self.capacity] = patch
        self.next_id += 1
        return pid

    def get(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < max(0, self.next_id - self.capacity) or ids.max() >= self.next_id):
            raise UsageError(f"补丁编号越出缓存窗口: [{ids.min()}, {ids.max()}]，下一个编号 {self.next_id}")
        return self.patches[ids % self.capacity]


def patch_store_capacity(replay_capacity: int, min_scan_length: int, history: int = HISTORY_LENGTH) -> int:
    """
    保证回放中任意状态引用的补丁仍在缓存中：每个 episode 比转移多一个补丁，
    最旧的转移还会回看 N−1 个补丁。
    """
    episodes = math.ceil(replay_capacity / min_scan_length) + 1
    return replay_capacity + episodes + history + 1


def fit_normalizer(scans: Sequence[Scan], kind: MetricKind, stride: int = 10) -> MetricNormalizer:
    """在训练扫描的清晰中心补丁 (f = f*) 上拟合指标归一化尺度"""
    def patches():
        for scan in scans:
            f_star = optimal_focus(scan)
            for t in range(0, len(scan), stride):
                yield observe_patch(scan, t, float(f_star[t]))

    normalizer = MetricNormalizer.fit(kind, patches())
    logger.info("%s 归一化尺度 (95 分位数) = %.6g", kind.name, normalizer.scale)
    return normalizer


# --- 训练 ---
@dataclass
class TrainResult:
    params: NetworkParams
    best_params: NetworkParams
    metadata: Dict
    log: pd.DataFrame
    best_val_mae: float = float("nan")
    experiences: int = 0
    episodes: int = 0
    status: Dict = field(default_factory=dict)


class DQNTrainer:
    """
    DQN 训练器：参数、优化器状态与经验池只由学习循环写入。

    验证在参数快照上运行，可以并行。
    """

    def __init__(self, cfg: TrainConfig, train_scans: Sequence[Scan],
                 val_scans: Optional[Sequence[Scan]] = None, out_dir: Optional[str] = None,
                 workers: int = 1, resume: Optional[str] = None):
        if not train_scans:
            raise ConfigurationError("训练扫描集为空")
        for scan in list(train_scans) + list(val_scans or []):
            optimal_focus(scan)
            if min(scan.height, scan.width) < DEFAULT_PATCH_SIZE:
                raise ConfigurationError(
                    f"扫描 {scan.scan_id} 的帧 ({scan.width}×{scan.height}) 小于 {DEFAULT_PATCH_SIZE} 像素补丁")
        self.cfg = cfg
        self.train_scans = list(train_scans)
        self.val_scans = list(val_scans or [])
        self.out_dir = out_dir
        self.workers = workers

        self.rng = np.random.default_rng([cfg.seed, 0])
        self.normalizer: Optional[MetricNormalizer] = None
        self.params = self._initial_params(resume)
        self.target = copy_params(self.params)
        self.opt = init_optim_state(self.params, cfg.learning_rate, cfg.rmsprop_rho, cfg.rmsprop_eps)
        self.best_params = copy_params(self.params)

        if cfg.is_end_to_end:
            min_len = min(len(s) for s in self.train_scans)
            self.memory = ReplayMemory(cfg.replay_capacity, 2 * HISTORY_LENGTH, dtype=np.float64)
            self.patch_store: Optional[PatchStore] = PatchStore(
                patch_store_capacity(cfg.replay_capacity, min_len))
        else:
            self.memory = ReplayMemory(cfg.replay_capacity, SCALAR_STATE_WIDTH, dtype=np.float32)
            self.patch_store = None
            if self.normalizer is None:
                self.normalizer = fit_normalizer(self.train_scans, cfg.metric, cfg.normalizer_stride)

        self.monitor = TrainingMonitor(patience=cfg.early_stop_patience)
        self.experiences = 0
        self.episodes = 0
        self.learn_steps = 0
        self._last_loss = float("nan")

    # --- 参数 ---
    def _expected_shapes(self):
        return expected_checkpoint_shapes(self.cfg.variant)

    def _initial_params(self, resume: Optional[str]) -> NetworkParams:
        if resume is None:
            init_rng = np.random.default_rng([self.cfg.seed, 1])
            if self.cfg.is_end_to_end:
                return init_params({**encoder_shapes(), **qnet_shapes(E2E_STATE_WIDTH)}, init_rng)
            return init_params(qnet_shapes(SCALAR_STATE_WIDTH), init_rng)

        params, metadata = load_checkpoint(resume, self._expected_shapes())
        if metadata.get("variant") != self.cfg.variant:
            raise ArchitectureMismatchError(
                f"续训检查点 {resume} 的变体为 {metadata.get('variant')!r}，当前训练变体为 {self.cfg.variant}")
        if "normalizer_scale" in metadata and not self.cfg.is_end_to_end:
            self.normalizer = MetricNormalizer(self.cfg.metric, float(metadata["normalizer_scale"]))
        logger.info("从 %s 续训 (优化器状态重新开始)", resume)
        return params

    def metadata(self) -> Dict:
        meta = {
            "variant": self.cfg.variant,
            "history_length": HISTORY_LENGTH,
            "state_width": E2E_STATE_WIDTH if self.cfg.is_end_to_end else SCALAR_STATE_WIDTH,
            "experiences": self.experiences,
            "episodes": self.episodes,
            "learn_steps": self.learn_steps,
            "seed": self.cfg.seed,
            "best_val_mae": None if math.isinf(self.monitor.best_val_mae) else self.monitor.best_val_mae,
        }
        if not self.cfg.is_end_to_end:
            meta["metric"] = self.cfg.metric.name
            meta["mlr_sigma"] = self.cfg.mlr_sigma
            meta["normalizer_scale"] = self.normalizer.scale
        return meta

    # --- 观测 ---
    def _new_episode_state(self, f0: float):
        if self.cfg.is_end_to_end:
            return {"history": PolicyHistory(obs_width=ENCODING_WIDTH, initial_f=f0),
                    "ids": np.full(HISTORY_LENGTH, -1, dtype=np.int64)}
        return {"history": PolicyHistory(obs_width=1, initial_f=f0)}

    def _observe(self, episode_state: Dict, scan: Scan, t: int, f: float) -> np.ndarray:
        """观察第 t 帧、焦度 f 的补丁，压入历史，返回写入经验池的状态行"""
        patch = observe_patch(scan, t, f)
        history: PolicyHistory = episode_state["history"]
        if not self.cfg.is_end_to_end:
            history.push(evaluate_metric(self.cfg.metric, patch), f)
            return assemble_state(history, self.normalizer)
        ids = episode_state["ids"]
        ids[1:] = ids[:-1]
        ids[0] = self.patch_store.add(patch)
        history.push(cnn_encode(self.params, patch), f)
        return np.concatenate([ids.astype(np.float64), history.focus])

    def _acting_state(self, episode_state: Dict) -> np.ndarray:
        history = episode_state["history"]
        return assemble_state(history, self.normalizer)

    # --- 学习 ---
    def _dense_states(self, params: NetworkParams, rows: np.ndarray, encoder: Optional[ConvEncoder] = None):
        """把 [补丁编号, 焦度] 行展开为 72 维状态；缺失槽位的编码为 0"""
        batch = rows.shape[0]
        ids = rows[:, :HISTORY_LENGTH].astype(np.int64)
        focus = rows[:, HISTORY_LENGTH:]
        valid = ids >= 0
        encoder = encoder or ConvEncoder(params)
        z = encoder.forward(self.patch_store.get(ids[valid]))
        enc = np.zeros((batch, HISTORY_LENGTH, ENCODING_WIDTH), dtype=z.dtype)
        enc[valid] = z
        dense = np.concatenate([enc.reshape(batch, -1), focus.astype(z.dtype)], axis=1)
        return dense, valid

    def _learn_step(self) -> float:
        cfg = self.cfg
        batch = self.memory.sample(cfg.batch_size, self.rng)
        if cfg.is_end_to_end:
            next_dense, _ = self._dense_states(self.target, batch.next_states)
            targets = td_target(replace(batch, next_states=next_dense), self.target, cfg.gamma)
            encoder = ConvEncoder(self.params)
            states, valid = self._dense_states(self.params, batch.states, encoder)
        else:
            targets = td_target(batch, self.target, cfg.gamma)
            states = batch.states

        qnet = QNetwork(self.params)
        q = qnet.forward(states)
        bad = non_finite_activations(qnet)
        if cfg.is_end_to_end:
            bad = [f"encoder.{name}" for name in non_finite_activations(encoder)] + bad
        if not np.all(np.isfinite(targets)):
            bad.append("td_target")
        if bad:
            raise TrainingDivergedError(
                f"第 {self.experiences} 条经验处前向传播出现非有限激活: {', '.join(bad)}",
                self._diagnostics(float("nan"), {}, bad))
        loss, dq = taken_action_loss(q, batch.actions, targets)
        grads, dstates = qnet.backward(dq)
        if cfg.is_end_to_end:
            n_enc = HISTORY_LENGTH * ENCODING_WIDTH
            dz = dstates[:, :n_enc].reshape(-1, HISTORY_LENGTH, ENCODING_WIDTH)[valid]
            enc_grads, _ = encoder.backward(dz)
            grads.update(enc_grads)
        grads = {name: grads[name] for name in self.params}

        rmsprop_step(self.params, grads, self.opt)
        ema_update(self.target, self.params, cfg.ema_beta)
        self.learn_steps += 1
        if not (math.isfinite(loss) and all_finite(self.params)):
            raise TrainingDivergedError(
                f"第 {self.experiences} 条经验处出现非有限损失或参数 (loss={loss})",
                self._diagnostics(loss, grads))
        return loss

    def _diagnostics(self, loss: float, grads: NetworkParams, activations: Sequence[str] = ()) -> Dict:
        return {
            "experiences": self.experiences,
            "episodes": self.episodes,
            "learn_steps": self.learn_steps,
            "loss": None if not math.isfinite(loss) else loss,
            "epsilon": epsilon(self.experiences, self.cfg),
            "non_finite_params": [k for k, v in self.params.items() if not np.all(np.isfinite(v))],
            "non_finite_grads": [k for k, v in grads.items() if not np.all(np.isfinite(v))],
            "non_finite_activations": list(activations),
            "grad_abs_max": {k: float(np.nanmax(np.abs(v))) if v.size else 0.0 for k, v in grads.items()},
            "config": asdict(self.cfg),
        }

    # --- 循环 ---
    def _run_episode(self, scan: Scan):
        cfg = self.cfg
        f_star = optimal_focus(scan)
        f = float(self.rng.uniform(0.0, 1.0))
        episode_state = self._new_episode_state(f)
        row = self._observe(episode_state, scan, 0, f)
        losses, rewards = [], []
        T = len(scan)
        for t in range(T):
            eps = epsilon(self.experiences, cfg)
            q = QNetwork(self.params).forward(self._acting_state(episode_state)[None, :])[0]
            action = select_action(q, eps, self.rng)
            f_next = apply_action(f, action)
            reward = -abs(float(f_star[t]) - f_next)
            # 最后一帧的下一状态重新观察同一帧
            next_row = self._observe(episode_state, scan, min(t + 1, T - 1), f_next)
            self.memory.push(row, action, reward, next_row)
            self.experiences += 1
            rewards.append(reward)

            if len(self.memory) >= cfg.effective_warmup and self.experiences % cfg.learn_every == 0:
                losses.append(self._learn_step())
            row, f = next_row, f_next
            if self.experiences >= cfg.total_experiences:
                break
        return losses, rewards

    def _validate(self) -> float:
        from ..utils.bench import evaluate_policy

        policy = checkpoint_policy(copy_params(self.params), self.metadata())
        report = evaluate_policy(policy, self.val_scans, initial_f=self.cfg.eval_initial_f,
                                 workers=self.workers)
        return report.mae

    def _path(self, name: str) -> Optional[str]:
        return None if self.out_dir is None else os.path.join(self.out_dir, name)

    def _save(self, name: str, params: NetworkParams) -> None:
        path = self._path(name)
        if path is not None:
            save_checkpoint(path, params, self.metadata())
            logger.debug("写出检查点 %s", path)

    def _append_log(self, row: Dict) -> None:
        path = self._path(TRAIN_LOG_NAME)
        if path is not None:
            pd.DataFrame([row], columns=LOG_COLUMNS).to_csv(path, mode="a", header=False, index=False)

    def _maybe_validate(self, force: bool = False) -> Optional[float]:
        if not self.val_scans:
            return None
        if not force and self.episodes % self.cfg.validate_every != 0:
            return None
        val_mae = self._validate()
        if self.monitor.record_validation(self.episodes, val_mae):
            self.best_params = copy_params(self.params)
            self._save(BEST_CKPT_NAME, self.best_params)
            logger.info("episode %d: 验证 MAE %.4f (新的最佳)", self.episodes, val_mae)
        else:
            logger.info("episode %d: 验证 MAE %.4f (最佳 %.4f)", self.episodes, val_mae,
                        self.monitor.best_val_mae)
        return val_mae

    def run(self) -> TrainResult:
        cfg = self.cfg
        if self.out_dir is not None:
            os.makedirs(self.out_dir, exist_ok=True)
            pd.DataFrame(columns=LOG_COLUMNS).to_csv(self._path(TRAIN_LOG_NAME), index=False)
        self.monitor.start_monitoring()
        order: List[int] = []
        last_validated = -1

        with threadpool_limits(limits=1, user_api="blas"):
            try:
                while self.experiences < cfg.total_experiences:
                    if not order:
                        order = list(self.rng.permutation(len(self.train_scans)))
                    scan = self.train_scans[order.pop(0)]
                    losses, rewards = self._run_episode(scan)
                    self.episodes += 1
                    val_mae = self._maybe_validate()
                    if val_mae is not None:
                        last_validated = self.episodes
                    row = self.monitor.record_episode(self.episodes, self.experiences,
                                                      epsilon(self.experiences, cfg), losses, rewards, val_mae)
                    self._append_log(row)
                    logger.debug("episode %d (%s): 回报 %.3f，损失 %.4g，ε %.3f", self.episodes,
                                 scan.scan_id, row["mean_return"], row["mean_loss"], row["epsilon"])
                    if self.monitor.should_stop_early():
                        logger.info("连续 %d 轮验证无改进，提前停止", self.monitor.no_improvement_count)
                        break
                if self.episodes > 0 and last_validated != self.episodes:
                    self._maybe_validate(force=True)
            except TrainingDivergedError as e:
                path = self._path(DIAGNOSTICS_NAME)
                if path is not None:
                    with open(path, "w", encoding="utf-8") as fh:
                        json.dump(e.diagnostics, fh, indent=2, ensure_ascii=False)
                    logger.error("训练发散，诊断信息写入 %s", path)
                raise

        if self.monitor.best_episode is None:
            self.best_params = copy_params(self.params)
            self._save(BEST_CKPT_NAME, self.best_params)
        self._save(LAST_CKPT_NAME, self.params)
        status = self.monitor.get_convergence_status()
        logger.info("训练结束: %d 个 episode，%d 条经验，最佳验证 MAE %s", self.episodes,
                    self.experiences, status["best_val_mae"])
        for tip in self.monitor.generate_recommendations():
            logger.info("建议: %s", tip)
        return TrainResult(params=self.params, best_params=self.best_params, metadata=self.metadata(),
                           log=self.monitor.to_dataframe(),
                           best_val_mae=self.monitor.best_val_mae, experiences=self.experiences,
                           episodes=self.episodes, status=status)


def train(train_scans: Sequence[Scan], cfg: TrainConfig, val_scans: Optional[Sequence[Scan]] = None,
          out_dir: Optional[str] = None, workers: int = 1, resume: Optional[str] = None) -> TrainResult:
    """
    训练一个学习型自动对焦策略。

    Args:
        train_scans: 训练扫描 (每个扫描是一个 episode)
        cfg: 训练配置
        val_scans: 验证扫描；为空时 best.ckpt 即最终参数
        out_dir: 输出目录 (best.ckpt, last.ckpt, train_log.csv)；None 时不写文件
        workers: 验证时的并行线程数
        resume: 续训检查点路径

    Returns:
        TrainResult

    Raises:
        ConfigurationError: 扫描集为空或扫描缺少 f_star
        ArchitectureMismatchError: 续训检查点结构与变体不符
        TrainingDivergedError: 出现非有限损失或参数 (out_dir 下写出 diagnostics.json)
    """
    return DQNTrainer(cfg, train_scans, val_scans, out_dir, workers, resume).run()
