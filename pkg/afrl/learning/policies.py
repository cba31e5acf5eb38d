# 自动对焦策略
"""
自动对焦策略阶梯：固定焦度、爬山法、学习型标量指标策略、端到端 CNN 策略，
以及学习型策略共用的状态历史组装。

所有策略遵循同一个闭环：reset(f0) 后，每帧用当前焦度下观察到的中心补丁调用
step(patch)，返回下一帧的焦度 f_{t+1} ∈ [0, 1]。
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from ..focus_model.focus_metrics import MetricKind, evaluate_metric
from ..focus_model.image_core import GrayImage
from ..utils.errors import ConfigurationError, DomainError, ShapeError, UsageError
from .neural import (ENCODING_WIDTH, NetworkParams, encoder_shapes, load_checkpoint,
                     mlp_forward, cnn_encode, qnet_shapes)

logger = logging.getLogger(__name__)

ACTION_STEP = 0.05
ACTIONS = np.array([-ACTION_STEP, 0.0, ACTION_STEP])
# argmax 并列时的优先顺序：先 0 动作，再 −h，最后 +h
TIE_PREFERENCE = (1, 0, 2)
HISTORY_LENGTH = 8
SCALAR_STATE_WIDTH = 2 * HISTORY_LENGTH
E2E_STATE_WIDTH = HISTORY_LENGTH * ENCODING_WIDTH + HISTORY_LENGTH
NORMALIZER_PERCENTILE = 95.0
DEFAULT_FIXED_FOCUS = 0.5

POLICY_NAMES = ("fixed", "hc-mgm", "hc-mlr", "rl-mgm", "rl-mlr", "rl-cnn")
LEARNED_POLICY_NAMES = ("rl-mgm", "rl-mlr", "rl-cnn")


def clamp_focus(f: float) -> float:
    return min(1.0, max(0.0, float(f)))


def greedy_action(q_values) -> int:
    """
    取 Q 值最大的动作索引，并列时按 TIE_PREFERENCE 打破。

    Raises:
        ShapeError: 不是 3 个 Q 值
        DomainError: Q 值含非有限数
    """
    q = np.asarray(q_values)
    if q.shape != (len(ACTIONS),):
        raise ShapeError(f"需要 {len(ACTIONS)} 个 Q 值，实际形状: {q.shape}")
    if not np.all(np.isfinite(q)):
        raise DomainError(f"Q 值含非有限数: {q}")
    best = q.max()
    for idx in TIE_PREFERENCE:
        if q[idx] == best:
            return idx
    raise AssertionError("unreachable")


def apply_action(f: float, action: int) -> float:
    """执行动作并截断到 [0, 1]"""
    return clamp_focus(f + ACTIONS[action])


# --- 状态历史 ---
class PolicyHistory:
    """
    最近 N 个 (观测, 焦度) 对，最新的在前。

    不足 N 步时，缺失槽位的观测为 0，焦度为初始焦度。
    观测宽度为 1 (标量指标) 或 8 (编码向量)。
    """

    def __init__(self, obs_width: int = 1, initial_f: float = DEFAULT_FIXED_FOCUS,
                 capacity: int = HISTORY_LENGTH):
        if capacity < 1:
            raise ConfigurationError(f"历史长度必须 ≥ 1，实际: {capacity}")
        self.capacity = capacity
        self.obs_width = obs_width
        self.observations = np.zeros((capacity, obs_width), dtype=np.float64)
        self.focus = np.zeros(capacity, dtype=np.float64)
        self.count = 0
        self.reset(initial_f)

    def reset(self, initial_f: float) -> None:
        if not (0.0 <= initial_f <= 1.0):
            raise DomainError(f"初始焦度必须位于 [0, 1]，实际: {initial_f}")
        self.observations.fill(0.0)
        self.focus.fill(initial_f)
        self.count = 0

    def push(self, observation, f: float) -> None:
        obs = np.asarray(observation, dtype=np.float64).reshape(-1)
        if obs.shape != (self.obs_width,):
            raise ShapeError(f"观测宽度应为 {self.obs_width}，实际: {obs.shape}")
        self.observations[1:] = self.observations[:-1]
        self.focus[1:] = self.focus[:-1]
        self.observations[0] = obs
        self.focus[0] = f
        self.count += 1

    def __len__(self) -> int:
        return min(self.count, self.capacity)


@dataclass(frozen=True)
class MetricNormalizer:
    """标量指标归一化：φ / scale，scale 取训练语料清晰补丁指标的 95 分位数"""
    kind: MetricKind
    scale: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise DomainError(f"归一化尺度必须是正的有限值，实际: {self.scale}")

    def normalize(self, phi):
        return phi / self.scale

    @classmethod
    def fit(cls, kind: MetricKind, patches: Iterable[GrayImage]) -> "MetricNormalizer":
        values = np.array([evaluate_metric(kind, p) for p in patches], dtype=np.float64)
        if values.size == 0:
            raise ConfigurationError("没有可用于拟合归一化尺度的补丁")
        scale = float(np.percentile(values, NORMALIZER_PERCENTILE))
        if not (math.isfinite(scale) and scale > 0):
            logger.warning("%s 指标的 95 分位数为 %r，归一化尺度回退为 1.0", kind.name, scale)
            scale = 1.0
        return cls(kind, scale)


def assemble_state(history: PolicyHistory, normalizer: Optional[MetricNormalizer] = None) -> np.ndarray:
    """
    由历史组装状态向量。

    标量指标：宽度 2N，按 (φ/scale, f) 交错、最新的在前；
    编码向量：宽度 8N + N，先是 N 个编码 (最新的在前)，再是 N 个焦度。
    """
    if history.obs_width == 1:
        phi = history.observations[:, 0]
        state = np.empty(2 * history.capacity, dtype=np.float64)
        state[0::2] = normalizer.normalize(phi) if normalizer is not None else phi
        state[1::2] = history.focus
        return state
    return np.concatenate([history.observations.reshape(-1), history.focus])


# --- 单步规则 ---
@dataclass(frozen=True)
class HillClimberState:
    f_t: float
    f_prev: float
    phi_prev: float = -math.inf
    d_prev: int = 1

    def __post_init__(self):
        if self.d_prev not in (-1, 1):
            raise DomainError(f"d_prev 必须是 ±1，实际: {self.d_prev}")
        if not (0.0 <= self.f_t <= 1.0 and 0.0 <= self.f_prev <= 1.0):
            raise DomainError(f"焦度必须位于 [0, 1]，实际: f_t={self.f_t}, f_prev={self.f_prev}")


def hill_climber_step(state: HillClimberState, phi_t: float,
                      h: float = ACTION_STEP) -> Tuple[float, HillClimberState]:
    """
    爬山法一步：边界内且指标上升时沿原方向走 h，否则反向走 h，然后截断到 [0, 1]。

    方向由实际执行的位移更新；截断导致位移为 0 时方向翻转，d_prev 永不为 0。
    """
    f_t, d = state.f_t, state.d_prev
    if 0.0 < f_t < 1.0 and phi_t > state.phi_prev:
        proposed = f_t + d * h
    else:
        proposed = f_t - d * h
    f_next = clamp_focus(proposed)
    moved = f_next - f_t
    d_next = -d if moved == 0 else (1 if moved > 0 else -1)
    return f_next, HillClimberState(f_t=f_next, f_prev=f_t, phi_prev=float(phi_t), d_prev=d_next)


def learned_policy_step(params: NetworkParams, history: PolicyHistory, f_t: float,
                        normalizer: Optional[MetricNormalizer] = None) -> float:
    """
    学习型策略一步：f_{t+1} = clamp(f_t + A[argmax_a Q(s_t, a)])。

    Raises:
        ShapeError: 网络输入宽度与历史组装出的状态宽度不一致
    """
    q = mlp_forward(params, assemble_state(history, normalizer))
    return apply_action(f_t, greedy_action(q))


def e2e_policy_step(encoder: NetworkParams, qnet: NetworkParams, patch: GrayImage,
                    history: PolicyHistory, f_t: float) -> float:
    """端到端策略一步：只编码新补丁一次，压入历史后按学习型策略选择动作"""
    history.push(cnn_encode(encoder, patch), f_t)
    return learned_policy_step(qnet, history, f_t)


# --- 策略对象 ---
class AutofocusPolicy:
    """策略基类"""
    name = "policy"
    needs_observation = True

    def __init__(self):
        self.f = DEFAULT_FIXED_FOCUS

    def reset(self, f0: float) -> None:
        if not (0.0 <= f0 <= 1.0):
            raise DomainError(f"初始焦度必须位于 [0, 1]，实际: {f0}")
        self.f = float(f0)

    def step(self, patch: Optional[GrayImage]) -> float:
        raise NotImplementedError

    def describe(self) -> Dict:
        return {"name": self.name}


class FixedPolicy(AutofocusPolicy):
    """固定焦度：每帧都返回 f0"""
    name = "fixed"
    needs_observation = False

    def __init__(self, f0: float = DEFAULT_FIXED_FOCUS):
        super().__init__()
        if not (0.0 <= f0 <= 1.0):
            raise DomainError(f"固定焦度必须位于 [0, 1]，实际: {f0}")
        self.f0 = float(f0)
        self.f = self.f0

    def reset(self, f0: float) -> None:
        # 固定策略忽略评估的初始焦度
        self.f = self.f0

    def step(self, patch=None) -> float:
        return self.f0

    def describe(self) -> Dict:
        return {"name": self.name, "f0": self.f0}


class HillClimberPolicy(AutofocusPolicy):
    def __init__(self, metric: MetricKind, h: float = ACTION_STEP):
        super().__init__()
        self.metric = metric
        self.h = h
        self.name = f"hc-{metric.name}"
        self.state = HillClimberState(self.f, self.f)

    def reset(self, f0: float) -> None:
        super().reset(f0)
        self.state = HillClimberState(f_t=self.f, f_prev=self.f)

    def step(self, patch: GrayImage) -> float:
        phi = evaluate_metric(self.metric, patch)
        self.f, self.state = hill_climber_step(self.state, phi, self.h)
        return self.f


class LearnedMetricPolicy(AutofocusPolicy):
    """标量指标 + MLP Q 网络"""

    def __init__(self, qnet: NetworkParams, normalizer: MetricNormalizer):
        super().__init__()
        width = qnet["qnet.fc1.weight"].shape[1]
        if width != SCALAR_STATE_WIDTH:
            raise ShapeError(f"标量指标策略的 Q 网络输入宽度应为 {SCALAR_STATE_WIDTH}，实际: {width}")
        self.qnet = qnet
        self.normalizer = normalizer
        self.metric = normalizer.kind
        self.name = f"rl-{self.metric.name}"
        self.history = PolicyHistory(obs_width=1)

    def reset(self, f0: float) -> None:
        super().reset(f0)
        self.history.reset(self.f)

    def step(self, patch: GrayImage) -> float:
        self.history.push(evaluate_metric(self.metric, patch), self.f)
        self.f = learned_policy_step(self.qnet, self.history, self.f, self.normalizer)
        return self.f

    def describe(self) -> Dict:
        return {"name": self.name, "normalizer_scale": self.normalizer.scale}


class EndToEndPolicy(AutofocusPolicy):
    """CNN 补丁编码 + MLP Q 网络；推理时每帧只编码最新补丁"""
    name = "rl-cnn"

    def __init__(self, encoder: NetworkParams, qnet: NetworkParams):
        super().__init__()
        width = qnet["qnet.fc1.weight"].shape[1]
        if width != E2E_STATE_WIDTH:
            raise ShapeError(f"端到端策略的 Q 网络输入宽度应为 {E2E_STATE_WIDTH}，实际: {width}")
        self.encoder = encoder
        self.qnet = qnet
        self.history = PolicyHistory(obs_width=ENCODING_WIDTH)

    def reset(self, f0: float) -> None:
        super().reset(f0)
        self.history.reset(self.f)

    def step(self, patch: GrayImage) -> float:
        self.f = e2e_policy_step(self.encoder, self.qnet, patch, self.history, self.f)
        return self.f


# --- 工厂 ---
def checkpoint_policy(params: NetworkParams, metadata: Dict) -> AutofocusPolicy:
    """由检查点张量与元数据还原学习型策略"""
    variant = metadata.get("variant")
    qnet = {k: v for k, v in params.items() if k.startswith("qnet.")}
    if variant == "rl-cnn":
        encoder = {k: v for k, v in params.items() if k.startswith("encoder.")}
        return EndToEndPolicy(encoder, qnet)
    if variant in ("rl-mgm", "rl-mlr"):
        kind = MetricKind(variant[3:], float(metadata.get("mlr_sigma", 4.0)))
        return LearnedMetricPolicy(qnet, MetricNormalizer(kind, float(metadata["normalizer_scale"])))
    raise ConfigurationError(f"检查点的策略变体 {variant!r} 未知")


def expected_checkpoint_shapes(variant: str) -> Dict[str, Tuple[int, ...]]:
    if variant == "rl-cnn":
        return {**encoder_shapes(), **qnet_shapes(E2E_STATE_WIDTH)}
    return qnet_shapes(SCALAR_STATE_WIDTH)


def build_policy(name: str, checkpoint: Optional[str] = None,
                 fixed_f0: float = DEFAULT_FIXED_FOCUS, mlr_sigma: float = 4.0) -> AutofocusPolicy:
    """
    按名称构建策略。

    Args:
        name: fixed | hc-mgm | hc-mlr | rl-mgm | rl-mlr | rl-cnn
        checkpoint: 学习型策略必需的检查点路径
        fixed_f0: 固定策略的焦度
        mlr_sigma: 爬山法使用 MLR 时的高斯 σ

    Raises:
        ConfigurationError: 名称未知，或检查点变体与名称不符
        UsageError: 学习型策略缺少检查点
    """
    if name not in POLICY_NAMES:
        raise ConfigurationError(f"未知的策略: {name}，可选: {', '.join(POLICY_NAMES)}")
    if name == "fixed":
        return FixedPolicy(fixed_f0)
    if name.startswith("hc-"):
        return HillClimberPolicy(MetricKind(name[3:], mlr_sigma))
    if checkpoint is None:
        raise UsageError(f"学习型策略 {name} 需要 --ckpt 检查点")
    params, metadata = load_checkpoint(checkpoint, expected_checkpoint_shapes(name))
    if metadata.get("variant") != name:
        raise ConfigurationError(
            f"检查点 {checkpoint} 训练的是 {metadata.get('variant')!r}，与请求的策略 {name} 不符")
    policy = checkpoint_policy(params, metadata)
    logger.info("从 %s 加载策略 %s", checkpoint, name)
    return policy
