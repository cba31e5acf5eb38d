# 运行配置
"""
RunConfig：默认参数字典 ← JSON 配置文件 ← 命令行参数 ← --set key=value。

所有字段在任何工作开始前统一校验，未知键直接拒绝。
"""
import copy
import json
import os
import warnings
from typing import Any, Dict, List, Optional, Tuple

from ..focus_model.scan_sim import WalkConfig
from ..learning.dqn_train import TrainConfig
from ..learning.policies import LEARNED_POLICY_NAMES, POLICY_NAMES
from .errors import ConfigurationError

DEFAULT_PARAMS: Dict[str, Any] = {
    # --- 扫描生成 ---
    'scan_count': 2,                 # 生成的扫描数
    'scan_length': 250,              # 每个扫描的帧数 T
    'crop_size': 128,                # 裁剪矩形边长 (像素)
    'crop_velocity_decay': 0.9,
    'crop_noise_std': 1.5,
    'crop_max_step': 8.0,
    'focus_velocity_decay': 0.9,
    'focus_noise_std': 0.004,
    'focus_max_step': 0.05,
    'focus_initial': None,           # 固定的初始 f* (静态场景)，None 表示随机
    'sigma0_min': 2.0,
    'sigma0_max': 8.0,
    'focal_grid_step': None,         # 设置后 simulate 写出焦点堆栈扫描

    # --- 训练 ---
    'variant': 'rl-mgm',
    'mlr_sigma': 4.0,
    'gamma': 0.99,
    'ema_beta': 0.005,
    'epsilon_start': 1.0,
    'epsilon_end': 0.1,
    'epsilon_decay_span': 2_000_000,
    'replay_capacity': 2_500_000,
    'batch_size': 64,
    'warmup': None,                  # None 表示 10 × batch_size
    'learn_every': 1,
    'total_experiences': 4_000_000,
    'learning_rate': 1e-5,
    'rmsprop_rho': 0.95,
    'rmsprop_eps': 1e-8,
    'validate_every': 25,
    'early_stop_patience': None,
    'normalizer_stride': 10,

    # --- 评估 ---
    'policy': 'fixed',
    'fixed_f0': 0.5,
    'initial_f': 0.5,
    'smoothing_window': 5,
    'bootstrap_iterations': 10_000,

    # --- 运行 ---
    'seed': 0,
    'workers': None,                 # None 表示可用核心数

    # --- 路径 ---
    'sources_dir': None,
    'scans_dir': None,
    'val_dir': None,
    'out_dir': None,
    'ckpt': None,
    'compare': None,
    'compare_ckpt': None,
    'resume': None,
    'corrections': None,
}

_INT_KEYS = ('scan_count', 'scan_length', 'crop_size', 'epsilon_decay_span', 'replay_capacity',
             'batch_size', 'learn_every', 'total_experiences', 'validate_every', 'normalizer_stride',
             'smoothing_window', 'bootstrap_iterations', 'seed')
_OPTIONAL_INT_KEYS = ('warmup', 'early_stop_patience', 'workers')
_FLOAT_KEYS = ('crop_velocity_decay', 'crop_noise_std', 'crop_max_step', 'focus_velocity_decay',
               'focus_noise_std', 'focus_max_step', 'sigma0_min', 'sigma0_max', 'mlr_sigma', 'gamma',
               'ema_beta', 'epsilon_start', 'epsilon_end', 'learning_rate', 'rmsprop_rho', 'rmsprop_eps',
               'fixed_f0', 'initial_f')
_OPTIONAL_FLOAT_KEYS = ('focus_initial', 'focal_grid_step')
_PATH_KEYS = ('sources_dir', 'scans_dir', 'val_dir', 'out_dir', 'ckpt', 'compare_ckpt', 'resume',
              'corrections')


def parse_override(text: str) -> Tuple[str, Any]:
    """
    解析 --set key=value；value 先按 JSON 解析，失败时当作字符串。

    Raises:
        ConfigurationError: 缺少 '='
    """
    if "=" not in text:
        raise ConfigurationError(f"--set 需要 key=value 形式，实际: {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


class RunConfig:
    """
    扁平的运行配置。

    使用方法：
    1. `cfg = RunConfig.from_sources(config_path, flag_overrides, set_overrides)`
    2. `cfg.walk_config()` / `cfg.train_config()` 取得类型化视图
    """

    def __init__(self, params: Optional[Dict[str, Any]] = None):
        self.params = copy.deepcopy(DEFAULT_PARAMS)
        if params:
            unknown = sorted(set(params) - set(DEFAULT_PARAMS))
            if unknown:
                raise ConfigurationError(f"未知的配置键: {', '.join(unknown)}")
            for key, value in params.items():
                self.params[key] = copy.deepcopy(value)
        self._validate_params()

    @classmethod
    def from_sources(cls, config_path: Optional[str] = None, flags: Optional[Dict[str, Any]] = None,
                     overrides: Optional[List[str]] = None,
                     base: Optional[Dict[str, Any]] = None) -> "RunConfig":
        """按 默认值 ← base ← 配置文件 ← 命令行参数 ← --set 的顺序合并"""
        merged: Dict[str, Any] = dict(base or {})
        if config_path is not None:
            merged.update(load_config_file(config_path))
        merged.update({k: v for k, v in (flags or {}).items() if v is not None})
        for text in overrides or []:
            key, value = parse_override(text)
            merged[key] = value
        return cls(merged)

    def __getitem__(self, key: str) -> Any:
        return self.params[key]

    def get(self, key: str, default: Any = None) -> Any:
        return self.params.get(key, default)

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self.params)

    def _validate_params(self) -> None:
        """
        校验全部参数，收集所有违规项后一次性报错。

        Raises:
            ConfigurationError: 列出全部违规项
        """
        p = self.params
        violations: List[str] = []

        for key in _INT_KEYS + _OPTIONAL_INT_KEYS:
            value = p[key]
            if value is None and key in _OPTIONAL_INT_KEYS:
                continue
            if isinstance(value, bool) or not isinstance(value, int):
                violations.append(f"参数 '{key}' 必须是整数，实际: {value!r}")
        for key in _FLOAT_KEYS + _OPTIONAL_FLOAT_KEYS:
            value = p[key]
            if value is None and key in _OPTIONAL_FLOAT_KEYS:
                continue
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                violations.append(f"参数 '{key}' 必须是数值，实际: {value!r}")
        for key in _PATH_KEYS:
            if p[key] is not None and not isinstance(p[key], str):
                violations.append(f"参数 '{key}' 必须是路径字符串，实际: {p[key]!r}")
        if violations:
            raise ConfigurationError("配置无效: " + "; ".join(violations))

        if p['scan_count'] < 1:
            violations.append(f"scan_count 必须 ≥ 1，实际: {p['scan_count']}")
        if p['scan_length'] < 1:
            violations.append(f"scan_length 必须 ≥ 1，实际: {p['scan_length']}")
        if p['policy'] not in POLICY_NAMES:
            violations.append(f"policy 必须是 {', '.join(POLICY_NAMES)} 之一，实际: {p['policy']!r}")
        if p['compare'] is not None and p['compare'] not in POLICY_NAMES:
            violations.append(f"compare 必须是 {', '.join(POLICY_NAMES)} 之一，实际: {p['compare']!r}")
        for key in ('fixed_f0', 'initial_f'):
            if not (0.0 <= p[key] <= 1.0):
                violations.append(f"{key} 必须位于 [0, 1]，实际: {p[key]}")
        step = p['focal_grid_step']
        if step is not None and not (0.0 < step <= 1.0):
            violations.append(f"focal_grid_step 必须位于 (0, 1]，实际: {step}")
        if p['smoothing_window'] < 1:
            violations.append(f"smoothing_window 必须 ≥ 1，实际: {p['smoothing_window']}")
        if p['bootstrap_iterations'] < 1:
            violations.append(f"bootstrap_iterations 必须 ≥ 1，实际: {p['bootstrap_iterations']}")
        if p['workers'] is not None and p['workers'] < 1:
            violations.append(f"workers 必须 ≥ 1，实际: {p['workers']}")

        # 类型化视图自带的校验
        for build in (self.walk_config, self.train_config):
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    build()
            except ConfigurationError as e:
                violations.append(str(e))

        if violations:
            raise ConfigurationError("配置无效: " + "; ".join(violations))

        if p['smoothing_window'] % 2 == 0:
            warnings.warn(f"smoothing_window={p['smoothing_window']} 为偶数，居中滑动平均将偏向后方一帧")
        cores = os.cpu_count() or 1
        if p['workers'] is not None and p['workers'] > cores:
            warnings.warn(f"workers={p['workers']} 超过可用核心数 {cores}")

    def walk_config(self, seed: Optional[int] = None) -> WalkConfig:
        p = self.params
        return WalkConfig(
            crop_velocity_decay=p['crop_velocity_decay'], crop_noise_std=p['crop_noise_std'],
            crop_max_step=p['crop_max_step'], focus_velocity_decay=p['focus_velocity_decay'],
            focus_noise_std=p['focus_noise_std'], focus_max_step=p['focus_max_step'],
            focus_initial=p['focus_initial'], crop_size=p['crop_size'],
            sigma0_range=(p['sigma0_min'], p['sigma0_max']),
            seed=p['seed'] if seed is None else seed,
        )

    def train_config(self) -> TrainConfig:
        p = self.params
        variant = p['variant']
        if variant not in LEARNED_POLICY_NAMES:
            raise ConfigurationError(
                f"训练变体必须是 {', '.join(LEARNED_POLICY_NAMES)} 之一，实际: {variant!r}")
        keys = ('mlr_sigma', 'gamma', 'ema_beta', 'epsilon_start', 'epsilon_end', 'epsilon_decay_span',
                'replay_capacity', 'batch_size', 'warmup', 'learn_every', 'total_experiences',
                'learning_rate', 'rmsprop_rho', 'rmsprop_eps', 'validate_every', 'early_stop_patience',
                'normalizer_stride', 'seed')
        return TrainConfig(variant=variant, eval_initial_f=p['initial_f'], **{k: p[k] for k in keys})

    def resolved_workers(self) -> int:
        return self.params['workers'] or os.cpu_count() or 1


def load_config_file(path: str) -> Dict[str, Any]:
    """读取扁平 JSON 配置文件"""
    if not os.path.isfile(path):
        raise ConfigurationError(f"配置文件不存在: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"配置文件 {path} 不是有效的 JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"配置文件 {path} 必须是扁平的 JSON 对象")
    return data
