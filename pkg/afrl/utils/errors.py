# 统一异常定义
"""
afrl 的异常层次。

所有异常都继承自 AfrlError，便于命令行入口统一捕获；
同时继承对应的内置异常类型 (ValueError / IndexError / RuntimeError / IOError)，
调用方可以沿用习惯的 except 写法。
"""
from typing import Any, Dict, Optional


class AfrlError(Exception):
    """afrl 所有异常的基类"""


class ConfigurationError(AfrlError, ValueError):
    """配置无效：未知键、越界参数、策略与扫描不兼容等"""


class DomainError(AfrlError, ValueError):
    """数值定义域错误，例如焦度 f 不在 [0, 1] 内"""


class PreconditionError(AfrlError, ValueError):
    """调用前置条件不满足，例如裁剪矩形越出图像"""


class ShapeError(AfrlError, ValueError):
    """张量形状或宽度不匹配"""


class UsageError(AfrlError, RuntimeError):
    """调用顺序错误，例如在 forward 之前调用 backward"""


class FrameIndexError(AfrlError, IndexError):
    """帧索引越界"""


class ScanLoadError(AfrlError, IOError):
    """扫描目录加载失败"""


class ManifestMissingError(ScanLoadError):
    """扫描目录缺少 manifest.json"""


class FrameCountError(ScanLoadError):
    """manifest 声明的帧数与目录中的图像文件不一致"""


class ChecksumError(ScanLoadError):
    """图像文件 CRC32 校验失败"""


class FormatVersionError(ScanLoadError):
    """不支持的 format_version"""


class CheckpointError(AfrlError, IOError):
    """检查点读写失败"""


class CheckpointCorruptError(CheckpointError):
    """检查点头部损坏、长度不符或 CRC32 校验失败"""


class ArchitectureMismatchError(CheckpointError):
    """检查点中的网络结构与期望结构不一致"""


class TrainingDivergedError(AfrlError, RuntimeError):
    """训练过程中出现非有限的损失或参数"""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
