# 对比度焦点指标
"""
标量焦点指标 φ(I)：平均梯度幅值 (MGM) 与平均局部比值 (MLR)。

两个指标都在整个输入补丁上计算，不留内部边距。
"""
from dataclasses import dataclass

import numpy as np

from ..utils.errors import ConfigurationError
from .image_core import GrayImage, as_gray_image, gaussian_blur, sobel_gradients

DEFAULT_MLR_SIGMA = 4.0


@dataclass(frozen=True)
class MetricKind:
    """焦点指标种类：'mgm' 或 'mlr'，后者带高斯核 σ"""
    name: str
    mlr_sigma: float = DEFAULT_MLR_SIGMA

    def __post_init__(self):
        if self.name not in ("mgm", "mlr"):
            raise ConfigurationError(f"未知的焦点指标: {self.name}，可选: mgm, mlr")
        if not self.mlr_sigma > 0:
            raise ConfigurationError(f"mlr_sigma 必须为正，实际: {self.mlr_sigma}")

    @classmethod
    def parse(cls, name: str, mlr_sigma: float = DEFAULT_MLR_SIGMA) -> "MetricKind":
        return cls(name.lower(), mlr_sigma)


MGM = MetricKind("mgm")
MLR = MetricKind("mlr")


def mgm(img: GrayImage) -> float:
    """平均梯度幅值：所有像素 Sobel 梯度欧氏范数的均值"""
    gx, gy = sobel_gradients(img)
    return float(np.mean(np.hypot(gx, gy)))


def mlr(img: GrayImage, sigma: float = DEFAULT_MLR_SIGMA) -> float:
    """
    平均局部比值：max((G_σ(I)+1)/(I+1), (I+1)/(G_σ(I)+1)) 的像素均值。

    +1 偏移作用在 [0, 1] 强度上，结果恒 ≥ 1。
    """
    img = as_gray_image(img)
    smooth = gaussian_blur(img, sigma) + 1.0
    shifted = img + 1.0
    ratio = np.maximum(smooth / shifted, shifted / smooth)
    return float(np.mean(ratio))


def evaluate_metric(kind: MetricKind, patch: GrayImage) -> float:
    """按指标种类分派到 mgm 或 mlr"""
    if kind.name == "mgm":
        return mgm(patch)
    return mlr(patch, kind.mlr_sigma)
