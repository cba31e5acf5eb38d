# 单通道图像与卷积核
"""
单通道灰度图像的基础运算：Sobel 梯度、可分离高斯模糊、补丁裁剪与参数化离焦渲染。

图像统一表示为二维 numpy 数组 (height, width)，强度为实数，名义范围 [0, 1]。
边界统一采用 reflect-101 (scipy 的 ``mode="mirror"``，即 ``d c b | a b c d | c b a``)。
"""
import math
import os
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from ..utils.errors import DomainError, PreconditionError, ShapeError

# GrayImage 即二维浮点数组；as_gray_image 负责校验不变量
GrayImage = np.ndarray

DEFAULT_PATCH_SIZE = 32
BOUNDARY_MODE = "mirror"  # reflect-101

SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


def as_gray_image(img, dtype=np.float64) -> GrayImage:
    """
    校验并转换为 GrayImage。

    Args:
        img: 任意可转换为二维数组的对象
        dtype: 目标浮点类型

    Returns:
        二维浮点数组

    Raises:
        ShapeError: 不是二维数组，或宽高为 0
        DomainError: 含有非有限值
    """
    arr = np.asarray(img, dtype=dtype)
    if arr.ndim != 2:
        raise ShapeError(f"灰度图像必须是二维数组，实际维度: {arr.ndim}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"灰度图像宽高必须 ≥ 1，实际形状: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError("灰度图像包含非有限强度值")
    return arr


@dataclass(frozen=True)
class DefocusModel:
    """高斯离焦模型：σ = sigma0 · |f_star − f|"""
    sigma0: float
    f_star: float

    def __post_init__(self):
        if not (self.sigma0 > 0 and math.isfinite(self.sigma0)):
            raise DomainError(f"sigma0 必须为正的有限值，实际: {self.sigma0}")
        if not (0.0 <= self.f_star <= 1.0):
            raise DomainError(f"f_star 必须位于 [0, 1]，实际: {self.f_star}")

    def sigma_at(self, f: float) -> float:
        return self.sigma0 * abs(self.f_star - f)


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """
    截断半径 ceil(3σ) 并归一化的一维高斯核。

    σ 很小时离散核退化为近似脉冲，但仍然归一化，保证离焦渲染对 f 连续。
    """
    radius = int(math.ceil(3.0 * sigma))
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    weights = np.exp(-(k * k) / (2.0 * sigma * sigma))
    return weights / weights.sum()


def sobel_gradients(img: GrayImage) -> Tuple[GrayImage, GrayImage]:
    """
    标准 3×3 Sobel 响应 (I_x, I_y)，与输入同尺寸。

    使用相关 (correlate) 而非卷积，使得强度向右增大时 I_x 为正。
    """
    img = as_gray_image(img)
    gx = ndimage.correlate(img, SOBEL_X, mode=BOUNDARY_MODE)
    gy = ndimage.correlate(img, SOBEL_Y, mode=BOUNDARY_MODE)
    return gx, gy


def gaussian_blur(img: GrayImage, sigma: float) -> GrayImage:
    """
    可分离高斯模糊。

    Args:
        img: 输入图像
        sigma: 标准差 (像素)，σ = 0 时原样返回

    Returns:
        模糊后的图像

    Raises:
        DomainError: sigma 为负或非有限
    """
    if not (math.isfinite(sigma) and sigma >= 0):
        raise DomainError(f"sigma 必须是非负有限值，实际: {sigma}")
    img = as_gray_image(img)
    if sigma == 0:
        return img
    kernel = gaussian_kernel_1d(sigma)
    out = ndimage.correlate1d(img, kernel, axis=0, mode=BOUNDARY_MODE)
    return ndimage.correlate1d(out, kernel, axis=1, mode=BOUNDARY_MODE)


def patch_origin(shape: Tuple[int, int], cx: Optional[int], cy: Optional[int],
                 size: int) -> Tuple[int, int]:
    """
    计算以 (cx, cy) 为中心、边长 size 的补丁左上角，并检查是否越界。

    Returns:
        (x0, y0)

    Raises:
        PreconditionError: 补丁越出图像，错误信息指明越界的边
    """
    height, width = shape
    if cx is None:
        cx = width // 2
    if cy is None:
        cy = height // 2
    x0 = int(cx) - size // 2
    y0 = int(cy) - size // 2
    if size < 1:
        raise PreconditionError(f"补丁尺寸必须 ≥ 1，实际: {size}")
    if x0 < 0:
        raise PreconditionError(f"补丁越出左边界 (left): x0={x0}")
    if y0 < 0:
        raise PreconditionError(f"补丁越出上边界 (top): y0={y0}")
    if x0 + size > width:
        raise PreconditionError(f"补丁越出右边界 (right): x0+size={x0 + size} > width={width}")
    if y0 + size > height:
        raise PreconditionError(f"补丁越出下边界 (bottom): y0+size={y0 + size} > height={height}")
    return x0, y0


def extract_patch(img: GrayImage, cx: Optional[int] = None, cy: Optional[int] = None,
                  size: int = DEFAULT_PATCH_SIZE) -> GrayImage:
    """
    裁剪 size×size 补丁，默认取图像中心。

    Raises:
        PreconditionError: 补丁矩形不完全位于图像内
    """
    img = as_gray_image(img)
    x0, y0 = patch_origin(img.shape, cx, cy, size)
    return img[y0:y0 + size, x0:x0 + size].copy()


def defocus_render(sharp: GrayImage, f: float, model: DefocusModel) -> GrayImage:
    """
    在焦度 f 下渲染离焦图像：gaussian_blur(sharp, sigma0·|f* − f|)。

    Raises:
        DomainError: f 不在 [0, 1]
    """
    if not (0.0 <= f <= 1.0):
        raise DomainError(f"焦度 f 必须位于 [0, 1]，实际: {f}")
    return gaussian_blur(sharp, model.sigma_at(f))


def defocus_render_patch(sharp: GrayImage, f: float, model: DefocusModel,
                         size: int = DEFAULT_PATCH_SIZE) -> GrayImage:
    """
    只渲染中心补丁：先裁出外扩一个核半径的窗口再模糊。

    当外扩窗口完全位于帧内时，结果与 extract_patch(defocus_render(...)) 逐位相同；
    否则回退到整帧渲染。
    """
    if not (0.0 <= f <= 1.0):
        raise DomainError(f"焦度 f 必须位于 [0, 1]，实际: {f}")
    sharp = as_gray_image(sharp)
    x0, y0 = patch_origin(sharp.shape, None, None, size)
    sigma = model.sigma_at(f)
    if sigma == 0:
        return sharp[y0:y0 + size, x0:x0 + size].copy()
    radius = int(math.ceil(3.0 * sigma))
    height, width = sharp.shape
    if x0 - radius < 0 or y0 - radius < 0 or x0 + size + radius > width or y0 + size + radius > height:
        return extract_patch(gaussian_blur(sharp, sigma), size=size)
    window = sharp[y0 - radius:y0 + size + radius, x0 - radius:x0 + size + radius]
    blurred = gaussian_blur(window, sigma)
    return blurred[radius:radius + size, radius:radius + size].copy()


def is_8bit_lattice(img: GrayImage) -> bool:
    """强度是否恰好落在 k/255 网格上 (PGM 保存可无损往返)"""
    arr = np.asarray(img)
    return bool(np.array_equal(quantize_8bit(arr).astype(arr.dtype), arr))


def quantize_8bit(img: GrayImage) -> GrayImage:
    """把强度量化到 k/255 网格"""
    return np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0) / 255.0


def read_pgm(path: str) -> GrayImage:
    """读取 8 位 PGM (P5)，强度除以 255 归一化到 [0, 1]"""
    with Image.open(path) as im:
        if im.mode != "L":
            raise ShapeError(f"仅支持 8 位单通道 PGM，文件 {os.path.basename(path)} 的模式为 {im.mode}")
        data = np.asarray(im, dtype=np.uint8)
    return data.astype(np.float64) / 255.0


def write_pgm(path: str, img: GrayImage) -> None:
    """写出 8 位 PGM (P5)，maxval 255"""
    arr = as_gray_image(img)
    data = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path, format="PPM")
