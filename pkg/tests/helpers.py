# 测试共用的合成纹理与扫描
import os

import numpy as np
from scipy import ndimage

from afrl.focus_model.image_core import quantize_8bit
from afrl.focus_model.scan_sim import SimulatedScan

RUN_SLOW = os.environ.get("AFRL_RUN_SLOW") == "1"


def make_texture(seed: int, size=(160, 160), smooth: float = 1.2) -> np.ndarray:
    """带轻微平滑的随机纹理，强度位于 8 位网格上"""
    rng = np.random.default_rng(seed)
    noise = ndimage.gaussian_filter(rng.random(size), smooth)
    noise = (noise - noise.min()) / (noise.max() - noise.min())
    return quantize_8bit(noise)


def make_static_scan(texture: np.ndarray, f_star: float, T: int, sigma0: float = 5.0,
                     crop: int = 64, scan_id: str = "static") -> SimulatedScan:
    """静态场景：中心裁剪不动，f* 恒定"""
    h, w = texture.shape
    y0, x0 = (h - crop) // 2, (w - crop) // 2
    frame = texture[y0:y0 + crop, x0:x0 + crop]
    frames = np.repeat(frame[None], T, axis=0)
    return SimulatedScan(frames=frames, f_star=np.full(T, f_star), sigma0=sigma0, scan_id=scan_id)
