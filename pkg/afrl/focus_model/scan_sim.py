# 焦点-时间扫描的构建、存储与回放
"""
焦点-时间扫描 (focal-time scan) 数据集。

两种形式：
- SimulatedScan：清晰帧 + 最优焦度轨迹 f*_t，离焦在回放时按需渲染；
- FocalStackScan：每个位姿在离散焦度网格上预先采集的焦点堆栈。

主要功能：
1. 阻尼速度随机游走 (裁剪矩形游走 + 最优焦度游走)
2. 从视频或单张图像构建模拟扫描
3. 环境步进 env_step / observe_patch
4. 基于 MGM 全局搜索的最优焦度真值 (oracle)
5. 扫描目录的保存与加载 (manifest.json + PGM 帧)
"""
import concurrent.futures
import json
import logging
import os
import re
import warnings
import zlib
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..utils.errors import (AfrlError, ChecksumError, ConfigurationError, DomainError, FormatVersionError,
                            FrameCountError, FrameIndexError, ManifestMissingError, ScanLoadError)
from .focus_metrics import mgm
from .image_core import (DEFAULT_PATCH_SIZE, DefocusModel, GrayImage, as_gray_image,
                         defocus_render, defocus_render_patch, extract_patch, is_8bit_lattice,
                         quantize_8bit, read_pgm, write_pgm)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
MANIFEST_REQUIRED_KEYS = {
    "simulated": ("frames", "width", "height", "sigma0", "f_star"),
    "stack": ("poses", "width", "height", "focal_grid"),
}
IMAGE_FILE_PATTERN = re.compile(r"^(frame_\d{5}|pose_\d{5}_k_\d{3})\.pgm$")
SIGMA0_RANGE = (2.0, 8.0)


@dataclass
class WalkConfig:
    """
    两个随机游走的参数。

    默认值按以下准则标定后冻结：T=250 时焦度逐帧变化 ≤ 0.05，
    且 100 个种子上的平均覆盖范围 ≥ 0.3。
    """
    crop_velocity_decay: float = 0.9
    crop_noise_std: float = 1.5         # 像素/帧
    crop_max_step: float = 8.0          # 像素/帧
    focus_velocity_decay: float = 0.9
    focus_noise_std: float = 0.004      # 焦度/帧
    focus_max_step: float = 0.05        # 焦度/帧
    focus_initial: Optional[float] = None
    crop_size: int = 128
    sigma0_range: Tuple[float, float] = SIGMA0_RANGE
    seed: int = 0

    def __post_init__(self):
        violations = []
        for name in ("crop_velocity_decay", "focus_velocity_decay"):
            value = getattr(self, name)
            if not (0.0 < value < 1.0):
                violations.append(f"{name} 必须位于 (0, 1)，实际: {value}")
        for name in ("crop_noise_std", "focus_noise_std"):
            if getattr(self, name) < 0:
                violations.append(f"{name} 必须 ≥ 0，实际: {getattr(self, name)}")
        for name in ("crop_max_step", "focus_max_step"):
            if not getattr(self, name) > 0:
                violations.append(f"{name} 必须 > 0，实际: {getattr(self, name)}")
        if self.focus_initial is not None and not (0.0 <= self.focus_initial <= 1.0):
            violations.append(f"focus_initial 必须位于 [0, 1]，实际: {self.focus_initial}")
        if self.crop_size < DEFAULT_PATCH_SIZE:
            violations.append(f"crop_size 不能小于补丁尺寸 {DEFAULT_PATCH_SIZE}，实际: {self.crop_size}")
        lo, hi = self.sigma0_range
        if not (SIGMA0_RANGE[0] <= lo <= hi <= SIGMA0_RANGE[1]):
            violations.append(f"sigma0_range 必须是 [2, 8] 内的区间，实际: {self.sigma0_range}")
        if violations:
            raise ConfigurationError("随机游走配置无效: " + "; ".join(violations))


@dataclass(eq=False)
class SimulatedScan:
    """模拟扫描：T 帧清晰裁剪 + 每帧最优焦度"""
    frames: np.ndarray                  # (T, H, W) float32
    f_star: np.ndarray                  # (T,) float64
    sigma0: float
    seed: int = 0
    source_id: str = "source"
    scan_id: str = ""
    crop_origins: Optional[np.ndarray] = None   # (T, 2) int: (x0, y0)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.f_star = np.asarray(self.f_star, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ConfigurationError(f"frames 必须是非空的 (T, H, W) 数组，实际形状: {self.frames.shape}")
        if self.f_star.shape != (self.frames.shape[0],):
            raise ConfigurationError(
                f"f_star 长度 {self.f_star.shape} 与帧数 {self.frames.shape[0]} 不一致")
        if np.any(self.f_star < 0) or np.any(self.f_star > 1):
            raise DomainError("f_star 必须全部位于 [0, 1]")
        if not (SIGMA0_RANGE[0] <= self.sigma0 <= SIGMA0_RANGE[1]):
            raise DomainError(f"sigma0 必须位于 [2, 8]，实际: {self.sigma0}")
        if not self.scan_id:
            self.scan_id = f"{self.source_id}-{self.seed}"

    def __len__(self) -> int:
        return int(self.frames.shape[0])

    @property
    def height(self) -> int:
        return int(self.frames.shape[1])

    @property
    def width(self) -> int:
        return int(self.frames.shape[2])

    def defocus_model(self, t: int) -> DefocusModel:
        return DefocusModel(self.sigma0, float(self.f_star[t]))


@dataclass(eq=False)
class FocalStackScan:
    """焦点堆栈扫描：P 个位姿 × K 个网格焦度的预采集图像"""
    images: np.ndarray                  # (P, K, H, W) float32
    focal_grid: np.ndarray              # (K,) 严格递增
    f_star: Optional[np.ndarray] = None # (P,) 或 None
    seed: int = 0
    source_id: str = "stack"
    scan_id: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.focal_grid = np.asarray(self.focal_grid, dtype=np.float64)
        if self.images.ndim != 4 or self.images.shape[0] < 1:
            raise ConfigurationError(f"images 必须是非空的 (P, K, H, W) 数组，实际形状: {self.images.shape}")
        if self.focal_grid.shape != (self.images.shape[1],):
            raise ConfigurationError(
                f"focal_grid 长度 {self.focal_grid.shape} 与每个位姿的图像数 {self.images.shape[1]} 不一致")
        if np.any(np.diff(self.focal_grid) <= 0):
            raise ConfigurationError("focal_grid 必须严格递增")
        if self.focal_grid[0] < 0 or self.focal_grid[-1] > 1:
            raise DomainError("focal_grid 必须位于 [0, 1]")
        if self.f_star is not None:
            self.f_star = np.asarray(self.f_star, dtype=np.float64)
            if self.f_star.shape != (self.images.shape[0],):
                raise ConfigurationError("f_star 长度必须等于位姿数")
            if np.any(self.f_star < 0) or np.any(self.f_star > 1):
                raise DomainError("f_star 必须全部位于 [0, 1]")
        if not self.scan_id:
            self.scan_id = f"{self.source_id}-{self.seed}"

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def height(self) -> int:
        return int(self.images.shape[2])

    @property
    def width(self) -> int:
        return int(self.images.shape[3])

    def grid_index(self, f: float) -> int:
        """最近的网格焦度索引，距离相等时取较小索引"""
        return int(np.argmin(np.abs(self.focal_grid - f)))


Scan = Union[SimulatedScan, FocalStackScan]


# --- 随机游走 ---
def walk_step(position: np.ndarray, velocity: np.ndarray, decay: float, noise_std: float,
              lower, upper, rng: np.random.Generator,
              max_step: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    阻尼速度随机游走的一步，两个游走共用。

    velocity ← decay·velocity + N(0, noise_std)；position ← position + velocity；
    越过边界时镜像反射，并把对应分量的速度取反。

    Args:
        position: 当前位置向量
        velocity: 当前速度向量
        decay: 速度衰减系数
        noise_std: 速度噪声标准差，为 0 时不消耗随机数
        lower, upper: 位置上下界 (标量或与位置同形)
        rng: numpy 随机数生成器
        max_step: 速度分量绝对值上限 (可选)

    Returns:
        (position, velocity)
    """
    pos = np.array(position, dtype=np.float64, ndmin=1)
    vel = np.array(velocity, dtype=np.float64, ndmin=1) * decay
    if noise_std > 0:
        vel = vel + rng.normal(0.0, noise_std, size=vel.shape)
    if max_step is not None:
        vel = np.clip(vel, -max_step, max_step)
    lower = np.broadcast_to(np.asarray(lower, dtype=np.float64), pos.shape)
    upper = np.broadcast_to(np.asarray(upper, dtype=np.float64), pos.shape)

    pos = pos + vel
    above = pos > upper
    pos[above] = 2.0 * upper[above] - pos[above]
    vel[above] = -vel[above]
    below = pos < lower
    pos[below] = 2.0 * lower[below] - pos[below]
    vel[below] = -vel[below]
    # 单步跨越整个区间时只能截断
    pos = np.clip(pos, lower, upper)
    return pos, vel


def build_simulated_scan(source: Union[GrayImage, Sequence[GrayImage]], T: int, cfg: WalkConfig,
                         source_id: str = "source", scan_id: str = "") -> SimulatedScan:
    """
    从视频 (帧序列) 或单张图像构建模拟扫描。

    裁剪游走在源帧上移动 crop_size×crop_size 的矩形：视频取第 t 帧 (不足 T 帧时循环)，
    单张图像则反复从同一张图裁剪。焦度游走生成 f*_t，sigma0 在 sigma0_range 内均匀抽取。
    结果完全由 cfg.seed 决定。

    Raises:
        ConfigurationError: T < 1 或源图像小于裁剪尺寸
    """
    if T < 1:
        raise ConfigurationError(f"帧数 T 必须 ≥ 1，实际: {T}")
    if isinstance(source, np.ndarray) and source.ndim == 2:
        sources = [as_gray_image(source)]
    else:
        sources = [as_gray_image(s) for s in source]
    if not sources:
        raise ConfigurationError("源图像序列为空")

    crop = cfg.crop_size
    height = min(s.shape[0] for s in sources)
    width = min(s.shape[1] for s in sources)
    if height < crop or width < crop:
        raise ConfigurationError(
            f"源图像 ({width}×{height}) 小于裁剪矩形 ({crop}×{crop})，source_id={source_id}")

    rng = np.random.default_rng(cfg.seed)
    sigma0 = float(rng.uniform(*cfg.sigma0_range))
    crop_upper = np.array([width - crop, height - crop], dtype=np.float64)
    crop_pos = rng.uniform(0.0, 1.0, size=2) * crop_upper
    crop_vel = np.zeros(2)
    focus = cfg.focus_initial if cfg.focus_initial is not None else float(rng.uniform(0.0, 1.0))
    focus_pos = np.array([focus], dtype=np.float64)
    focus_vel = np.zeros(1)

    frames = np.empty((T, crop, crop), dtype=np.float32)
    f_star = np.empty(T, dtype=np.float64)
    origins = np.empty((T, 2), dtype=np.int64)
    for t in range(T):
        x0, y0 = (int(v) for v in np.clip(np.rint(crop_pos), 0, crop_upper))
        src = sources[t % len(sources)]
        frames[t] = src[y0:y0 + crop, x0:x0 + crop]
        origins[t] = (x0, y0)
        f_star[t] = focus_pos[0]
        if t == T - 1:
            break
        crop_pos, crop_vel = walk_step(crop_pos, crop_vel, cfg.crop_velocity_decay,
                                       cfg.crop_noise_std, 0.0, crop_upper, rng,
                                       max_step=cfg.crop_max_step)
        focus_pos, focus_vel = walk_step(focus_pos, focus_vel, cfg.focus_velocity_decay,
                                         cfg.focus_noise_std, 0.0, 1.0, rng,
                                         max_step=cfg.focus_max_step)

    return SimulatedScan(frames=frames, f_star=f_star, sigma0=sigma0, seed=cfg.seed,
                         source_id=source_id, scan_id=scan_id, crop_origins=origins)


def render_focal_stack_scan(scan: SimulatedScan, focal_grid: Sequence[float],
                            quantize: bool = True) -> FocalStackScan:
    """
    把模拟扫描离散化为焦点堆栈扫描：每帧在网格的每个焦度上渲染一次。

    quantize=True 时把渲染结果量化到 8 位，相当于相机采集，保存后可无损往返。
    """
    grid = np.asarray(focal_grid, dtype=np.float64)
    images = np.empty((len(scan), len(grid), scan.height, scan.width), dtype=np.float32)
    for p in range(len(scan)):
        model = scan.defocus_model(p)
        for k, f in enumerate(grid):
            img = defocus_render(scan.frames[p], float(f), model)
            images[p, k] = quantize_8bit(img) if quantize else img
    return FocalStackScan(images=images, focal_grid=grid, f_star=scan.f_star.copy(), seed=scan.seed,
                          source_id=scan.source_id, scan_id=scan.scan_id)


# --- 环境步进 ---
def _check_step_args(scan: Scan, t: int, f: float):
    if not (0 <= t < len(scan)):
        raise FrameIndexError(f"帧索引 t={t} 越界，扫描长度为 {len(scan)}")
    if not (0.0 <= f <= 1.0):
        raise DomainError(f"焦度 f 必须位于 [0, 1]，实际: {f}")


def env_step(scan: Scan, t: int, f: float) -> GrayImage:
    """
    智能体在第 t 帧以焦度 f 观察到的整幅图像。

    SimulatedScan 按离焦模型渲染；FocalStackScan 返回最近网格焦度处的图像
    (距离相等时取较低索引)。
    """
    _check_step_args(scan, t, f)
    if isinstance(scan, SimulatedScan):
        return defocus_render(scan.frames[t], f, scan.defocus_model(t))
    return scan.images[t, scan.grid_index(f)].astype(np.float64)


def observe_patch(scan: Scan, t: int, f: float, patch_size: int = DEFAULT_PATCH_SIZE) -> GrayImage:
    """env_step 后取中心补丁；模拟扫描只渲染补丁附近的窗口"""
    _check_step_args(scan, t, f)
    if isinstance(scan, SimulatedScan):
        return defocus_render_patch(scan.frames[t], f, scan.defocus_model(t), size=patch_size)
    return extract_patch(scan.images[t, scan.grid_index(f)], size=patch_size)


def optimal_focus(scan: Scan) -> np.ndarray:
    """每帧/每个位姿的最优焦度；焦点堆栈扫描缺少真值时报错"""
    if scan.f_star is None:
        raise ConfigurationError(f"扫描 {scan.scan_id} 缺少 f_star 真值，请先运行 oracle-focus")
    return scan.f_star


# --- 真值 ---
def oracle_scores(stack: Sequence[GrayImage], patch_size: int = DEFAULT_PATCH_SIZE) -> np.ndarray:
    """堆栈中每张图像中心补丁的 MGM"""
    return np.array([mgm(extract_patch(img, size=patch_size)) for img in stack])


def oracle_optimal_focus(stack: Sequence[GrayImage], focal_grid: Sequence[float],
                         patch_size: int = DEFAULT_PATCH_SIZE) -> float:
    """
    在焦点网格上全局搜索 MGM 最大值对应的焦度，并列时取较低索引。

    Raises:
        DomainError: 堆栈为空
        ConfigurationError: 堆栈与网格长度不一致
    """
    if len(stack) == 0:
        raise DomainError("焦点堆栈为空，无法搜索最优焦度")
    grid = np.asarray(focal_grid, dtype=np.float64)
    if len(grid) != len(stack):
        raise ConfigurationError(f"堆栈长度 {len(stack)} 与焦点网格长度 {len(grid)} 不一致")
    scores = oracle_scores(stack, patch_size)
    return float(grid[int(np.argmax(scores))])


def annotate_oracle_focus(scan: FocalStackScan, corrections: Optional[Dict[int, float]] = None,
                          patch_size: int = DEFAULT_PATCH_SIZE) -> FocalStackScan:
    """
    为每个位姿计算 oracle 真值，再应用人工校正 (位姿索引 → f*)。

    Returns:
        写入 f_star 后的新扫描对象
    """
    if not isinstance(scan, FocalStackScan):
        raise ConfigurationError(f"oracle-focus 只接受焦点堆栈扫描，实际: {type(scan).__name__}")
    f_star = np.array([oracle_optimal_focus(scan.images[p], scan.focal_grid, patch_size)
                       for p in range(len(scan))])
    for pose, value in (corrections or {}).items():
        pose = int(pose)
        if not (0 <= pose < len(scan)):
            raise FrameIndexError(f"校正中的位姿索引 {pose} 越界，位姿数为 {len(scan)}")
        if not (0.0 <= value <= 1.0):
            raise DomainError(f"位姿 {pose} 的校正焦度必须位于 [0, 1]，实际: {value}")
        logger.info("位姿 %d: oracle f*=%.3f 校正为 %.3f", pose, f_star[pose], value)
        f_star[pose] = float(value)
    return replace(scan, f_star=f_star)


# --- 存储 ---
def _crc32_file(path: str) -> int:
    with open(path, "rb") as fh:
        return zlib.crc32(fh.read()) & 0xFFFFFFFF


def _frame_name(t: int) -> str:
    return f"frame_{t:05d}.pgm"


def _stack_name(p: int, k: int) -> str:
    return f"pose_{p:05d}_k_{k:03d}.pgm"


def save_scan(scan: Scan, directory: str) -> str:
    """
    把扫描写成目录：manifest.json + PGM 图像。

    强度不在 8 位网格上时发出警告 (保存会量化，往返不再逐位相同)。

    Returns:
        manifest.json 的路径
    """
    os.makedirs(directory, exist_ok=True)
    _remove_stale_images(directory)
    checksums: Dict[str, int] = {}
    if isinstance(scan, SimulatedScan):
        if not is_8bit_lattice(scan.frames):
            warnings.warn(f"扫描 {scan.scan_id} 的帧强度不在 8 位网格上，保存为 PGM 会被量化")
        for t in range(len(scan)):
            name = _frame_name(t)
            write_pgm(os.path.join(directory, name), scan.frames[t])
            checksums[name] = _crc32_file(os.path.join(directory, name))
        manifest = {
            "type": "simulated",
            "frames": len(scan),
            "width": scan.width,
            "height": scan.height,
            "sigma0": float(scan.sigma0),
            "f_star": [float(v) for v in scan.f_star],
        }
        if scan.crop_origins is not None:
            manifest["crop_origins"] = [[int(x), int(y)] for x, y in scan.crop_origins]
    else:
        if not is_8bit_lattice(scan.images):
            warnings.warn(f"扫描 {scan.scan_id} 的堆栈强度不在 8 位网格上，保存为 PGM 会被量化")
        for p in range(len(scan)):
            for k in range(len(scan.focal_grid)):
                name = _stack_name(p, k)
                write_pgm(os.path.join(directory, name), scan.images[p, k])
                checksums[name] = _crc32_file(os.path.join(directory, name))
        manifest = {
            "type": "stack",
            "poses": len(scan),
            "width": scan.width,
            "height": scan.height,
            "focal_grid": [float(v) for v in scan.focal_grid],
            "f_star": None if scan.f_star is None else [float(v) for v in scan.f_star],
        }
    manifest.update({
        "seed": int(scan.seed),
        "source_id": scan.source_id,
        "scan_id": scan.scan_id,
        "checksums": checksums,
        "format_version": FORMAT_VERSION,
    })
    path = os.path.join(directory, MANIFEST_NAME)
    write_manifest(path, manifest)
    return path


def _remove_stale_images(directory: str) -> None:
    """删除目录中先前保存留下的帧/堆栈图像"""
    stale = [n for n in os.listdir(directory) if IMAGE_FILE_PATTERN.match(n)]
    for name in stale:
        os.remove(os.path.join(directory, name))
    if stale:
        logger.info("清理了 %s 中 %d 个旧图像文件", directory, len(stale))


def write_manifest(path: str, manifest: dict) -> None:
    # json 使用 repr 输出浮点数，保留完整精度
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, ensure_ascii=False)


def read_manifest(directory: str) -> dict:
    path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.isfile(path):
        raise ManifestMissingError(f"扫描目录 {directory} 缺少 {MANIFEST_NAME}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as e:
        raise ScanLoadError(f"{path} 不是有效的 JSON: {e}") from e
    if not isinstance(manifest, dict):
        raise ScanLoadError(f"{path} 必须是 JSON 对象")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(
            f"{path} 的 format_version={manifest.get('format_version')!r} 不受支持 (期望 {FORMAT_VERSION})")
    required = MANIFEST_REQUIRED_KEYS.get(manifest.get("type"))
    if required is None:
        raise ScanLoadError(f"{path} 的扫描类型 {manifest.get('type')!r} 未知")
    missing = [key for key in required if key not in manifest]
    if missing:
        raise ScanLoadError(f"{path} 缺少必需字段: {', '.join(missing)}")
    return manifest


def _load_image(directory: str, name: str, checksums: Dict[str, int], what: str) -> np.ndarray:
    path = os.path.join(directory, name)
    if not os.path.isfile(path):
        raise FrameCountError(f"扫描目录 {directory} 缺少 {what} 的图像文件 {name}")
    expected = checksums.get(name)
    if expected is not None and _crc32_file(path) != int(expected):
        raise ChecksumError(f"{what} 的图像文件 {name} CRC32 校验失败")
    return read_pgm(path)


def load_scan(directory: str) -> Scan:
    """
    从目录加载扫描。

    Raises:
        ManifestMissingError: 缺少 manifest.json
        FormatVersionError: format_version 不受支持
        FrameCountError: 图像文件缺失或多余，信息中指明索引
        ChecksumError: 图像 CRC32 不匹配
        ScanLoadError: manifest 缺少必需字段或字段类型无效
    """
    manifest = read_manifest(directory)
    try:
        return _scan_from_manifest(directory, manifest)
    except AfrlError:
        raise
    except (TypeError, ValueError) as e:
        raise ScanLoadError(f"{directory} 的 manifest 字段无效: {e}") from e


def _scan_from_manifest(directory: str, manifest: dict) -> Scan:
    checksums = manifest.get("checksums") or {}
    scan_type = manifest.get("type")
    scan_id = manifest.get("scan_id") or os.path.basename(os.path.normpath(directory))
    common = dict(seed=int(manifest.get("seed", 0)), source_id=manifest.get("source_id", "source"),
                  scan_id=scan_id)

    pgm_files = [n for n in os.listdir(directory) if n.endswith(".pgm")]
    if scan_type == "simulated":
        T = int(manifest["frames"])
        frames = np.empty((T, int(manifest["height"]), int(manifest["width"])), dtype=np.float32)
        for t in range(T):
            frames[t] = _load_image(directory, _frame_name(t), checksums, f"帧 t={t}")
        if len(pgm_files) != T:
            raise FrameCountError(f"manifest 声明 {T} 帧，目录中有 {len(pgm_files)} 个 PGM 文件")
        origins = manifest.get("crop_origins")
        return SimulatedScan(frames=frames, f_star=np.array(manifest["f_star"], dtype=np.float64),
                             sigma0=float(manifest["sigma0"]),
                             crop_origins=None if origins is None else np.array(origins, dtype=np.int64),
                             **common)
    if scan_type == "stack":
        P = int(manifest["poses"])
        grid = np.array(manifest["focal_grid"], dtype=np.float64)
        images = np.empty((P, len(grid), int(manifest["height"]), int(manifest["width"])), dtype=np.float32)
        for p in range(P):
            for k in range(len(grid)):
                images[p, k] = _load_image(directory, _stack_name(p, k), checksums,
                                           f"位姿 pose={p} 网格索引 k={k}")
        if len(pgm_files) != P * len(grid):
            raise FrameCountError(
                f"manifest 声明 {P}×{len(grid)} 张堆栈图像，目录中有 {len(pgm_files)} 个 PGM 文件")
        f_star = manifest.get("f_star")
        return FocalStackScan(images=images, focal_grid=grid,
                              f_star=None if f_star is None else np.array(f_star, dtype=np.float64),
                              **common)
    raise ScanLoadError(f"{directory} 的扫描类型 {scan_type!r} 未知")


def find_scan_dirs(root: str) -> List[str]:
    """root 下所有含 manifest.json 的子目录 (按名称排序)；root 本身是扫描目录时返回它自己"""
    if os.path.isfile(os.path.join(root, MANIFEST_NAME)):
        return [root]
    if not os.path.isdir(root):
        raise ScanLoadError(f"扫描目录不存在: {root}")
    return sorted(os.path.join(root, d) for d in os.listdir(root)
                  if os.path.isfile(os.path.join(root, d, MANIFEST_NAME)))


def load_scan_set(root: str, workers: int = 1) -> List[Scan]:
    """并行加载一组扫描，结果顺序与目录名排序一致"""
    dirs = find_scan_dirs(root)
    if not dirs:
        raise ScanLoadError(f"{root} 下没有找到任何扫描目录")
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        scans = list(executor.map(load_scan, dirs))
    logger.info("从 %s 加载了 %d 个扫描", root, len(scans))
    return scans


# --- 批量生成 ---
def derive_seed(base_seed: int, index: int) -> int:
    """由基础种子和序号派生 64 位子种子"""
    state = np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1, dtype=np.uint64)
    return int(state[0])


def discover_sources(sources_dir: str) -> List[Tuple[str, List[GrayImage]]]:
    """
    发现源图像：顶层的每个 .pgm 是一张静态图像，每个含 .pgm 的子目录是一段视频
    (帧按文件名排序)。

    Returns:
        [(source_id, [帧...]), ...]，按 source_id 排序
    """
    if not os.path.isdir(sources_dir):
        raise ConfigurationError(f"源目录不存在: {sources_dir}")
    sources = []
    for name in sorted(os.listdir(sources_dir)):
        path = os.path.join(sources_dir, name)
        if os.path.isfile(path) and name.lower().endswith(".pgm"):
            sources.append((os.path.splitext(name)[0], [read_pgm(path)]))
        elif os.path.isdir(path):
            frames = sorted(n for n in os.listdir(path) if n.lower().endswith(".pgm"))
            if frames:
                sources.append((name, [read_pgm(os.path.join(path, n)) for n in frames]))
    if not sources:
        raise ConfigurationError(f"源目录 {sources_dir} 中没有任何 PGM 图像或帧序列")
    return sources


def generate_scan_set(sources: List[Tuple[str, List[GrayImage]]], count: int, T: int,
                      template: WalkConfig, base_seed: int, workers: int = 1,
                      name_prefix: str = "scan") -> List[SimulatedScan]:
    """
    批量生成模拟扫描：第 i 个扫描使用第 i % len(sources) 个源和派生种子。

    每个扫描只依赖 (源, 派生种子)，结果与 workers 无关。
    """
    def build(i: int) -> SimulatedScan:
        source_id, frames = sources[i % len(sources)]
        cfg = replace(template, seed=derive_seed(base_seed, i))
        return build_simulated_scan(frames if len(frames) > 1 else frames[0], T, cfg,
                                    source_id=source_id, scan_id=f"{name_prefix}_{i:05d}")

    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        return list(executor.map(build, range(count)))
