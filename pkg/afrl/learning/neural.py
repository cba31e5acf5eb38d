# 最小稠密张量神经网络核心
"""
为两种网络量身实现的 numpy 神经网络核心：

- Q 网络 (MLP)：input → 256 → 256 → 3，隐藏层后接 ReLU，输出层线性；
- 补丁编码器 (CNN)：4 层 3×3 卷积，每层 8 通道、步长 2、填充 1，ReLU，
  最终 8×2×2 激活做空间均值池化得到 8 维向量。

张量直接使用 numpy 数组 (TensorBuffer)，参数是按名称有序排列的字典 (NetworkParams)。
每个层缓存前向中间量，backward 给出精确的反向梯度。
"""
import json
import struct
import zlib
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..utils.errors import (ArchitectureMismatchError, CheckpointCorruptError, ShapeError,
                            UsageError)

TensorBuffer = np.ndarray
NetworkParams = Dict[str, np.ndarray]

DTYPE = np.float32
HIDDEN_WIDTH = 256
N_ACTIONS = 3
PATCH_SIZE = 32
ENCODER_CHANNELS = 8
ENCODER_LAYERS = 4
ENCODING_WIDTH = ENCODER_CHANNELS

QNET_PREFIX = "qnet."
ENCODER_PREFIX = "encoder."

CHECKPOINT_MAGIC = b"AFRL"
CHECKPOINT_VERSION = 1
CHECKPOINT_DTYPE_TAG = "f32-le"


# --- 参数结构 ---
def qnet_shapes(in_width: int, prefix: str = QNET_PREFIX) -> Dict[str, Tuple[int, ...]]:
    """Q 网络各参数的形状，权重形状为 (out, in)"""
    widths = [in_width, HIDDEN_WIDTH, HIDDEN_WIDTH, N_ACTIONS]
    shapes = {}
    for i in range(3):
        shapes[f"{prefix}fc{i + 1}.weight"] = (widths[i + 1], widths[i])
        shapes[f"{prefix}fc{i + 1}.bias"] = (widths[i + 1],)
    return shapes


def encoder_shapes(prefix: str = ENCODER_PREFIX) -> Dict[str, Tuple[int, ...]]:
    """编码器各卷积层参数的形状，权重形状为 (out_ch, in_ch, 3, 3)"""
    shapes = {}
    in_ch = 1
    for i in range(ENCODER_LAYERS):
        shapes[f"{prefix}conv{i + 1}.weight"] = (ENCODER_CHANNELS, in_ch, 3, 3)
        shapes[f"{prefix}conv{i + 1}.bias"] = (ENCODER_CHANNELS,)
        in_ch = ENCODER_CHANNELS
    return shapes


def init_params(shapes: Dict[str, Tuple[int, ...]], rng: np.random.Generator,
                dtype=DTYPE) -> NetworkParams:
    """
    按 fan-in 均匀初始化：权重 ~ U(−sqrt(1/fan_in), sqrt(1/fan_in))，偏置为 0。
    """
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            limit = np.sqrt(1.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return params


def copy_params(params: NetworkParams) -> NetworkParams:
    return {k: v.copy() for k, v in params.items()}


def cast_params(params: NetworkParams, dtype) -> NetworkParams:
    return {k: v.astype(dtype) for k, v in params.items()}


def check_aligned(a: NetworkParams, b: NetworkParams) -> None:
    """两个参数字典的名称与形状必须完全一致"""
    if list(a.keys()) != list(b.keys()):
        raise ShapeError(f"参数名称不一致: {sorted(set(a) ^ set(b))}")
    for name in a:
        if a[name].shape != b[name].shape:
            raise ShapeError(f"参数 {name} 形状不一致: {a[name].shape} vs {b[name].shape}")


def all_finite(params: NetworkParams) -> bool:
    return all(bool(np.all(np.isfinite(v))) for v in params.values())


def non_finite_activations(net: "Sequential") -> List[str]:
    """最近一次 forward 中含 NaN/Inf 的层输出，按 "层类型[序号]" 命名"""
    return [f"{type(layer).__name__}[{i}]" for i, (layer, out) in enumerate(zip(net.layers, net.activations))
            if not np.all(np.isfinite(out))]


# --- 层 ---
class Layer:
    """层基类：forward 缓存中间量，backward 返回 (dx, 参数梯度)"""

    def __init__(self):
        self._cache = None

    def _require_cache(self):
        if self._cache is None:
            raise UsageError(f"{type(self).__name__}.backward 必须在 forward 之后调用")
        return self._cache

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> Tuple[np.ndarray, NetworkParams]:
        raise NotImplementedError


class Linear(Layer):
    """全连接层 y = x·Wᵀ + b"""

    def __init__(self, params: NetworkParams, name: str):
        super().__init__()
        self.params = params
        self.wkey = f"{name}.weight"
        self.bkey = f"{name}.bias"

    def forward(self, x):
        w = self.params[self.wkey]
        if x.shape[-1] != w.shape[1]:
            raise ShapeError(f"{self.wkey} 期望输入宽度 {w.shape[1]}，实际: {x.shape[-1]}")
        self._cache = x
        return x @ w.T + self.params[self.bkey]

    def backward(self, dout):
        x = self._require_cache()
        w = self.params[self.wkey]
        grads = {self.wkey: dout.T @ x, self.bkey: dout.sum(axis=0)}
        return dout @ w, grads


class ReLU(Layer):
    """ReLU；输入恰为 0 时取次梯度 0"""

    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, dout):
        mask = self._require_cache()
        return dout * mask, {}


class Conv2d(Layer):
    """3×3 卷积，零填充，im2col 实现"""

    def __init__(self, params: NetworkParams, name: str, stride: int = 2, pad: int = 1):
        super().__init__()
        self.params = params
        self.wkey = f"{name}.weight"
        self.bkey = f"{name}.bias"
        self.stride = stride
        self.pad = pad

    def forward(self, x):
        w = self.params[self.wkey]
        out_ch, in_ch, kh, kw = w.shape
        if x.ndim != 4 or x.shape[1] != in_ch:
            raise ShapeError(f"{self.wkey} 期望输入 (B, {in_ch}, H, W)，实际: {x.shape}")
        batch, _, height, width = x.shape
        p, s = self.pad, self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        out_h = (height + 2 * p - kh) // s + 1
        out_w = (width + 2 * p - kw) // s + 1
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :out_h, :out_w]
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * out_h * out_w, in_ch * kh * kw)
        out = cols @ w.reshape(out_ch, -1).T + self.params[self.bkey]
        self._cache = (x.shape, cols, out_h, out_w)
        return out.reshape(batch, out_h, out_w, out_ch).transpose(0, 3, 1, 2)

    def backward(self, dout):
        x_shape, cols, out_h, out_w = self._require_cache()
        w = self.params[self.wkey]
        out_ch, in_ch, kh, kw = w.shape
        batch, _, height, width = x_shape
        p, s = self.pad, self.stride

        dflat = dout.transpose(0, 2, 3, 1).reshape(-1, out_ch)
        grads = {self.wkey: (dflat.T @ cols).reshape(w.shape), self.bkey: dflat.sum(axis=0)}
        dcols = (dflat @ w.reshape(out_ch, -1)).reshape(batch, out_h, out_w, in_ch, kh, kw)
        dxp = np.zeros((batch, in_ch, height + 2 * p, width + 2 * p), dtype=dout.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + s * out_h:s, j:j + s * out_w:s] += dcols[..., i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + height, p:p + width], grads


class MeanPool(Layer):
    """空间均值池化 (B, C, H, W) → (B, C)"""

    def forward(self, x):
        self._cache = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dout):
        shape = self._require_cache()
        scale = 1.0 / (shape[2] * shape[3])
        dx = np.broadcast_to((dout * scale)[:, :, None, None], shape).astype(dout.dtype)
        return dx, {}


# --- 网络 ---
class Sequential:
    """按顺序串联的层；backward 汇总全部参数梯度"""

    def __init__(self, params: NetworkParams, layers: List[Layer]):
        self.params = params
        self.layers = layers
        self._forwarded = False
        self.activations: List[np.ndarray] = []

    def forward(self, x: np.ndarray) -> np.ndarray:
        dtype = next(iter(self.params.values())).dtype
        out = np.asarray(x, dtype=dtype)
        self.activations = []
        for layer in self.layers:
            out = layer.forward(out)
            self.activations.append(out)
        self._forwarded = True
        return out

    def backward(self, dout: np.ndarray) -> Tuple[NetworkParams, np.ndarray]:
        """
        Args:
            dout: 损失对网络输出的梯度

        Returns:
            (与 params 对齐的梯度字典, 损失对输入的梯度)

        Raises:
            UsageError: 尚未执行 forward
        """
        if not self._forwarded:
            raise UsageError("backward 必须在 forward 之后调用")
        grads: NetworkParams = {}
        for layer in reversed(self.layers):
            dout, layer_grads = layer.backward(dout)
            grads.update(layer_grads)
        ordered = {name: grads[name] for name in self.params if name in grads}
        return ordered, dout


class QNetwork(Sequential):
    """Q 网络：状态 (B, W) → Q 值 (B, 3)"""

    def __init__(self, params: NetworkParams, prefix: str = QNET_PREFIX):
        layers = [Linear(params, f"{prefix}fc1"), ReLU(),
                  Linear(params, f"{prefix}fc2"), ReLU(),
                  Linear(params, f"{prefix}fc3")]
        super().__init__({k: v for k, v in params.items() if k.startswith(prefix)}, layers)
        self.in_width = int(params[f"{prefix}fc1.weight"].shape[1])


class ConvEncoder(Sequential):
    """补丁编码器：(B, 32, 32) 或 (B, 1, 32, 32) → (B, 8)"""

    def __init__(self, params: NetworkParams, prefix: str = ENCODER_PREFIX):
        layers: List[Layer] = []
        for i in range(ENCODER_LAYERS):
            layers += [Conv2d(params, f"{prefix}conv{i + 1}"), ReLU()]
        layers.append(MeanPool())
        super().__init__({k: v for k, v in params.items() if k.startswith(prefix)}, layers)
        self.activation_shapes: List[Tuple[int, ...]] = []

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[:, None, :, :]
        if x.ndim != 4 or x.shape[1:] != (1, PATCH_SIZE, PATCH_SIZE):
            raise ShapeError(f"编码器输入必须是 {PATCH_SIZE}×{PATCH_SIZE} 补丁，实际形状: {x.shape}")
        dtype = next(iter(self.params.values())).dtype
        out = x.astype(dtype, copy=False)
        self.activation_shapes = []
        self.activations = []
        for layer in self.layers:
            out = layer.forward(out)
            self.activations.append(out)
            if isinstance(layer, ReLU):
                self.activation_shapes.append(tuple(out.shape[1:]))
        self._forwarded = True
        return out


def mlp_forward(params: NetworkParams, state: np.ndarray, prefix: str = QNET_PREFIX) -> np.ndarray:
    """
    单个状态向量的 Q 值。

    Raises:
        ShapeError: 状态宽度与网络输入宽度不一致
    """
    state = np.asarray(state)
    net = QNetwork(params, prefix)
    if state.ndim != 1 or state.shape[0] != net.in_width:
        raise ShapeError(f"状态宽度 {state.shape} 与 Q 网络输入宽度 {net.in_width} 不一致")
    return net.forward(state[None, :])[0]


def cnn_encode(params: NetworkParams, patch: np.ndarray, prefix: str = ENCODER_PREFIX) -> np.ndarray:
    """
    单个 32×32 补丁的 8 维编码。

    Raises:
        ShapeError: 补丁不是 32×32
    """
    patch = np.asarray(patch)
    if patch.shape != (PATCH_SIZE, PATCH_SIZE):
        raise ShapeError(f"补丁必须是 {PATCH_SIZE}×{PATCH_SIZE}，实际: {patch.shape}")
    return ConvEncoder(params, prefix).forward(patch[None])[0]


# --- 损失 ---
def huber_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """平滑 L1 损失的元素均值，过渡阈值固定为 1"""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"pred 形状 {pred.shape} 与 target 形状 {target.shape} 不一致")
    d = np.abs(pred - target)
    return float(np.mean(np.where(d < 1.0, 0.5 * d * d, d - 0.5)))


def huber_loss_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """huber_loss 对 pred 的梯度"""
    if pred.shape != target.shape:
        raise ShapeError(f"pred 形状 {pred.shape} 与 target 形状 {target.shape} 不一致")
    d = pred - target
    return (np.clip(d, -1.0, 1.0) / d.size).astype(pred.dtype, copy=False)


# --- 优化器 ---
@dataclass
class OptimState:
    """RMSProp 状态：逐参数的平方梯度累积量"""
    accumulators: NetworkParams
    lr: float = 1e-5
    rho: float = 0.95
    eps: float = 1e-8


def init_optim_state(params: NetworkParams, lr: float = 1e-5, rho: float = 0.95,
                     eps: float = 1e-8) -> OptimState:
    return OptimState({k: np.zeros_like(v) for k, v in params.items()}, lr, rho, eps)


def rmsprop_step(params: NetworkParams, grads: NetworkParams,
                 opt: OptimState) -> Tuple[NetworkParams, OptimState]:
    """
    acc ← ρ·acc + (1−ρ)·g²；θ ← θ − lr·g / (sqrt(acc) + eps)。原地更新。

    Raises:
        ShapeError: 参数、梯度、累积量形状不一致
    """
    for name, g in grads.items():
        if name not in params or params[name].shape != g.shape:
            raise ShapeError(f"梯度 {name} 与参数形状不一致")
        acc = opt.accumulators.get(name)
        if acc is None or acc.shape != g.shape:
            raise ShapeError(f"RMSProp 累积量 {name} 与梯度形状不一致")
        acc *= opt.rho
        acc += (1.0 - opt.rho) * g * g
        params[name] -= opt.lr * g / (np.sqrt(acc) + opt.eps)
    return params, opt


# --- 检查点 ---
def save_checkpoint(path: str, params: NetworkParams, metadata: Optional[dict] = None) -> None:
    """
    检查点格式：
    b"AFRL" | uint32 版本 | uint32 头部长度 | JSON 头部 | 小端 float32 数据 | uint32 CRC32(数据)
    """
    header = {
        "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in params.items()],
        "dtype": CHECKPOINT_DTYPE_TAG,
        "metadata": metadata or {},
    }
    header_bytes = json.dumps(header, ensure_ascii=False).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f4").tobytes() for arr in params.values())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_checkpoint(path: str, expected_shapes: Optional[Dict[str, Tuple[int, ...]]] = None
                    ) -> Tuple[NetworkParams, dict]:
    """
    读取检查点。

    Args:
        path: 文件路径
        expected_shapes: 期望的参数名称与形状；给出时严格比对

    Returns:
        (参数字典 float32, 元数据)

    Raises:
        CheckpointCorruptError: 魔数、版本、头部、长度或 CRC32 错误
        ArchitectureMismatchError: 参数结构与期望不符
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointCorruptError(f"{path} 不是 AFRL 检查点 (魔数错误或文件过短)")
    version, header_len = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointCorruptError(f"{path} 的检查点版本 {version} 不受支持")
    try:
        header = json.loads(data[12:12 + header_len].decode("utf-8"))
        tensors = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise CheckpointCorruptError(f"{path} 的检查点头部损坏: {e}") from e
    if header.get("dtype") != CHECKPOINT_DTYPE_TAG:
        raise CheckpointCorruptError(f"{path} 的数据类型标记 {header.get('dtype')!r} 不受支持")

    sizes = [int(np.prod(t["shape"], dtype=np.int64)) for t in tensors]
    payload_len = 4 * sum(sizes)
    start = 12 + header_len
    if len(data) != start + payload_len + 4:
        raise CheckpointCorruptError(
            f"{path} 长度不符: 期望 {start + payload_len + 4} 字节，实际 {len(data)} 字节")
    payload = data[start:start + payload_len]
    (crc,) = struct.unpack("<I", data[start + payload_len:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CheckpointCorruptError(f"{path} 的数据 CRC32 校验失败")

    params: NetworkParams = {}
    offset = 0
    for t, size in zip(tensors, sizes):
        arr = np.frombuffer(payload, dtype="<f4", count=size, offset=offset)
        params[t["name"]] = arr.reshape(t["shape"]).astype(DTYPE)
        offset += 4 * size

    if expected_shapes is not None:
        actual = {k: tuple(v.shape) for k, v in params.items()}
        expected = {k: tuple(v) for k, v in expected_shapes.items()}
        if actual != expected:
            missing = sorted(set(expected) - set(actual))
            extra = sorted(set(actual) - set(expected))
            differ = sorted(k for k in set(actual) & set(expected) if actual[k] != expected[k])
            raise ArchitectureMismatchError(
                f"{path} 的网络结构不匹配: 缺少 {missing}，多余 {extra}，形状不同 {differ}")
    return params, header.get("metadata", {})
