# 焦点指标测试
import numpy as np
import pytest

from afrl.focus_model.focus_metrics import MGM, MLR, MetricKind, evaluate_metric, mgm, mlr
from afrl.focus_model.image_core import DefocusModel, defocus_render_patch, extract_patch
from afrl.utils.errors import ConfigurationError
from tests.helpers import make_texture

FOCUS_GRID = np.round(np.linspace(0.0, 1.0, 101), 10)


def _reflect101(i: int, n: int) -> int:
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i %= period
    return period - i if i > n - 1 else i


def dense_gaussian(img: np.ndarray, sigma: float) -> np.ndarray:
    """逐像素显式求和的高斯模糊，边界按 reflect-101 计算下标"""
    radius = int(np.ceil(3 * sigma))
    offsets = np.arange(-radius, radius + 1)
    w = np.exp(-offsets ** 2 / (2 * sigma * sigma))
    w /= w.sum()
    h, wd = img.shape
    out = np.zeros_like(img)
    for y in range(h):
        for x in range(wd):
            total = 0.0
            for a, wa in zip(offsets, w):
                for b, wb in zip(offsets, w):
                    total += wa * wb * img[_reflect101(y + a, h), _reflect101(x + b, wd)]
            out[y, x] = total
    return out


class TestMeanGradientMagnitude:
    """平均梯度幅值"""

    def test_constant_image_is_zero(self):
        assert mgm(np.full((32, 32), 0.7)) < 1e-12

    def test_positive_homogeneity(self, texture):
        """mgm(c·I) = c·mgm(I)"""
        patch = extract_patch(texture)
        base = mgm(patch)
        for c in (0.25, 0.5, 2.0, 3.7):
            scaled = mgm(c * patch)
            assert abs(scaled - c * base) / (c * base) < 1e-9, f"c={c} 时齐次性不成立"

    def test_three_by_three_ramp(self):
        """列 (0, 0.5, 1)：只有中间一列梯度为 4，均值 4/3"""
        assert mgm(np.tile([0.0, 0.5, 1.0], (3, 1))) == pytest.approx(4.0 / 3.0, rel=1e-12)

    def test_horizontal_ramp_value(self):
        """斜坡强度 x/W：内部像素梯度为 8/W，左右边列为 0"""
        width = 16
        img = np.tile(np.arange(width, dtype=np.float64) / width, (width, 1))
        expected = (8.0 / width) * (width - 2) / width
        assert abs(mgm(img) - expected) < 1e-12


class TestMeanLocalRatio:
    """平均局部比值"""

    def test_constant_image_is_one(self):
        assert mlr(np.full((32, 32), 0.3)) == pytest.approx(1.0, abs=1e-12)

    def test_lower_bound_on_random_images(self):
        """1000 张随机图像上 MLR ≥ 1"""
        rng = np.random.default_rng(11)
        for _ in range(1000):
            h, w = rng.integers(4, 25, size=2)
            img = rng.random((h, w))
            assert mlr(img) >= 1.0

    def test_checkerboard_against_dense_oracle(self):
        board = (np.indices((8, 8)).sum(axis=0) % 2).astype(np.float64)
        smooth = dense_gaussian(board, 4.0) + 1.0
        shifted = board + 1.0
        expected = np.mean(np.maximum(smooth / shifted, shifted / smooth))
        assert mlr(board, 4.0) == pytest.approx(expected, rel=1e-10)

    def test_sigma_parameter_used(self, texture):
        patch = extract_patch(texture)
        assert evaluate_metric(MetricKind("mlr", 2.0), patch) == mlr(patch, 2.0)
        assert mlr(patch, 2.0) != mlr(patch, 4.0)


class TestPermutationSensitivity:
    """打乱像素后指标改变：指标依赖空间结构而不只是强度分布"""

    @pytest.mark.parametrize("metric", [mgm, mlr], ids=["mgm", "mlr"])
    def test_shuffled_patch_scores_differently(self, texture, metric):
        patch = extract_patch(texture)
        rng = np.random.default_rng(9)
        shuffled = rng.permutation(patch.reshape(-1)).reshape(patch.shape)
        assert sorted(shuffled.reshape(-1)) == sorted(patch.reshape(-1))
        assert metric(shuffled) != metric(patch)


class TestMetricKind:
    """指标种类解析与分派"""

    def test_parse(self):
        assert MetricKind.parse("MGM") == MGM
        assert MetricKind.parse("mlr", 4.0) == MLR

    def test_unknown_metric(self):
        with pytest.raises(ConfigurationError):
            MetricKind.parse("variance")
        with pytest.raises(ConfigurationError):
            MetricKind("mlr", 0.0)

    def test_dispatch(self, texture):
        patch = extract_patch(texture)
        assert evaluate_metric(MGM, patch) == mgm(patch)
        assert evaluate_metric(MLR, patch) == mlr(patch)


class TestPeakAtFocus:
    """焦度扫描时两个指标的峰值都出现在真实焦点附近"""

    @pytest.mark.parametrize("kind", [MGM, MLR], ids=["mgm", "mlr"])
    def test_peak_within_one_grid_step(self, kind):
        rng = np.random.default_rng(21)
        misses = []
        for seed in range(20):
            sharp = make_texture(100 + seed, (96, 96))
            f_star = float(rng.choice(FOCUS_GRID))
            model = DefocusModel(sigma0=float(rng.uniform(2.0, 8.0)), f_star=f_star)
            scores = [evaluate_metric(kind, defocus_render_patch(sharp, f, model)) for f in FOCUS_GRID]
            peak = FOCUS_GRID[int(np.argmax(scores))]
            if abs(peak - f_star) > 0.01 + 1e-9:
                misses.append((seed, f_star, peak))
        assert not misses, f"{kind.name} 峰值偏离真实焦点: {misses}"
        print(f"✅ {kind.name} 在 20 张纹理上峰值均位于真实焦点一步之内")
