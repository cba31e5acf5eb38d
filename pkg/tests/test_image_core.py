# 单通道图像运算测试
import math

import numpy as np
import pytest

from afrl.focus_model.focus_metrics import mgm
from afrl.focus_model.image_core import (DefocusModel, as_gray_image, defocus_render, defocus_render_patch,
                                         extract_patch, gaussian_blur, gaussian_kernel_1d, is_8bit_lattice,
                                         quantize_8bit, read_pgm, sobel_gradients, write_pgm)
from afrl.utils.errors import DomainError, PreconditionError, ShapeError
from tests.helpers import make_texture


class TestSobelGradients:
    """Sobel 梯度"""

    def test_horizontal_ramp(self):
        """水平斜坡：内部 I_x = 8/W，I_y = 0"""
        width = 20
        img = np.tile(np.arange(width, dtype=np.float64) / width, (12, 1))
        gx, gy = sobel_gradients(img)
        assert gx.shape == img.shape
        np.testing.assert_allclose(gx[:, 1:-1], 8.0 / width, rtol=1e-12)
        np.testing.assert_allclose(gy, 0.0, atol=1e-12)

    def test_three_by_three_ramp(self):
        """列为 (0, 0.5, 1) 的 3×3 图像：中心 I_x = 4，I_y = 0"""
        img = np.tile([0.0, 0.5, 1.0], (3, 1))
        gx, gy = sobel_gradients(img)
        assert gx[1, 1] == pytest.approx(4.0)
        assert gy[1, 1] == pytest.approx(0.0)
        # reflect-101 使左右两列的水平梯度为 0
        np.testing.assert_allclose(gx[:, [0, 2]], 0.0, atol=1e-12)

    def test_constant_image_has_zero_gradient(self):
        gx, gy = sobel_gradients(np.full((9, 7), 0.3))
        assert np.all(np.abs(gx) < 1e-12) and np.all(np.abs(gy) < 1e-12)

    def test_rejects_non_2d(self):
        with pytest.raises(ShapeError):
            sobel_gradients(np.zeros((3, 3, 3)))
        with pytest.raises(DomainError):
            as_gray_image(np.array([[0.0, np.nan]]))


class TestGaussianBlur:
    """可分离高斯模糊"""

    def test_kernel_radius_and_normalisation(self):
        for sigma in (0.2, 1.0, 2.5, 8.0):
            k = gaussian_kernel_1d(sigma)
            assert len(k) == 2 * math.ceil(3 * sigma) + 1
            assert abs(k.sum() - 1.0) < 1e-12
            np.testing.assert_allclose(k, k[::-1])

    def test_sigma_zero_is_identity(self, texture):
        np.testing.assert_array_equal(gaussian_blur(texture, 0.0), texture)

    def test_centred_impulse(self):
        """9×9 中心脉冲，σ = 1：中心值为归一化离散高斯中心权重的平方"""
        img = np.zeros((9, 9))
        img[4, 4] = 1.0
        out = gaussian_blur(img, 1.0)
        weights = np.exp(-np.arange(-3, 4) ** 2 / 2.0)
        assert out[4, 4] == pytest.approx((weights[3] / weights.sum()) ** 2, rel=1e-12)

    def test_constant_image_unchanged(self):
        np.testing.assert_allclose(gaussian_blur(np.full((20, 30), 0.45), 3.0), 0.45, rtol=1e-12)

    def test_negative_sigma_rejected(self, texture):
        with pytest.raises(DomainError):
            gaussian_blur(texture, -0.5)

    @pytest.mark.parametrize("sigma", [0.7, 2.0, 5.5])
    def test_mean_preserved_with_flat_border(self, sigma):
        """边界带 (宽度 > 核半径) 平坦时，reflect-101 模糊保持均值"""
        radius = math.ceil(3 * sigma)
        band = radius + 2
        rng = np.random.default_rng(3)
        img = np.full((80, 90), 0.4)
        img[band:-band, band:-band] = rng.random((80 - 2 * band, 90 - 2 * band))
        out = gaussian_blur(img, sigma)
        rel = abs(out.mean() - img.mean()) / img.mean()
        assert rel < 1e-6, f"均值相对误差 {rel:.2e} 超出 1e-6"

    def test_blur_reduces_variance(self, texture):
        assert gaussian_blur(texture, 2.0).var() < texture.var()

    @pytest.mark.parametrize("s1,s2", [(1.0, 1.0), (1.0, 2.0), (1.5, 2.5), (3.0, 4.0)])
    def test_semigroup_on_interior(self, texture, s1, s2):
        """blur(blur(I, σ1), σ2) ≈ blur(I, sqrt(σ1² + σ2²))，内部像素最大误差 < 1e-3"""
        twice = gaussian_blur(gaussian_blur(texture, s1), s2)
        once = gaussian_blur(texture, math.hypot(s1, s2))
        margin = math.ceil(3 * s1) + math.ceil(3 * s2)
        err = np.abs(twice - once)[margin:-margin, margin:-margin].max()
        assert err < 1e-3, f"σ1={s1}, σ2={s2} 时内部最大误差 {err:.2e}"


class TestPatches:
    """补丁裁剪"""

    def test_centre_patch(self):
        img = np.arange(64 * 64, dtype=np.float64).reshape(64, 64)
        patch = extract_patch(img, size=32)
        assert patch.shape == (32, 32)
        np.testing.assert_array_equal(patch, img[16:48, 16:48])

    @pytest.mark.parametrize("cx,cy,edge", [(5, 32, "left"), (32, 5, "top"), (60, 32, "right"), (32, 60, "bottom")])
    def test_out_of_bounds_names_edge(self, cx, cy, edge):
        with pytest.raises(PreconditionError, match=edge):
            extract_patch(np.zeros((64, 64)), cx, cy, size=32)

    def test_image_smaller_than_patch(self):
        with pytest.raises(PreconditionError):
            extract_patch(np.zeros((20, 20)), size=32)


class TestDefocusRender:
    """参数化离焦渲染"""

    def setup_method(self):
        self.sharp = make_texture(5, (128, 128))
        self.model = DefocusModel(sigma0=4.0, f_star=0.6)

    def test_in_focus_is_sharp(self):
        np.testing.assert_array_equal(defocus_render(self.sharp, 0.6, self.model), self.sharp)

    def test_blur_grows_with_distance(self):
        """离焦越远，中心补丁的 MGM 越小"""
        sharp = mgm(extract_patch(self.sharp))
        near = mgm(extract_patch(defocus_render(self.sharp, 0.5, self.model)))
        far = mgm(extract_patch(defocus_render(self.sharp, 0.1, self.model)))
        assert far < near < sharp

    def test_mgm_non_increasing_in_sigma(self):
        """20 张纹理上 MGM 随 σ 单调不增"""
        sigmas = [0.0, 0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0]
        for seed in range(20):
            texture = make_texture(300 + seed, (256, 256))
            scores = [mgm(extract_patch(gaussian_blur(texture, s), size=128)) for s in sigmas]
            assert all(a >= b for a, b in zip(scores, scores[1:])), f"纹理 {seed}: MGM 序列 {scores}"

    def test_blur_sigma_follows_distance(self):
        model = DefocusModel(sigma0=4.0, f_star=0.8)
        assert model.sigma_at(0.3) == pytest.approx(2.0)
        np.testing.assert_array_equal(defocus_render(self.sharp, 0.3, model), gaussian_blur(self.sharp, model.sigma_at(0.3)))

    def test_continuous_in_focus(self):
        for f in (0.2, 0.599, 0.61):
            diff = np.abs(defocus_render(self.sharp, f, self.model) - defocus_render(self.sharp, f + 1e-3, self.model))
            assert diff.max() < 0.02, f"f={f} 处渲染不连续: {diff.max():.4f}"

    def test_focus_out_of_range(self):
        with pytest.raises(DomainError):
            defocus_render(self.sharp, 1.2, self.model)
        with pytest.raises(DomainError):
            DefocusModel(sigma0=-1.0, f_star=0.5)

    @pytest.mark.parametrize("f", [0.6, 0.55, 0.3, 0.0])
    def test_patch_render_matches_full_render(self, f):
        """中心补丁的局部渲染与整帧渲染一致"""
        full = extract_patch(defocus_render(self.sharp, f, self.model))
        local = defocus_render_patch(self.sharp, f, self.model)
        np.testing.assert_allclose(local, full, rtol=0, atol=1e-12)

    def test_patch_render_falls_back_near_border(self):
        small = make_texture(6, (40, 40))
        model = DefocusModel(sigma0=8.0, f_star=1.0)
        full = extract_patch(defocus_render(small, 0.0, model))
        np.testing.assert_allclose(defocus_render_patch(small, 0.0, model), full, atol=1e-12)


class TestPgmIO:
    """8 位 PGM 读写"""

    def test_lattice_round_trip(self, tmp_path, texture):
        path = str(tmp_path / "img.pgm")
        assert is_8bit_lattice(texture)
        write_pgm(path, texture)
        np.testing.assert_array_equal(read_pgm(path), texture)
        with open(path, "rb") as fh:
            assert fh.read(2) == b"P5"

    def test_float32_lattice(self, texture):
        assert is_8bit_lattice(texture.astype(np.float32))
        assert not is_8bit_lattice(texture + 1e-3)

    def test_quantize(self):
        np.testing.assert_array_equal(quantize_8bit(np.array([[-0.2, 0.5, 1.7]])),
                                      np.array([[0.0, 128 / 255, 1.0]]))
