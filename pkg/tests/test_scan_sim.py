# 扫描模拟器测试
import json
import os

import numpy as np
import pytest

from afrl.focus_model.image_core import extract_patch, is_8bit_lattice
from afrl.focus_model.scan_sim import (MANIFEST_NAME, FocalStackScan, SimulatedScan, WalkConfig,
                                       annotate_oracle_focus, build_simulated_scan, derive_seed,
                                       discover_sources, env_step, find_scan_dirs, generate_scan_set,
                                       load_scan, load_scan_set, observe_patch, optimal_focus,
                                       oracle_optimal_focus, render_focal_stack_scan, save_scan, walk_step)
from afrl.utils.errors import (ChecksumError, ConfigurationError, DomainError, FormatVersionError,
                               FrameCountError, FrameIndexError, ManifestMissingError, ScanLoadError)
from tests.helpers import make_static_scan, make_texture


class TestWalkStep:
    """阻尼速度随机游走"""

    def test_stays_in_bounds(self):
        rng = np.random.default_rng(0)
        pos, vel = np.array([0.5]), np.zeros(1)
        for _ in range(5000):
            pos, vel = walk_step(pos, vel, 0.95, 0.05, 0.0, 1.0, rng, max_step=0.2)
            assert 0.0 <= pos[0] <= 1.0
            assert abs(vel[0]) <= 0.2

    def test_reflection_flips_velocity(self):
        rng = np.random.default_rng(0)
        pos, vel = walk_step(np.array([0.95]), np.array([0.1]), 1.0, 0.0, 0.0, 1.0, rng)
        assert pos[0] == pytest.approx(0.95)
        assert vel[0] == pytest.approx(-0.1)

    def test_zero_noise_is_deterministic_decay(self):
        rng = np.random.default_rng(0)
        pos, vel = walk_step(np.array([2.0, 3.0]), np.array([1.0, -1.0]), 0.5, 0.0, 0.0, 10.0, rng)
        np.testing.assert_allclose(pos, [2.5, 2.5])
        np.testing.assert_allclose(vel, [0.5, -0.5])


class TestBuildSimulatedScan:
    """从源图像构建模拟扫描"""

    def setup_method(self):
        self.source = make_texture(3, (96, 96))
        self.cfg = WalkConfig(crop_size=48, seed=5)

    def test_shapes_and_ranges(self):
        scan = build_simulated_scan(self.source, 120, self.cfg)
        assert scan.frames.shape == (120, 48, 48)
        assert scan.frames.dtype == np.float32
        assert np.all((scan.f_star >= 0) & (scan.f_star <= 1))
        assert np.all(np.abs(np.diff(scan.f_star)) <= 0.05 + 1e-12), "焦度逐帧变化超过 0.05"
        assert 2.0 <= scan.sigma0 <= 8.0
        assert np.all(scan.crop_origins >= 0) and np.all(scan.crop_origins <= 96 - 48)

    def test_frames_are_crops_of_source(self):
        scan = build_simulated_scan(self.source, 30, self.cfg)
        for t in (0, 7, 29):
            x0, y0 = scan.crop_origins[t]
            np.testing.assert_array_equal(scan.frames[t], self.source[y0:y0 + 48, x0:x0 + 48].astype(np.float32))

    def test_deterministic_per_seed(self):
        a = build_simulated_scan(self.source, 50, self.cfg)
        b = build_simulated_scan(self.source, 50, self.cfg)
        c = build_simulated_scan(self.source, 50, WalkConfig(crop_size=48, seed=6))
        np.testing.assert_array_equal(a.frames, b.frames)
        np.testing.assert_array_equal(a.f_star, b.f_star)
        assert a.sigma0 == b.sigma0
        assert not np.array_equal(a.f_star, c.f_star)

    def test_single_frame_scan(self):
        scan = build_simulated_scan(self.source, 1, self.cfg)
        assert len(scan) == 1

    def test_fixed_initial_focus(self):
        scan = build_simulated_scan(self.source, 10, WalkConfig(crop_size=48, focus_initial=0.25, seed=1))
        assert scan.f_star[0] == 0.25

    def test_video_frames_cycle(self):
        video = [make_texture(40 + i, (64, 64)) for i in range(3)]
        cfg = WalkConfig(crop_size=64, seed=2)
        scan = build_simulated_scan(video, 7, cfg)
        for t in range(7):
            np.testing.assert_array_equal(scan.frames[t], video[t % 3].astype(np.float32))

    def test_focus_walk_coverage(self):
        """默认参数下 T=250 时焦度覆盖范围平均 ≥ 0.3"""
        source = make_texture(8, (40, 40))
        ranges = []
        for seed in range(20):
            scan = build_simulated_scan(source, 250, WalkConfig(crop_size=32, seed=seed))
            ranges.append(scan.f_star.max() - scan.f_star.min())
        assert np.mean(ranges) >= 0.3, f"平均覆盖范围 {np.mean(ranges):.3f} 过小"

    def test_invalid_inputs(self):
        with pytest.raises(ConfigurationError):
            build_simulated_scan(self.source, 0, self.cfg)
        with pytest.raises(ConfigurationError):
            build_simulated_scan(make_texture(1, (40, 40)), 5, self.cfg)
        with pytest.raises(ConfigurationError):
            WalkConfig(crop_velocity_decay=1.5, focus_initial=2.0)

    def test_walk_config_lists_all_violations(self):
        with pytest.raises(ConfigurationError) as exc:
            WalkConfig(crop_velocity_decay=1.5, focus_initial=2.0, crop_size=8)
        message = str(exc.value)
        assert "crop_velocity_decay" in message and "focus_initial" in message and "crop_size" in message


class TestEnvironmentStep:
    """环境步进与补丁观察"""

    def setup_method(self):
        self.scan = build_simulated_scan(make_texture(4, (96, 96)), 12, WalkConfig(crop_size=64, seed=9))

    def test_in_focus_frame_is_sharp(self):
        t = 3
        img = env_step(self.scan, t, float(self.scan.f_star[t]))
        np.testing.assert_array_equal(img, self.scan.frames[t].astype(np.float64))

    @pytest.mark.parametrize("f", [0.0, 0.31, 0.77, 1.0])
    def test_observe_patch_matches_env_step(self, f):
        expected = extract_patch(env_step(self.scan, 5, f))
        np.testing.assert_allclose(observe_patch(self.scan, 5, f), expected, rtol=0, atol=1e-12)

    def test_bad_arguments(self):
        with pytest.raises(FrameIndexError):
            env_step(self.scan, 12, 0.5)
        with pytest.raises(FrameIndexError):
            observe_patch(self.scan, -1, 0.5)
        with pytest.raises(DomainError):
            env_step(self.scan, 0, 1.01)

    def test_stack_uses_nearest_grid_image(self):
        images = np.stack([np.full((2, 32, 32), v, dtype=np.float32) for v in (0.1, 0.2, 0.3)], axis=1)
        stack = FocalStackScan(images=images, focal_grid=[0.0, 0.5, 1.0])
        assert env_step(stack, 0, 0.2)[0, 0] == pytest.approx(0.1)
        assert env_step(stack, 1, 0.8)[0, 0] == pytest.approx(0.3)
        # 距离相等时取较低索引
        assert stack.grid_index(0.25) == 0
        assert stack.grid_index(0.75) == 1

    def test_optimal_focus_requires_ground_truth(self):
        images = np.zeros((2, 3, 32, 32), dtype=np.float32)
        stack = FocalStackScan(images=images, focal_grid=[0.0, 0.5, 1.0])
        with pytest.raises(ConfigurationError):
            optimal_focus(stack)
        np.testing.assert_array_equal(optimal_focus(self.scan), self.scan.f_star)


class TestOracleFocus:
    """焦点堆栈上的 oracle 真值"""

    def test_closure_on_synthetic_stacks(self):
        """100 个合成堆栈中至少 95% 的 oracle 焦度位于真实焦点一步之内"""
        rng = np.random.default_rng(17)
        grid = np.round(np.linspace(0.0, 1.0, 101), 10)
        hits = 0
        for i in range(100):
            f_star = float(rng.choice(grid))
            scan = make_static_scan(make_texture(200 + i, (64, 64)), f_star, 1,
                                    sigma0=float(rng.uniform(2.0, 8.0)), crop=48)
            stack = render_focal_stack_scan(scan, grid, quantize=False)
            if abs(oracle_optimal_focus(stack.images[0], grid) - f_star) <= 0.01 + 1e-9:
                hits += 1
        assert hits >= 95, f"oracle 命中 {hits}/100"
        print(f"✅ oracle 闭合率 {hits}/100")

    def test_tie_prefers_lower_index(self):
        flat = [np.full((32, 32), 0.5)] * 3
        assert oracle_optimal_focus(flat, [0.2, 0.4, 0.6]) == 0.2

    def test_empty_and_mismatched(self):
        with pytest.raises(DomainError):
            oracle_optimal_focus([], [])
        with pytest.raises(ConfigurationError):
            oracle_optimal_focus([np.zeros((32, 32))], [0.1, 0.2])

    def test_annotate_with_corrections(self):
        scan = make_static_scan(make_texture(7, (64, 64)), 0.5, 3, crop=48)
        stack = render_focal_stack_scan(scan, np.linspace(0.0, 1.0, 11))
        stack = FocalStackScan(images=stack.images, focal_grid=stack.focal_grid)
        annotated = annotate_oracle_focus(stack, {1: 0.9})
        np.testing.assert_allclose(annotated.f_star, [0.5, 0.9, 0.5])
        assert stack.f_star is None
        with pytest.raises(FrameIndexError):
            annotate_oracle_focus(stack, {3: 0.5})
        with pytest.raises(DomainError):
            annotate_oracle_focus(stack, {0: 1.5})
        with pytest.raises(ConfigurationError):
            annotate_oracle_focus(scan)


class TestScanStorage:
    """扫描目录的保存与加载"""

    def setup_method(self):
        self.scan = build_simulated_scan(make_texture(12, (96, 96)), 6, WalkConfig(crop_size=48, seed=4),
                                         source_id="tex12", scan_id="scan_00000")

    def test_simulated_round_trip_is_bitwise(self, tmp_path):
        directory = str(tmp_path / "scan")
        save_scan(self.scan, directory)
        loaded = load_scan(directory)
        assert isinstance(loaded, SimulatedScan)
        np.testing.assert_array_equal(loaded.frames, self.scan.frames)
        np.testing.assert_array_equal(loaded.f_star, self.scan.f_star)
        np.testing.assert_array_equal(loaded.crop_origins, self.scan.crop_origins)
        assert loaded.sigma0 == self.scan.sigma0
        assert (loaded.seed, loaded.source_id, loaded.scan_id) == (4, "tex12", "scan_00000")

    def test_stack_round_trip(self, tmp_path):
        stack = render_focal_stack_scan(self.scan, [0.0, 0.25, 0.5, 0.75, 1.0])
        assert is_8bit_lattice(stack.images)
        directory = str(tmp_path / "stack")
        save_scan(stack, directory)
        loaded = load_scan(directory)
        assert isinstance(loaded, FocalStackScan)
        np.testing.assert_array_equal(loaded.images, stack.images)
        np.testing.assert_array_equal(loaded.focal_grid, stack.focal_grid)
        np.testing.assert_array_equal(loaded.f_star, stack.f_star)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ManifestMissingError):
            load_scan(str(tmp_path))

    def test_missing_frame_names_index(self, tmp_path):
        directory = str(tmp_path / "scan")
        save_scan(self.scan, directory)
        os.remove(os.path.join(directory, "frame_00003.pgm"))
        with pytest.raises(FrameCountError, match="t=3"):
            load_scan(directory)

    def test_extra_frame_file(self, tmp_path):
        directory = str(tmp_path / "scan")
        save_scan(self.scan, directory)
        with open(os.path.join(directory, "frame_00006.pgm"), "wb") as fh:
            with open(os.path.join(directory, "frame_00000.pgm"), "rb") as src:
                fh.write(src.read())
        with pytest.raises(FrameCountError):
            load_scan(directory)

    def test_corrupted_frame(self, tmp_path):
        directory = str(tmp_path / "scan")
        save_scan(self.scan, directory)
        path = os.path.join(directory, "frame_00002.pgm")
        data = bytearray(open(path, "rb").read())
        data[-1] ^= 0xFF
        with open(path, "wb") as fh:
            fh.write(bytes(data))
        with pytest.raises(ChecksumError):
            load_scan(directory)

    def test_unsupported_format_version(self, tmp_path):
        directory = str(tmp_path / "scan")
        save_scan(self.scan, directory)
        path = os.path.join(directory, MANIFEST_NAME)
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        manifest["format_version"] = 99
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh)
        with pytest.raises(FormatVersionError):
            load_scan(directory)

    @pytest.mark.parametrize("key", ["sigma0", "frames", "f_star", "height"])
    def test_missing_required_key_is_named(self, tmp_path, key):
        directory = str(tmp_path / "scan")
        save_scan(self.scan, directory)
        path = os.path.join(directory, MANIFEST_NAME)
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        del manifest[key]
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh)
        with pytest.raises(ScanLoadError, match=key):
            load_scan(directory)

    def test_invalid_field_type(self, tmp_path):
        directory = str(tmp_path / "scan")
        save_scan(self.scan, directory)
        path = os.path.join(directory, MANIFEST_NAME)
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        manifest["sigma0"] = "wide"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh)
        with pytest.raises(ScanLoadError, match="sigma0|wide"):
            load_scan(directory)

    def test_shorter_scan_overwrites_directory(self, tmp_path):
        """同一目录先保存 6 帧再保存 3 帧，旧帧文件被清理"""
        directory = str(tmp_path / "scan")
        save_scan(self.scan, directory)
        short = SimulatedScan(frames=self.scan.frames[:3], f_star=self.scan.f_star[:3], sigma0=self.scan.sigma0,
                              scan_id="short")
        save_scan(short, directory)
        loaded = load_scan(directory)
        assert len(loaded) == 3
        np.testing.assert_array_equal(loaded.frames, short.frames)
        assert sorted(n for n in os.listdir(directory) if n.endswith(".pgm")) == [
            "frame_00000.pgm", "frame_00001.pgm", "frame_00002.pgm"]

    def test_off_lattice_frames_warn(self, tmp_path):
        frames = np.full((2, 32, 32), 0.5012, dtype=np.float32)
        scan = SimulatedScan(frames=frames, f_star=[0.5, 0.5], sigma0=4.0)
        with pytest.warns(UserWarning):
            save_scan(scan, str(tmp_path / "q"))

    def test_scan_set_order(self, tmp_path):
        for name in ("b", "a"):
            save_scan(self.scan, str(tmp_path / name))
        dirs = find_scan_dirs(str(tmp_path))
        assert [os.path.basename(d) for d in dirs] == ["a", "b"]
        assert len(load_scan_set(str(tmp_path), workers=2)) == 2


class TestScanGeneration:
    """批量生成"""

    def test_discover_sources(self, sources_dir):
        sources = discover_sources(sources_dir)
        assert [sid for sid, _ in sources] == ["still_a", "still_b", "video_c"]
        assert [len(frames) for _, frames in sources] == [1, 1, 3]

    def test_empty_sources_rejected(self, tmp_path):
        with pytest.raises(ConfigurationError):
            discover_sources(str(tmp_path))

    def test_independent_of_workers(self, sources_dir):
        sources = discover_sources(sources_dir)
        template = WalkConfig(crop_size=64)
        serial = generate_scan_set(sources, 5, 8, template, base_seed=3, workers=1)
        parallel = generate_scan_set(sources, 5, 8, template, base_seed=3, workers=3)
        for a, b in zip(serial, parallel):
            assert a.scan_id == b.scan_id
            np.testing.assert_array_equal(a.frames, b.frames)
            np.testing.assert_array_equal(a.f_star, b.f_star)
        assert [s.scan_id for s in serial] == [f"scan_{i:05d}" for i in range(5)]
        assert [s.source_id for s in serial] == ["still_a", "still_b", "video_c", "still_a", "still_b"]

    def test_single_still_gives_distinct_scans(self, tmp_path):
        from afrl.focus_model.image_core import write_pgm

        write_pgm(str(tmp_path / "only.pgm"), make_texture(30))
        scans = generate_scan_set(discover_sources(str(tmp_path)), 3, 10, WalkConfig(crop_size=64), base_seed=0)
        assert {s.source_id for s in scans} == {"only"}
        assert len({s.seed for s in scans}) == 3
        assert not np.array_equal(scans[0].f_star, scans[1].f_star)

    def test_derive_seed(self):
        assert derive_seed(1, 2) == derive_seed(1, 2)
        assert len({derive_seed(0, i) for i in range(100)}) == 100
