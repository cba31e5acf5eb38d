# 测试共用的夹具
import os
import sys

import pytest

# 添加项目路径
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from afrl.focus_model.image_core import write_pgm  # noqa: E402
from tests.helpers import make_texture  # noqa: E402


@pytest.fixture
def texture():
    return make_texture(0)


@pytest.fixture
def sources_dir(tmp_path):
    """含两张静态 PGM 图像与一段 3 帧视频的源目录"""
    root = tmp_path / "sources"
    root.mkdir()
    write_pgm(str(root / "still_a.pgm"), make_texture(1))
    write_pgm(str(root / "still_b.pgm"), make_texture(2))
    video = root / "video_c"
    video.mkdir()
    for i in range(3):
        write_pgm(str(video / f"frame_{i:03d}.pgm"), make_texture(10 + i))
    return str(root)
