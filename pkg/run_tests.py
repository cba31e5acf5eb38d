#!/usr/bin/env python3
"""
自动对焦测试运行脚本

用法:
    python run_tests.py           # 运行全部测试 (不含桌面尺度验收)
    python run_tests.py -v        # 详细输出
    python run_tests.py --quick   # 快速测试 (跳过训练与命令行端到端测试)
    python run_tests.py --slow    # 额外运行桌面尺度验收测试 (耗时较长)
"""

import argparse
import os
import subprocess
import sys
from pathlib import Path

QUICK_FILES = [
    "tests/test_image_core.py",
    "tests/test_focus_metrics.py",
    "tests/test_scan_sim.py",
    "tests/test_neural.py",
    "tests/test_policies.py",
    "tests/test_bench.py",
    "tests/test_config.py",
]


def run_tests(verbose=False, quick=False, slow=False):
    """运行测试套件"""

    print("🧪 afrl 自动对焦测试")
    print("=" * 50)

    cmd = ["poetry", "run", "pytest"]
    if quick:
        cmd.extend(QUICK_FILES)
        print("🚀 运行快速测试 (数值核心、策略与评估)...")
    else:
        cmd.append("tests")
        print("🚀 运行完整测试套件...")

    cmd.append("-v" if verbose else "-q")
    cmd.extend(["--tb=short", "--color=yes"])

    env = dict(os.environ)
    if slow:
        env["AFRL_RUN_SLOW"] = "1"
        print("🐢 包含桌面尺度验收测试，可能需要一个小时左右")

    try:
        result = subprocess.run(cmd, cwd=Path(__file__).parent, env=env, capture_output=False)
    except Exception as e:
        print(f"\n💥 测试运行出错: {e}")
        return False

    if result.returncode != 0:
        print("\n❌ 测试失败！")
        return False
    print("\n✅ 所有测试通过！")
    return True


def main():
    parser = argparse.ArgumentParser(description="运行 afrl 测试")
    parser.add_argument("-v", "--verbose", action="store_true", help="详细输出测试信息")
    parser.add_argument("--quick", action="store_true", help="快速测试 (跳过训练与命令行测试)")
    parser.add_argument("--slow", action="store_true", help="包含桌面尺度验收测试")

    args = parser.parse_args()
    success = run_tests(verbose=args.verbose, quick=args.quick, slow=args.slow)
    sys.exit(0 if success else 1)


if __name__ == "__main__":
    main()
