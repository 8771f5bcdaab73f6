#!/usr/bin/env python3
"""
Unified test runner for hyperseg.
Runs every test module through pytest and prints a per-module summary.
"""

import os
import sys
from datetime import datetime
from pathlib import Path
from typing import List, Tuple

import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

TEST_DIR = Path(__file__).parent

SUITES: List[Tuple[str, str]] = [
    ("test_tensor_core.py", "Tensor Engine & Gradient Checks"),
    ("test_codecs.py", "Tensor Dump & Netpbm Codecs"),
    ("test_imgeo.py", "Mask Geometry & Copy-Paste Safety"),
    ("test_uncertainty.py", "Entropy Uncertainty Maps"),
    ("test_uoic.py", "Instance Contrastive Objective"),
    ("test_ughr.py", "Hypergraph Refinement Block"),
    ("test_synthdata.py", "Synthetic Scenes & Dataset Format"),
    ("test_configuration.py", "Configuration, Validation & Presets"),
    ("test_training.py", "Network, Training & Checkpoints"),
    ("test_cli.py", "Command-Line Runs"),
    ("test_benchmark.py", "Long Benchmarks (UHR_SLOW_TESTS=1)"),
]


def print_header(text: str, char: str = "="):
    """Print a formatted header."""
    width = 70
    print(f"\n{char * width}")
    print(f"{text:^{width}}")
    print(f"{char * width}\n")


def print_section(text: str):
    """Print a section header."""
    print(f"\n{'─' * 70}")
    print(f"  {text}")
    print(f"{'─' * 70}")


class OutcomeCounter:
    """pytest plugin that tallies test outcomes and remembers failures."""

    def __init__(self):
        self.passed = 0
        self.failed = 0
        self.skipped = 0
        self.failures: List[str] = []

    def pytest_runtest_logreport(self, report):
        if report.when == "call" or (report.when == "setup" and not report.passed):
            if report.passed:
                self.passed += 1
            elif report.skipped:
                self.skipped += 1
            else:
                self.failed += 1
                self.failures.append(report.nodeid)


def run_suite(index: int, filename: str, title: str) -> Tuple[int, int, int]:
    print_section(f"{index}. {title}")
    counter = OutcomeCounter()
    pytest.main(["-q", "-p", "no:cacheprovider", "--no-header", "--tb=short",
                 str(TEST_DIR / filename)], plugins=[counter])
    for nodeid in counter.failures:
        print(f"  ✗ {nodeid}")
    if counter.skipped:
        print(f"  ℹ {counter.skipped} skipped")
    print(f"\n  Results: {counter.passed}/{counter.passed + counter.failed} passed")
    return counter.passed, counter.failed, counter.skipped


def main():
    """Run all tests."""
    print_header("hyperseg - Test Suite")
    print(f"  Started: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    print(f"  Slow benchmarks: {'on' if os.environ.get('UHR_SLOW_TESTS') == '1' else 'off'}\n")

    total_passed = 0
    total_failed = 0
    total_skipped = 0
    for index, (filename, title) in enumerate(SUITES, start=1):
        passed, failed, skipped = run_suite(index, filename, title)
        total_passed += passed
        total_failed += failed
        total_skipped += skipped

    print_header("Test Summary", "=")

    total_tests = total_passed + total_failed
    pass_rate = (total_passed / total_tests * 100) if total_tests > 0 else 0

    print(f"  Total Tests:     {total_tests}")
    print(f"  Passed:          {total_passed} ✓")
    print(f"  Failed:          {total_failed} {'✗' if total_failed > 0 else ''}")
    print(f"  Skipped:         {total_skipped}")
    print(f"  Pass Rate:       {pass_rate:.1f}%")

    if total_failed == 0:
        print(f"\n  {'All tests passed!':^70}")
    else:
        print(f"\n  {'Some tests failed':^70}")

    print(f"\n  Finished: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    print(f"\n{'=' * 70}\n")

    sys.exit(0 if total_failed == 0 else 1)


if __name__ == "__main__":
    main()
