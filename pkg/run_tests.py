#!/usr/bin/env python3
"""
Test runner for the DGM training engine
Runs every test suite plus a CLI smoke check, with reporting
"""

import sys
import os
import subprocess
import tempfile
import time
from datetime import datetime

SUITES = [
    ("tests/test_config.py", "Configuration Tests"),
    ("tests/test_autodiff.py", "Autodiff Tests"),
    ("tests/test_avvp_model.py", "Model Tests"),
    ("tests/test_dgm_optimizer.py", "Gradient Modulation Tests"),
    ("tests/test_synthetic_data.py", "Synthetic Data Tests"),
    ("tests/test_metrics_eval.py", "Metrics Tests"),
    ("tests/test_experiment_cli.py", "CLI Tests"),
]


def print_header(title):
    """Print formatted header"""
    print("\n" + "=" * 60)
    print(f" {title}")
    print("=" * 60)


def run_command(command, description):
    """Run command and return success status"""
    print(f"\n🔍 {description}")
    print(f"Running: {' '.join(command)}")

    start_time = time.time()
    try:
        result = subprocess.run(
            command,
            capture_output=True,
            text=True,
            check=True
        )
        end_time = time.time()

        print(f"✅ SUCCESS ({end_time - start_time:.2f}s)")
        if result.stdout:
            print("STDOUT:", result.stdout[-500:])
        return True

    except subprocess.CalledProcessError as e:
        end_time = time.time()
        print(f"❌ FAILED ({end_time - start_time:.2f}s)")
        print("STDERR:", e.stderr[-500:])
        print("STDOUT:", e.stdout[-500:])
        return False


def check_dependencies():
    """Check if required dependencies are installed"""
    print_header("DEPENDENCY CHECK")

    required_packages = ['numpy', 'pandas', 'pytest', 'dotenv', 'tenacity']
    missing_packages = []

    for package in required_packages:
        try:
            __import__(package)
            print(f"✅ {package}")
        except ImportError:
            print(f"❌ {package} - NOT FOUND")
            missing_packages.append(package)

    if missing_packages:
        print(f"\n⚠️ Missing packages: {', '.join(missing_packages)}")
        print("Install with: pip install -r requirements.txt")
        return False

    print("\n✅ All dependencies satisfied")
    return True


def run_unit_tests():
    """Run every test suite"""
    print_header("TEST SUITES")
    results = []
    for path, description in SUITES:
        success = run_command([sys.executable, "-m", "pytest", path, "-q"], description)
        results.append((description, success))
    return results


def run_smoke_test():
    """Generate a tiny dataset, train one epoch and run the gradient checks through the CLI"""
    print_header("CLI SMOKE TEST")
    with tempfile.TemporaryDirectory() as workdir:
        data = os.path.join(workdir, "data")
        steps = [
            ([sys.executable, "dgm.py", "generate", "--out", data, "--train", "32", "--val", "8", "--test", "8",
              "--audio-dim", "8", "--visual-dim", "8"], "Generate dataset"),
            ([sys.executable, "dgm.py", "train", "--data", data, "--out", os.path.join(workdir, "run"),
              "--epochs", "1", "--batch-size", "16"], "Train one epoch"),
            ([sys.executable, "dgm.py", "gradcheck", "--instances", "5"], "Gradient checks"),
        ]
        return all(run_command(cmd, desc) for cmd, desc in steps)


def generate_test_report(suite_results, smoke_passed):
    """Generate test report"""
    print_header("TEST REPORT")

    total_tests = len(suite_results) + 1
    passed_tests = sum(1 for _, passed in suite_results if passed) + int(smoke_passed)

    print(f"Test execution time: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    print(f"Python version: {sys.version}")
    print(f"Working directory: {os.getcwd()}")

    print("\n📊 DETAILED RESULTS:")
    for test_name, passed in suite_results:
        status = "✅ PASS" if passed else "❌ FAIL"
        print(f"  {status}: {test_name}")
    print(f"\n🔥 Smoke Test: {'✅ PASS' if smoke_passed else '❌ FAIL'}")

    print("\n📈 SUMMARY:")
    print(f"Total: {total_tests}")
    print(f"Passed: {passed_tests}")
    print(f"Failed: {total_tests - passed_tests}")

    if passed_tests == total_tests:
        print("\n🎉 ALL TESTS PASSED!")
        return True
    print(f"\n⚠️ {total_tests - passed_tests} TEST(S) FAILED")
    return False


def main():
    """Main test runner"""
    print_header("DGM TRAINING ENGINE - TEST SUITE")
    print(f"Starting test execution at {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")

    if not check_dependencies():
        print("\n❌ Dependency check failed. Please install required packages.")
        sys.exit(1)

    suite_results = run_unit_tests()
    smoke_passed = run_smoke_test()

    if generate_test_report(suite_results, smoke_passed):
        print("\n✅ Test suite completed successfully!")
        sys.exit(0)
    print("\n❌ Test suite completed with failures!")
    sys.exit(1)


if __name__ == "__main__":
    main()
