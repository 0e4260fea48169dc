#!/usr/bin/env python3
"""
Test runner script for the disentangle-seg library.
"""

import os
import sys
import unittest

# Add the parent directory to sys.path so we can import the library
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

EXPERIMENT_FLAG = "DISENTANGLE_SEG_EXPERIMENT"


def build_suite(test_modules=()):
    """Suite for the named modules, or every ``test_*.py`` when none are given."""
    loader = unittest.TestLoader()
    if test_modules:
        return loader.loadTestsFromNames(test_modules)
    # Discover all tests next to this file
    start_dir = os.path.dirname(os.path.abspath(__file__))
    return loader.discover(start_dir, pattern="test_*.py")


def run(test_modules=()):
    runner = unittest.TextTestRunner(verbosity=2)
    result = runner.run(build_suite(test_modules))
    return result.wasSuccessful()


if __name__ == "__main__":
    if os.environ.get(EXPERIMENT_FLAG) != "1":
        print(f"Desk-scale experiment skipped; set {EXPERIMENT_FLAG}=1 to include it.")
    if len(sys.argv) > 1:
        # Run the named test modules, classes or methods
        print(f"Running tests from {', '.join(sys.argv[1:])}...")
        success = run(sys.argv[1:])
    else:
        # Run all tests
        print("Running all tests...")
        success = run()

    sys.exit(0 if success else 1)
