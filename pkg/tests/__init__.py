"""Test runner: `python tests/__init__.py [module ...]` runs all or the named test modules."""

import sys
import unittest
from pathlib import Path

# project root on the path so `src` imports resolve
sys.path.insert(0, str(Path(__file__).parent.parent))


def run_tests(modules=None) -> bool:
    """
    Discover and run the test suite.

    Args:
        modules: Module names such as "kbs" or "test_kbs" (default: every test_*.py)

    Returns:
        True if every test passed
    """
    loader = unittest.TestLoader()
    start_dir = Path(__file__).parent
    if modules:
        names = [m if m.startswith("test_") else f"test_{m}" for m in modules]
        suite = loader.loadTestsFromNames([f"tests.{name}" for name in names])
    else:
        suite = loader.discover(str(start_dir), pattern="test_*.py", top_level_dir=str(start_dir.parent))
    result = unittest.TextTestRunner(verbosity=2).run(suite)
    return result.wasSuccessful()


if __name__ == "__main__":
    sys.exit(0 if run_tests(sys.argv[1:]) else 1)
