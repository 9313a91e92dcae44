"""
saecount - Main Entry Point
Small area estimation for counts: fit, predict, bootstrap MSE, simulate, diagnose
"""

import sys

from saecount.cli import main


if __name__ == "__main__":
    sys.exit(main())
