"""
Main entry point for the DecisionBench analysis toolkit
"""

import os
import sys

# Add the src directory to the Python path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from src.cli import run_command


def main():
    """Dispatch to the subcommand named on the command line"""
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
