"""
GradCheck - Main Application
Classifier-guidance gradient laboratory

This is the main entry point; every subcommand lives in src/runner.py.
"""

import os
import sys

# Add src directory to path
sys.path.append(os.path.join(os.path.dirname(__file__), 'src'))

from src.runner import app


def main():
    """
    Dispatch to the command-line interface (gen-data, train-classifier,
    train-denoiser, sample, grid, sweep).
    """
    app(prog_name="gradcheck")


if __name__ == "__main__":
    main()
