"""
GradCheck - Source Package
Classifier-guidance gradient laboratory

This package contains the diffusion schedule, the analytic and trained
worlds, the guided sampler, the diagnostics and the experiment runner.
"""

__version__ = "1.0.0"
__description__ = "Gradient diagnostics for classifier-guided diffusion sampling"
