"""
stadv - Spatiotemporal Adversarial Toolkit
Attacks, defenses and robustness bounds for graph-based traffic forecasters
"""

__version__ = "0.1.0"
__author__ = "Champion"
