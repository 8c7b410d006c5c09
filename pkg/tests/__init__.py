"""
Unit tests for stadv

This package contains unit tests for:
- Autodiff engine and traffic data
- Forecaster, victim selection and attacks
- Defenses, robustness bound and metrics
- Command line and integration tests

Run tests with: pytest tests/
"""

__version__ = "0.1.0"
