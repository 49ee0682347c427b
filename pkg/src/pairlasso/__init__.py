"""Lasso-penalized pairwise ranking by minimization of U-statistic risks."""

__version__ = "0.1.0"
