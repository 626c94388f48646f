"""Pre-specified missing-data analysis: diagnostics, chained-equations
imputation, Rubin pooling, delta-adjusted sensitivity analysis and
simulation."""

__version__ = "0.1.0"
