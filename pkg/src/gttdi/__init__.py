"""Graph-transformer imputation of missing traffic data, with semantic slice descriptions."""

__version__ = "0.1.0"
